//! Attention map export as CSV matrices and plain (ASCII) 8-bit PGM images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::asna::AsnaDiag;
use crate::error::{Error, Result};
use crate::model::ModelDiag;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rows of `values` (`rows x cols`, row-major) as headerless CSV.
pub fn matrix_csv(values: &[f64], cols: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

/// Plain PGM (`P2`, maxval 255) with linear min-max scaling,
/// `pixel = round(255 * (v - min) / (max - min))`, all zero when `max == min`.
pub fn matrix_pgm(values: &[f64], rows: usize, cols: usize, title: &str) -> String {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut s = String::new();
    let _ = writeln!(s, "P2");
    let _ = writeln!(s, "# {title}");
    let _ = writeln!(
        s,
        "# linear min-max scaling: pixel = round(255 * (v - min) / (max - min)), min = {min:?}, max = {max:?}; all 0 when max == min"
    );
    let _ = writeln!(s, "{cols} {rows}");
    let _ = writeln!(s, "255");
    for row in values.chunks(cols) {
        let px: Vec<String> = row
            .iter()
            .map(|&v| {
                let p = if span > 0.0 { (255.0 * (v - min) / span).round() } else { 0.0 };
                format!("{}", p as u8)
            })
            .collect();
        let _ = writeln!(s, "{}", px.join(" "));
    }
    s
}

/// Writes every group and head of one block. `group_name` labels the sequence
/// axis (`ch` for patch layers, `patch` for channel layers).
fn export_block(dir: &Path, stem: &str, group_name: &str, diag: &AsnaDiag, files: &mut Vec<PathBuf>) -> Result<()> {
    let shape = diag.a_sta.shape();
    let (groups, heads, t) = (shape[0], shape[1], shape[2]);
    let fused = diag.fused();
    for g in 0..groups {
        for h in 0..heads {
            let start = (g * heads + h) * t * t;
            for (kind, maps) in [("sta", &diag.a_sta), ("non", &diag.a_non), ("fused", &fused)] {
                let block = &maps.data()[start..start + t * t];
                let base = format!("{stem}_{group_name}{g}_head{h}_{kind}");
                let csv = dir.join(format!("{base}.csv"));
                write(&csv, &matrix_csv(block, t))?;
                files.push(csv);
                let pgm = dir.join(format!("{base}.pgm"));
                let title = format!("{kind} attention, {stem}, {group_name} {g}, head {h}, {t}x{t}");
                write(&pgm, &matrix_pgm(block, t, t, &title))?;
                files.push(pgm);
            }
        }
        // Weight on the stationary branch, 1 - G, one row per query token.
        let mut s = String::new();
        let header: Vec<String> = (0..heads).map(|h| format!("head{h}")).collect();
        let _ = writeln!(s, "{}", header.join(","));
        for i in 0..t {
            let cells: Vec<String> = (0..heads)
                .map(|h| format!("{:?}", 1.0 - diag.gate.get(&[g, i, h])))
                .collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        let path = dir.join(format!("{stem}_{group_name}{g}_sta_weight.csv"));
        write(&path, &s)?;
        files.push(path);
    }
    Ok(())
}

/// Writes the diagnostics of a single-instance forward pass into `dir`.
pub fn export_diag(dir: &Path, diag: &ModelDiag) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (l, d) in diag.patch_layers.iter().enumerate() {
        export_block(dir, &format!("patch{l}"), "ch", d, &mut files)?;
    }
    for (l, d) in diag.channel_layers.iter().enumerate() {
        export_block(dir, &format!("channel{l}"), "patch", d, &mut files)?;
    }
    Ok(files)
}
