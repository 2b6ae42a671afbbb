//! The `seesaw` command line.
//!
//! Configuration precedence, lowest first: built-in defaults, `--config FILE`,
//! dedicated flags (`--data`, `--seed`, ...), then `--set key=value` overrides.
//! Logging goes to stderr and is controlled by `SEESAW_LOG` (`quiet`, `info`,
//! `debug`; default `info`). Exit codes: 0 on success, 2 on configuration, data
//! or checkpoint errors, 1 on numerical failures.

mod config;
mod export;

pub use config::{parse_override, read_table, RunConfig, MODEL_KEYS};
pub use export::{export_diag, matrix_csv, matrix_pgm};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use toml::{Table, Value};

use crate::data::{chronological_split, load_csv, make_windows, synth_generate, write_csv, RawSeries, Split, WindowDataset};
use crate::error::{Error, Result};
use crate::flops;
use crate::model::{load_checkpoint, save_checkpoint, Ablation, SeesawModel};
use crate::tensor::Tensor;
use crate::training::{evaluate, train, LossMode};

#[derive(Debug, Parser)]
#[command(name = "seesaw", version, about = "Dual-path attention forecaster for non-stationary multivariate series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// CSV data file (a synthetic series is used when absent).
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Forecast horizon H.
    #[arg(long)]
    pub pred_len: Option<usize>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub loss: Option<LossMode>,
    /// Frequency-term weight of the fredf loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Any config key, e.g. `--set d_model=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes model.ckpt, report.txt and config.toml to the output directory.
    Train(Common),
    /// Test-split MSE/MAE of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Forecast the H steps after the last L rows of a CSV.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Defaults to `<out>/forecast.csv`.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Write attention maps and gate weights of one instance.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Window index within the test split.
        #[arg(long, conflicts_with = "input")]
        instance: Option<usize>,
        /// Use the trailing L rows of this CSV instead of a dataset window.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Analytic attention FLOPs of the dual-branch blocks against single-branch attention.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Channel count (defaults to the data file's, or synth_channels).
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Write the configured synthetic series as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/synth.csv`.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
}

/// Merged configuration plus the keys that were set explicitly.
struct Resolved {
    cfg: RunConfig,
    explicit: Table,
}

fn resolve(common: &Common) -> Result<Resolved> {
    let mut table = match &common.config {
        Some(path) => read_table(path)?,
        None => Table::new(),
    };
    let mut set = |k: &str, v: Value| {
        table.insert(k.to_string(), v);
    };
    if let Some(p) = &common.data {
        set("data", Value::String(p.display().to_string()));
    }
    if let Some(p) = &common.out {
        set("out", Value::String(p.display().to_string()));
    }
    if let Some(s) = common.seed {
        let s = i64::try_from(s).map_err(|_| Error::Config(format!("seed {s} is too large")))?;
        set("seed", Value::Integer(s));
    }
    if let Some(h) = common.pred_len {
        set("pred_len", Value::Integer(h as i64));
    }
    if let Some(a) = common.ablation {
        set("ablation", Value::String(a.to_string()));
    }
    if let Some(l) = common.loss {
        set("loss", Value::String(l.to_string()));
    }
    if let Some(a) = common.alpha {
        set("alpha", Value::Float(a));
    }
    if let Some(e) = common.epochs {
        set("epochs", Value::Integer(e as i64));
    }
    for o in &common.overrides {
        let (k, v) = parse_override(o)?;
        set(&k, v);
    }
    let cfg = RunConfig::from_table(table.clone())?;
    cfg.validate()?;
    info!("effective config:\n{}", cfg.to_toml());
    Ok(Resolved { cfg, explicit: table })
}

fn load_series(cfg: &RunConfig) -> Result<RawSeries> {
    match &cfg.data {
        Some(path) => load_csv(path),
        None => synth_generate(&cfg.synth_spec()),
    }
}

struct Splits {
    train: Option<WindowDataset>,
    val: Option<WindowDataset>,
    test: Option<WindowDataset>,
}

fn splits(rs: &RawSeries, cfg: &RunConfig, seq_len: usize, pred_len: usize) -> Result<Splits> {
    let r = chronological_split(rs.len(), cfg.ratios(), seq_len, pred_len)?;
    let win = |range: Option<std::ops::Range<usize>>, split| {
        range
            .map(|range| make_windows(rs, range, seq_len, pred_len, split))
            .transpose()
    };
    Ok(Splits {
        train: win(Some(r.train), Split::Train)?,
        val: win(r.val, Split::Val)?,
        test: win(r.test, Split::Test)?,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks it against explicitly configured model keys.
fn load_model(path: &Path, resolved: &Resolved) -> Result<SeesawModel> {
    let model = load_checkpoint(path)?;
    let wanted = resolved.cfg.model_config(model.config().channels);
    let have = model.config();
    let pairs: [(&str, String, String); 12] = [
        ("seq_len", wanted.seq_len.to_string(), have.seq_len.to_string()),
        ("pred_len", wanted.pred_len.to_string(), have.pred_len.to_string()),
        ("patch_len", wanted.patch_len.to_string(), have.patch_len.to_string()),
        ("stride", wanted.stride.to_string(), have.stride.to_string()),
        ("d_model", wanted.d_model.to_string(), have.d_model.to_string()),
        ("n_heads", wanted.n_heads.to_string(), have.n_heads.to_string()),
        ("d_ff", wanted.d_ff.to_string(), have.d_ff.to_string()),
        ("dropout", format!("{:?}", wanted.dropout), format!("{:?}", have.dropout)),
        ("n_patch_layers", wanted.n_patch_layers.to_string(), have.n_patch_layers.to_string()),
        ("n_channel_layers", wanted.n_channel_layers.to_string(), have.n_channel_layers.to_string()),
        ("n_prime", wanted.n_prime.to_string(), have.n_prime.to_string()),
        ("ablation", wanted.ablation.to_string(), have.ablation.to_string()),
    ];
    debug_assert!(pairs.iter().map(|p| p.0).eq(MODEL_KEYS));
    for (key, want, got) in pairs {
        if resolved.explicit.contains_key(key) && want != got {
            return Err(Error::Checkpoint(format!(
                "{}: configured {key} = {want} but the checkpoint has {got}",
                path.display()
            )));
        }
    }
    Ok(model)
}

fn check_channels(model: &SeesawModel, rs: &RawSeries, source: &str) -> Result<()> {
    if rs.channels() != model.config().channels {
        return Err(Error::usage(format!(
            "{source} has {} channels but the checkpoint expects {}",
            rs.channels(),
            model.config().channels
        )));
    }
    Ok(())
}

fn cmd_train(common: &Common, out: &mut dyn std::io::Write) -> Result<()> {
    let Resolved { cfg, .. } = resolve(common)?;
    let rs = load_series(&cfg)?;
    let model_cfg = cfg.model_config(rs.channels());
    model_cfg.validate()?;
    let s = splits(&rs, &cfg, cfg.seq_len, cfg.pred_len)?;
    let (Some(tr), Some(va), Some(te)) = (s.train, s.val, s.test) else {
        return Err(Error::usage("training needs non-empty train, val and test splits"));
    };
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.toml"), &cfg.to_toml())?;
    let mut model = SeesawModel::new(model_cfg)?;
    info!(
        "training on {} windows ({} val, {} test), {} parameters",
        tr.len(),
        va.len(),
        te.len(),
        model.params().num_scalars()
    );
    let report = train(&mut model, &tr, &va, &te, &cfg.train_config())?;
    save_checkpoint(&model, &cfg.out.join("model.ckpt"))?;
    write_file(&cfg.out.join("report.txt"), &report.to_text())?;
    let io = |e| Error::io("stdout", e);
    writeln!(out, "{:>5}  {:>14}  {:>14}", "epoch", "train_loss", "val_loss").map_err(io)?;
    for e in &report.epochs {
        writeln!(out, "{:>5}  {:>14.6}  {:>14.6}", e.epoch, e.train_loss, e.val_loss).map_err(io)?;
    }
    let best = report.best_epoch.map_or("none".into(), |e| e.to_string());
    writeln!(out, "best_epoch = {best}").map_err(io)?;
    writeln!(out, "test_mse = {:?}", report.test_mse).map_err(io)?;
    writeln!(out, "test_mae = {:?}", report.test_mae).map_err(io)?;
    writeln!(out, "baseline_mse = {:?}", report.baseline_mse).map_err(io)?;
    writeln!(out, "baseline_mae = {:?}", report.baseline_mae).map_err(io)?;
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, out: &mut dyn std::io::Write) -> Result<()> {
    let resolved = resolve(common)?;
    let model = load_model(checkpoint, &resolved)?;
    let rs = load_series(&resolved.cfg)?;
    check_channels(&model, &rs, "data")?;
    let mc = model.config();
    let test = splits(&rs, &resolved.cfg, mc.seq_len, mc.pred_len)?
        .test
        .ok_or_else(|| Error::usage("the configured split ratios leave no test split"))?;
    let m = evaluate(&model, &test)?;
    let io = |e| Error::io("stdout", e);
    writeln!(out, "test_mse = {:?}", m.mse()).map_err(io)?;
    writeln!(out, "test_mae = {:?}", m.mae()).map_err(io)?;
    Ok(())
}

/// `[1, C, L]` from the trailing rows of a CSV.
fn trailing_input(model: &SeesawModel, path: &Path) -> Result<(RawSeries, Tensor)> {
    let rs = load_csv(path)?;
    check_channels(model, &rs, &path.display().to_string())?;
    let (c, l) = (model.config().channels, model.config().seq_len);
    if rs.len() < l {
        return Err(Error::usage(format!(
            "{}: {} rows, the model needs at least {l}",
            path.display(),
            rs.len()
        )));
    }
    let x = rs.tail(l)?.reshape(&[1, c, l])?;
    Ok((rs, x))
}

fn cmd_forecast(common: &Common, checkpoint: &Path, input: &Path, output: Option<&Path>) -> Result<PathBuf> {
    let resolved = resolve(common)?;
    let model = load_model(checkpoint, &resolved)?;
    let (rs, x) = trailing_input(&model, input)?;
    let (c, h) = (model.config().channels, model.config().pred_len);
    let y = model.predict(&x)?.reshape(&[c, h])?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            create_dir(&resolved.cfg.out)?;
            resolved.cfg.out.join("forecast.csv")
        }
    };
    let steps: Option<Vec<String>> = rs
        .timestamps
        .as_ref()
        .map(|_| (1..=h).map(|k| format!("+{k}")).collect());
    write_csv(&path, &rs.channel_names, steps.as_deref(), &y)?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn cmd_export(common: &Common, checkpoint: &Path, instance: Option<usize>, input: Option<&Path>) -> Result<Vec<PathBuf>> {
    let resolved = resolve(common)?;
    let model = load_model(checkpoint, &resolved)?;
    let x = match (input, instance) {
        (Some(path), _) => trailing_input(&model, path)?.1,
        (None, index) => {
            let index = index.unwrap_or(0);
            let rs = load_series(&resolved.cfg)?;
            check_channels(&model, &rs, "data")?;
            let mc = model.config();
            let test = splits(&rs, &resolved.cfg, mc.seq_len, mc.pred_len)?
                .test
                .ok_or_else(|| Error::usage("the configured split ratios leave no test split"))?;
            if index >= test.len() {
                return Err(Error::usage(format!(
                    "instance {index} out of range, the test split has {} windows",
                    test.len()
                )));
            }
            test.batch(&[index]).0
        }
    };
    let (_, diag) = model.predict_with_diag(&x, true)?;
    let dir = resolved.cfg.out.join("attention");
    let files = export_diag(&dir, &diag.expect("diagnostics requested"))?;
    info!("wrote {} files to {}", files.len(), dir.display());
    Ok(files)
}

fn cmd_flops(common: &Common, channels: Option<usize>, out: &mut dyn std::io::Write) -> Result<()> {
    let Resolved { cfg, .. } = resolve(common)?;
    let c = match (channels, &cfg.data) {
        (Some(c), _) => c,
        (None, Some(path)) => load_csv(path)?.channels(),
        (None, None) => cfg.synth_channels,
    };
    let mc = cfg.model_config(c);
    mc.validate()?;
    let r = flops::count(&mc);
    let (a, s) = (r.asna(), r.single());
    let io = |e| Error::io("stdout", e);
    writeln!(
        out,
        "# per sample: C = {c}, L = {}, P = {}, S = {}, N = {}, N' = {}, D = {}, heads = {}, ablation = {}",
        mc.seq_len,
        mc.patch_len,
        mc.stride,
        mc.n_patches(),
        mc.n_prime,
        mc.d_model,
        mc.n_heads,
        mc.ablation
    )
    .map_err(io)?;
    writeln!(out, "{:<12}  {:>14}  {:>14}", "component", "dual_branch", "single_branch").map_err(io)?;
    for (name, x, y) in [
        ("scores", a.scores, s.scores),
        ("gate", a.gate, s.gate),
        ("projections", a.projections, s.projections),
        ("values", a.values, s.values),
        ("total", a.total(), s.total()),
    ] {
        writeln!(out, "{name:<12}  {x:>14}  {y:>14}").map_err(io)?;
    }
    writeln!(out, "score_ratio = {:.6}", r.score_ratio()).map_err(io)?;
    writeln!(out, "total_ratio = {:.6}", a.total() as f64 / s.total() as f64).map_err(io)?;
    Ok(())
}

fn cmd_synth(common: &Common, output: Option<&Path>) -> Result<PathBuf> {
    let Resolved { cfg, .. } = resolve(common)?;
    let rs = synth_generate(&cfg.synth_spec())?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            create_dir(&cfg.out)?;
            cfg.out.join("synth.csv")
        }
    };
    write_csv(&path, &rs.channel_names, None, &rs.values)?;
    info!("wrote {} rows x {} channels to {}", rs.len(), rs.channels(), path.display());
    Ok(path)
}

pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match &cli.command {
        Command::Train(common) => cmd_train(common, out),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint, out),
        Command::Forecast {
            common,
            checkpoint,
            input,
            output,
        } => cmd_forecast(common, checkpoint, input, output.as_deref()).map(|_| ()),
        Command::ExportAttention {
            common,
            checkpoint,
            instance,
            input,
        } => cmd_export(common, checkpoint, *instance, input.as_deref()).map(|_| ()),
        Command::Flops { common, channels } => cmd_flops(common, *channels, out),
        Command::Synth { common, output } => cmd_synth(common, output.as_deref()).map(|_| ()),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric { .. } | Error::NonFiniteGradient { .. } => 1,
        _ => 2,
    }
}

fn init_logging() {
    let level = match std::env::var("SEESAW_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
