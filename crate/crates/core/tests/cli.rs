use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seesaw_core::cli::RunConfig;
use seesaw_core::data::{chronological_split, load_csv, make_windows, write_csv, Split};
use seesaw_core::training::TrainReport;
use seesaw_core::Tensor;
use tempfile::TempDir;

const SMALL: &str = "\
synth_channels = 3
synth_total = 300
synth_regime_period = 100
seq_len = 16
pred_len = 4
patch_len = 4
stride = 4
d_model = 8
n_heads = 2
n_patch_layers = 1
n_channel_layers = 1
epochs = 2
batch_size = 16
";

fn seesaw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seesaw"))
        .args(args)
        .env("SEESAW_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from:\n{text}"))
        .to_string()
}

struct Trained {
    dir: TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Trained {
    fn ckpt(&self) -> PathBuf {
        self.out.join("model.ckpt")
    }
}

fn train_small(extra: &[&str]) -> Trained {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, SMALL).unwrap();
    let out = dir.path().join("out");
    let mut args = vec!["train", "--config", s(&config), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(seesaw(&args));
    Trained { dir, config, out }
}

#[test]
fn missing_data_file_exits_2_and_names_it() {
    let o = seesaw(&["train", "--data", "/nonexistent/series.csv", "--epochs", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/series.csv"), "{}", stderr(&o));
}

#[test]
fn bad_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = seesaw(&["flops", "--set", "n_heads=3", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = seesaw(&["flops", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn zero_epochs_still_reports() {
    let t = train_small(&["--epochs", "0"]);
    let report = TrainReport::from_text(&fs::read_to_string(t.out.join("report.txt")).unwrap()).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(report.best_epoch, None);
    assert!(report.test_mse.is_finite());
    assert!(t.ckpt().exists());
}

#[test]
fn effective_config_reparses_identically() {
    let t = train_small(&["--epochs", "0", "--set", "lr=0.002"]);
    let text = fs::read_to_string(t.out.join("config.toml")).unwrap();
    let cfg = RunConfig::parse(&text).unwrap();
    assert_eq!(cfg.lr, 0.002);
    assert_eq!(cfg.d_ff, Some(32));
    assert_eq!(cfg.to_toml(), text);
}

#[test]
fn train_then_eval_forecast_and_export() {
    let t = train_small(&[]);
    let report_text = fs::read_to_string(t.out.join("report.txt")).unwrap();
    let report = TrainReport::from_text(&report_text).unwrap();
    assert_eq!(report.epochs.len(), 2);

    // eval reproduces the training report bit for bit
    let o = ok(seesaw(&["eval", "--config", s(&t.config), "--checkpoint", s(&t.ckpt())]));
    let out = stdout(&o);
    assert_eq!(value(&out, "test_mse"), format!("{:?}", report.test_mse));
    assert_eq!(value(&out, "test_mae"), format!("{:?}", report.test_mae));

    // conflicting structure key
    let o = seesaw(&["eval", "--config", s(&t.config), "--checkpoint", s(&t.ckpt()), "--pred-len", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pred_len"));

    // channel mismatch
    let o = seesaw(&[
        "eval",
        "--config",
        s(&t.config),
        "--checkpoint",
        s(&t.ckpt()),
        "--set",
        "synth_channels=2",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("channels"));

    // Independent metric check: forecast every test window from its own CSV.
    let synth = t.dir.path().join("synth.csv");
    ok(seesaw(&["synth", "--config", s(&t.config), "--output", s(&synth)]));
    let rs = load_csv(&synth).unwrap();
    let cfg = RunConfig::parse(SMALL).unwrap();
    let ranges = chronological_split(rs.len(), cfg.ratios(), 16, 4).unwrap();
    let test = make_windows(&rs, ranges.test.unwrap(), 16, 4, Split::Test).unwrap();
    let (mut sse, mut sae, mut n) = (0.0, 0.0, 0usize);
    for i in 0..test.len() {
        let (x, y) = test.batch(&[i]);
        let input = t.dir.path().join("window.csv");
        let output = t.dir.path().join("forecast.csv");
        write_csv(&input, &rs.channel_names, None, &x.reshape(&[3, 16]).unwrap()).unwrap();
        ok(seesaw(&["forecast", "--checkpoint", s(&t.ckpt()), "--input", s(&input), "--output", s(&output)]));
        let f = load_csv(&output).unwrap();
        assert_eq!(f.len(), 4);
        assert_eq!(f.channel_names, rs.channel_names);
        for (a, b) in f.values.data().iter().zip(y.data()) {
            sse += (a - b) * (a - b);
            sae += (a - b).abs();
            n += 1;
        }
    }
    let eval_mse: f64 = value(&out, "test_mse").parse().unwrap();
    let eval_mae: f64 = value(&out, "test_mae").parse().unwrap();
    assert!((sse / n as f64 - eval_mse).abs() < 1e-9);
    assert!((sae / n as f64 - eval_mae).abs() < 1e-9);

    // short input
    let short = t.dir.path().join("short.csv");
    write_csv(&short, &rs.channel_names, None, &rs.tail(10).unwrap()).unwrap();
    let o = seesaw(&["forecast", "--checkpoint", s(&t.ckpt()), "--input", s(&short)]);
    assert_eq!(o.status.code(), Some(2));

    // attention export
    ok(seesaw(&[
        "export-attention",
        "--config",
        s(&t.config),
        "--out",
        s(&t.out),
        "--checkpoint",
        s(&t.ckpt()),
        "--instance",
        "3",
    ]));
    let dir = t.out.join("attention");
    let mut csvs = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        let text = fs::read_to_string(&path).unwrap();
        if name.ends_with("_weight.csv") {
            assert!(text.starts_with("head0,head1\n"));
        } else if name.ends_with(".csv") {
            csvs += 1;
            let rows: Vec<&str> = text.lines().collect();
            for r in &rows {
                let cells: Vec<f64> = r.split(',').map(|c| c.parse().unwrap()).collect();
                assert_eq!(cells.len(), rows.len(), "{name}");
                assert!((cells.iter().sum::<f64>() - 1.0).abs() < 1e-5, "{name}");
            }
        } else {
            let t_expected = if name.starts_with("patch") { 5 } else { 3 };
            let dims: Vec<usize> = text
                .lines()
                .filter(|l| !l.starts_with('#'))
                .nth(1)
                .unwrap()
                .split(' ')
                .map(|d| d.parse().unwrap())
                .collect();
            assert_eq!(dims, [t_expected, t_expected], "{name}");
        }
    }
    // patch layer: 3 channels, channel layer: N' = 3 groups; 2 heads, 3 map kinds
    assert_eq!(csvs, (3 + 3) * 2 * 3);

    let o = seesaw(&[
        "export-attention",
        "--config",
        s(&t.config),
        "--checkpoint",
        s(&t.ckpt()),
        "--instance",
        "100000",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn forecast_is_affine_covariant_without_raw_path() {
    let t = train_small(&["--ablation", "no_non", "--epochs", "1"]);
    let mut x = Tensor::zeros(&[3, 20]);
    for c in 0..3 {
        for i in 0..20 {
            x.set(&[c, i], ((i * (c + 2)) as f64 * 0.37).sin() + 0.1 * c as f64);
        }
    }
    let (a, b) = ([2.5, 0.3, 7.0], [-4.0, 10.0, 0.5]);
    let xt = Tensor::from_fn(&[3, 20], |i| a[i / 20] * x.data()[i] + b[i / 20]);
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let stamps: Vec<String> = (0..20).map(|i| format!("2024-01-01 {i:02}:00")).collect();
    let mut forecasts = Vec::new();
    for (k, input) in [x, xt].iter().enumerate() {
        let path = t.dir.path().join(format!("in{k}.csv"));
        let outp = t.dir.path().join(format!("out{k}.csv"));
        write_csv(&path, &names, Some(&stamps), input).unwrap();
        ok(seesaw(&["forecast", "--checkpoint", s(&t.ckpt()), "--input", s(&path), "--output", s(&outp)]));
        let text = fs::read_to_string(&outp).unwrap();
        assert!(text.starts_with("date,a,b,c\n+1,"), "{text}");
        forecasts.push(load_csv(&outp).unwrap().values);
    }
    for c in 0..3 {
        for h in 0..4 {
            let want = a[c] * forecasts[0].get(&[c, h]) + b[c];
            assert!((forecasts[1].get(&[c, h]) - want).abs() < 1e-6);
        }
    }
}

#[test]
fn flops_ratio_in_range() {
    let o = ok(seesaw(&["flops"]));
    let r: f64 = value(&stdout(&o), "score_ratio").parse().unwrap();
    assert!((1.9..=2.3).contains(&r), "{r}");
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    ok(seesaw(&["synth", "--output", s(&a), "--set", "synth_total=500"]));
    ok(seesaw(&["synth", "--output", s(&b), "--set", "synth_total=500"]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(load_csv(&a).unwrap().len(), 500);
}
