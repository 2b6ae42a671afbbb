//! Losses, metrics, Adam and the epoch loop.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowDataset;
use crate::error::{Error, Result};
use crate::model::SeesawModel;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// Windows per forward pass during evaluation. Fixed so that evaluation
/// results never depend on the training batch size.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Fredf,
    Mse,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Fredf => "fredf",
            LossMode::Mse => "mse",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fredf" => Ok(LossMode::Fredf),
            "mse" => Ok(LossMode::Mse),
            _ => Err(Error::usage(format!("unknown loss `{s}`, expected fredf or mse"))),
        }
    }
}

/// Hybrid time/frequency loss over the last (horizon) axis:
///
/// ```text
/// alpha * mean_bins |DFT(y_hat) - DFT(y)| + (1 - alpha) * mean |y_hat - y|
/// ```
///
/// The DFT is unnormalized with `H/2 + 1` bins per series; `|.|` is the complex
/// modulus and the frequency mean runs over every bin of every series.
pub fn fredf_loss(tape: &mut Tape, y_hat: Var, y: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::usage(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let diff = tape.sub(y_hat, y)?;
    let (re, im) = tape.rdft(diff)?;
    let modulus = tape.hypot(re, im)?;
    let freq = tape.mean(modulus);
    let abs = tape.abs(diff);
    let time = tape.mean(abs);
    let freq = tape.scale(freq, alpha);
    let time = tape.scale(time, 1.0 - alpha);
    tape.add(freq, time)
}

pub fn mse_loss(tape: &mut Tape, y_hat: Var, y: Var) -> Result<Var> {
    let diff = tape.sub(y_hat, y)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

pub fn objective(tape: &mut Tape, mode: LossMode, alpha: f64, y_hat: Var, y: Var) -> Result<Var> {
    match mode {
        LossMode::Fredf => fredf_loss(tape, y_hat, y, alpha),
        LossMode::Mse => mse_loss(tape, y_hat, y),
    }
}

/// Running sums of squared and absolute errors, reduced in insertion order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub sse: f64,
    pub sae: f64,
    pub count: usize,
}

impl Metrics {
    pub fn update(&mut self, y_hat: &Tensor, y: &Tensor) -> Result<()> {
        if y_hat.shape() != y.shape() {
            return Err(Error::shape("metrics", y_hat.shape(), y.shape()));
        }
        for (a, b) in y_hat.data().iter().zip(y.data()) {
            let e = a - b;
            self.sse += e * e;
            self.sae += e.abs();
        }
        self.count += y.numel();
        Ok(())
    }

    pub fn mse(&self) -> f64 {
        self.sse / self.count as f64
    }

    pub fn mae(&self) -> f64 {
        self.sae / self.count as f64
    }
}

/// `(MSE, MAE)` over all entries.
pub fn metrics(y_hat: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
    let mut m = Metrics::default();
    m.update(y_hat, y)?;
    Ok((m.mse(), m.mae()))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Gradients are checked for finiteness
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("adam", params.get(id).shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: params.name(id).to_string(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossMode,
    pub alpha: f64,
    pub patience: usize,
    pub clip_norm: f64,
    /// Cap on optimizer steps per epoch; 0 means a full pass.
    pub max_steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 20,
            batch_size: 32,
            loss: LossMode::Fredf,
            alpha: 0.5,
            patience: 5,
            clip_norm: 5.0,
            max_steps_per_epoch: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub loss: LossMode,
    pub alpha: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub steps: u64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
}

const REPORT_HEADER: &str = "# seesaw train report v1";

impl TrainReport {
    /// `key = value` lines. Floats use the shortest exact round-trip form.
    ///
    /// ```text
    /// # seesaw train report v1
    /// loss = fredf
    /// alpha = 0.5
    /// epochs_run = 2
    /// best_epoch = 1            ("none" when no epoch ran)
    /// stopped_early = false
    /// steps = 168
    /// test_mse = ...
    /// test_mae = ...
    /// baseline_mse = ...        repeat-last-value forecast on the test split
    /// baseline_mae = ...
    /// epoch.0.train_loss = ...
    /// epoch.0.val_loss = ...
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let best = self.best_epoch.map_or("none".to_string(), |e| e.to_string());
        let _ = writeln!(s, "{REPORT_HEADER}");
        let _ = writeln!(s, "loss = {}", self.loss);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "epochs_run = {}", self.epochs.len());
        let _ = writeln!(s, "best_epoch = {best}");
        let _ = writeln!(s, "stopped_early = {}", self.stopped_early);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "test_mse = {:?}", self.test_mse);
        let _ = writeln!(s, "test_mae = {:?}", self.test_mae);
        let _ = writeln!(s, "baseline_mse = {:?}", self.baseline_mse);
        let _ = writeln!(s, "baseline_mae = {:?}", self.baseline_mae);
        for e in &self.epochs {
            let _ = writeln!(s, "epoch.{}.train_loss = {:?}", e.epoch, e.train_loss);
            let _ = writeln!(s, "epoch.{}.val_loss = {:?}", e.epoch, e.val_loss);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: "train report".into(),
            message: msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(bad("missing report header".into()));
        }
        let mut map = std::collections::BTreeMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| bad(format!("missing key `{k}`")));
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Format {
                path: "train report".into(),
                message: format!("bad value `{v}` for `{k}`"),
            })
        }
        let epochs_run: usize = num("epochs_run", get("epochs_run")?)?;
        let epochs = (0..epochs_run)
            .map(|e| {
                let tl = format!("epoch.{e}.train_loss");
                let vl = format!("epoch.{e}.val_loss");
                Ok(EpochRecord {
                    epoch: e,
                    train_loss: num(&tl, get(&tl)?)?,
                    val_loss: num(&vl, get(&vl)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let best = get("best_epoch")?;
        Ok(TrainReport {
            loss: get("loss")?.parse()?,
            alpha: num("alpha", get("alpha")?)?,
            epochs,
            best_epoch: if best == "none" { None } else { Some(num("best_epoch", best)?) },
            stopped_early: num("stopped_early", get("stopped_early")?)?,
            steps: num("steps", get("steps")?)?,
            test_mse: num("test_mse", get("test_mse")?)?,
            test_mae: num("test_mae", get("test_mae")?)?,
            baseline_mse: num("baseline_mse", get("baseline_mse")?)?,
            baseline_mae: num("baseline_mae", get("baseline_mae")?)?,
        })
    }
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size).map(move |s| (s..(s + size).min(n)).collect())
}

/// Eval-mode MSE/MAE of `model` over every window of `ds`.
pub fn evaluate(model: &SeesawModel, ds: &WindowDataset) -> Result<Metrics> {
    let mut m = Metrics::default();
    for idx in batches(ds.len(), EVAL_BATCH) {
        let (x, y) = ds.batch(&idx);
        m.update(&model.predict(&x)?, &y)?;
    }
    Ok(m)
}

/// Mean training objective over `ds` in eval mode, weighted by batch size.
pub fn evaluate_loss(model: &SeesawModel, ds: &WindowDataset, mode: LossMode, alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for idx in batches(ds.len(), EVAL_BATCH) {
        let (x, y) = ds.batch(&idx);
        let mut tape = Tape::new();
        let pred = tape.constant(model.predict(&x)?);
        let target = tape.constant(y);
        let loss = objective(&mut tape, mode, alpha, pred, target)?;
        total += tape.value(loss).item() * idx.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Repeat-last-value forecast metrics on `ds`.
pub fn repeat_last_metrics(ds: &WindowDataset) -> Result<Metrics> {
    let mut m = Metrics::default();
    let (l, h) = (ds.seq_len(), ds.pred_len());
    for idx in batches(ds.len(), EVAL_BATCH) {
        let (x, y) = ds.batch(&idx);
        let last: Vec<f64> = x.rows().flat_map(|r| std::iter::repeat_n(r[l - 1], h)).collect();
        m.update(&Tensor::new(y.shape().to_vec(), last)?, &y)?;
    }
    Ok(m)
}

/// One optimizer step on a batch. Returns the batch loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut SeesawModel,
    adam: &mut AdamState,
    x: &Tensor,
    y: &Tensor,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let out = model.forward(&mut tape, &bound, x, true, rng, false)?;
    let target = tape.constant(y.clone());
    let loss = objective(&mut tape, cfg.loss, cfg.alpha, out.y_hat, target)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let mut grads = bound.collect(&grads, model.params());
    clip_grad_norm(&mut grads, cfg.clip_norm);
    adam.step(model.params_mut(), &grads, cfg.lr)?;
    Ok(value)
}

/// Mini-batch training with early stopping on validation loss. The
/// best-validation parameters are restored before the test evaluation.
pub fn train(
    model: &mut SeesawModel,
    train_ds: &WindowDataset,
    val_ds: &WindowDataset,
    test_ds: &WindowDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    for (name, ds) in [("train", train_ds), ("val", val_ds), ("test", test_ds)] {
        if ds.is_empty() {
            return Err(Error::usage(format!("{name} split has no windows")));
        }
        if ds.channels() != model.config().channels {
            return Err(Error::usage(format!(
                "{name} split has {} channels, model expects {}",
                ds.channels(),
                model.config().channels
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let steps_cap = if cfg.max_steps_per_epoch == 0 {
        usize::MAX
    } else {
        cfg.max_steps_per_epoch
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size).take(steps_cap) {
            let (x, y) = train_ds.batch(chunk);
            let loss = train_step(model, &mut adam, &x, &y, cfg, &mut rng)?;
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
            debug!("epoch {epoch} step {} loss {loss:.6}", adam.step_count());
        }
        let train_loss = sum / seen as f64;
        let val_loss = evaluate_loss(model, val_ds, cfg.loss, cfg.alpha)?;
        info!("epoch {epoch}: train loss {train_loss:.6}, val loss {val_loss:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch + 1 < cfg.epochs;
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let best_epoch = best.map(|(e, _, params)| {
        *model.params_mut() = params;
        e
    });
    let test = evaluate(model, test_ds)?;
    let baseline = repeat_last_metrics(test_ds)?;
    Ok(TrainReport {
        loss: cfg.loss,
        alpha: cfg.alpha,
        epochs,
        best_epoch,
        stopped_early,
        steps: adam.step_count(),
        test_mse: test.mse(),
        test_mae: test.mae(),
        baseline_mse: baseline.mse(),
        baseline_mae: baseline.mae(),
    })
}
