//! Run configuration: a flat TOML table merged from defaults, an optional
//! config file and command-line flags, in increasing precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{SplitRatios, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::training::{LossMode, TrainConfig};

/// Keys that describe model structure. When any of them is set explicitly,
/// commands that load a checkpoint require it to agree with the checkpoint.
pub const MODEL_KEYS: [&str; 12] = [
    "seq_len",
    "pred_len",
    "patch_len",
    "stride",
    "d_model",
    "n_heads",
    "d_ff",
    "dropout",
    "n_patch_layers",
    "n_channel_layers",
    "n_prime",
    "ablation",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// CSV input; when absent a synthetic series is generated from the `synth_*` keys.
    pub data: Option<PathBuf>,
    pub out: PathBuf,

    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,

    pub synth_channels: usize,
    pub synth_total: usize,
    pub synth_seed: u64,
    pub synth_regime_period: usize,
    pub synth_trend_scale: f64,
    pub synth_noise_std: f64,

    pub seq_len: usize,
    pub pred_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Defaults to `4 * d_model`.
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub n_patch_layers: usize,
    pub n_channel_layers: usize,
    /// Defaults to half the patch count, rounded up.
    pub n_prime: Option<usize>,
    pub ablation: Ablation,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossMode,
    pub alpha: f64,
    pub patience: usize,
    pub clip_norm: f64,
    pub max_steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ratios = SplitRatios::default();
        let synth = SynthSpec::default();
        let train = TrainConfig::default();
        RunConfig {
            data: None,
            out: PathBuf::from("seesaw-out"),
            split_train: ratios.train,
            split_val: ratios.val,
            split_test: ratios.test,
            synth_channels: synth.channels,
            synth_total: synth.total,
            synth_seed: synth.seed,
            synth_regime_period: synth.regime_period,
            synth_trend_scale: synth.trend_scale,
            synth_noise_std: synth.noise_std,
            seq_len: 48,
            pred_len: 24,
            patch_len: 16,
            stride: 8,
            d_model: 32,
            n_heads: 4,
            d_ff: None,
            dropout: 0.1,
            n_patch_layers: 2,
            n_channel_layers: 1,
            n_prime: None,
            ablation: Ablation::Full,
            lr: train.lr,
            epochs: 10,
            batch_size: train.batch_size,
            loss: train.loss,
            alpha: train.alpha,
            patience: train.patience,
            clip_norm: train.clip_norm,
            max_steps_per_epoch: train.max_steps_per_epoch,
            seed: 0,
        }
    }
}

/// Reads a TOML table from `path`.
pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parses a `key=value` override. The value is read as a TOML value, falling
/// back to a plain string.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not of the form key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

impl RunConfig {
    /// Builds a config from a merged key/value table, filling unset keys with defaults.
    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table = text
            .parse::<Table>()
            .map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    /// Fills the derived defaults so the echoed config is fully explicit.
    pub fn resolved(mut self) -> Self {
        self.d_ff.get_or_insert(4 * self.d_model);
        self.n_prime
            .get_or_insert(ModelConfig::default_n_prime(self.seq_len, self.patch_len, self.stride));
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.split_train,
            val: self.split_val,
            test: self.split_test,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            channels: self.synth_channels,
            total: self.synth_total,
            seed: self.synth_seed,
            regime_period: self.synth_regime_period,
            trend_scale: self.synth_trend_scale,
            noise_std: self.synth_noise_std,
        }
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        ModelConfig {
            channels,
            seq_len: self.seq_len,
            pred_len: self.pred_len,
            patch_len: self.patch_len,
            stride: self.stride,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff.unwrap_or(4 * self.d_model),
            dropout: self.dropout,
            n_patch_layers: self.n_patch_layers,
            n_channel_layers: self.n_channel_layers,
            n_prime: self
                .n_prime
                .unwrap_or_else(|| ModelConfig::default_n_prime(self.seq_len, self.patch_len, self.stride)),
            ablation: self.ablation,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss: self.loss,
            alpha: self.alpha,
            patience: self.patience,
            clip_norm: self.clip_norm,
            max_steps_per_epoch: self.max_steps_per_epoch,
            seed: self.seed,
        }
    }

    /// Checks every field before any data is read.
    pub fn validate(&self) -> Result<()> {
        self.model_config(1).validate()?;
        self.train_config().validate()?;
        self.ratios().validate()?;
        if self.data.is_none() {
            let s = self.synth_spec();
            if s.channels == 0 || s.regime_period == 0 || s.total < s.regime_period {
                return Err(Error::Config(format!(
                    "synthetic series needs synth_channels >= 1 and synth_total >= synth_regime_period >= 1, got {s:?}"
                )));
            }
            if !(s.noise_std >= 0.0 && s.noise_std.is_finite() && s.trend_scale.is_finite()) {
                return Err(Error::Config("synth_noise_std must be >= 0 and scales finite".into()));
            }
        }
        Ok(())
    }
}
