//! The full forecaster: instance normalization, dual patch embedding, stacked
//! attention blocks over patches and channels, and a linear head.
//!
//! Tokens flow as `[B, C, N, D]`. Patch layers run one attention sequence per
//! `(batch, channel)` over its `N` patch tokens; channel layers run one per
//! `(batch, patch)` over the `C` channel tokens. Each layer has a single set of
//! block parameters shared across all of its sequences.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asna::{asna_forward, AsnaDiag, AsnaParams, GateMode};
use crate::error::{Error, Result};
use crate::normalization::{in_norm, NormStats};
use crate::params::{Bound, ParamId, ParamStore};
use crate::patching::{embed, patchify, PatchConfig};
use crate::tensor::{Tape, Tensor, Var};

const POS_INIT: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoSta,
    NoNon,
    NoGate,
    NoPd,
    NoCr,
    CrThenPd,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoSta,
        Ablation::NoNon,
        Ablation::NoGate,
        Ablation::NoPd,
        Ablation::NoCr,
        Ablation::CrThenPd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSta => "no_sta",
            Ablation::NoNon => "no_non",
            Ablation::NoGate => "no_gate",
            Ablation::NoPd => "no_pd",
            Ablation::NoCr => "no_cr",
            Ablation::CrThenPd => "cr_then_pd",
        }
    }

    pub fn gate_mode(self) -> GateMode {
        match self {
            Ablation::NoSta => GateMode::Fixed(1.0),
            Ablation::NoNon => GateMode::Fixed(0.0),
            Ablation::NoGate => GateMode::Fixed(0.5),
            _ => GateMode::Learned,
        }
    }

    fn has_patch_layers(self) -> bool {
        self != Ablation::NoPd
    }

    fn has_channel_stage(self) -> bool {
        self != Ablation::NoCr
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.as_str()).collect();
                Error::usage(format!("unknown ablation `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub seq_len: usize,
    pub pred_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub n_patch_layers: usize,
    pub n_channel_layers: usize,
    /// Patch tokens kept after temporal aggregation.
    pub n_prime: usize,
    pub ablation: Ablation,
    pub seed: u64,
}

impl ModelConfig {
    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            patch_len: self.patch_len,
            stride: self.stride,
            embed_dim: self.d_model,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.patch().n_patches(self.seq_len)
    }

    /// `ceil(N / 2)`.
    pub fn default_n_prime(seq_len: usize, patch_len: usize, stride: usize) -> usize {
        if patch_len == 0 || stride == 0 || patch_len > seq_len {
            return 1;
        }
        ((seq_len - patch_len) / stride + 2).div_ceil(2)
    }

    /// Patch layers actually allocated under the ablation.
    pub fn effective_patch_layers(&self) -> usize {
        if self.ablation.has_patch_layers() {
            self.n_patch_layers
        } else {
            0
        }
    }

    pub fn effective_channel_layers(&self) -> usize {
        if self.ablation.has_channel_stage() {
            self.n_channel_layers
        } else {
            0
        }
    }

    /// Token count seen by the head.
    pub fn head_tokens(&self) -> usize {
        if self.ablation.has_channel_stage() {
            self.n_prime
        } else {
            self.n_patches()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.seq_len < 2 {
            return bad(format!("seq_len must be at least 2, got {}", self.seq_len));
        }
        if self.pred_len == 0 {
            return bad("pred_len must be positive".into());
        }
        self.patch()
            .validate(self.seq_len)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let n = self.n_patches();
        if self.n_prime == 0 || self.n_prime > n {
            return bad(format!("n_prime must lie in 1..={n}, got {}", self.n_prime));
        }
        Ok(())
    }

    /// Closed-form scalar parameter count.
    ///
    /// ```text
    /// 2 (P D + N D)                       embeddings, one per path
    /// + (n_pl + n_cl) * block             block = 6D^2 + 2Dh + h + 2(2 D D_ff + D_ff + D) + 6D
    /// + 2 N' N                            aggregation, one per path (absent under no_cr)
    /// + T D H + H                         head, T = N' (N under no_cr)
    /// ```
    pub fn param_count(&self) -> usize {
        let (p, d, n, h) = (self.patch_len, self.d_model, self.n_patches(), self.pred_len);
        let embed = 2 * (p * d + n * d);
        let blocks = (self.effective_patch_layers() + self.effective_channel_layers())
            * AsnaParams::count(d, self.n_heads, self.d_ff);
        let agg = if self.ablation.has_channel_stage() {
            2 * self.n_prime * n
        } else {
            0
        };
        let head = self.head_tokens() * d * h + h;
        embed + blocks + agg + head
    }
}

#[derive(Clone, Copy, Debug)]
struct Embedding {
    w_e: ParamId,
    pos: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    embed_sta: Embedding,
    embed_non: Embedding,
    patch_layers: Vec<AsnaParams>,
    /// `[N', N]` per path.
    agg: Option<(ParamId, ParamId)>,
    channel_layers: Vec<AsnaParams>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Attention diagnostics of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ModelDiag {
    /// One entry per patch layer; groups are `(batch, channel)` pairs.
    pub patch_layers: Vec<AsnaDiag>,
    /// One entry per channel layer; groups are `(batch, patch)` pairs.
    pub channel_layers: Vec<AsnaDiag>,
}

pub struct ForwardOutput {
    /// Forecast in raw scale, `[B, C, H]`.
    pub y_hat: Var,
    pub stats: NormStats,
    pub diag: Option<ModelDiag>,
}

#[derive(Clone, Debug)]
pub struct SeesawModel {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

fn build(config: &ModelConfig) -> Result<(ParamStore, Layout)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let (p, d, n) = (config.patch_len, config.d_model, config.n_patches());
    let embedding = |path: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| -> Result<Embedding> {
        Ok(Embedding {
            w_e: store.add_uniform(format!("embed_{path}.w_e"), &[p, d], 1.0 / (p as f64).sqrt(), rng)?,
            pos: store.add_uniform(format!("embed_{path}.pos"), &[n, d], POS_INIT, rng)?,
        })
    };
    let embed_sta = embedding("sta", &mut store, &mut rng)?;
    let embed_non = embedding("non", &mut store, &mut rng)?;
    let block = |name: String, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
        AsnaParams::init(store, &name, d, config.n_heads, config.d_ff, config.dropout, rng)
    };
    let patch_layers = (0..config.effective_patch_layers())
        .map(|i| block(format!("patch{i}"), &mut store, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let agg = if config.ablation.has_channel_stage() {
        let bound = 1.0 / (n as f64).sqrt();
        let shape = [config.n_prime, n];
        Some((
            store.add_uniform("agg_sta", &shape, bound, &mut rng)?,
            store.add_uniform("agg_non", &shape, bound, &mut rng)?,
        ))
    } else {
        None
    };
    let channel_layers = (0..config.effective_channel_layers())
        .map(|i| block(format!("channel{i}"), &mut store, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let width = config.head_tokens() * d;
    let hb = 1.0 / (width as f64).sqrt();
    let head_w = store.add_uniform("head.w", &[width, config.pred_len], hb, &mut rng)?;
    let head_b = store.add_uniform("head.b", &[config.pred_len], hb, &mut rng)?;
    let layout = Layout {
        embed_sta,
        embed_non,
        patch_layers,
        agg,
        channel_layers,
        head_w,
        head_b,
    };
    Ok((store, layout))
}

impl SeesawModel {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (store, layout) = build(&config)?;
        Ok(SeesawModel {
            config,
            store,
            layout,
        })
    }

    /// Model with externally supplied parameters; names and shapes must match
    /// those `config` would allocate.
    pub fn with_params(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let (fresh, layout) = build(&config)?;
        if fresh.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                fresh.len(),
                store.len()
            )));
        }
        for ((name, want), (got_name, got)) in fresh.iter().zip(store.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected `{name}` {:?}, found `{got_name}` {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
            if !got.all_finite() {
                return Err(Error::Checkpoint(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(SeesawModel {
            config,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Gate projection of each block, for tests and diagnostics.
    pub fn gate_params(&self) -> Vec<(ParamId, ParamId)> {
        self.layout
            .patch_layers
            .iter()
            .chain(&self.layout.channel_layers)
            .map(|b| (b.w_gate, b.b_gate))
            .collect()
    }

    /// Records a forward pass for `x: [B, C, L]` on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Tensor,
        train: bool,
        rng: &mut R,
        capture: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (b, c) = match *x.shape() {
            [b, c, l] if c == cfg.channels && l == cfg.seq_len => (b, c),
            ref s => {
                return Err(Error::usage(format!(
                    "model expects input [batch, {}, {}], got {s:?}",
                    cfg.channels, cfg.seq_len
                )))
            }
        };
        let (d, n) = (cfg.d_model, cfg.n_patches());
        let (x_sta, stats) = in_norm(x)?;
        let patch = cfg.patch();
        let path = |input: &Tensor, e: Embedding, tape: &mut Tape| -> Result<Var> {
            let patches = tape.constant(patchify(input, &patch)?);
            let tokens = embed(tape, patches, bound.var(e.w_e), bound.var(e.pos))?;
            tape.reshape(tokens.values, &[b * c, n, d])
        };
        let mut z_sta = path(&x_sta, self.layout.embed_sta, tape)?;
        let mut z_non = path(x, self.layout.embed_non, tape)?;

        let gate = cfg.ablation.gate_mode();
        let mut diag = capture.then(ModelDiag::default);
        let run_patch = |tape: &mut Tape, z_sta: &mut Var, z_non: &mut Var, rng: &mut R, diag: &mut Option<ModelDiag>| -> Result<()> {
            for block in &self.layout.patch_layers {
                let out = asna_forward(tape, bound, block, *z_sta, *z_non, gate, train, rng, capture)?;
                *z_sta = out.z_sta_out;
                *z_non = out.z_non_out;
                if let (Some(dg), Some(o)) = (diag.as_mut(), out.diag) {
                    dg.patch_layers.push(o);
                }
            }
            Ok(())
        };

        if cfg.ablation != Ablation::CrThenPd {
            run_patch(tape, &mut z_sta, &mut z_non, rng, &mut diag)?;
        }
        if let Some((agg_sta, agg_non)) = self.layout.agg {
            let np = cfg.n_prime;
            z_sta = aggregate(tape, z_sta, bound.var(agg_sta))?;
            z_non = aggregate(tape, z_non, bound.var(agg_non))?;
            z_sta = to_channel_major(tape, z_sta, b, c, np, d)?;
            z_non = to_channel_major(tape, z_non, b, c, np, d)?;
            for block in &self.layout.channel_layers {
                let out = asna_forward(tape, bound, block, z_sta, z_non, gate, train, rng, capture)?;
                z_sta = out.z_sta_out;
                z_non = out.z_non_out;
                if let (Some(dg), Some(o)) = (diag.as_mut(), out.diag) {
                    dg.channel_layers.push(o);
                }
            }
            z_sta = from_channel_major(tape, z_sta, b, c, np, d)?;
            z_non = from_channel_major(tape, z_non, b, c, np, d)?;
        }
        if cfg.ablation == Ablation::CrThenPd {
            run_patch(tape, &mut z_sta, &mut z_non, rng, &mut diag)?;
        }
        // z_non is not used past the last block: only the stationary path feeds the head.
        let _ = z_non;

        let t = cfg.head_tokens();
        let flat = tape.reshape(z_sta, &[b, c, t * d])?;
        let y = tape.matmul(flat, bound.var(self.layout.head_w))?;
        let y = tape.add_broadcast(y, bound.var(self.layout.head_b))?;
        let y_hat = tape.affine_rows(y, &stats.std, &stats.mean)?;
        Ok(ForwardOutput { y_hat, stats, diag })
    }

    /// Eval-mode forecast for `x: [B, C, L]`, returning `[B, C, H]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.predict_with_diag(x, false)?.0)
    }

    pub fn predict_with_diag(&self, x: &Tensor, capture: bool) -> Result<(Tensor, Option<ModelDiag>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        // Dropout is off in eval mode, so the generator is never drawn from.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &bound, x, false, &mut rng, capture)?;
        Ok((tape.value(out.y_hat).clone(), out.diag))
    }
}

/// `out[g, :, d] = W_agg * z[g, :, d]` along the token axis.
pub fn aggregate(tape: &mut Tape, z: Var, w_agg: Var) -> Result<Var> {
    let zt = tape.transpose(z)?;
    let mixed = tape.matmul_nt(zt, w_agg)?;
    tape.transpose(mixed)
}

/// `[B*C, N, D]` -> `[B*N, C, D]`.
fn to_channel_major(tape: &mut Tape, z: Var, b: usize, c: usize, n: usize, d: usize) -> Result<Var> {
    let z = tape.reshape(z, &[b, c, n, d])?;
    let z = tape.permute(z, &[0, 2, 1, 3])?;
    tape.reshape(z, &[b * n, c, d])
}

/// `[B*N, C, D]` -> `[B*C, N, D]`.
fn from_channel_major(tape: &mut Tape, z: Var, b: usize, c: usize, n: usize, d: usize) -> Result<Var> {
    let z = tape.reshape(z, &[b, n, c, d])?;
    let z = tape.permute(z, &[0, 2, 1, 3])?;
    tape.reshape(z, &[b * c, n, d])
}

#[cfg(test)]
mod tests;
