//! Analytic FLOP counts of the attention part of the model, per input sample.
//!
//! Counting rules, per block, per token sequence of length `T`, width `D`, `h` heads:
//!
//! ```text
//! matmul (m x k)(k x n)          2 m k n
//! one score branch               Q K^T: 2 T^2 D,  scale: h T^2,  softmax: 5 h T^2
//! branch fusion                  3 h T^2          (two products and a sum per entry)
//! gate                           2 T (2D) h + h T (bias) + 4 h T (sigmoid)
//! projections                    2 T D^2 each: Q, K per branch, V, O
//! value aggregation              2 T^2 D
//! ```
//!
//! The single-branch reference is one score branch with Q, K, V, O projections
//! and no gate. FFNs and layer norms are identical in both and not counted.

use crate::model::{Ablation, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionFlops {
    pub scores: u64,
    pub gate: u64,
    pub projections: u64,
    pub values: u64,
}

impl AttentionFlops {
    pub fn total(&self) -> u64 {
        self.scores + self.gate + self.projections + self.values
    }

    fn scaled(self, k: u64) -> Self {
        AttentionFlops {
            scores: self.scores * k,
            gate: self.gate * k,
            projections: self.projections * k,
            values: self.values * k,
        }
    }

    fn add(self, o: Self) -> Self {
        AttentionFlops {
            scores: self.scores + o.scores,
            gate: self.gate + o.gate,
            projections: self.projections + o.projections,
            values: self.values + o.values,
        }
    }
}

fn branch_scores(t: u64, d: u64, h: u64) -> u64 {
    2 * t * t * d + 6 * h * t * t
}

/// One dual-branch block over one sequence.
pub fn asna_block(t: usize, d: usize, h: usize) -> AttentionFlops {
    let (t, d, h) = (t as u64, d as u64, h as u64);
    AttentionFlops {
        scores: 2 * branch_scores(t, d, h) + 3 * h * t * t,
        gate: 4 * t * d * h + 5 * h * t,
        projections: 6 * 2 * t * d * d,
        values: 2 * t * t * d,
    }
}

/// Plain multi-head attention over one sequence.
pub fn single_block(t: usize, d: usize, h: usize) -> AttentionFlops {
    let (t, d, h) = (t as u64, d as u64, h as u64);
    AttentionFlops {
        scores: branch_scores(t, d, h),
        gate: 0,
        projections: 4 * 2 * t * d * d,
        values: 2 * t * t * d,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub patch_layers: AttentionFlops,
    pub channel_layers: AttentionFlops,
    pub single_patch_layers: AttentionFlops,
    pub single_channel_layers: AttentionFlops,
}

impl FlopReport {
    pub fn asna(&self) -> AttentionFlops {
        self.patch_layers.add(self.channel_layers)
    }

    pub fn single(&self) -> AttentionFlops {
        self.single_patch_layers.add(self.single_channel_layers)
    }

    /// Dual-branch over single-branch score FLOPs.
    pub fn score_ratio(&self) -> f64 {
        self.asna().scores as f64 / self.single().scores as f64
    }
}

/// Counts for one input sample under `cfg`, following its ablation's layer layout.
pub fn count(cfg: &ModelConfig) -> FlopReport {
    let (c, d, h) = (cfg.channels, cfg.d_model, cfg.n_heads);
    let patch_tokens = if cfg.ablation == Ablation::CrThenPd {
        cfg.n_prime
    } else {
        cfg.n_patches()
    };
    let pl = (cfg.effective_patch_layers() * c) as u64;
    let cl = (cfg.effective_channel_layers() * cfg.n_prime) as u64;
    FlopReport {
        patch_layers: asna_block(patch_tokens, d, h).scaled(pl),
        channel_layers: asna_block(c, d, h).scaled(cl),
        single_patch_layers: single_block(patch_tokens, d, h).scaled(pl),
        single_channel_layers: single_block(c, d, h).scaled(cl),
    }
}
