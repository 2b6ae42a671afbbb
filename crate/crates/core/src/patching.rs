//! Overlapping patches over the time axis and their linear embedding.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub embed_dim: usize,
}

impl PatchConfig {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_len {
            return Err(Error::usage(format!(
                "stride must satisfy 1 <= stride <= patch_len, got stride {} and patch_len {}",
                self.stride, self.patch_len
            )));
        }
        if self.patch_len > seq_len {
            return Err(Error::usage(format!(
                "patch_len {} exceeds input length {seq_len}",
                self.patch_len
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::usage("embed_dim must be positive"));
        }
        Ok(())
    }

    /// Number of windows after padding the tail with `stride` copies of the last value.
    pub fn n_patches(&self, seq_len: usize) -> usize {
        (seq_len - self.patch_len) / self.stride + 2
    }
}

/// Embedded patch tokens, shape `[.., C, N, D]`.
#[derive(Clone, Copy, Debug)]
pub struct PatchTokens {
    pub values: Var,
    pub n_patches: usize,
}

/// Splits the last axis `[.., L]` into `[.., N, P]` windows starting at
/// `0, S, 2S, ..`, after right-padding with the final value repeated `S` times.
pub fn patchify(x: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    let len = x.last_dim();
    if x.rank() == 0 {
        return Err(Error::usage("patchify needs at least one axis"));
    }
    cfg.validate(len)?;
    let (p, s) = (cfg.patch_len, cfg.stride);
    let n = cfg.n_patches(len);
    let mut out = Vec::with_capacity(x.numel() / len * n * p);
    let mut padded = Vec::with_capacity(len + s);
    for row in x.rows() {
        padded.clear();
        padded.extend_from_slice(row);
        padded.extend(std::iter::repeat_n(row[len - 1], s));
        for i in 0..n {
            out.extend_from_slice(&padded[i * s..i * s + p]);
        }
    }
    let mut shape = x.shape()[..x.rank() - 1].to_vec();
    shape.extend([n, p]);
    Tensor::new(shape, out)
}

/// `tokens[.., n, :] = patches[.., n, :] * w_e + pos[n, :]`.
pub fn embed(tape: &mut Tape, patches: Var, w_e: Var, pos: Var) -> Result<PatchTokens> {
    let shape = tape.shape(patches);
    if shape.len() < 2 {
        return Err(Error::shape("embed", shape, tape.shape(w_e)));
    }
    let n_patches = shape[shape.len() - 2];
    let projected = tape.matmul(patches, w_e)?;
    let values = tape.add_broadcast(projected, pos)?;
    Ok(PatchTokens { values, n_patches })
}
