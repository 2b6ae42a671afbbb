//! Reversible per-instance, per-channel normalization.
//!
//! Every row of the input (all axes but the last) is one channel of one
//! instance and is standardized over the last (time) axis with its own
//! statistics. [`in_denorm`] reapplies those statistics to a forecast.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp for the per-row standard deviation.
pub const STD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation, clamped to at least [`STD_EPS`].
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn rows(&self) -> usize {
        self.mean.len()
    }
}

/// Standardizes each row over the last axis. Requires at least two time steps.
pub fn in_norm(x: &Tensor) -> Result<(Tensor, NormStats)> {
    let len = x.last_dim();
    if x.rank() == 0 || len < 2 {
        return Err(Error::usage(format!(
            "instance normalization needs at least 2 time steps, got shape {:?}",
            x.shape()
        )));
    }
    let rows = x.numel() / len;
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.rows() {
        let m = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len as f64;
        let s = var.sqrt().max(STD_EPS);
        out.extend(row.iter().map(|v| (v - m) / s));
        mean.push(m);
        std.push(s);
    }
    let normed = Tensor::new(x.shape().to_vec(), out)?;
    Ok((normed, NormStats { mean, std }))
}

/// Inverse of [`in_norm`]: `y[r, :] * std[r] + mean[r]`.
pub fn in_denorm(y: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let width = y.last_dim();
    if y.rank() == 0 || y.numel() / width != stats.rows() {
        return Err(Error::shape("in_denorm", y.shape(), &[stats.rows()]));
    }
    let mut out = Vec::with_capacity(y.numel());
    for (r, row) in y.rows().enumerate() {
        out.extend(row.iter().map(|v| v * stats.std[r] + stats.mean[r]));
    }
    Tensor::new(y.shape().to_vec(), out)
}
