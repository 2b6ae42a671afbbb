//! Adaptive stationary/non-stationary attention.
//!
//! One block takes a stationary token sequence `z_sta` (from normalized input)
//! and a non-stationary one `z_non` (from raw input), both `[G, T, D]` with
//! `G` independent sequences. Attention maps are computed separately from each
//! sequence, mixed per query token and head by a sigmoid gate,
//!
//! ```text
//! M^h = (1 - G[:, h]) * A_sta^h + G[:, h] * A_non^h
//! ```
//!
//! and applied to values projected from `z_sta` only. The fused output then
//! drives two residual/FFN updates, one per path.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// How the branch-mixing gate is produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// `sigmoid((z_sta ++ z_non) W_G + b_G)`.
    Learned,
    /// Constant gate value (0 = stationary only, 1 = non-stationary only).
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Weights of one block. Per-head projections are stored as `D x D`
/// matrices whose column block `h*dh .. (h+1)*dh` belongs to head `h`.
#[derive(Clone, Debug)]
pub struct AsnaParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub w_q_sta: ParamId,
    pub w_k_sta: ParamId,
    pub w_q_non: ParamId,
    pub w_k_non: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub ffn_sta: FfnParams,
    pub ffn_non: FfnParams,
    pub ln_attn: LayerNormParams,
    pub ln_sta: LayerNormParams,
    pub ln_non: LayerNormParams,
}

fn linear_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl AsnaParams {
    /// Allocates a block's parameters in `store` under `prefix`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::usage(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let d = d_model;
        let bd = linear_bound(d);
        let mut proj = |name: &str, rng: &mut R| store.add_uniform(format!("{prefix}.{name}"), &[d, d], bd, rng);
        let w_q_sta = proj("w_q_sta", rng)?;
        let w_k_sta = proj("w_k_sta", rng)?;
        let w_q_non = proj("w_q_non", rng)?;
        let w_k_non = proj("w_k_non", rng)?;
        let w_v = proj("w_v", rng)?;
        let w_o = proj("w_o", rng)?;
        let bg = linear_bound(2 * d);
        let w_gate = store.add_uniform(format!("{prefix}.w_gate"), &[2 * d, n_heads], bg, rng)?;
        let b_gate = store.add(format!("{prefix}.b_gate"), Tensor::zeros(&[n_heads]))?;
        let mut ffn = |name: &str, rng: &mut R| -> Result<FfnParams> {
            let b1 = linear_bound(d);
            let b2 = linear_bound(d_ff);
            Ok(FfnParams {
                w1: store.add_uniform(format!("{prefix}.{name}.w1"), &[d, d_ff], b1, rng)?,
                b1: store.add_uniform(format!("{prefix}.{name}.b1"), &[d_ff], b1, rng)?,
                w2: store.add_uniform(format!("{prefix}.{name}.w2"), &[d_ff, d], b2, rng)?,
                b2: store.add_uniform(format!("{prefix}.{name}.b2"), &[d], b2, rng)?,
            })
        };
        let ffn_sta = ffn("ffn_sta", rng)?;
        let ffn_non = ffn("ffn_non", rng)?;
        let mut ln = |name: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gain: store.add(format!("{prefix}.{name}.gain"), Tensor::ones(&[d]))?,
                bias: store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[d]))?,
            })
        };
        Ok(AsnaParams {
            d_model,
            n_heads,
            d_ff,
            dropout,
            w_q_sta,
            w_k_sta,
            w_q_non,
            w_k_non,
            w_v,
            w_o,
            w_gate,
            b_gate,
            ffn_sta,
            ffn_non,
            ln_attn: ln("ln_attn")?,
            ln_sta: ln("ln_sta")?,
            ln_non: ln("ln_non")?,
        })
    }

    /// Scalar parameter count of one block.
    pub fn count(d_model: usize, n_heads: usize, d_ff: usize) -> usize {
        let d = d_model;
        6 * d * d + (2 * d * n_heads + n_heads) + 2 * (d * d_ff + d_ff + d_ff * d + d) + 3 * 2 * d
    }
}

/// Attention maps and gate of one block, kept for export.
#[derive(Clone, Debug)]
pub struct AsnaDiag {
    /// `[G, heads, T, T]`
    pub a_sta: Tensor,
    /// `[G, heads, T, T]`
    pub a_non: Tensor,
    /// `[G, T, heads]`, weight of the non-stationary branch.
    pub gate: Tensor,
}

impl AsnaDiag {
    /// Gate-mixed maps `(1 - G) * A_sta + G * A_non`, `[G, heads, T, T]`.
    pub fn fused(&self) -> Tensor {
        let shape = self.a_sta.shape();
        let (groups, heads, t) = (shape[0], shape[1], shape[2]);
        let mut out = self.a_sta.clone();
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..t {
                    let w = self.gate.get(&[g, i, h]);
                    for j in 0..t {
                        let idx = [g, h, i, j];
                        out.set(&idx, (1.0 - w) * self.a_sta.get(&idx) + w * self.a_non.get(&idx));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AsnaOutput {
    pub z_sta_out: Var,
    pub z_non_out: Var,
    pub diag: Option<AsnaDiag>,
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (g, t, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[g, t, heads, d / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (g, h, t, dh) = (s[0], s[1], s[2], s[3]);
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[g, t, h * dh])
}

fn check_tokens(tape: &Tape, z: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(z) {
        [g, t, d] => Ok((g, t, d)),
        ref other => Err(Error::shape(op, other, &[0, 0, 0])),
    }
}

/// Per-head `softmax((z W_Q^h)(z W_K^h)^T / sqrt(dh))`, `[G, heads, T, T]`.
pub fn branch_scores(tape: &mut Tape, z: Var, w_q: Var, w_k: Var, heads: usize) -> Result<Var> {
    let (_, _, d) = check_tokens(tape, z, "branch_scores")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::usage(format!("{d} features cannot be split into {heads} heads")));
    }
    let q = tape.matmul(z, w_q)?;
    let k = tape.matmul(z, w_k)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    tape.softmax(scaled)
}

/// `sigmoid((z_sta ++ z_non) W_G + b_G)`, `[G, T, heads]`.
pub fn compute_gate(tape: &mut Tape, z_sta: Var, z_non: Var, w_g: Var, b_g: Var) -> Result<Var> {
    let cat = tape.concat(z_sta, z_non)?;
    let lin = tape.matmul(cat, w_g)?;
    let lin = tape.add_broadcast(lin, b_g)?;
    Ok(tape.sigmoid(lin))
}

/// Gate-mixed attention applied to values from `z_sta`, heads merged and
/// projected by `W_O`. `gate` is `[G, T, heads]`.
pub fn fused_attention(
    tape: &mut Tape,
    a_sta: Var,
    a_non: Var,
    gate: Var,
    z_sta: Var,
    w_v: Var,
    w_o: Var,
) -> Result<Var> {
    let s = tape.shape(a_sta).to_vec();
    if s.len() != 4 || tape.shape(a_non) != s.as_slice() {
        return Err(Error::shape("fused_attention", &s, tape.shape(a_non)));
    }
    let (g, heads, t) = (s[0], s[1], s[2]);
    if tape.shape(gate) != [g, t, heads] {
        return Err(Error::shape("fused_attention", &s, tape.shape(gate)));
    }
    let gh = tape.permute(gate, &[0, 2, 1])?;
    let gate_full = tape.expand_last(gh, t);
    let neg = tape.neg(gate_full);
    let keep = tape.add_scalar(neg, 1.0);
    let sta_part = tape.mul(keep, a_sta)?;
    let non_part = tape.mul(gate_full, a_non)?;
    let mixed = tape.add(sta_part, non_part)?;

    let v = tape.matmul(z_sta, w_v)?;
    let v = split_heads(tape, v, heads)?;
    let heads_out = tape.matmul(mixed, v)?;
    let merged = merge_heads(tape, heads_out)?;
    tape.matmul(merged, w_o)
}

fn ffn<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &Bound,
    p: &FfnParams,
    x: Var,
    dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = tape.matmul(x, bound.var(p.w1))?;
    let h = tape.add_broadcast(h, bound.var(p.b1))?;
    let h = tape.gelu(h);
    let h = tape.dropout(h, dropout, train, rng)?;
    let o = tape.matmul(h, bound.var(p.w2))?;
    tape.add_broadcast(o, bound.var(p.b2))
}

fn norm(tape: &mut Tape, bound: &Bound, p: &LayerNormParams, x: Var) -> Result<Var> {
    tape.layer_norm(x, bound.var(p.gain), bound.var(p.bias))
}

/// Full block: fused attention, then
///
/// ```text
/// tmp     = LN(z_sta + Dropout(O))
/// z_sta'  = LN(tmp + FFN_sta(tmp))
/// z_non'  = LN(z_non + FFN_non(O))
/// ```
#[allow(clippy::too_many_arguments)]
pub fn asna_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &Bound,
    params: &AsnaParams,
    z_sta: Var,
    z_non: Var,
    gate_mode: GateMode,
    train: bool,
    rng: &mut R,
    capture: bool,
) -> Result<AsnaOutput> {
    let (g, t, d) = check_tokens(tape, z_sta, "asna_forward")?;
    if tape.shape(z_non) != [g, t, d] || d != params.d_model {
        return Err(Error::shape("asna_forward", &[g, t, d], tape.shape(z_non)));
    }
    let heads = params.n_heads;
    let a_sta = branch_scores(
        tape,
        z_sta,
        bound.var(params.w_q_sta),
        bound.var(params.w_k_sta),
        heads,
    )?;
    let a_non = branch_scores(
        tape,
        z_non,
        bound.var(params.w_q_non),
        bound.var(params.w_k_non),
        heads,
    )?;
    let gate = match gate_mode {
        GateMode::Learned => compute_gate(
            tape,
            z_sta,
            z_non,
            bound.var(params.w_gate),
            bound.var(params.b_gate),
        )?,
        GateMode::Fixed(v) => tape.constant(Tensor::full(&[g, t, heads], v)),
    };
    let o = fused_attention(
        tape,
        a_sta,
        a_non,
        gate,
        z_sta,
        bound.var(params.w_v),
        bound.var(params.w_o),
    )?;

    let o_drop = tape.dropout(o, params.dropout, train, rng)?;
    let res = tape.add(z_sta, o_drop)?;
    let tmp = norm(tape, bound, &params.ln_attn, res)?;
    let f_sta = ffn(tape, bound, &params.ffn_sta, tmp, params.dropout, train, rng)?;
    let res = tape.add(tmp, f_sta)?;
    let z_sta_out = norm(tape, bound, &params.ln_sta, res)?;

    let f_non = ffn(tape, bound, &params.ffn_non, o, params.dropout, train, rng)?;
    let res = tape.add(z_non, f_non)?;
    let z_non_out = norm(tape, bound, &params.ln_non, res)?;

    let diag = capture.then(|| AsnaDiag {
        a_sta: tape.value(a_sta).clone(),
        a_non: tape.value(a_non).clone(),
        gate: tape.value(gate).clone(),
    });
    Ok(AsnaOutput {
        z_sta_out,
        z_non_out,
        diag,
    })
}
