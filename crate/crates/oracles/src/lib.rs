//! Straight-line reference implementations.
//!
//! Everything here is written with explicit loops over nested `Vec`s and
//! deliberately shares no code with `seesaw-core`. The crate is only ever a
//! dev-dependency: tests compare the production tensor/tape path against
//! these loops.

use std::f64::consts::PI;

pub type Matrix = Vec<Vec<f64>>;

pub fn zeros(rows: usize, cols: usize) -> Matrix {
    vec![vec![0.0; cols]; rows]
}

/// Row-major flat slice to nested matrix.
pub fn from_flat(rows: usize, cols: usize, flat: &[f64]) -> Matrix {
    assert_eq!(rows * cols, flat.len());
    (0..rows)
        .map(|r| flat[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

pub fn flatten(m: &Matrix) -> Vec<f64> {
    m.iter().flat_map(|r| r.iter().copied()).collect()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let m = a.len();
    let k = b.len();
    let n = if k == 0 { 0 } else { b[0].len() };
    let mut out = zeros(m, n);
    for i in 0..m {
        assert_eq!(a[i].len(), k);
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i][p] * b[p][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central-difference gradient of a scalar function.
pub fn finite_difference_grad<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// DFT

/// Textbook real-input DFT: bins `0..=L/2`, each as `(re, im)`.
pub fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let l = x.len();
    let bins = l / 2 + 1;
    let mut out = Vec::with_capacity(bins);
    for k in 0..bins {
        let mut re = 0.0;
        let mut im = 0.0;
        for (t, &v) in x.iter().enumerate() {
            let angle = 2.0 * PI * (k as f64) * (t as f64) / (l as f64);
            re += v * angle.cos();
            im -= v * angle.sin();
        }
        out.push((re, im));
    }
    out
}

// ---------------------------------------------------------------------------
// Losses and metrics

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        acc += d * d;
    }
    acc / pred.len() as f64
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..pred.len() {
        acc += (pred[i] - target[i]).abs();
    }
    acc / pred.len() as f64
}

/// Hybrid loss over `rows` series of length `h` each (row-major):
/// `alpha * mean|DFT(pred) - DFT(target)| + (1 - alpha) * mean|pred - target|`.
pub fn fredf(pred: &[f64], target: &[f64], rows: usize, h: usize, alpha: f64) -> f64 {
    let mut freq = 0.0;
    let mut count = 0usize;
    for r in 0..rows {
        let p = naive_dft(&pred[r * h..(r + 1) * h]);
        let t = naive_dft(&target[r * h..(r + 1) * h]);
        for k in 0..p.len() {
            let dr = p[k].0 - t[k].0;
            let di = p[k].1 - t[k].1;
            freq += (dr * dr + di * di).sqrt();
            count += 1;
        }
    }
    alpha * freq / count as f64 + (1.0 - alpha) * mae(pred, target)
}

// ---------------------------------------------------------------------------
// Optimizer

/// Scalar Adam with bias correction, minimizing a function given its derivative.
pub fn scalar_adam<G>(grad: G, w0: f64, lr: f64, steps: usize) -> f64
where
    G: Fn(f64) -> f64,
{
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut w = w0;
    let mut m = 0.0;
    let mut v = 0.0;
    for t in 1..=steps {
        let g = grad(w);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let v_hat = v / (1.0 - b2.powi(t as i32));
        w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    w
}

// ---------------------------------------------------------------------------
// Attention

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Per-head attention maps `[head][query][key]`. Head `h` uses columns
/// `h*dh .. (h+1)*dh` of the `D x D` query/key matrices.
pub fn branch_scores(z: &Matrix, wq: &Matrix, wk: &Matrix, heads: usize) -> Vec<Matrix> {
    let t_len = z.len();
    let d = wq[0].len();
    let dh = d / heads;
    let q = matmul(z, wq);
    let k = matmul(z, wk);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut a = zeros(t_len, t_len);
        for i in 0..t_len {
            let mut row = vec![0.0; t_len];
            for j in 0..t_len {
                let mut dot = 0.0;
                for c in h * dh..(h + 1) * dh {
                    dot += q[i][c] * k[j][c];
                }
                row[j] = dot * scale;
            }
            a[i] = softmax_row(&row);
        }
        out.push(a);
    }
    out
}

/// Gate `[token][head]` from the concatenated embeddings.
pub fn gate(z_sta: &Matrix, z_non: &Matrix, wg: &Matrix, bg: &[f64]) -> Matrix {
    let t_len = z_sta.len();
    let d = z_sta[0].len();
    let heads = bg.len();
    let mut g = zeros(t_len, heads);
    for t in 0..t_len {
        for h in 0..heads {
            let mut acc = bg[h];
            for c in 0..d {
                acc += z_sta[t][c] * wg[c][h];
                acc += z_non[t][c] * wg[d + c][h];
            }
            g[t][h] = sigmoid(acc);
        }
    }
    g
}

/// Gate-mixed attention maps `[head][query][key]`.
pub fn mixed_maps(a_sta: &[Matrix], a_non: &[Matrix], g: &Matrix) -> Vec<Matrix> {
    let heads = a_sta.len();
    let t_len = g.len();
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut m = zeros(t_len, t_len);
        for i in 0..t_len {
            for j in 0..t_len {
                m[i][j] = (1.0 - g[i][h]) * a_sta[h][i][j] + g[i][h] * a_non[h][i][j];
            }
        }
        out.push(m);
    }
    out
}

/// Fused output: per head `M^h (z_sta W_V^h)`, heads concatenated, then `W_O`.
pub fn fused_attention(
    a_sta: &[Matrix],
    a_non: &[Matrix],
    g: &Matrix,
    z_sta: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
) -> Matrix {
    let heads = a_sta.len();
    let t_len = z_sta.len();
    let d = wv[0].len();
    let dh = d / heads;
    let m = mixed_maps(a_sta, a_non, g);
    let v = matmul(z_sta, wv);
    let mut concat = zeros(t_len, d);
    for h in 0..heads {
        for i in 0..t_len {
            for c in h * dh..(h + 1) * dh {
                let mut acc = 0.0;
                for j in 0..t_len {
                    acc += m[h][i][j] * v[j][c];
                }
                concat[i][c] = acc;
            }
        }
    }
    matmul(&concat, wo)
}

pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Matrix {
    let eps = 1e-5;
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| gain[i] * (v - mean) / denom + bias[i])
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

pub fn ffn(x: &Matrix, p: &Ffn) -> Matrix {
    let mut hidden = matmul(x, &p.w1);
    for row in &mut hidden {
        for (i, v) in row.iter_mut().enumerate() {
            *v = gelu(*v + p.b1[i]);
        }
    }
    let mut out = matmul(&hidden, &p.w2);
    for row in &mut out {
        for (i, v) in row.iter_mut().enumerate() {
            *v += p.b2[i];
        }
    }
    out
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

/// Weights of one block in nested-matrix form.
#[derive(Clone, Debug)]
pub struct AsnaWeights {
    pub heads: usize,
    pub wq_sta: Matrix,
    pub wk_sta: Matrix,
    pub wq_non: Matrix,
    pub wk_non: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub wg: Matrix,
    pub bg: Vec<f64>,
    pub ffn_sta: Ffn,
    pub ffn_non: Ffn,
    pub ln_attn: (Vec<f64>, Vec<f64>),
    pub ln_sta: (Vec<f64>, Vec<f64>),
    pub ln_non: (Vec<f64>, Vec<f64>),
}

/// Dropout-free block forward. Returns `(z_sta_out, z_non_out)`.
pub fn asna_forward(z_sta: &Matrix, z_non: &Matrix, w: &AsnaWeights) -> (Matrix, Matrix) {
    let a_sta = branch_scores(z_sta, &w.wq_sta, &w.wk_sta, w.heads);
    let a_non = branch_scores(z_non, &w.wq_non, &w.wk_non, w.heads);
    let g = gate(z_sta, z_non, &w.wg, &w.bg);
    let o = fused_attention(&a_sta, &a_non, &g, z_sta, &w.wv, &w.wo);
    let tmp = layer_norm(&add(z_sta, &o), &w.ln_attn.0, &w.ln_attn.1);
    let sta = layer_norm(&add(&tmp, &ffn(&tmp, &w.ffn_sta)), &w.ln_sta.0, &w.ln_sta.1);
    let non = layer_norm(&add(z_non, &ffn(&o, &w.ffn_non)), &w.ln_non.0, &w.ln_non.1);
    (sta, non)
}
