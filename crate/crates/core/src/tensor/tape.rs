use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;

use super::kernels::{gemm, permute, Layout};
use super::{is_permutation, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` has its own batch axis (otherwise one `b` shared by every batch).
    batched_b: bool,
    /// `b` is stored `n x k`.
    trans_b: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddSuffix(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    AffineRows(Var, Vec<f64>),
    MatMul(Var, Var, MatMulDims),
    ConstMatMul {
        x: Var,
        mat: Arc<Vec<f64>>,
        k_in: usize,
        k_out: usize,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        wa: usize,
        wb: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
        width: usize,
    },
    ExpandLast(Var, usize),
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Hypot(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    MeanLast(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Rebuilt for every forward pass; nodes are
/// appended in evaluation order so their inputs always precede them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf that was created with `requires_grad`. Panics otherwise.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient recorded for this variable")
    }
}

fn suffix_matches(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn zeros_like(t: &Tensor) -> Vec<f64> {
    vec![0.0; t.numel()]
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `cos`/`-sin` basis, `len x (len/2 + 1)` row-major.
fn dft_basis(len: usize) -> (Vec<f64>, Vec<f64>) {
    let bins = len / 2 + 1;
    let mut re = Vec::with_capacity(len * bins);
    let mut im = Vec::with_capacity(len * bins);
    for t in 0..len {
        for k in 0..bins {
            // Reduce k*t mod len first so large products keep full precision.
            let phase = ((k * t) % len) as f64 / len as f64;
            let angle = 2.0 * PI * phase;
            re.push(angle.cos());
            im.push(-angle.sin());
        }
    }
    (re, im)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf (inputs, targets, fixed masks).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias, positional table).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_matches(sa, sb) {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let va = self.value(a);
        let vb = self.value(b).data();
        let period = vb.len().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % period])
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::AddSuffix(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same var has same shape")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(a), c.shape()));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::MulConst(a, c.data().to_vec()), &[a]))
    }

    /// Per-row affine map with constant coefficients: `y[r, :] = x[r, :] * scale[r] + shift[r]`,
    /// rows being all axes but the last.
    pub fn affine_rows(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let va = self.value(a);
        let width = va.last_dim();
        let rows = va.numel() / width.max(1);
        if scale.len() != rows || shift.len() != rows {
            return Err(Error::shape("affine_rows", va.shape(), &[scale.len(), shift.len()]));
        }
        let mut data = Vec::with_capacity(va.numel());
        for (r, row) in va.rows().enumerate() {
            data.extend(row.iter().map(|&x| x * scale[r] + shift[r]));
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::AffineRows(a, scale.to_vec()), &[a]))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool, op: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(op, &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let batched_b = sb.len() > 2;
        if batched_b && sb[..sb.len() - 2] != *lead {
            return Err(Error::shape(op, &sa, &sb));
        }
        let batch: usize = lead.iter().product();
        let dims = MatMulDims {
            batch,
            m,
            k,
            n,
            batched_b,
            trans_b,
        };
        let lb = if trans_b { Layout::Transposed } else { Layout::Normal };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if batched_b {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        Layout::Normal,
                        &bv[i * k * n..(i + 1) * k * n],
                        lb,
                        0.0,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            } else {
                gemm(batch * m, k, n, av, Layout::Normal, bv, lb, 0.0, &mut out);
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul(a, b, dims),
            &[a, b],
        ))
    }

    /// Matrix product over the last two axes. `b` is either 2-D (shared across
    /// every leading index of `a`) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, "matmul")
    }

    /// `a * b^T` over the last two axes, with the same broadcasting as [`Tape::matmul`].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, "matmul_nt")
    }

    fn const_matmul(&mut self, x: Var, mat: Arc<Vec<f64>>, k_in: usize, k_out: usize) -> Var {
        let vx = self.value(x);
        let rows = vx.numel() / k_in;
        let mut out = vec![0.0; rows * k_out];
        gemm(rows, k_in, k_out, vx.data(), Layout::Normal, &mat, Layout::Normal, 0.0, &mut out);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = k_out;
        self.push(
            Tensor::from_parts(shape, out),
            Op::ConstMatMul { x, mat, k_in, k_out },
            &[x],
        )
    }

    /// Real-input DFT over the last axis. Returns `(re, im)`, each with the last
    /// axis replaced by `len/2 + 1` bins. Unnormalized: a constant `c` gives a DC
    /// bin of `c * len`.
    pub fn rdft(&mut self, x: Var) -> Result<(Var, Var)> {
        let shape = self.shape(x);
        let len = match shape.last() {
            Some(&l) if l >= 1 => l,
            _ => return Err(Error::shape("rdft", shape, &[])),
        };
        let bins = len / 2 + 1;
        let (re_basis, im_basis) = dft_basis(len);
        let re = self.const_matmul(x, Arc::new(re_basis), len, bins);
        let im = self.const_matmul(x, Arc::new(im_basis), len, bins);
        Ok((re, im))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if perm.len() != vx.rank() || !is_permutation(perm) {
            return Err(Error::shape("permute", vx.shape(), perm));
        }
        let (shape, data) = permute(vx.shape(), vx.data(), perm);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Permute(x, perm.to_vec()),
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Concatenation along the last axis; `a` occupies the leading columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let (wa, wb) = (va.last_dim(), vb.last_dim());
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for (ra, rb) in va.rows().zip(vb.rows()) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank >= 1") = wa + wb;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat { a, b, wa, wb },
            &[a, b],
        ))
    }

    /// Columns `start .. start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let width = vx.last_dim();
        if vx.rank() == 0 || start + len > width {
            return Err(Error::shape("slice_last", vx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(vx.numel() / width * len);
        for row in vx.rows() {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::SliceLast { x, start, width },
            &[x],
        ))
    }

    /// Appends a new last axis of size `n`, repeating each value.
    pub fn expand_last(&mut self, x: Var, n: usize) -> Var {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(vx.numel() * n);
        for &v in vx.data() {
            data.extend(std::iter::repeat_n(v, n));
        }
        let mut shape = vx.shape().to_vec();
        shape.push(n);
        self.push(Tensor::from_parts(shape, data), Op::ExpandLast(x, n), &[x])
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.all_finite() {
            return Err(Error::Numeric { op: "softmax" });
        }
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.rows() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= total;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    /// Elementwise complex modulus `sqrt(re^2 + im^2)`; gradient taken as 0 at the origin.
    pub fn hypot(&mut self, re: Var, im: Var) -> Result<Var> {
        self.same_shape("hypot", re, im)?;
        let out = self.zip_map(re, im, f64::hypot);
        Ok(self.push(out, Op::Hypot(re, im), &[re, im]))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if vx.rank() == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", vx.shape(), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.numel() / d;
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.rows() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                data.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the last axis (the axis is removed).
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 {
            return Err(Error::shape("mean_last", vx.shape(), &[]));
        }
        let d = vx.last_dim() as f64;
        let data = vx.rows().map(|r| r.iter().sum::<f64>() / d).collect();
        let shape = vx.shape()[..vx.rank() - 1].to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::MeanLast(x), &[x]))
    }

    /// Population variance over the last axis (the axis is removed).
    pub fn var_last(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mean = self.mean_last(x)?;
        let mean = self.expand_last(mean, d);
        let centered = self.sub(x, mean)?;
        let sq = self.square(centered);
        self.mean_last(sq)
    }

    /// Inverted dropout: in training mode zero each entry with probability `p`
    /// and scale survivors by `1/(1-p)`; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::usage(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        self.mul_const(x, &mask)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("backward: variable does not belong to this tape"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            self.backprop(node, g, before);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), _) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                (None, Op::Leaf) if node.requires_grad => {
                    Some(Tensor::zeros(node.value.shape()))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Accumulate into an input's gradient buffer, allocating on first touch.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let $buf = grads[v.0]
                        .get_or_insert_with(|| zeros_like(&self.nodes[v.0].value))
                        .as_mut_slice();
                    $body
                }
            }};
        }
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o += d));
                acc!(*b, |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o += d));
            }
            Op::AddSuffix(a, b) => {
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o += d));
                acc!(*b, |buf| {
                    let period = buf.len().max(1);
                    for (i, &d) in g.iter().enumerate() {
                        buf[i % period] += d;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o += d));
                acc!(*b, |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                acc!(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * vb[i];
                    }
                });
                acc!(*b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o += s * d));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o += d));
            }
            Op::MulConst(a, c) => {
                acc!(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * c[i];
                    }
                });
            }
            Op::AffineRows(a, scale) => {
                let width = node.value.last_dim();
                acc!(*a, |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i] * scale[i / width];
                    }
                });
            }
            Op::MatMul(a, b, d) => self.backprop_matmul(*a, *b, *d, g, grads),
            Op::ConstMatMul { x, mat, k_in, k_out } => {
                let rows = g.len() / k_out;
                acc!(*x, |buf| gemm(
                    rows,
                    *k_out,
                    *k_in,
                    g,
                    Layout::Normal,
                    mat,
                    Layout::Transposed,
                    1.0,
                    buf
                ));
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute(node.value.shape(), g, &inverse);
                acc!(*x, |buf| buf.iter_mut().zip(&back).for_each(|(o, &d)| *o += d));
            }
            Op::Concat { a, b, wa, wb } => {
                let w = wa + wb;
                acc!(*a, |buf| {
                    for (r, chunk) in buf.chunks_exact_mut(*wa).enumerate() {
                        for (o, &d) in chunk.iter_mut().zip(&g[r * w..r * w + wa]) {
                            *o += d;
                        }
                    }
                });
                acc!(*b, |buf| {
                    for (r, chunk) in buf.chunks_exact_mut(*wb).enumerate() {
                        for (o, &d) in chunk.iter_mut().zip(&g[r * w + wa..(r + 1) * w]) {
                            *o += d;
                        }
                    }
                });
            }
            Op::SliceLast { x, start, width } => {
                let len = node.value.last_dim();
                acc!(*x, |buf| {
                    for (r, chunk) in buf.chunks_exact_mut(*width).enumerate() {
                        for j in 0..len {
                            chunk[start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::ExpandLast(x, n) => {
                acc!(*x, |buf| {
                    for (o, chunk) in buf.iter_mut().zip(g.chunks_exact(*n)) {
                        *o += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Softmax(x) => {
                let width = node.value.last_dim();
                acc!(*x, |buf| {
                    for ((o, yr), gr) in buf
                        .chunks_exact_mut(width)
                        .zip(y.chunks_exact(width))
                        .zip(g.chunks_exact(width))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            o[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc!(*x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.nodes[x.0].value.data();
                acc!(*x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * gelu_grad(vx[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.nodes[x.0].value.data();
                acc!(*x, |buf| {
                    for i in 0..buf.len() {
                        if vx[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let vx = self.nodes[x.0].value.data();
                acc!(*x, |buf| {
                    for i in 0..buf.len() {
                        if vx[i] > 0.0 {
                            buf[i] += g[i];
                        } else if vx[i] < 0.0 {
                            buf[i] -= g[i];
                        }
                    }
                });
            }
            Op::Hypot(re, im) => {
                for part in [*re, *im] {
                    let vp = self.nodes[part.0].value.data();
                    acc!(part, |buf| {
                        for i in 0..buf.len() {
                            if y[i] > 0.0 {
                                buf[i] += g[i] * vp[i] / y[i];
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.nodes[gain.0].value.data();
                acc!(*x, |buf| {
                    let mut dxhat = vec![0.0; d];
                    for (r, o) in buf.chunks_exact_mut(d).enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            o[j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                acc!(*gain, |buf| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc!(*bias, |buf| {
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            buf[j] += gr[j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let d = g[0];
                acc!(*x, |buf| buf.iter_mut().for_each(|o| *o += d));
            }
            Op::MeanLast(x) => {
                let width = self.nodes[x.0].value.last_dim();
                let inv = 1.0 / width as f64;
                acc!(*x, |buf| {
                    for (chunk, &d) in buf.chunks_exact_mut(width).zip(g) {
                        chunk.iter_mut().for_each(|o| *o += d * inv);
                    }
                });
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, d: MatMulDims, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let MatMulDims {
            batch,
            m,
            k,
            n,
            batched_b,
            trans_b,
        } = d;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        // For dA = dC * B^T the stored B is read with the opposite layout.
        let lb_back = if trans_b { Layout::Normal } else { Layout::Transposed };

        if self.nodes[a.0].requires_grad {
            let buf = grads[a.0].get_or_insert_with(|| zeros_like(&self.nodes[a.0].value));
            if batched_b {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        Layout::Normal,
                        &bv[i * k * n..(i + 1) * k * n],
                        lb_back,
                        1.0,
                        &mut buf[i * m * k..(i + 1) * m * k],
                    );
                }
            } else {
                gemm(batch * m, n, k, g, Layout::Normal, bv, lb_back, 1.0, buf);
            }
        }
        if self.nodes[b.0].requires_grad {
            let buf = grads[b.0].get_or_insert_with(|| zeros_like(&self.nodes[b.0].value));
            let rows = if batched_b { m } else { batch * m };
            let reps = if batched_b { batch } else { 1 };
            for i in 0..reps {
                let ga = &g[i * rows * n..(i + 1) * rows * n];
                let aa = &av[i * rows * k..(i + 1) * rows * k];
                let out = &mut buf[i * k * n..(i + 1) * k * n];
                if trans_b {
                    // dB (n x k) = dC^T * A
                    gemm(n, rows, k, ga, Layout::Transposed, aa, Layout::Normal, 1.0, out);
                } else {
                    // dB (k x n) = A^T * dC
                    gemm(k, rows, n, aa, Layout::Transposed, ga, Layout::Normal, 1.0, out);
                }
            }
        }
    }
}
