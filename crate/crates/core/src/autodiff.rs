//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its vector-Jacobian product. Values are 64-bit. Leaves may
//! borrow tensor data (model parameters) so a forward pass never copies
//! weights. Nodes whose inputs do not require gradients are skipped during the
//! backward sweep entirely.
//!
//! All tensors are viewed as matrices: the last dimension is the column count
//! and every leading dimension folds into rows. The only broadcasting is over
//! leading rows (row bias, tiled positional terms).

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{as_matrix, numel, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    XLogX(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, seq_len: usize, heads: usize, probs: Vec<f64> },
    MixHeads { a: Var, b: Var, weight: Var, heads: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// C = alpha·op(A)·op(B) + beta·C on row-major buffers, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // A is stored m×k (or k×m when transposed), B is k×n (or n×k).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are checked above and the strides describe
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    // s = 1 + tanh(u) = 2·sigmoid(2u); 1 − tanh² = s·(2 − s)
    let s = 2.0 / (1.0 + (-2.0 * u).exp());
    let y = 0.5 * x * s;
    let dy = 0.5 * s + 0.5 * x * s * (2.0 - s) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    dst.iter_mut().for_each(|d| *d /= sum);
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Borrows a tensor as a leaf. Gradients are tracked iff the tensor
    /// requires them.
    pub fn leaf(&mut self, tensor: &'p Tensor) -> Var {
        self.leaf_with(tensor, tensor.requires_grad())
    }

    /// Borrows a tensor as a leaf with an explicit gradient flag.
    pub fn leaf_with(&mut self, tensor: &'p Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: Cow::Borrowed(tensor.data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn input(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape("input", format!("{shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Copies a node's value into a standalone tensor.
    pub fn to_tensor(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("node shape is consistent")
    }

    fn dims(&self, var: Var) -> (usize, usize) {
        as_matrix(&self.nodes[var.0].shape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.shape(a), self.shape(b))?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.shape(a), self.shape(b))?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// `x[r, :] + bias` for every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        if numel(self.shape(bias)) != n {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRowBias(x, bias), rg))
    }

    /// Adds a `[T×n]` block to every consecutive group of `T` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (rows, n) = self.dims(x);
        let (t, n2) = self.dims(tile);
        if n != n2 || rows % t != 0 {
            return Err(Error::shape(
                "add_tiled",
                format!("{:?} + tiles of {:?}", self.shape(x), self.shape(tile)),
            ));
        }
        let p = self.value(tile);
        let block = t * n;
        let out = self.value(x).iter().enumerate().map(|(i, v)| v + p[i % block]).collect();
        let rg = self.rg(&[x, tile]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddTiled(x, tile), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v).0).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if numel(self.shape(gain)) != n || numel(self.shape(bias)) != n {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; rows * n];
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (rows, n) = self.dims(x);
        let xs = self.value(x);
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            softmax_row(&xs[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (rows, n) = self.dims(x);
        let xs = self.value(x);
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..n {
                out[r * n + c] = row[c] - lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmaxRows(x), rg)
    }

    /// Elementwise `x·ln x` with `0·ln 0 = 0`. Inputs must be nonnegative.
    pub fn xlogx(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::XLogX(x), rg)
    }

    /// Column means over all rows: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (rows, n) = self.dims(x);
        let xs = self.value(x);
        let mut out = vec![0.0; n];
        for r in 0..rows {
            for c in 0..n {
                out[c] += xs[r * n + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let rg = self.rg(&[x]);
        self.push(vec![1, n], out, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Mean(x), rg)
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("gather_rows: row {bad} of {rows}")));
        }
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&xs[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![index.len(), n], out, Op::GatherRows { x, index: index.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let (_, n) = self.dims(first);
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::shape("concat_rows", format!("column counts {n} and {c}")));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let (m, _) = self.dims(first);
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} and {r}")));
            }
            n += c;
        }
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let v = self.value(p);
            for r in 0..m {
                out[r * n + off..r * n + off + c].copy_from_slice(&v[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Scaled dot-product self-attention for `heads` heads over independent
    /// sequences of `seq_len` rows.
    ///
    /// `q`, `k`, `v` are `[B·T × H·d_k]`; head `h` owns columns
    /// `h·d_k..(h+1)·d_k`. Each output row is `softmax(q_t·k_s / √d_k)_s · V`
    /// computed within its own sequence.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.dims(q);
        check_same("attention", self.shape(q), self.shape(k))?;
        check_same("attention", self.shape(q), self.shape(v))?;
        if seq_len == 0 || heads == 0 || rows % seq_len != 0 || width % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{:?} with seq_len {seq_len}, heads {heads}", self.shape(q)),
            ));
        }
        let dk = width / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let batch = rows / seq_len;
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dk;
                let pbase = (b * heads + h) * seq_len * seq_len;
                for t in 0..seq_len {
                    let qrow = &qs[(b * seq_len + t) * width + col..][..dk];
                    for (s, score) in scores.iter_mut().enumerate() {
                        let krow = &ks[(b * seq_len + s) * width + col..][..dk];
                        *score = scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let p = &mut probs[pbase + t * seq_len..pbase + (t + 1) * seq_len];
                    softmax_row(&scores, p);
                    let orow = &mut out[(b * seq_len + t) * width + col..][..dk];
                    for (s, &w) in p.iter().enumerate() {
                        let vrow = &vs[(b * seq_len + s) * width + col..][..dk];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += w * x);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(vec![rows, width], out, Op::Attention { q, k, v, seq_len, heads, probs }, rg))
    }

    /// Convex per-head mixing: column block `h` of the output is
    /// `w_h·a + (1 − w_h)·b`. `weight` holds one value per head.
    pub fn mix_heads(&mut self, a: Var, b: Var, weight: Var) -> Result<Var> {
        check_same("mix_heads", self.shape(a), self.shape(b))?;
        let heads = numel(self.shape(weight));
        let (rows, width) = self.dims(a);
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "mix_heads",
                format!("{:?} with {heads} weights", self.shape(a)),
            ));
        }
        let dk = width / heads;
        let w = self.value(weight);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; rows * width];
        for (i, o) in out.iter_mut().enumerate() {
            let wh = w[(i % width) / dk];
            *o = wh * av[i] + (1.0 - wh) * bv[i];
        }
        let rg = self.rg(&[a, b, weight]);
        Ok(self.push(vec![rows, width], out, Op::MixHeads { a, b, weight, heads }, rg))
    }

    /// Mean label-smoothed cross-entropy. The target distribution puts
    /// `1 − smoothing` on the label and spreads `smoothing` uniformly over all
    /// classes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (rows, k) = self.dims(logits);
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows of logits, {} labels", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("cross_entropy: label {bad} with {k} classes")));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Contract(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let xs = self.value(logits);
        let mut probs = vec![0.0; rows * k];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &xs[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            softmax_row(row, &mut probs[r * k..(r + 1) * k]);
            let uniform = smoothing / k as f64;
            for (c, &x) in row.iter().enumerate() {
                let target = uniform + if c == targets[r] { 1.0 - smoothing } else { 0.0 };
                total -= target * (x - lse);
            }
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs };
        Ok(self.push(vec![], vec![total / rows as f64], op, rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != numel(self.shape(root)) {
            return Err(Error::shape("backward", "seed does not match root shape"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if needs(*a) {
                    let bv = self.value(*b);
                    accumulate(&mut grads[a.0], m * k, |ga| gemm(m, n, k, g, false, bv, true, 1.0, ga));
                }
                if needs(*b) {
                    let av = self.value(*a);
                    accumulate(&mut grads[b.0], k * n, |gb| gemm(k, m, n, av, true, g, false, 1.0, gb));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(&mut grads[v.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                }
                if needs(*bias) {
                    let n = len(*bias);
                    accumulate(&mut grads[bias.0], n, |d| {
                        for (i, gv) in g.iter().enumerate() {
                            d[i % n] += gv;
                        }
                    });
                }
            }
            Op::AddTiled(x, tile) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                }
                if needs(*tile) {
                    let n = len(*tile);
                    accumulate(&mut grads[tile.0], n, |d| {
                        for (i, gv) in g.iter().enumerate() {
                            d[i % n] += gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * bv[i];
                        }
                    });
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                accumulate(&mut grads[x.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += c * x));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * gelu(xv[i]).1;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                accumulate(&mut grads[x.0], g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (rows, n) = self.dims(*x);
                let gv = self.value(*gain);
                if needs(*x) {
                    accumulate(&mut grads[x.0], rows * n, |d| {
                        let mut dxhat = vec![0.0; n];
                        for r in 0..rows {
                            let gr = &g[r * n..(r + 1) * n];
                            let hr = &xhat[r * n..(r + 1) * n];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..n {
                                dxhat[c] = gr[c] * gv[c];
                                s1 += dxhat[c];
                                s2 += dxhat[c] * hr[c];
                            }
                            let k = inv_std[r] / n as f64;
                            for c in 0..n {
                                d[r * n + c] += k * (n as f64 * dxhat[c] - s1 - hr[c] * s2);
                            }
                        }
                    });
                }
                if needs(*gain) {
                    accumulate(&mut grads[gain.0], n, |d| {
                        for (i, gv) in g.iter().enumerate() {
                            d[i % n] += gv * xhat[i];
                        }
                    });
                }
                if needs(*bias) {
                    accumulate(&mut grads[bias.0], n, |d| {
                        for (i, gv) in g.iter().enumerate() {
                            d[i % n] += gv;
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                let (rows, n) = self.dims(*x);
                let y = &node.value;
                accumulate(&mut grads[x.0], rows * n, |d| {
                    for r in 0..rows {
                        let s = r * n..(r + 1) * n;
                        let dot: f64 = s.clone().map(|i| g[i] * y[i]).sum();
                        for i in s {
                            d[i] += y[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let (rows, n) = self.dims(*x);
                let y = &node.value;
                accumulate(&mut grads[x.0], rows * n, |d| {
                    for r in 0..rows {
                        let s = r * n..(r + 1) * n;
                        let total: f64 = g[s.clone()].iter().sum();
                        for i in s {
                            d[i] += g[i] - y[i].exp() * total;
                        }
                    }
                });
            }
            Op::XLogX(x) => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * (xv[i].max(f64::MIN_POSITIVE).ln() + 1.0);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (rows, n) = self.dims(*x);
                accumulate(&mut grads[x.0], rows * n, |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += g[i % n] / rows as f64;
                    }
                });
            }
            Op::Sum(x) => {
                let n = len(*x);
                accumulate(&mut grads[x.0], n, |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let n = len(*x);
                accumulate(&mut grads[x.0], n, |d| d.iter_mut().for_each(|v| *v += g[0] / n as f64));
            }
            Op::GatherRows { x, index } => {
                let (rows, n) = self.dims(*x);
                accumulate(&mut grads[x.0], rows * n, |d| {
                    for (o, &i) in index.iter().enumerate() {
                        d[i * n..(i + 1) * n].iter_mut().zip(&g[o * n..(o + 1) * n]).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len(p);
                    if needs(p) {
                        accumulate(&mut grads[p.0], l, |d| {
                            d.iter_mut().zip(&g[off..off + l]).for_each(|(d, x)| *d += x)
                        });
                    }
                    off += l;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = as_matrix(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.dims(p);
                    if needs(p) {
                        accumulate(&mut grads[p.0], m * c, |d| {
                            for r in 0..m {
                                d[r * c..(r + 1) * c]
                                    .iter_mut()
                                    .zip(&g[r * n + off..r * n + off + c])
                                    .for_each(|(d, x)| *d += x);
                            }
                        });
                    }
                    off += c;
                }
            }
            Op::Attention { q, k, v, seq_len, heads, probs } => {
                self.attention_backward(*q, *k, *v, *seq_len, *heads, probs, g, grads);
            }
            Op::MixHeads { a, b, weight, heads } => {
                let (_, width) = self.dims(*a);
                let dk = width / heads;
                let w = self.value(*weight);
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += w[(i % width) / dk] * g[i];
                        }
                    });
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += (1.0 - w[(i % width) / dk]) * g[i];
                        }
                    });
                }
                if needs(*weight) {
                    accumulate(&mut grads[weight.0], *heads, |d| {
                        for i in 0..g.len() {
                            d[(i % width) / dk] += g[i] * (av[i] - bv[i]);
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, smoothing, probs } => {
                let (rows, k) = self.dims(*logits);
                let uniform = smoothing / k as f64;
                let scale = g[0] / rows as f64;
                accumulate(&mut grads[logits.0], rows * k, |d| {
                    for r in 0..rows {
                        for c in 0..k {
                            let target = uniform + if c == targets[r] { 1.0 - smoothing } else { 0.0 };
                            d[r * k + c] += scale * (probs[r * k + c] - target);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, width) = self.dims(q);
        let dk = width / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let batch = rows / seq_len;
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; rows * width];
        let mut dk_buf = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let mut dp = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dk;
                let pbase = (b * heads + h) * seq_len * seq_len;
                let at = |t: usize| (b * seq_len + t) * width + col;
                for t in 0..seq_len {
                    let p = &probs[pbase + t * seq_len..pbase + (t + 1) * seq_len];
                    let grow = &g[at(t)..at(t) + dk];
                    let mut dot = 0.0;
                    for s in 0..seq_len {
                        let vrow = &vs[at(s)..at(s) + dk];
                        dp[s] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        dot += dp[s] * p[s];
                        let dvrow = &mut dv[at(s)..at(s) + dk];
                        dvrow.iter_mut().zip(grow).for_each(|(d, x)| *d += p[s] * x);
                    }
                    for s in 0..seq_len {
                        let ds = p[s] * (dp[s] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for j in 0..dk {
                            dq[at(t) + j] += ds * ks[at(s) + j];
                            dk_buf[at(s) + j] += ds * qs[at(t) + j];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk_buf), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                accumulate(&mut grads[var.0], rows * width, |d| {
                    d.iter_mut().zip(&buf).for_each(|(d, x)| *d += x)
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::zeros([2, 3]);
        let mut tape = Tape::new();
        let (e, mv, zv) = (tape.leaf(&eye), tape.leaf(&m), tape.leaf(&z));
        let out = tape.matmul(e, mv).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
        let out = tape.matmul(e, zv).unwrap();
        assert_eq!(tape.shape(out), &[2, 3]);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(&a), tape.leaf(&b));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant([1, 2], vec![0.0, 0.0]).unwrap();
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y), &[0.5, 0.5]);
        let x = tape.constant([1, 2], vec![1000.0, 0.0]).unwrap();
        let y = tape.softmax_rows(x);
        assert!(tape.value(y).iter().all(|v| v.is_finite()));
        assert!(close(tape.value(y)[0], 1.0, 1e-12));
        assert!(close(tape.value(y)[1], 0.0, 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Tensor::randn([3, 4], 2.0, &mut rng);
        let x = tape.leaf(&r);
        let y = tape.softmax_rows(x);
        for row in tape.value(y).chunks(4) {
            assert!(close(row.iter().sum::<f64>(), 1.0, 1e-12));
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full([4], 1.0);
        let b = Tensor::zeros([4]);
        let c = Tensor::full([1, 4], 3.5);
        let mut tape = Tape::new();
        let (gv, bv, cv) = (tape.leaf(&g), tape.leaf(&b), tape.leaf(&c));
        let y = tape.layer_norm(cv, gv, bv).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let g2 = Tensor::full([2], 1.0);
        let b2 = Tensor::zeros([2]);
        let x = Tensor::new([1, 2], vec![1.0, -1.0]).unwrap();
        let (gv, bv, xv) = (tape.leaf(&g2), tape.leaf(&b2), tape.leaf(&x));
        let y = tape.layer_norm(xv, gv, bv).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!(close(tape.value(y)[0], expect, 1e-15));
        assert!(close(tape.value(y)[1], -expect, 1e-15));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let logits = tape.constant([1, 2], vec![0.0, 0.0]).unwrap();
        let l = tape.cross_entropy(logits, &[0], 0.2).unwrap();
        assert!(close(tape.value(l)[0], std::f64::consts::LN_2, 1e-12));

        let logits = tape.constant([2, 5], vec![0.0; 10]).unwrap();
        let l = tape.cross_entropy(logits, &[1, 4], 0.0).unwrap();
        assert!(close(tape.value(l)[0], 5f64.ln(), 1e-12));

        let logits = tape.constant([1, 3], vec![50.0, 0.0, 0.0]).unwrap();
        let l = tape.cross_entropy(logits, &[0], 0.0).unwrap();
        assert!(tape.value(l)[0] < 1e-12);

        assert!(matches!(tape.cross_entropy(logits, &[3], 0.0), Err(Error::Index(_))));
    }

    #[test]
    fn backward_simple_cases() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[1.0, 1.0, 1.0]);

        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[2.0, -4.0, 1.0]);

        assert!(matches!(tape.backward(xv), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = Tensor::full([2, 2], 1.0).with_requires_grad(true);
        let c = Tensor::full([2, 2], 2.0);
        let mut tape = Tape::new();
        let (wv, cv) = (tape.leaf(&w), tape.leaf(&c));
        let y = tape.matmul(wv, cv).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(wv).is_some());
        assert!(grads.get(cv).is_none());
    }

    #[test]
    fn attention_single_token_returns_value_row() {
        let q = Tensor::new([1, 2], vec![0.3, -1.0]).unwrap();
        let k = Tensor::new([1, 2], vec![2.0, 0.1]).unwrap();
        let v = Tensor::new([1, 2], vec![5.0, 7.0]).unwrap();
        let mut tape = Tape::new();
        let (q, k, v) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let o = tape.attention(q, k, v, 1, 1).unwrap();
        assert_eq!(tape.value(o), &[5.0, 7.0]);
    }

    #[test]
    fn mix_heads_endpoints() {
        let a = Tensor::new([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new([1, 4], vec![-1.0, -2.0, -3.0, -4.0]).unwrap();
        let w = Tensor::new([2], vec![1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let (av, bv, wv) = (tape.leaf(&a), tape.leaf(&b), tape.leaf(&w));
        let o = tape.mix_heads(av, bv, wv).unwrap();
        assert_eq!(tape.value(o), &[1.0, 2.0, -3.0, -4.0]);
    }
}
