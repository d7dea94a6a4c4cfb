//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every op as a node holding its forward value. Nodes are
//! appended in evaluation order, which is a topological order, so backward is a
//! single reverse sweep over the tape.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::real::{gemm, MatMut, MatRef, Real};
use super::tensor::Tensor;
use super::TensorError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    MeanAxis { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    SelectBlocks { x: Var, blocks: Vec<usize>, width: usize },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Mse(Var, Var),
    SumSqRows(Var, Var),
    SmoothL1 { a: Var, b: Var, beta: T },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Detach,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. One graph per sample or per batch; graphs share nothing.
#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(u64, ParamId), Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn rc(t: &[usize]) -> (usize, usize) {
    match t.len() {
        0 => (1, 1),
        1 => (1, t[0]),
        _ => (t[0], t[1..].iter().product()),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        rc(self.nodes[v.0].value.shape())
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = !matches!(op, Op::Detach) && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf that does receive a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter, reusing the node if it is already on the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(store.tensor(id).clone());
        self.bound.insert(key, v);
        v
    }

    /// Same as [`Graph::param`] with the parameter looked up by name.
    pub fn named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, TensorError> {
        let id = store.id(name).ok_or_else(|| TensorError::shape("param", format!("unknown parameter {name}")))?;
        Ok(self.param(store, id))
    }

    /// Parameters of `store` bound on this tape, with their node handles.
    pub fn bound_params(&self, store: &ParamStore<T>) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> =
            self.bound.iter().filter(|((uid, _), _)| *uid == store.uid()).map(|((_, id), v)| (*id, *v)).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::dense(self.value(a).data(), m, k),
            MatRef::dense(self.value(b).data(), k, n),
            T::zero(),
            MatMut::dense(&mut out, m, n),
        );
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::shape(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape(), va.data().iter().map(|&x| f(x)).collect()).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    /// `a + bias` with `bias` broadcast over rows; the only broadcasting op.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if self.value(bias).numel() != n {
            return Err(TensorError::shape("add_bias", format!("{m}x{n} + {:?}", self.value(bias).shape())));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o = *o + bb;
            }
        }
        let t = Tensor::new(self.value(a).shape(), out)?;
        self.push("add_bias", t, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.affine(a, s, 0.0)
    }

    /// `s * a + c` elementwise.
    pub fn affine(&mut self, a: Var, s: f64, c: f64) -> Result<Var, TensorError> {
        let (s, c) = (T::of(s), T::of(c));
        let t = self.map(a, |x| s * x + c);
        self.push("affine", t, Op::Affine(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", t, Op::Relu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let (c, k, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let t = self.map(a, |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push("gelu", t, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.map(a, |x| x.tanh());
        self.push("tanh", t, Op::Tanh(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `cols`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(TensorError::shape("layernorm", format!("width {n}")));
        }
        let eps = T::of(LN_EPS);
        let nf = T::of(n as f64);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        self.push("layernorm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if n == 0 {
            return Err(TensorError::shape("softmax", "no classes".into()));
        }
        let mut out = self.value(a).data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(self.value(a).shape(), out)?;
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Mean over rows (`axis = 0`, result `1 x n`) or columns (`axis = 1`, result `m x 1`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        let v = self.value(a).data();
        let t = match axis {
            0 => {
                let mut out = vec![T::zero(); n];
                for r in 0..m {
                    for j in 0..n {
                        out[j] = out[j] + v[r * n + j];
                    }
                }
                let mf = T::of(m as f64);
                Tensor::new(&[1, n], out.into_iter().map(|s| s / mf).collect())?
            }
            1 => {
                let nf = T::of(n as f64);
                let out = (0..m).map(|r| v[r * n..(r + 1) * n].iter().copied().sum::<T>() / nf).collect();
                Tensor::new(&[m, 1], out)?
            }
            _ => return Err(TensorError::shape("mean_axis", format!("axis {axis}"))),
        };
        self.push("mean_axis", t, Op::MeanAxis { x: a, axis }, &[a])
    }

    /// Concatenation of matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::shape("concat", "no operands".into()));
        }
        let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p)).collect();
        let t = match axis {
            0 => {
                let n = shapes[0].1;
                if shapes.iter().any(|s| s.1 != n) {
                    return Err(TensorError::shape("concat", format!("column mismatch {shapes:?}")));
                }
                let m: usize = shapes.iter().map(|s| s.0).sum();
                let mut out = Vec::with_capacity(m * n);
                for &p in parts {
                    out.extend_from_slice(self.value(p).data());
                }
                Tensor::new(&[m, n], out)?
            }
            1 => {
                let m = shapes[0].0;
                if shapes.iter().any(|s| s.0 != m) {
                    return Err(TensorError::shape("concat", format!("row mismatch {shapes:?}")));
                }
                let n: usize = shapes.iter().map(|s| s.1).sum();
                let mut out = Vec::with_capacity(m * n);
                for r in 0..m {
                    for (&p, s) in parts.iter().zip(&shapes) {
                        out.extend_from_slice(&self.value(p).data()[r * s.1..(r + 1) * s.1]);
                    }
                }
                Tensor::new(&[m, n], out)?
            }
            _ => return Err(TensorError::shape("concat", format!("axis {axis}"))),
        };
        self.push("concat", t, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Rows of `a` at `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        let t = if idx.is_empty() { Tensor::zeros(&[0, n]) } else { Tensor::new(&[idx.len(), n], out)? };
        self.push("gather_rows", t, Op::GatherRows { x: a, idx: idx.to_vec() }, &[a])
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if start + len > n || len == 0 {
            return Err(TensorError::shape("slice_cols", format!("[{start}, {}) of {n}", start + len)));
        }
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + start + len]);
        }
        let t = Tensor::new(&[m, len], out)?;
        self.push("slice_cols", t, Op::SliceCols { x: a, start }, &[a])
    }

    /// Per row `r`, the column block `[blocks[r] * width, (blocks[r] + 1) * width)`.
    pub fn select_blocks(&mut self, a: Var, blocks: &[usize], width: usize) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if blocks.len() != m || width == 0 || n % width != 0 || blocks.iter().any(|&b| (b + 1) * width > n) {
            return Err(TensorError::shape("select_blocks", format!("{m}x{n}, width {width}")));
        }
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(m * width);
        for (r, &b) in blocks.iter().enumerate() {
            out.extend_from_slice(&v[r * n + b * width..r * n + (b + 1) * width]);
        }
        let t = Tensor::new(&[m, width], out)?;
        self.push("select_blocks", t, Op::SelectBlocks { x: a, blocks: blocks.to_vec(), width }, &[a])
    }

    /// Max over consecutive groups of `group` rows; ties go to the earliest row.
    pub fn max_pool_rows(&mut self, a: Var, group: usize) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if group == 0 || m % group != 0 {
            return Err(TensorError::shape("max_pool_rows", format!("{m} rows in groups of {group}")));
        }
        let v = self.value(a).data();
        let g = m / group;
        let mut out = vec![T::zero(); g * n];
        let mut argmax = vec![0usize; g * n];
        for p in 0..g {
            for j in 0..n {
                let mut best = p * group;
                for r in p * group + 1..(p + 1) * group {
                    if v[r * n + j] > v[best * n + j] {
                        best = r;
                    }
                }
                out[p * n + j] = v[best * n + j];
                argmax[p * n + j] = best;
            }
        }
        let t = Tensor::new(&[g, n], out)?;
        self.push("max_pool_rows", t, Op::MaxPoolRows { x: a, argmax }, &[a])
    }

    /// Multi-head scaled dot-product attention. `q` is `mq x d`, `k` and `v` are
    /// `mk x d`; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
        let (mq, d) = self.shape(q);
        let (mk, dk) = self.shape(k);
        let (mv, dv) = self.shape(v);
        if heads == 0 || d % heads != 0 || dk != d || dv != d || mv != mk || mk == 0 {
            return Err(TensorError::shape(
                "attention",
                format!("q {mq}x{d}, k {mk}x{dk}, v {mv}x{dv}, heads {heads}"),
            ));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * mq * mk];
        let mut out = vec![T::zero(); mq * d];
        for h in 0..heads {
            let p = &mut probs[h * mq * mk..(h + 1) * mq * mk];
            gemm(
                scale,
                MatRef::col_block(qv, mq, d, h * dh, dh),
                MatRef::col_block(kv, mk, d, h * dh, dh).t(),
                T::zero(),
                MatMut::dense(p, mq, mk),
            );
            for r in 0..mq {
                softmax_in_place(&mut p[r * mk..(r + 1) * mk]);
            }
            gemm(
                T::one(),
                MatRef::dense(p, mq, mk),
                MatRef::col_block(vv, mk, d, h * dh, dh),
                T::zero(),
                MatMut::col_block(&mut out, mq, d, h * dh, dh),
            );
        }
        let t = if mq == 0 { Tensor::zeros(&[0, d]) } else { Tensor::new(&[mq, d], out)? };
        self.push("attention", t, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mse", a, b)?;
        let n = T::of(self.value(a).numel() as f64);
        let s: T = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push("mse", Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    /// Squared error summed over columns, averaged over rows.
    pub fn sum_sq_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sum_sq_rows", a, b)?;
        let (m, _) = self.shape(a);
        let s: T = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push("sum_sq_rows", Tensor::scalar(s / T::of(m as f64)), Op::SumSqRows(a, b), &[a, b])
    }

    /// Huber-style smooth L1 with transition `beta`, averaged over all elements.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var, TensorError> {
        self.same_shape("smooth_l1", a, b)?;
        let beta = T::of(beta);
        let half = T::of(0.5);
        let n = T::of(self.value(a).numel() as f64);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = (x - y).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum();
        self.push("smooth_l1", Tensor::scalar(s / n), Op::SmoothL1 { a, b, beta }, &[a, b])
    }

    /// Softmax cross-entropy against hard labels, averaged over rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (m, k) = self.shape(logits);
        if k == 0 || labels.len() != m || labels.iter().any(|&l| l >= k) {
            return Err(TensorError::shape("cross_entropy", format!("{m}x{k} logits, {} labels", labels.len())));
        }
        let v = self.value(logits).data();
        let mut probs = v.to_vec();
        let mut total = T::zero();
        for r in 0..m {
            let row = &v[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            total = total + (lse - row[labels[r]]);
            softmax_in_place(&mut probs[r * k..(r + 1) * k]);
        }
        let t = Tensor::scalar(total / T::of(m as f64));
        self.push("cross_entropy", t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    /// Identity in the forward pass, blocks gradients in the backward pass.
    pub fn detach(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).clone();
        self.push("detach", t, Op::Detach, &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::shape("backward", format!("loss shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.value(v).shape(), data).expect("gradient shape")
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        MatRef::dense(gd, m, n),
                        MatRef::dense(self.value(*b).data(), k, n).t(),
                        T::zero(),
                        MatMut::dense(&mut da, m, k),
                    );
                    self.acc(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        MatRef::dense(self.value(*a).data(), m, k).t(),
                        MatRef::dense(gd, m, n),
                        T::zero(),
                        MatMut::dense(&mut db, k, n),
                    );
                    self.acc(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let neg = gd.iter().map(|&x| -x).collect();
                self.acc(grads, *b, self.like(*b, neg));
            }
            Op::AddBias(a, bias) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let (_, n) = self.shape(*a);
                    let mut db = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                    self.acc(grads, *bias, self.like(*bias, db));
                }
            }
            Op::Affine(a, s) => {
                let d = gd.iter().map(|&x| x * *s).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&gg, &xx)| if xx > T::zero() { gg } else { T::zero() }).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Gelu(a) => {
                let (c, k, half, three) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5), T::of(3.0));
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gg, &xx)| {
                        let t = (c * (xx + k * xx * xx * xx)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * xx * xx);
                        gg * (half * (T::one() + t) + half * xx * dt)
                    })
                    .collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data();
                let d = gd.iter().zip(y).map(|(&gg, &yy)| gg * (T::one() - yy * yy)).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (m, n) = self.shape(*x);
                let gam = self.value(*gamma).data();
                let nf = T::of(n as f64);
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] = dg[j] + gd[r * n + j] * xhat[r * n + j];
                            db[j] = db[j] + gd[r * n + j];
                        }
                    }
                    self.acc(grads, *gamma, self.like(*gamma, dg));
                    self.acc(grads, *beta, self.like(*beta, db));
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); m * n];
                    for r in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let dh = gd[r * n + j] * gam[j];
                            mean_d = mean_d + dh;
                            mean_dh = mean_dh + dh * xhat[r * n + j];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for j in 0..n {
                            let dh = gd[r * n + j] * gam[j];
                            dx[r * n + j] = rstd[r] * (dh - mean_d - xhat[r * n + j] * mean_dh);
                        }
                    }
                    self.acc(grads, *x, self.like(*x, dx));
                }
            }
            Op::Softmax(a) => {
                let (m, n) = self.shape(*a);
                let y = self.nodes[i].value.data();
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    let s = row_dot(&gd[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    for j in 0..n {
                        d[r * n + j] = y[r * n + j] * (gd[r * n + j] - s);
                    }
                }
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::MeanAxis { x, axis } => {
                let (m, n) = self.shape(*x);
                let mut d = vec![T::zero(); m * n];
                if *axis == 0 {
                    let mf = T::of(m as f64);
                    for r in 0..m {
                        for j in 0..n {
                            d[r * n + j] = gd[j] / mf;
                        }
                    }
                } else {
                    let nf = T::of(n as f64);
                    for r in 0..m {
                        for j in 0..n {
                            d[r * n + j] = gd[r] / nf;
                        }
                    }
                }
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Concat { parts, axis } => {
                let (m, n) = rc(g.shape());
                let mut offset = 0;
                for &p in parts {
                    let (pm, pn) = self.shape(p);
                    if self.requires_grad(p) {
                        let d = if *axis == 0 {
                            gd[offset * n..(offset + pm) * n].to_vec()
                        } else {
                            (0..m).flat_map(|r| gd[r * n + offset..r * n + offset + pn].iter().copied()).collect()
                        };
                        self.acc(grads, p, self.like(p, d));
                    }
                    offset += if *axis == 0 { pm } else { pn };
                }
            }
            Op::GatherRows { x, idx } => {
                let (m, n) = self.shape(*x);
                let mut d = vec![T::zero(); m * n];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[src * n + j] = d[src * n + j] + gd[r * n + j];
                    }
                }
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.shape(*x);
                let len = g.cols();
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::SelectBlocks { x, blocks, width } => {
                let (m, n) = self.shape(*x);
                let mut d = vec![T::zero(); m * n];
                for (r, &b) in blocks.iter().enumerate() {
                    d[r * n + b * width..r * n + (b + 1) * width].copy_from_slice(&gd[r * width..(r + 1) * width]);
                }
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::MaxPoolRows { x, argmax } => {
                let (m, n) = self.shape(*x);
                let mut d = vec![T::zero(); m * n];
                for (o, &src) in argmax.iter().enumerate() {
                    let j = o % n;
                    d[src * n + j] = d[src * n + j] + gd[o];
                }
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(*q, *k, *v, *heads, probs, gd, grads),
            Op::Mse(a, b) => {
                let n = T::of(self.value(*a).numel() as f64);
                let two = T::of(2.0) * gd[0] / n;
                let d: Vec<T> =
                    self.value(*a).data().iter().zip(self.value(*b).data()).map(|(&x, &y)| two * (x - y)).collect();
                self.acc(grads, *b, self.like(*b, d.iter().map(|&x| -x).collect()));
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::SumSqRows(a, b) => {
                let (m, _) = self.shape(*a);
                let two = T::of(2.0) * gd[0] / T::of(m as f64);
                let d: Vec<T> =
                    self.value(*a).data().iter().zip(self.value(*b).data()).map(|(&x, &y)| two * (x - y)).collect();
                self.acc(grads, *b, self.like(*b, d.iter().map(|&x| -x).collect()));
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::SmoothL1 { a, b, beta } => {
                let n = T::of(self.value(*a).numel() as f64);
                let s = gd[0] / n;
                let d: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| {
                        let diff = x - y;
                        let local = if diff.abs() < *beta { diff / *beta } else { diff.signum() };
                        s * local
                    })
                    .collect();
                self.acc(grads, *b, self.like(*b, d.iter().map(|&x| -x).collect()));
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (m, k) = self.shape(*logits);
                let s = gd[0] / T::of(m as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] = d[r * k + l] - s;
                }
                self.acc(grads, *logits, self.like(*logits, d));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (mq, d) = self.shape(q);
        let (mk, _) = self.shape(k);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); mq * d];
        let mut dk = vec![T::zero(); mk * d];
        let mut dv = vec![T::zero(); mk * d];
        let mut dp = vec![T::zero(); mq * mk];
        for h in 0..heads {
            let p = &probs[h * mq * mk..(h + 1) * mq * mk];
            let go = MatRef::col_block(gd, mq, d, h * dh, dh);
            // dV = P^T dO
            gemm(T::one(), MatRef::dense(p, mq, mk).t(), go, T::zero(), MatMut::col_block(&mut dv, mk, d, h * dh, dh));
            // dP = dO V^T
            gemm(T::one(), go, MatRef::col_block(vv, mk, d, h * dh, dh).t(), T::zero(), MatMut::dense(&mut dp, mq, mk));
            // dS = P * (dP - rowsum(dP * P)), scaled into dS * scale
            for r in 0..mq {
                let row_p = &p[r * mk..(r + 1) * mk];
                let row_dp = &mut dp[r * mk..(r + 1) * mk];
                let s = row_dot(row_dp, row_p);
                for (x, &pp) in row_dp.iter_mut().zip(row_p) {
                    *x = pp * (*x - s) * scale;
                }
            }
            gemm(
                T::one(),
                MatRef::dense(&dp, mq, mk),
                MatRef::col_block(kv, mk, d, h * dh, dh),
                T::zero(),
                MatMut::col_block(&mut dq, mq, d, h * dh, dh),
            );
            gemm(
                T::one(),
                MatRef::dense(&dp, mq, mk).t(),
                MatRef::col_block(qv, mq, d, h * dh, dh),
                T::zero(),
                MatMut::col_block(&mut dk, mk, d, h * dh, dh),
            );
        }
        self.acc(grads, q, self.like(q, dq));
        self.acc(grads, k, self.like(k, dk));
        self.acc(grads, v, self.like(v, dv));
    }
}

fn row_dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
