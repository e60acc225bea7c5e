//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each forward op appends one node holding its output value and whatever it
//! needs for the backward pass. Handles ([`Var`]) index nodes and are only
//! meaningful for the tape that produced them. Gradients are computed by
//! walking the tape once in reverse from a scalar loss.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, add_into, axpy, dot};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Additive penalty applied to masked attention scores.
pub const MASK_PENALTY: f64 = -1e30;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map over rows: output row `o` is `Σ w · input[i]` over the
/// `(i, w)` pairs listed for `o`. Covers gathers, scatters, nearest and
/// bilinear resampling, and embedding lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMap {
    pub in_rows: usize,
    pub entries: Vec<Vec<(u32, f64)>>,
}

impl RowMap {
    pub fn gather(in_rows: usize, indices: &[usize]) -> Self {
        Self {
            in_rows,
            entries: indices.iter().map(|&i| vec![(i as u32, 1.0)]).collect(),
        }
    }

    /// Inverse of [`RowMap::gather`] for distinct indices: rows not listed
    /// become zero.
    pub fn scatter(out_rows: usize, indices: &[usize]) -> Self {
        let mut entries = vec![Vec::new(); out_rows];
        for (src, &dst) in indices.iter().enumerate() {
            entries[dst].push((src as u32, 1.0));
        }
        Self {
            in_rows: indices.len(),
            entries,
        }
    }

    pub fn out_rows(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Scale { x: Var, c: T },
    MulScalar { x: Var, s: Var },
    Exp { x: Var },
    Sigmoid { x: Var },
    Gelu { x: Var },
    Relu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    NormalizeRows { x: Var, norms: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    RowMix { x: Var, map: Arc<RowMap> },
    ConcatCols { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    StraightThrough { soft: Var },
    BceWithLogits { x: Var, target: Arc<Vec<T>> },
    SoftDice { x: Var, target: Arc<Vec<T>>, eps: T },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backpropagated: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
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

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Like [`Tape::grad`] but zero-filled when nothing flowed.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    /// Drops gradients so backward may run again.
    pub fn reset_grad(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    /// Head-averaged attention weights `[n_q × n_k]` recorded by an
    /// [`Tape::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, heads, probs, .. } => {
                let nq = self.value(*q).rows();
                let nk = self.value(*k).rows();
                let inv = T::of(1.0 / *heads as f64);
                let mut avg = vec![T::zero(); nq * nk];
                for h in 0..*heads {
                    axpy(inv, &probs[h * nq * nk..(h + 1) * nq * nk], &mut avg);
                }
                Some(Tensor::matrix(nq, nk, avg).expect("attention shape"))
            }
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.len() != sb.len() || sa.cols() != sb.cols() {
            return Err(Error::shape(op, sa.shape(), sb.shape()));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(name, out, op, &[x])
    }

    /// `x · wᵀ + b` with `w` stored `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims(x);
        let (n, kw) = self.dims(w);
        if k != kw {
            return Err(Error::shape("linear", self.value(x).shape(), self.value(w).shape()));
        }
        if let Some(b) = b {
            if self.value(b).len() != n {
                return Err(Error::shape("linear", self.value(w).shape(), self.value(b).shape()));
            }
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(self.value(x).data(), self.value(w).data(), m, k, n, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                add_into(bias, row);
            }
        }
        let mut shape = self.value(x).shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, Op::Linear { x, w, b }, &inputs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (kb, n) = self.dims(b);
        if k != kb {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, kb) = self.dims(b);
        if k != kb {
            return Err(Error::shape("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul_nt", value, Op::MatMulNt { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        self.push("transpose", value, Op::Transpose { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a `[n]` row to every row of an `[m × n]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.value(x).shape(), self.value(row).shape()));
        }
        let mut value = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_exact_mut(n) {
            add_into(&r, chunk);
        }
        self.push("add_row", value, Op::AddRow { x, row }, &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale { x, c })
    }

    /// Multiplies every entry by a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.value(x).shape(), self.value(s).shape()));
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v * c);
        self.push("mul_scalar", value, Op::MulScalar { x, s }, &[x, s])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.soft_exp(), Op::Exp { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu { x })
    }

    /// Row-wise softmax. Positions where `mask` is false receive an additive
    /// [`MASK_PENALTY`] and end up with exactly zero weight.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::shape("softmax", self.value(x).shape(), &[mask.len()]));
            }
            check_mask_rows(mask, n)?;
        }
        let mut value = self.value(x).clone();
        let penalty = T::of(MASK_PENALTY);
        for (i, row) in value.data_mut().chunks_exact_mut(n.max(1)).enumerate() {
            if let Some(mask) = mask {
                for (v, &keep) in row.iter_mut().zip(&mask[i * n..(i + 1) * n]) {
                    if !keep {
                        *v += penalty;
                    }
                }
            }
            kernels::softmax_in_place(row);
        }
        self.push("softmax", value, Op::Softmax { x }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        let inv_n = T::of(1.0 / n as f64);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = (var + T::of(LAYER_NORM_EPS)).sqrt().recip();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.value(x).shape(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero and pass no
    /// gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut value = self.value(x).clone();
        let mut norms = vec![T::zero(); m];
        for (i, row) in value.data_mut().chunks_exact_mut(n.max(1)).enumerate().take(m) {
            let norm = dot(row, row).sqrt();
            norms[i] = norm;
            if norm > T::zero() {
                let inv = norm.recip();
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        self.push("normalize_rows", value, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Multi-head scaled dot-product attention over already projected
    /// `q [n_q × d]`, `k [n_k × d]`, `v [n_k × d]`. `mask[i·n_k + j]` false
    /// forbids query `i` from attending key `j`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        let (nv, dv) = self.dims(v);
        if dk != d || dv != d || nv != nk {
            return Err(Error::shape("attention", self.value(q).shape(), self.value(k).shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid("attention: model dim must be divisible by heads"));
        }
        if let Some(mask) = mask {
            if mask.len() != nq * nk {
                return Err(Error::shape("attention", &[nq, nk], &[mask.len()]));
            }
            check_mask_rows(mask, nk)?;
        }
        let hd = d / heads;
        let scale = T::of(1.0 / libm::sqrt(hd as f64));
        let penalty = T::of(MASK_PENALTY);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..nq {
                let qi = &qd[i * d + off..i * d + off + hd];
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                for j in 0..nk {
                    p[j] = dot(qi, &kd[j * d + off..j * d + off + hd]) * scale;
                    if let Some(mask) = mask {
                        if !mask[i * nk + j] {
                            p[j] += penalty;
                        }
                    }
                }
                kernels::softmax_in_place(p);
                let o = &mut out[i * d + off..i * d + off + hd];
                for j in 0..nk {
                    if p[j] != T::zero() {
                        axpy(p[j], &vd[j * d + off..j * d + off + hd], o);
                    }
                }
            }
        }
        let value = Tensor::matrix(nq, d, out)?;
        self.push("attention", value, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Applies a [`RowMap`] to the rows of `x`.
    pub fn row_mix(&mut self, x: Var, map: Arc<RowMap>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if map.in_rows != m {
            return Err(Error::shape("row_mix", self.value(x).shape(), &[map.in_rows]));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); map.out_rows() * n];
        for (o, entries) in map.entries.iter().enumerate() {
            let orow = &mut out[o * n..(o + 1) * n];
            for &(i, w) in entries {
                let i = i as usize;
                if i >= m {
                    return Err(Error::shape("row_mix", &[m, n], &[i]));
                }
                axpy(T::of(w), &src[i * n..(i + 1) * n], orow);
            }
        }
        let value = Tensor::matrix(map.out_rows(), n, out)?;
        self.push("row_mix", value, Op::RowMix { x, map }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let m = self.value(x).rows();
        self.row_mix(x, Arc::new(RowMap::gather(m, rows)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims(a);
        let (mb, nb) = self.dims(b);
        if ma != mb {
            return Err(Error::shape("concat_cols", self.value(a).shape(), self.value(b).shape()));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            out.extend_from_slice(&da[i * na..(i + 1) * na]);
            out.extend_from_slice(&db[i * nb..(i + 1) * nb]);
        }
        let value = Tensor::matrix(ma, na + nb, out)?;
        self.push("concat_cols", value, Op::ConcatCols { a, b }, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len().max(1) as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Straight-through estimator: the forward value is the hard 0/1 `mask`,
    /// the backward pass routes the incoming gradient into `soft` at the
    /// positions the mask selects.
    pub fn straight_through(&mut self, soft: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.value(soft).shape().to_vec();
        if mask.len() != self.value(soft).len() {
            return Err(Error::shape("straight_through", &shape, &[mask.len()]));
        }
        let data = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        let value = Tensor::new(&shape, data)?;
        self.push("straight_through", value, Op::StraightThrough { soft }, &[soft])
    }

    /// Mean binary cross-entropy of logits against 0/1 (or soft) targets.
    pub fn bce_with_logits(&mut self, x: Var, target: Arc<Vec<T>>) -> Result<Var> {
        let t = self.value(x);
        if target.len() != t.len() {
            return Err(Error::shape("bce_with_logits", t.shape(), &[target.len()]));
        }
        let n = T::of(t.len().max(1) as f64);
        let total: T = t
            .data()
            .iter()
            .zip(target.iter())
            .map(|(&z, &y)| kernels::softplus(z) - z * y)
            .sum();
        self.push("bce_with_logits", Tensor::scalar(total / n), Op::BceWithLogits { x, target }, &[x])
    }

    /// Soft Dice loss `1 − (2Σpq + ε)/(Σp + Σq + ε)` with `p = σ(x)`.
    pub fn soft_dice(&mut self, x: Var, target: Arc<Vec<T>>, eps: T) -> Result<Var> {
        let t = self.value(x);
        if target.len() != t.len() {
            return Err(Error::shape("soft_dice", t.shape(), &[target.len()]));
        }
        let (mut inter, mut psum) = (T::zero(), T::zero());
        for (&z, &y) in t.data().iter().zip(target.iter()) {
            let p = kernels::sigmoid(z);
            inter += p * y;
            psum += p;
        }
        let qsum: T = target.iter().copied().sum();
        let loss = T::one() - (T::of(2.0) * inter + eps) / (psum + qsum + eps);
        self.push("soft_dice", Tensor::scalar(loss), Op::SoftDice { x, target, eps }, &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        self.backpropagated = true;
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) {
        // Ops with saved buffers are cloned out so `self` stays free for
        // gradient accumulation. Saved buffers are behind Vec; the clone is
        // paid only for those ops.
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (m, k) = self.dims(x);
                let n = self.dims(w).0;
                if self.requires_grad(x) {
                    let wd = self.value(w).data().to_vec();
                    let dx = self.acc(x).unwrap();
                    kernels::matmul_acc(g, &wd, m, n, k, dx);
                }
                if self.requires_grad(w) {
                    let xd = self.value(x).data().to_vec();
                    let dw = self.acc(w).unwrap();
                    kernels::matmul_tn_acc(g, &xd, m, n, k, dw);
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(b) {
                        for row in g.chunks_exact(n) {
                            add_into(row, db);
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                if self.requires_grad(a) {
                    let bd = self.value(b).data().to_vec();
                    let da = self.acc(a).unwrap();
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] += dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.requires_grad(b) {
                    let ad = self.value(a).data().to_vec();
                    let db = self.acc(b).unwrap();
                    kernels::matmul_tn_acc(&ad, g, m, k, n, db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).0;
                if self.requires_grad(a) {
                    let bd = self.value(b).data().to_vec();
                    let da = self.acc(a).unwrap();
                    kernels::matmul_acc(g, &bd, m, n, k, da);
                }
                if self.requires_grad(b) {
                    let ad = self.value(a).data().to_vec();
                    let db = self.acc(b).unwrap();
                    kernels::matmul_tn_acc(g, &ad, m, n, k, db);
                }
            }
            Op::Transpose { x } => {
                let (m, n) = self.dims(x);
                if let Some(dx) = self.acc(x) {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.acc(x) {
                    add_into(g, dx);
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.acc(a) {
                    add_into(g, da);
                }
                if let Some(db) = self.acc(b) {
                    add_into(g, db);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = self.acc(a) {
                    add_into(g, da);
                }
                if let Some(db) = self.acc(b) {
                    axpy(-T::one(), g, db);
                }
            }
            Op::Mul { a, b } => {
                let bd = self.value(b).data().to_vec();
                let ad = self.value(a).data().to_vec();
                if let Some(da) = self.acc(a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(&bd) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.acc(b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(&ad) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow { x, row } => {
                let n = self.value(x).cols();
                if let Some(dx) = self.acc(x) {
                    add_into(g, dx);
                }
                if let Some(dr) = self.acc(row) {
                    for chunk in g.chunks_exact(n) {
                        add_into(chunk, dr);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.acc(x) {
                    axpy(c, g, dx);
                }
            }
            Op::MulScalar { x, s } => {
                let c = self.value(s).item();
                let total = dot(g, self.value(x).data());
                if let Some(dx) = self.acc(x) {
                    axpy(c, g, dx);
                }
                if let Some(ds) = self.acc(s) {
                    ds[0] += total;
                }
            }
            Op::Exp { x } => {
                let y = self.nodes[idx].value.data().to_vec();
                if let Some(dx) = self.acc(x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(&y) {
                        *d += gi * yi;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[idx].value.data().to_vec();
                if let Some(dx) = self.acc(x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(&y) {
                        *d += gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(x).data().to_vec();
                if let Some(dx) = self.acc(x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(&xv) {
                        *d += gi * gelu_grad(xi);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(x).data().to_vec();
                if let Some(dx) = self.acc(x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(&xv) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let n = self.value(x).cols();
                let y = self.nodes[idx].value.data().to_vec();
                if let Some(dx) = self.acc(x) {
                    for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (m, n) = self.dims(x);
                let gm = self.value(gamma).data().to_vec();
                if let Some(dg) = self.acc(gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(db) = self.acc(beta) {
                    for row in g.chunks_exact(n) {
                        add_into(row, db);
                    }
                }
                if let Some(dx) = self.acc(x) {
                    let inv_n = T::of(1.0 / n as f64);
                    let mut dh = vec![T::zero(); n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dh[j] = gr[j] * gm[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_n;
                        let mean_dhh = dot(&dh, hr) * inv_n;
                        for j in 0..n {
                            dx[i * n + j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let n = self.value(x).cols();
                let y = self.nodes[idx].value.data().to_vec();
                if let Some(dx) = self.acc(x) {
                    for (i, &norm) in norms.iter().enumerate() {
                        if norm <= T::zero() {
                            continue;
                        }
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s = dot(yr, gr);
                        let inv = norm.recip();
                        for j in 0..n {
                            dx[i * n + j] += (gr[j] - yr[j] * s) * inv;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(q, k, v, heads, &probs, g),
            Op::RowMix { x, map } => {
                let n = self.value(x).cols();
                if let Some(dx) = self.acc(x) {
                    for (o, entries) in map.entries.iter().enumerate() {
                        let gr = &g[o * n..(o + 1) * n];
                        for &(i, w) in entries {
                            let i = i as usize;
                            axpy(T::of(w), gr, &mut dx[i * n..(i + 1) * n]);
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (m, na) = self.dims(a);
                let nb = self.dims(b).1;
                let w = na + nb;
                if let Some(da) = self.acc(a) {
                    for i in 0..m {
                        add_into(&g[i * w..i * w + na], &mut da[i * na..(i + 1) * na]);
                    }
                }
                if let Some(db) = self.acc(b) {
                    for i in 0..m {
                        add_into(&g[i * w + na..(i + 1) * w], &mut db[i * nb..(i + 1) * nb]);
                    }
                }
            }
            Op::Sum { x } => {
                let g0 = g[0];
                if let Some(dx) = self.acc(x) {
                    dx.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean { x } => {
                let n = T::of(self.value(x).len().max(1) as f64);
                let g0 = g[0] / n;
                if let Some(dx) = self.acc(x) {
                    dx.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::StraightThrough { soft } => {
                let hard = self.nodes[idx].value.data().to_vec();
                if let Some(ds) = self.acc(soft) {
                    for ((d, &gi), &h) in ds.iter_mut().zip(g).zip(&hard) {
                        *d += gi * h;
                    }
                }
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.value(x).data().to_vec();
                let scale = g[0] / T::of(xv.len().max(1) as f64);
                if let Some(dx) = self.acc(x) {
                    for ((d, &z), &y) in dx.iter_mut().zip(&xv).zip(target.iter()) {
                        *d += scale * (kernels::sigmoid(z) - y);
                    }
                }
            }
            Op::SoftDice { x, target, eps } => {
                let xv = self.value(x).data().to_vec();
                let p: Vec<T> = xv.iter().map(|&z| kernels::sigmoid(z)).collect();
                let inter: T = p.iter().zip(target.iter()).map(|(&a, &b)| a * b).sum();
                let psum: T = p.iter().copied().sum();
                let qsum: T = target.iter().copied().sum();
                let two = T::of(2.0);
                let num = two * inter + eps;
                let den = psum + qsum + eps;
                let g0 = g[0];
                if let Some(dx) = self.acc(x) {
                    for ((d, &pi), &qi) in dx.iter_mut().zip(&p).zip(target.iter()) {
                        let dl_dp = -(two * qi * den - num) / (den * den);
                        *d += g0 * dl_dp * pi * (T::one() - pi);
                    }
                }
            }
        }
    }

    fn attention_backward(&mut self, q: Var, k: Var, v: Var, heads: usize, probs: &[T], g: &[T]) {
        let (nq, d) = self.dims(q);
        let nk = self.dims(k).0;
        let hd = d / heads;
        let scale = T::of(1.0 / libm::sqrt(hd as f64));
        let qd = self.value(q).data().to_vec();
        let kd = self.value(k).data().to_vec();
        let vd = self.value(v).data().to_vec();
        let mut dq = vec![T::zero(); nq * d];
        let mut dk = vec![T::zero(); nk * d];
        let mut dv = vec![T::zero(); nk * d];
        let mut ds = vec![T::zero(); nk];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..nq {
                let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let gi = &g[i * d + off..i * d + off + hd];
                let mut s = T::zero();
                for j in 0..nk {
                    let dp = dot(gi, &vd[j * d + off..j * d + off + hd]);
                    ds[j] = dp;
                    s += p[j] * dp;
                }
                for j in 0..nk {
                    if p[j] == T::zero() {
                        continue;
                    }
                    axpy(p[j], gi, &mut dv[j * d + off..j * d + off + hd]);
                    let dsj = p[j] * (ds[j] - s) * scale;
                    axpy(dsj, &kd[j * d + off..j * d + off + hd], &mut dq[i * d + off..i * d + off + hd]);
                    axpy(dsj, &qd[i * d + off..i * d + off + hd], &mut dk[j * d + off..j * d + off + hd]);
                }
            }
        }
        if let Some(acc) = self.acc(q) {
            add_into(&dq, acc);
        }
        if let Some(acc) = self.acc(k) {
            add_into(&dk, acc);
        }
        if let Some(acc) = self.acc(v) {
            add_into(&dv, acc);
        }
    }
}

fn check_mask_rows(mask: &[bool], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::DegenerateMask { row: 0 });
    }
    for (row, chunk) in mask.chunks_exact(n).enumerate() {
        if !chunk.iter().any(|&m| m) {
            return Err(Error::DegenerateMask { row });
        }
    }
    Ok(())
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_A) * (x + T::of(GELU_B) * x * x * x);
    T::of(0.5) * x * (T::one() + u.soft_tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let a = T::of(GELU_A);
    let b = T::of(GELU_B);
    let t = (a * (x + b * x * x * x)).soft_tanh();
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * a * (T::one() + T::of(3.0) * b * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    /// Analytic vs numeric gradient of `sum(w ⊙ f(x))` for a fixed random `w`.
    fn check(x: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let y = f(&mut tape, v);
            rand_tensor(&mut rng, tape.value(y).shape())
        };
        let eval = |tape: &mut Tape<f64>, x: &Tensor<f64>, grad: bool| {
            let v = tape.leaf(x.clone(), grad);
            let y = f(tape, v);
            let w = tape.constant(probe.clone());
            let p = tape.mul(y, w).unwrap();
            (v, tape.sum(p).unwrap())
        };
        let mut tape = Tape::new();
        let (v, loss) = eval(&mut tape, &x, true);
        tape.backward(loss).unwrap();
        let analytic = tape.grad_or_zeros(v);
        let numeric = finite_difference_gradient(
            |x| {
                let mut tape = Tape::new();
                let (_, loss) = eval(&mut tape, x, false);
                tape.value(loss).item()
            },
            &x,
            1e-6,
        );
        let err = relative_error(&analytic, &numeric, 1e-3);
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
        let a = tape.constant(t(&[1, 1], &[2.0]));
        let b = tape.constant(t(&[1, 1], &[5.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[10.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2]));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.at(i, k) * b.at(k, j);
                }
                assert!((tape.value(c).at(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let y = tape.softmax(x, None).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 5]);
        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let xs = tape.constant(a.map(|v| v + 17.25));
        let (y, ys) = (tape.softmax(x, None).unwrap(), tape.softmax(xs, None).unwrap());
        assert!(tape.value(y).max_abs_diff(tape.value(ys)) <= 1e-9);
        for r in 0..3 {
            assert!((tape.value(y).row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[5.0, 1.0, 2.0, 0.0, 9.0, 3.0]));
        let mask = [false, true, true, true, false, false];
        let y = tape.softmax(x, Some(&mask)).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(0, 0), 0.0);
        assert_eq!(v.at(1, 1), 0.0);
        assert_eq!(v.at(1, 2), 0.0);
        assert_eq!(v.at(1, 0), 1.0);
    }

    #[test]
    fn degenerate_mask_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let err = tape.softmax(x, Some(&[true, false, false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask { row: 1 }));
    }

    fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, mask: Option<&[bool]>) -> Vec<f64> {
        let (nq, d, nk) = (q.rows(), q.cols(), k.rows());
        let hd = d / heads;
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            for i in 0..nq {
                let mut s = vec![f64::NEG_INFINITY; nk];
                for j in 0..nk {
                    if mask.map_or(true, |m| m[i * nk + j]) {
                        s[j] = (0..hd).map(|c| q.at(i, h * hd + c) * k.at(j, h * hd + c)).sum::<f64>() / (hd as f64).sqrt();
                    }
                }
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..nk {
                    for c in 0..hd {
                        out[i * d + h * hd + c] += e[j] / z * v.at(j, h * hd + c);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_singleton_returns_value() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[0.3, -1.0, 2.0, 0.5]));
        let y = tape.attention(x, x, x, 2, None).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn attention_single_kept_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let q = tape.constant(rand_tensor(&mut rng, &[2, 4]));
        let k = tape.constant(rand_tensor(&mut rng, &[3, 4]));
        let v = tape.constant(rand_tensor(&mut rng, &[3, 4]));
        let mask = [false, true, false, false, true, false];
        let y = tape.attention(q, k, v, 2, Some(&mask)).unwrap();
        for i in 0..2 {
            assert_eq!(tape.value(y).row(i), tape.value(v).row(1));
        }
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4]));
        for heads in [1, 2, 4] {
            let mut tape = Tape::new();
            let (vq, vk, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let y = tape.attention(vq, vk, vv, heads, None).unwrap();
            let oracle = attention_oracle(&q, &k, &v, heads, None);
            for (a, b) in tape.value(y).data().iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
        let mask = [true, false, true, false, true, true, true, true, false];
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let y = tape.attention(vq, vk, vv, 2, Some(&mask)).unwrap();
        let oracle = attention_oracle(&q, &k, &v, 2, Some(&mask));
        for (a, b) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-10);
        }
        let w = tape.attention_weights(y).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                assert_eq!(w.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::<f64>::zeros(&[2, 3, 2]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_of_square() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(Error::Detached)));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::AlreadyBackpropagated)));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0f64));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gradients_of_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let other = rand_tensor(&mut rng, &[3, 4]);
        let row = rand_tensor(&mut rng, &[4]);
        check(x.clone(), |t, v| t.exp(v).unwrap());
        check(x.clone(), |t, v| t.sigmoid(v).unwrap());
        check(x.clone(), |t, v| t.gelu(v).unwrap());
        check(x.clone(), |t, v| t.scale(v, 2.5).unwrap());
        check(x.clone(), |t, v| t.transpose(v).unwrap());
        check(x.clone(), |t, v| t.reshape(v, &[2, 6]).unwrap());
        check(x.clone(), |t, v| t.mean(v).unwrap());
        check(x.clone(), |t, v| {
            let o = t.constant(other.clone());
            t.mul(v, o).unwrap()
        });
        check(x.clone(), |t, v| {
            let o = t.constant(other.clone());
            t.sub(o, v).unwrap()
        });
        check(x.clone(), |t, v| {
            let r = t.constant(row.clone());
            t.add_row(v, r).unwrap()
        });
        check(row.clone(), |t, r| {
            let o = t.constant(other.clone());
            t.add_row(o, r).unwrap()
        });
        check(Tensor::scalar(0.7), |t, s| {
            let o = t.constant(other.clone());
            t.mul_scalar(o, s).unwrap()
        });
    }

    #[test]
    fn gradients_of_matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let bt = rand_tensor(&mut rng, &[5, 4]);
        let w = rand_tensor(&mut rng, &[2, 4]);
        let bias = rand_tensor(&mut rng, &[2]);
        check(a.clone(), |t, v| {
            let c = t.constant(b.clone());
            t.matmul(v, c).unwrap()
        });
        check(b.clone(), |t, v| {
            let c = t.constant(a.clone());
            t.matmul(c, v).unwrap()
        });
        check(a.clone(), |t, v| {
            let c = t.constant(bt.clone());
            t.matmul_nt(v, c).unwrap()
        });
        check(bt.clone(), |t, v| {
            let c = t.constant(a.clone());
            t.matmul_nt(c, v).unwrap()
        });
        check(a.clone(), |t, v| {
            let (w, b) = (t.constant(w.clone()), t.constant(bias.clone()));
            t.linear(v, w, Some(b)).unwrap()
        });
        check(w.clone(), |t, v| {
            let (x, b) = (t.constant(a.clone()), t.constant(bias.clone()));
            t.linear(x, v, Some(b)).unwrap()
        });
        check(bias.clone(), |t, v| {
            let (x, w) = (t.constant(a.clone()), t.constant(w.clone()));
            t.linear(x, w, Some(v)).unwrap()
        });
        check(a.clone(), |t, v| {
            let c = t.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(7), &[3, 2]));
            t.concat_cols(c, v).unwrap()
        });
    }

    #[test]
    fn gradients_of_normalizing_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let g = rand_tensor(&mut rng, &[5]);
        let b = rand_tensor(&mut rng, &[5]);
        check(x.clone(), |t, v| t.softmax(v, None).unwrap());
        let mask = [true, false, true, true, false, false, true, true, true, true, true, false, false, false, true];
        check(x.clone(), |t, v| t.softmax(v, Some(&mask)).unwrap());
        check(x.clone(), |t, v| t.normalize_rows(v).unwrap());
        check(x.clone(), |t, v| {
            let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
            t.layer_norm(v, g, b).unwrap()
        });
        check(g.clone(), |t, v| {
            let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
            t.layer_norm(x, v, b).unwrap()
        });
        check(b.clone(), |t, v| {
            let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
            t.layer_norm(x, g, v).unwrap()
        });
    }

    #[test]
    fn normalize_zero_row_passes_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let y = tape.normalize_rows(x).unwrap();
        assert!(tape.value(y).max_abs_diff(&t(&[2, 2], &[0.0, 0.0, 0.6, 0.8])) < 1e-15);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(&tape.grad(x).unwrap().data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn gradients_of_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = rand_tensor(&mut rng, &[3, 4]);
        let k = rand_tensor(&mut rng, &[5, 4]);
        let v = rand_tensor(&mut rng, &[5, 4]);
        let mask: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
        for m in [None, Some(mask.as_slice())] {
            check(q.clone(), |t, x| {
                let (k, v) = (t.constant(k.clone()), t.constant(v.clone()));
                t.attention(x, k, v, 2, m).unwrap()
            });
            check(k.clone(), |t, x| {
                let (q, v) = (t.constant(q.clone()), t.constant(v.clone()));
                t.attention(q, x, v, 2, m).unwrap()
            });
            check(v.clone(), |t, x| {
                let (q, k) = (t.constant(q.clone()), t.constant(k.clone()));
                t.attention(q, k, x, 2, m).unwrap()
            });
        }
    }

    #[test]
    fn gradients_of_row_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let map = Arc::new(RowMap {
            in_rows: 4,
            entries: vec![vec![(0, 0.5), (3, 0.25)], vec![], vec![(2, 1.0)], vec![(1, -2.0), (1, 0.5)], vec![(0, 1.0)]],
        });
        check(x.clone(), |t, v| t.row_mix(v, map.clone()).unwrap());
        check(x.clone(), |t, v| t.gather_rows(v, &[3, 0, 0]).unwrap());
    }

    #[test]
    fn gradients_of_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[6, 1]).map(|v| 3.0 * v);
        let target = Arc::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        check(x.clone(), |t, v| t.bce_with_logits(v, target.clone()).unwrap());
        check(x.clone(), |t, v| t.soft_dice(v, target.clone(), 1.0).unwrap());
    }

    #[test]
    fn straight_through_forward_is_hard_and_backward_is_masked() {
        let mut tape = Tape::new();
        let soft = tape.variable(t(&[1, 3], &[0.2, 0.5, 0.3]));
        let hard = tape.straight_through(soft, &[false, true, false]).unwrap();
        assert_eq!(tape.value(hard).data(), &[0.0, 1.0, 0.0]);
        let w = tape.constant(t(&[1, 3], &[2.0, 3.0, 4.0]));
        let p = tape.mul(hard, w).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(soft).unwrap().data(), &[0.0, 3.0, 0.0]);
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[4]));
        let l = tape.bce_with_logits(x, Arc::new(vec![1.0, 1.0, 0.0, 0.0])).unwrap();
        assert!((tape.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
        let x = tape.constant(t(&[2], &[40.0, -40.0]));
        let l = tape.bce_with_logits(x, Arc::new(vec![1.0, 0.0])).unwrap();
        assert!(tape.value(l).item() < 1e-15);
    }
}
