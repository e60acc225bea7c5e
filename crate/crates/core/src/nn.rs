//! Parameters, the forward session that binds them to a tape, and the small
//! layer set everything else is assembled from.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named, ordered parameter set. Registration order is the checkpoint order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::invalid(alloc::format!("missing parameter {}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::shape("load_from", p.value.shape(), src.shape()));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to `value`.
    pub fn fill_prefix(&mut self, prefix: &str, value: T) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.value.data_mut().iter_mut().for_each(|v| *v = value);
            }
        }
    }
}

/// Per-parameter gradient sums aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            tensors: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    /// Adds `other` in parameter order; the summation order is fixed so
    /// reductions stay bit-reproducible.
    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.tensors.iter().flat_map(|t| t.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, T: Real> Session<'p, T> {
    /// `trainable` decides whether parameters take part in backward.
    pub fn new(params: &'p ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Runs backward and adds every parameter gradient into `grads`.
    pub fn backward_into(&mut self, loss: Var, grads: &mut Grads<T>) -> Result<()> {
        self.tape.backward(loss)?;
        for (i, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if let Some(g) = self.tape.grad(*v) {
                    for (a, &b) in grads.tensors[i].data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parameter factory used while building modules.
pub struct Init<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<'a, T: Real, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    /// Uniform in `[−bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)));
        self.store.register(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.register(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.register(name, Tensor::full(shape, T::of(value)))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.store.register(name, value)
    }
}

/// Heads and width shared by an attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if dim == 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(alloc::format!(
                "model dim {dim} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(Self { dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / libm::sqrt(in_dim as f64);
        let weight = init.uniform(&alloc::format!("{name}.weight"), &[out_dim, in_dim], bound)?;
        let bias = init.zeros(&alloc::format!("{name}.bias"), &[out_dim])?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&alloc::format!("{name}.gamma"), &[dim], 1.0)?,
            beta: init.zeros(&alloc::format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.tape.layer_norm(x, g, b)
    }
}

/// Linear → GELU → Linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &alloc::format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(init, &alloc::format!("{name}.fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.tape.gelu(h)?;
        self.fc2.forward(s, h)
    }
}

/// Multi-head attention with separate query and key/value input widths.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Attention output plus the tape node holding its weights.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        cfg: AttentionConfig,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            cfg,
            q: Linear::new(init, &alloc::format!("{name}.q"), q_dim, cfg.dim)?,
            k: Linear::new(init, &alloc::format!("{name}.k"), kv_dim, cfg.dim)?,
            v: Linear::new(init, &alloc::format!("{name}.v"), kv_dim, cfg.dim)?,
            out: Linear::new(init, &alloc::format!("{name}.out"), cfg.dim, out_dim)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, q: Var, kv: Var, mask: Option<&[bool]>) -> Result<AttentionOutput> {
        let qp = self.q.forward(s, q)?;
        let kp = self.k.forward(s, kv)?;
        let vp = self.v.forward(s, kv)?;
        let weights = s.tape.attention(qp, kp, vp, self.cfg.heads, mask)?;
        let out = self.out.forward(s, weights)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Pre-norm residual pair: `x + attn(LN(x), kv)` then `x + MLP(LN(x))`.
///
/// Key/value inputs are used as given; only the residual stream is
/// normalized. With `kv = None` the block is self-attention.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl AttentionBlock {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let cfg = AttentionConfig::new(dim, heads)?;
        Ok(Self {
            norm1: LayerNorm::new(init, &alloc::format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(init, &alloc::format!("{name}.attn"), dim, kv_dim, cfg, dim)?,
            norm2: LayerNorm::new(init, &alloc::format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(init, &alloc::format!("{name}.mlp"), dim, mlp_ratio * dim, dim)?,
        })
    }

    /// Returns the block output and the attention-weight node.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        kv: Option<Var>,
        mask: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let h = self.norm1.forward(s, x)?;
        let kv = kv.unwrap_or(h);
        let a = self.attn.forward(s, h, kv, mask)?;
        let x = s.tape.add(x, a.out)?;
        let h = self.norm2.forward(s, x)?;
        let m = self.mlp.forward(s, h)?;
        let out = s.tape.add(x, m)?;
        Ok(AttentionOutput {
            out,
            weights: a.weights,
        })
    }
}

/// Key mask letting every query see only `valid` keys.
pub fn key_mask(n_q: usize, valid: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(n_q * valid.len());
    for _ in 0..n_q {
        m.extend_from_slice(valid);
    }
    m
}
