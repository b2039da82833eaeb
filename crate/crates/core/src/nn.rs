//! Parameter storage, forward contexts, and the basic layers every block is made of.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::checkpoint::{Checkpoint, Entry, EntryKind};
use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Normalization epsilon shared by layer and batch norms.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum of batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Slot<T: Real> {
    name: String,
    kind: EntryKind,
    tensor: Tensor<T>,
}

/// Named parameters and buffers in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    slots: Vec<Slot<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, kind: EntryKind, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::contract(format!("parameter '{name}' registered twice")));
        }
        let tensor = Tensor::new(shape.to_vec(), data.into_iter().map(T::c).collect())?;
        self.by_name.insert(name.to_string(), self.slots.len());
        self.slots.push(Slot { name: name.to_string(), kind, tensor });
        Ok(ParamId(self.slots.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> EntryKind {
        self.slots[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(ParamId)
    }

    /// Ids of trainable entries.
    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == EntryKind::Param)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().map(|id| self.get(id).numel()).sum()
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint<T> {
        Checkpoint {
            config_hash: config_hash.to_string(),
            entries: self
                .slots
                .iter()
                .map(|s| Entry { name: s.name.clone(), kind: s.kind, shape: s.tensor.shape().to_vec(), data: s.tensor.data().to_vec() })
                .collect(),
        }
    }

    /// Overwrites every entry from `ck`; names, kinds and shapes must match exactly.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        if ck.entries.len() != self.slots.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} entries, model has {}",
                ck.entries.len(),
                self.slots.len()
            )));
        }
        for (slot, e) in self.slots.iter().zip(&ck.entries) {
            if slot.name != e.name || slot.kind != e.kind || slot.tensor.shape() != &e.shape[..] {
                return Err(Error::Checkpoint(format!(
                    "entry '{}' {:?} does not match model entry '{}' {:?}",
                    e.name,
                    e.shape,
                    slot.name,
                    slot.tensor.shape()
                )));
            }
        }
        for (slot, e) in self.slots.iter_mut().zip(&ck.entries) {
            slot.tensor.data_mut().copy_from_slice(&e.data);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self.slots.iter().map(|s| Slot { name: s.name.clone(), kind: s.kind, tensor: s.tensor.cast() }).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Registers parameters under a dotted prefix with seeded initial values.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(&full, EntryKind::Param, shape, data)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(&full, EntryKind::Buffer, shape, data)
    }

    /// Normal samples with resampling outside two standard deviations.
    pub fn trunc_normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect()
    }

    pub fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
    }
}

/// Per-forward state: the tape, lazily registered parameter leaves, and pending
/// running-statistics updates.
pub struct Ctx<'s, T: Real> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
    overrides: HashMap<ParamId, Var>,
    /// Batch-statistics normalization when set; running statistics otherwise.
    pub train: bool,
    track_grad: bool,
    bn_updates: Vec<(ParamId, ParamId, BatchStats<T>)>,
}

impl<'s, T: Real> Ctx<'s, T> {
    /// Context whose parameters are differentiable leaves.
    pub fn training(store: &'s ParamStore<T>) -> Self {
        Self::build(store, true, true)
    }

    /// Context for inference: running statistics, no gradient bookkeeping.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::build(store, false, false)
    }

    pub fn build(store: &'s ParamStore<T>, train: bool, track_grad: bool) -> Self {
        Ctx { g: Graph::new(), store, vars: vec![None; store.len()], overrides: HashMap::new(), train, track_grad, bn_updates: Vec::new() }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Substitutes `var` wherever the parameter `id` is read.
    pub fn override_param(&mut self, id: ParamId, var: Var) {
        self.overrides.insert(id, var);
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.overrides.get(&id) {
            return v;
        }
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let mut t = self.store.get(id).clone();
        t.requires_grad = self.track_grad && self.store.kind(id) == EntryKind::Param;
        let v = self.g.leaf(t);
        self.vars[id.0] = Some(v);
        v
    }

    /// The leaf registered for `id`, if it was read during this forward.
    pub fn var_of(&self, id: ParamId) -> Option<Var> {
        self.overrides.get(&id).copied().or(self.vars[id.0])
    }

    /// Gradient of every parameter read during the forward, after `g.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.store
            .params()
            .filter_map(|id| {
                let v = self.var_of(id)?;
                Some((id, self.g.grad(v)?.to_vec()))
            })
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<(ParamId, ParamId, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Folds batch statistics into running estimates with [`BN_MOMENTUM`].
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: Vec<(ParamId, ParamId, BatchStats<T>)>) {
    let m = T::c(BN_MOMENTUM);
    for (mean_id, var_id, stats) in updates {
        for (r, &b) in store.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

/// Affine map over the last axis: weight `[in, out]`, optional bias `[out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, in_dim: usize, out_dim: usize, bias: bool, std: f64) -> Result<Self> {
        let w = b.trunc_normal(in_dim * out_dim, std);
        let weight = b.param("weight", &[in_dim, out_dim], w)?;
        let bias = if bias { Some(b.param("bias", &[out_dim], vec![0.0; out_dim])?) } else { None };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        let last = *shape.last().expect("non-empty");
        if last != self.in_dim {
            return Err(Error::shape("linear", format!("input {shape:?} does not end in {}", self.in_dim)));
        }
        let rows = ctx.g.value(x).len() / last;
        let flat = if shape.len() == 2 { x } else { ctx.g.reshape(x, &[rows, last])? };
        let w = ctx.p(self.weight);
        let mut y = ctx.g.matmul(flat, w)?;
        if let Some(bias) = self.bias {
            let bv = ctx.p(bias);
            y = ctx.g.add(y, bv)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out_dim;
        if out_shape.len() == 2 {
            Ok(y)
        } else {
            ctx.g.reshape(y, &out_shape)
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.in_dim * self.out_dim) as u64
    }
}

/// Dense 2D convolution over `[batch, h, w, c]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_c: usize,
    pub out_c: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_out = kernel * kernel * out_c;
        let std = (2.0 / fan_out as f64).sqrt();
        let w = b.trunc_normal(kernel * kernel * in_c * out_c, std);
        let weight = b.param("weight", &[kernel, kernel, in_c, out_c], w)?;
        let bias = if bias { Some(b.param("bias", &[out_c], vec![0.0; out_c])?) } else { None };
        Ok(Conv2d { weight, bias, kernel, stride, pad, in_c, out_c })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let mut y = ctx.g.conv2d(x, w, self.stride, self.pad)?;
        if let Some(bias) = self.bias {
            let bv = ctx.p(bias);
            y = ctx.g.add(y, bv)?;
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.in_c * self.out_c + if self.bias.is_some() { self.out_c } else { 0 }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |d: usize| (d + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_size(h, w);
        (batch * oh * ow * self.kernel * self.kernel * self.in_c * self.out_c) as u64
    }
}

/// Depthwise 2D convolution.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub channels: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize, kernel: usize, stride: usize, bias: bool) -> Result<Self> {
        let std = (2.0 / (kernel * kernel) as f64).sqrt();
        let w = b.trunc_normal(kernel * kernel * channels, std);
        let weight = b.param("weight", &[kernel, kernel, channels], w)?;
        let bias = if bias { Some(b.param("bias", &[channels], vec![0.0; channels])?) } else { None };
        Ok(DepthwiseConv2d { weight, bias, kernel, stride, pad: kernel / 2, channels })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let mut y = ctx.g.depthwise_conv2d(x, w, self.stride, self.pad)?;
        if let Some(bias) = self.bias {
            let bv = ctx.p(bias);
            y = ctx.g.add(y, bv)?;
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.channels + if self.bias.is_some() { self.channels } else { 0 }
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        let f = |d: usize| (d + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        (batch * f(h) * f(w) * self.kernel * self.kernel * self.channels) as u64
    }
}

/// Layer normalization over the channel axis with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: b.param("weight", &[dim], vec![1.0; dim])?,
            beta: b.param("bias", &[dim], vec![0.0; dim])?,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let n = ctx.g.layer_norm(x, T::c(NORM_EPS))?;
        let (gm, bt) = (ctx.p(self.gamma), ctx.p(self.beta));
        let y = ctx.g.mul(n, gm)?;
        ctx.g.add(y, bt)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Batch normalization over the channel axis.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: b.param("weight", &[dim], vec![1.0; dim])?,
            beta: b.param("bias", &[dim], vec![0.0; dim])?,
            running_mean: b.buffer("running_mean", &[dim], vec![0.0; dim])?,
            running_var: b.buffer("running_var", &[dim], vec![1.0; dim])?,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let n = if ctx.train {
            let (n, stats) = ctx.g.batch_norm(x, T::c(NORM_EPS))?;
            ctx.bn_updates.push((self.running_mean, self.running_var, stats));
            n
        } else {
            let mean = ctx.store().get(self.running_mean).clone();
            let rstd = Tensor::new(
                [self.dim],
                ctx.store().get(self.running_var).data().iter().map(|&v| T::one() / (v + T::c(NORM_EPS)).sqrt()).collect(),
            )?;
            let (m, s) = (ctx.g.constant(mean), ctx.g.constant(rstd));
            let centred = ctx.g.sub(x, m)?;
            ctx.g.mul(centred, s)?
        };
        let (gm, bt) = (ctx.p(self.gamma), ctx.p(self.beta));
        let y = ctx.g.mul(n, gm)?;
        ctx.g.add(y, bt)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Fresh deterministic generator for a `(seed, stream)` pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_param_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(0, 0);
        let mut b = Builder::new(&mut store, &mut rng);
        let l = Linear::new(&mut b.scope("fc"), 7, 5, true, 0.02).unwrap();
        assert_eq!(l.param_count(), 7 * 5 + 5);
        assert_eq!(store.param_count(), 40);
        assert!(store.find("fc.weight").is_some() && store.find("fc.bias").is_some());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", EntryKind::Param, &[1], vec![0.0]).unwrap();
        assert!(store.add("a", EntryKind::Param, &[1], vec![0.0]).is_err());
    }

    #[test]
    fn batch_norm_eval_uses_running_statistics() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(0, 0);
        let bn = BatchNorm::new(&mut Builder::new(&mut store, &mut rng), 2).unwrap();
        store.get_mut(bn.running_mean).data_mut().copy_from_slice(&[1.0, -1.0]);
        store.get_mut(bn.running_var).data_mut().copy_from_slice(&[4.0, 1.0]);
        let mut ctx = Ctx::inference(&store);
        let x = ctx.g.constant(Tensor::new([1, 1, 1, 2], vec![3.0, -1.0]).unwrap());
        let y = bn.forward(&mut ctx, x).unwrap();
        let v = ctx.g.value(y);
        assert!((v[0] - 2.0 / (4.0 + NORM_EPS).sqrt()).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(0, 0);
        let bn = BatchNorm::new(&mut Builder::new(&mut store, &mut rng), 1).unwrap();
        let mut ctx = Ctx::training(&store);
        let x = ctx.g.constant(Tensor::new([2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut ctx, x).unwrap();
        let updates = ctx.take_bn_updates();
        apply_bn_updates(&mut store, updates);
        assert!((store.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance 2.0
        assert!((store.get(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
