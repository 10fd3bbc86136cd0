//! Parameter storage and the elementary layers the backbones are built from.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{BatchStats, Element, NormMode, Tape, Tensor, Var};

/// Batchnorm epsilon used throughout.
pub const BN_EPS: f64 = 1e-3;
/// Weight on the previous running statistic in the batchnorm moving average.
pub const BN_MOMENTUM: f64 = 0.99;
pub const LN_EPS: f64 = 1e-6;
/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(pub usize);

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Backbone,
    EmbeddingHead,
    ClassHead(usize),
}

impl Group {
    pub fn is_head(self) -> bool {
        !matches!(self, Group::Backbone)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    pub group: Group,
    /// Index into [`ParamStore::layers`].
    pub layer: usize,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// One elementary parameterized layer (a conv, a norm, a dense projection).
#[derive(Clone, Debug)]
pub struct LayerInfo {
    pub name: String,
    pub group: Group,
    pub params: Vec<ParamId>,
}

/// Flat storage of every parameter and buffer of a model, in construction order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
    pub buffers: Vec<Buffer<T>>,
    pub layers: Vec<LayerInfo>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new(), layers: Vec::new() }
    }

    pub fn begin_layer(&mut self, name: impl Into<String>, group: Group) -> usize {
        self.layers.push(LayerInfo { name: name.into(), group, params: Vec::new() });
        self.layers.len() - 1
    }

    /// Adds a parameter to the most recently begun layer.
    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let layer = self.layers.len() - 1;
        let group = self.layers[layer].group;
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.into(), value, trainable: true, group, layer });
        self.layers[layer].params.push(id);
        id
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer { name: name.into(), value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_where(&self, pred: impl Fn(&Param<T>) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.value.len()).sum()
    }

    /// Digest of the exact values of all parameters selected by `pred`.
    pub fn checksum(&self, pred: impl Fn(&Param<T>) -> bool) -> u64 {
        crate::tensor::digest(self.params.iter().filter(|p| pred(p)).flat_map(|p| p.value.data()))
    }

    /// Digest of every parameter and buffer.
    pub fn checksum_all(&self) -> u64 {
        crate::tensor::digest(
            self.params.iter().flat_map(|p| p.value.data()).chain(self.buffers.iter().flat_map(|b| b.value.data())),
        )
    }

    /// Folds one batch's statistics into the running averages:
    /// `running = momentum · running + (1 − momentum) · batch`.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>, momentum: f64) {
        let m = T::of(momentum);
        let one_minus = T::one() - m;
        for u in updates {
            for (buf, fresh) in [(u.mean, u.stats.mean), (u.var, u.stats.var)] {
                for (r, b) in self.buffers[buf.0].value.data_mut().iter_mut().zip(fresh) {
                    *r = m * *r + one_minus * b;
                }
            }
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                    group: p.group,
                    layer: p.layer,
                })
                .collect(),
            buffers: self.buffers.iter().map(|b| Buffer { name: b.name.clone(), value: b.value.cast() }).collect(),
            layers: self.layers.clone(),
        }
    }
}

/// Batch statistics destined for a pair of running-stat buffers.
pub struct StatUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<T>,
}

/// Per-forward binding of a [`ParamStore`] onto a tape.
pub struct Ctx<'t, 'm, T: Element> {
    pub tape: &'t Tape<T>,
    pub store: &'m ParamStore<T>,
    vars: Vec<Var<'t, T>>,
    /// Batch statistics in norms, and running-stat updates recorded.
    pub train: bool,
    updates: RefCell<Vec<StatUpdate<T>>>,
}

impl<'t, 'm, T: Element> Ctx<'t, 'm, T> {
    /// Binds all parameters. With `grads`, trainable parameters become
    /// gradient-requiring leaves; otherwise everything is constant.
    pub fn new(tape: &'t Tape<T>, store: &'m ParamStore<T>, train: bool, grads: bool) -> Self {
        let vars = store.params.iter().map(|p| tape.leaf(p.value.clone(), grads && p.trainable)).collect();
        Ctx { tape, store, vars, train, updates: RefCell::new(Vec::new()) }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }
}

pub(crate) fn truncated_normal<T: Element>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

/// He-style init for convolutions feeding a norm; truncated normal scaled by fan-in.
pub(crate) fn conv_init<T: Element>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    truncated_normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        store.begin_layer(name, group);
        let weight = store.add_param(format!("{name}.weight"), conv_init(vec![cout, cin, k, k], rng));
        Conv2d { weight, stride, padding: k / 2 }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(&ctx.var(self.weight), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, group: Group, channels: usize) -> Self {
        store.begin_layer(name, group);
        let gamma = store.add_param(format!("{name}.gamma"), Tensor::ones(vec![channels]));
        let beta = store.add_param(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels]));
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::ones(vec![channels]));
        BatchNorm { gamma, beta, running_mean, running_var }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        let eps = T::of(BN_EPS);
        if ctx.train {
            let (y, stats) = x.batch_norm(&gamma, &beta, eps, NormMode::Batch)?;
            if let Some(stats) = stats {
                ctx.updates.borrow_mut().push(StatUpdate { mean: self.running_mean, var: self.running_var, stats });
            }
            Ok(y)
        } else {
            let mode = NormMode::Running {
                mean: ctx.store.buffer(self.running_mean).data(),
                var: ctx.store.buffer(self.running_var).data(),
            };
            Ok(x.batch_norm(&gamma, &beta, eps, mode)?.0)
        }
    }
}

/// Fully connected projection `x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        store.begin_layer(name, group);
        let weight = store.add_param(format!("{name}.weight"), truncated_normal(vec![input, output], INIT_STD, rng));
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(vec![output]));
        Dense { weight, bias, input, output }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.last() != Some(&self.input) {
            return Err(dim_err!("dense expects last axis {}, got {:?}", self.input, shape));
        }
        let rows = x.value().len() / self.input;
        let y = x.reshape(&[rows, self.input])?.matmul(&ctx.var(self.weight))?.add_bias(&ctx.var(self.bias))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.output;
        y.reshape(&out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, group: Group, d: usize) -> Self {
        store.begin_layer(name, group);
        LayerNorm {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(vec![d])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&ctx.var(self.gamma), &ctx.var(self.beta), T::of(LN_EPS))
    }
}

/// Multi-head scaled dot-product self-attention over `[B, T, D]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub out: Dense,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config_err!("attention width {dim} not divisible by {heads} heads"));
        }
        Ok(MultiHeadAttention {
            query: Dense::new(store, &format!("{name}.query"), group, dim, dim, rng),
            key: Dense::new(store, &format!("{name}.key"), group, dim, dim, rng),
            value: Dense::new(store, &format!("{name}.value"), group, dim, dim, rng),
            out: Dense::new(store, &format!("{name}.out"), group, dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Returns the projected output and the attention weights `[B, heads, T, T]`.
    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(dim_err!("attention expects [B, T, {}], got {:?}", self.dim, s));
        }
        let (b, t, h) = (s[0], s[1], self.heads);
        let dh = self.dim / h;
        let split = |v: Var<'t, T>| v.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3]);
        let q = split(self.query.forward(ctx, x)?)?;
        let k = split(self.key.forward(ctx, x)?)?;
        let v = split(self.value.forward(ctx, x)?)?;
        let scores = q.bmm(&k, true)?.scale(T::one() / T::of(dh as f64).sqrt());
        let attn = scores.softmax()?;
        let mixed = attn.bmm(&v, false)?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, self.dim])?;
        Ok((self.out.forward(ctx, mixed)?, attn))
    }
}

/// Two-layer GELU feed-forward over the last axis.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl Mlp {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            fc1: Dense::new(store, &format!("{name}.fc1"), group, dim, hidden, rng),
            fc2: Dense::new(store, &format!("{name}.fc2"), group, hidden, dim, rng),
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(ctx, x)?.gelu();
        self.fc2.forward(ctx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn set(store: &mut ParamStore<f64>, id: ParamId, data: Vec<f64>) {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::new(shape, data).unwrap();
    }

    fn identity_dense(store: &mut ParamStore<f64>, d: &Dense) {
        let n = d.input;
        set(store, d.weight, (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect());
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut store, "a", Group::Backbone, 6, 4, &mut rng).is_err());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(&mut store, "a", Group::Backbone, 4, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, false);
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 4], |i| i as f64 * 0.3 - 0.5));
        let (out, attn) = mha.forward(&ctx, x).unwrap();
        assert_eq!(attn.shape(), vec![1, 2, 1, 1]);
        assert!(attn.to_tensor().data().iter().all(|&v| v == 1.0));
        let expected = mha.out.forward(&ctx, mha.value.forward(&ctx, x).unwrap()).unwrap();
        assert!(out.to_tensor().max_abs_diff(&expected.to_tensor()) < 1e-12);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut store, "a", Group::Backbone, 4, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, false);
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 4], |i| (i % 4) as f64));
        let (_, attn) = mha.forward(&ctx, x).unwrap();
        assert!(attn.to_tensor().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn two_token_logit_gap_of_one() {
        // One head of width 2, identity q/k projections, scale 1/sqrt(2).
        // Token 0 = (r, 0) with r² = sqrt(2) and token 1 = 0, so row 0 logits are (1, 0).
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, "a", Group::Backbone, 2, 1, &mut rng).unwrap();
        identity_dense(&mut store, &mha.query);
        identity_dense(&mut store, &mha.key);
        let r = 2f64.sqrt().sqrt();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, false);
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![r, 0.0, 0.0, 0.0]).unwrap());
        let (_, attn) = mha.forward(&ctx, x).unwrap();
        let a = attn.to_tensor();
        let expected = 1.0 / (1.0 + (-1f64).exp());
        assert!((a.data()[0] - expected).abs() < 1e-12);
        assert!((a.data()[0] - 0.7311).abs() < 1e-4);
        assert!((a.data()[1] - 0.2689).abs() < 1e-4);
        // row 1 (zero query) is uniform
        assert!((a.data()[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn running_stats_follow_ema() {
        let mut store = ParamStore::<f32>::new();
        let bn = BatchNorm::new(&mut store, "bn", Group::Backbone, 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true, false);
        let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&ctx, x).unwrap();
        let ups = ctx.take_stat_updates();
        drop(ctx);
        store.apply_stat_updates(ups, BN_MOMENTUM);
        assert!((store.buffer(bn.running_mean).data()[0] - 0.02).abs() < 1e-7);
        assert!((store.buffer(bn.running_var).data()[0] - (0.99 + 0.01)).abs() < 1e-7);
    }
}
