//! Backbone families at configurable scale: a conv/batchnorm/swish stack, a
//! patch-sequence vision transformer, and a lite EfficientFormer that mixes
//! tokens by average pooling in early stages and by attention in the last.
//!
//! # Compound scaling
//!
//! A base spec grows along depth, width and resolution together: with an
//! exponent `N`, depth is multiplied by `αᴺ`, width by `βᴺ` and input
//! resolution by `γᴺ`. Under the usual constraint `α·β²·γ² ≈ 2` this roughly
//! doubles compute for every unit increase of `N`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, Group, LayerNorm, Mlp, MultiHeadAttention, ParamStore};
use crate::tensor::{Element, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Convnet,
    Vit,
    EfficientformerLite,
}

fn default_heads() -> usize {
    1
}

fn default_mlp_ratio() -> usize {
    4
}

/// Architecture of one backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    /// `(H, W)` in pixels; images always have 3 channels.
    pub input_size: (usize, usize),
    pub depth_per_stage: Vec<usize>,
    pub width_per_stage: Vec<usize>,
    /// Patch edge for the transformer family; ignored otherwise.
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub stages: usize,
    /// Total number of stride-2 reductions of the lite EfficientFormer
    /// (stem plus one per later stage). Defaults to `stages + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downsamples: Option<usize>,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Prepend a learned class token to the transformer sequence.
    #[serde(default)]
    pub class_token: bool,
}

impl ArchSpec {
    pub fn convnet(input: usize, depths: Vec<usize>, widths: Vec<usize>) -> Self {
        ArchSpec {
            family: Family::Convnet,
            input_size: (input, input),
            stages: depths.len(),
            depth_per_stage: depths,
            width_per_stage: widths,
            patch_size: 0,
            heads: 1,
            downsamples: None,
            mlp_ratio: 4,
            class_token: false,
        }
    }

    pub fn vit(input: usize, patch: usize, depth: usize, width: usize, heads: usize) -> Self {
        ArchSpec {
            family: Family::Vit,
            input_size: (input, input),
            stages: 1,
            depth_per_stage: vec![depth],
            width_per_stage: vec![width],
            patch_size: patch,
            heads,
            downsamples: None,
            mlp_ratio: 4,
            class_token: false,
        }
    }

    pub fn efficientformer_lite(
        input: usize,
        depths: Vec<usize>,
        widths: Vec<usize>,
        heads: usize,
        downsamples: usize,
    ) -> Self {
        ArchSpec {
            family: Family::EfficientformerLite,
            input_size: (input, input),
            stages: depths.len(),
            depth_per_stage: depths,
            width_per_stage: widths,
            patch_size: 0,
            heads,
            downsamples: Some(downsamples),
            mlp_ratio: 4,
            class_token: false,
        }
    }

    /// Total spatial reduction between the input and the final feature grid.
    pub fn downsampling_factor(&self) -> usize {
        match self.family {
            Family::Convnet => 1 << self.stages,
            Family::Vit => self.patch_size,
            Family::EfficientformerLite => 1 << self.total_downsamples(),
        }
    }

    fn total_downsamples(&self) -> usize {
        self.downsamples.unwrap_or(self.stages + 1)
    }

    /// Stride-2 convolutions in the lite EfficientFormer stem.
    pub fn stem_downsamples(&self) -> usize {
        self.total_downsamples().saturating_sub(self.stages.saturating_sub(1))
    }

    pub fn final_width(&self) -> usize {
        *self.width_per_stage.last().unwrap_or(&0)
    }

    /// Tokens in the final sequence, excluding any class token. For the
    /// convnet this is the number of cells in the final feature map.
    pub fn final_tokens(&self) -> usize {
        let f = self.downsampling_factor().max(1);
        (self.input_size.0 / f) * (self.input_size.1 / f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(config_err!("at least one stage is required"));
        }
        if self.depth_per_stage.len() != self.stages || self.width_per_stage.len() != self.stages {
            return Err(config_err!(
                "{} stages but {} depths and {} widths",
                self.stages,
                self.depth_per_stage.len(),
                self.width_per_stage.len()
            ));
        }
        if self.depth_per_stage.contains(&0) || self.width_per_stage.contains(&0) {
            return Err(config_err!("depths and widths must be positive"));
        }
        if self.heads == 0 {
            return Err(config_err!("heads must be at least 1"));
        }
        match self.family {
            Family::Convnet => {}
            Family::Vit => {
                if self.stages != 1 {
                    return Err(config_err!("the transformer family has exactly one stage"));
                }
                if self.patch_size == 0 {
                    return Err(config_err!("patch_size must be positive"));
                }
            }
            Family::EfficientformerLite => {
                if self.stages < 2 {
                    return Err(config_err!("efficientformer_lite needs at least 2 stages"));
                }
                if self.total_downsamples() < self.stages {
                    return Err(config_err!(
                        "{} downsamples leave no stride-2 stem for {} stages",
                        self.total_downsamples(),
                        self.stages
                    ));
                }
            }
        }
        if matches!(self.family, Family::Vit | Family::EfficientformerLite)
            && !self.final_width().is_multiple_of(self.heads)
        {
            return Err(config_err!("attention width {} not divisible by {} heads", self.final_width(), self.heads));
        }
        let f = self.downsampling_factor();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(config_err!("input {h}x{w} not divisible by downsampling factor {f}"));
        }
        Ok(())
    }

    /// Closed-form parameter count of the backbone built from this spec.
    pub fn param_count(&self) -> usize {
        let bn = |c: usize| 2 * c;
        let r = self.mlp_ratio;
        let transformer_block = |d: usize| 4 * d * d + 2 * r * d * d + 9 * d + r * d;
        match self.family {
            Family::Convnet => {
                let mut cin = 3;
                let mut total = 0;
                for (&depth, &w) in self.depth_per_stage.iter().zip(&self.width_per_stage) {
                    for _ in 0..depth {
                        total += cin * w * 9 + bn(w);
                        cin = w;
                    }
                }
                total
            }
            Family::Vit => {
                let d = self.final_width();
                let p = self.patch_size;
                let seq = self.final_tokens() + usize::from(self.class_token);
                3 * d * p * p
                    + d
                    + usize::from(self.class_token) * d
                    + seq * d
                    + self.depth_per_stage[0] * transformer_block(d)
                    + 2 * d
            }
            Family::EfficientformerLite => {
                let w0 = self.width_per_stage[0];
                let mut total = 0;
                let mut cin = 3;
                for _ in 0..self.stem_downsamples() {
                    total += cin * w0 * 9 + bn(w0);
                    cin = w0;
                }
                let last = self.stages - 1;
                for s in 0..self.stages {
                    let w = self.width_per_stage[s];
                    if s > 0 {
                        total += self.width_per_stage[s - 1] * w * 9 + bn(w);
                    }
                    let block = if s < last { 2 * r * w * w + 2 * r * w + 2 * w } else { transformer_block(w) };
                    total += self.depth_per_stage[s] * block;
                }
                total + 2 * self.final_width()
            }
        }
    }
}

/// Compound-scaling coefficients: depth `α`, width `β`, resolution `γ`, exponent `N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub n: f64,
}

impl ScalingCoefficients {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 1.0) || !v.is_finite() {
                return Err(config_err!("{name} must be a finite value >= 1, got {v}"));
            }
        }
        if !(self.n >= 0.0) || !self.n.is_finite() {
            return Err(config_err!("exponent N must be non-negative, got {}", self.n));
        }
        Ok(())
    }
}

/// Scales `x` by `mult`, then snaps to the nearest multiple of `step` (at least
/// `step`). An exact unit multiplier leaves `x` untouched.
fn scale_snap(x: usize, mult: f64, step: usize) -> usize {
    if mult == 1.0 {
        return x;
    }
    let scaled = x as f64 * mult;
    ((scaled / step as f64).round() as usize).max(1) * step
}

/// Scales depth, width and resolution of `base` jointly.
///
/// Depths become `round(d·αᴺ)` (at least 1), widths snap to the nearest
/// multiple of 8 of `w·βᴺ` (at least 8), and the input edge becomes
/// `round(H·γᴺ)` snapped to the nearest multiple of the downsampling factor.
pub fn compound_scale(base: &ArchSpec, c: &ScalingCoefficients) -> Result<ArchSpec> {
    base.validate()?;
    c.validate()?;
    let (dm, wm, rm) = (c.alpha.powf(c.n), c.beta.powf(c.n), c.gamma.powf(c.n));
    let mut out = base.clone();
    out.depth_per_stage = base
        .depth_per_stage
        .iter()
        .map(|&d| if dm == 1.0 { d } else { ((d as f64 * dm).round() as usize).max(1) })
        .collect();
    out.width_per_stage = base.width_per_stage.iter().map(|&w| scale_snap(w, wm, 8)).collect();
    let f = base.downsampling_factor();
    let (h, w) = base.input_size;
    let snap_edge = |e: usize| {
        if rm == 1.0 {
            e
        } else {
            (((e as f64 * rm).round() / f as f64).round() as usize).max(1) * f
        }
    };
    out.input_size = (snap_edge(h), snap_edge(w));
    out.validate()?;
    Ok(out)
}

/// Backbone output: the last hidden state and, for attention-bearing
/// families, one `[B, heads, T, T]` attention tensor per attention block.
pub struct FeatureBundle<'t, T: Element> {
    /// `[B, C, H, W]` for the convnet, `[B, T, D]` for the transformer families.
    pub last_hidden: Var<'t, T>,
    pub attn_maps: Option<Vec<Var<'t, T>>>,
}

#[derive(Clone, Debug)]
struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        spec: &ArchSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = Group::Backbone;
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), g, d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), g, d, spec.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), g, d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), g, d, spec.mlp_ratio * d, rng),
        })
    }

    fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (a, attn) = self.attn.forward(ctx, self.ln1.forward(ctx, x)?)?;
        let x = x.add(&a)?;
        let m = self.mlp.forward(ctx, self.ln2.forward(ctx, x)?)?;
        Ok((x.add(&m)?, attn))
    }
}

/// Pool-mixer block over `[B, C, H, W]`: `x + (pool(x) − x)` then a
/// 1×1-conv feed-forward with batchnorm.
#[derive(Clone, Debug)]
struct PoolBlock {
    fc1: Conv2d,
    bn1: BatchNorm,
    fc2: Conv2d,
    bn2: BatchNorm,
}

impl PoolBlock {
    fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let pooled = x.avg_pool2d(3, 1, 1)?;
        let x = x.add(&pooled.sub(&x)?)?;
        let h = self.bn1.forward(ctx, self.fc1.forward(ctx, x)?)?.gelu();
        let h = self.bn2.forward(ctx, self.fc2.forward(ctx, h)?)?;
        x.add(&h)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvNet {
    blocks: Vec<ConvBnAct>,
}

#[derive(Clone, Debug)]
pub(crate) struct Vit {
    patch: Conv2d,
    patch_bias: crate::nn::ParamId,
    class_token: Option<crate::nn::ParamId>,
    pos: crate::nn::ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub(crate) struct EfficientFormerLite {
    stem: Vec<ConvBnAct>,
    conv_stages: Vec<(Option<ConvBnAct>, Vec<PoolBlock>)>,
    last_down: ConvBnAct,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub(crate) enum Backbone {
    Convnet(ConvNet),
    Vit(Vit),
    EfficientFormerLite(EfficientFormerLite),
}

fn conv_bn<T: Element>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: (usize, usize, usize),
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> ConvBnAct {
    ConvBnAct {
        conv: Conv2d::new(store, &format!("{name}.conv"), Group::Backbone, shape, stride, rng),
        bn: BatchNorm::new(store, &format!("{name}.bn"), Group::Backbone, shape.1),
    }
}

impl ConvBnAct {
    fn forward<'t, T: Element>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        act: fn(&Var<'t, T>) -> Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = self.bn.forward(ctx, self.conv.forward(ctx, x)?)?;
        Ok(act(&y))
    }
}

impl Backbone {
    pub(crate) fn build<T: Element>(spec: &ArchSpec, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        match spec.family {
            Family::Convnet => {
                let mut blocks = Vec::new();
                let mut cin = 3;
                for (s, (&depth, &w)) in spec.depth_per_stage.iter().zip(&spec.width_per_stage).enumerate() {
                    for j in 0..depth {
                        let stride = if j == 0 { 2 } else { 1 };
                        blocks.push(conv_bn(store, &format!("stage{s}.block{j}"), (cin, w, 3), stride, rng));
                        cin = w;
                    }
                }
                Ok(Backbone::Convnet(ConvNet { blocks }))
            }
            Family::Vit => {
                let d = spec.final_width();
                let p = spec.patch_size;
                let patch =
                    Conv2d { padding: 0, ..Conv2d::new(store, "patch_embed", Group::Backbone, (3, d, p), p, rng) };
                let patch_bias = store.add_param("patch_embed.bias", crate::tensor::Tensor::zeros(vec![d]));
                let class_token = spec.class_token.then(|| {
                    store.begin_layer("class_token", Group::Backbone);
                    store.add_param("class_token", crate::nn::truncated_normal(vec![d], crate::nn::INIT_STD, rng))
                });
                store.begin_layer("pos_embed", Group::Backbone);
                let seq = spec.final_tokens() + usize::from(spec.class_token);
                let pos =
                    store.add_param("pos_embed", crate::nn::truncated_normal(vec![seq, d], crate::nn::INIT_STD, rng));
                let blocks = (0..spec.depth_per_stage[0])
                    .map(|i| TransformerBlock::new(store, &format!("block{i}"), d, spec, rng))
                    .collect::<Result<_>>()?;
                let norm = LayerNorm::new(store, "norm", Group::Backbone, d);
                Ok(Backbone::Vit(Vit { patch, patch_bias, class_token, pos, blocks, norm }))
            }
            Family::EfficientformerLite => {
                let w0 = spec.width_per_stage[0];
                let mut stem = Vec::new();
                let mut cin = 3;
                for i in 0..spec.stem_downsamples() {
                    stem.push(conv_bn(store, &format!("stem{i}"), (cin, w0, 3), 2, rng));
                    cin = w0;
                }
                let last = spec.stages - 1;
                let mut conv_stages = Vec::new();
                for s in 0..last {
                    let w = spec.width_per_stage[s];
                    let down = (s > 0).then(|| {
                        conv_bn(store, &format!("stage{s}.down"), (spec.width_per_stage[s - 1], w, 3), 2, rng)
                    });
                    let hidden = spec.mlp_ratio * w;
                    let blocks = (0..spec.depth_per_stage[s])
                        .map(|j| {
                            let name = format!("stage{s}.block{j}");
                            PoolBlock {
                                fc1: Conv2d::new(
                                    store,
                                    &format!("{name}.fc1"),
                                    Group::Backbone,
                                    (w, hidden, 1),
                                    1,
                                    rng,
                                ),
                                bn1: BatchNorm::new(store, &format!("{name}.bn1"), Group::Backbone, hidden),
                                fc2: Conv2d::new(
                                    store,
                                    &format!("{name}.fc2"),
                                    Group::Backbone,
                                    (hidden, w, 1),
                                    1,
                                    rng,
                                ),
                                bn2: BatchNorm::new(store, &format!("{name}.bn2"), Group::Backbone, w),
                            }
                        })
                        .collect();
                    conv_stages.push((down, blocks));
                }
                let d = spec.final_width();
                let last_down =
                    conv_bn(store, &format!("stage{last}.down"), (spec.width_per_stage[last - 1], d, 3), 2, rng);
                let blocks = (0..spec.depth_per_stage[last])
                    .map(|j| TransformerBlock::new(store, &format!("stage{last}.block{j}"), d, spec, rng))
                    .collect::<Result<_>>()?;
                let norm = LayerNorm::new(store, "norm", Group::Backbone, d);
                Ok(Backbone::EfficientFormerLite(EfficientFormerLite { stem, conv_stages, last_down, blocks, norm }))
            }
        }
    }

    pub(crate) fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<FeatureBundle<'t, T>> {
        let swish = |v: &Var<'t, T>| v.swish();
        let gelu = |v: &Var<'t, T>| v.gelu();
        let to_tokens = |x: Var<'t, T>| -> Result<Var<'t, T>> {
            let s = x.shape();
            x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
        };
        match self {
            Backbone::Convnet(net) => {
                let mut h = x;
                for b in &net.blocks {
                    h = b.forward(ctx, h, swish)?;
                }
                Ok(FeatureBundle { last_hidden: h, attn_maps: None })
            }
            Backbone::Vit(vit) => {
                let mut h = to_tokens(vit.patch.forward(ctx, x)?)?.add_bias(&ctx.var(vit.patch_bias))?;
                if let Some(tok) = vit.class_token {
                    h = h.prepend_token(&ctx.var(tok))?;
                }
                h = h.add_bias(&ctx.var(vit.pos))?;
                let mut maps = Vec::with_capacity(vit.blocks.len());
                for b in &vit.blocks {
                    let (next, attn) = b.forward(ctx, h)?;
                    h = next;
                    maps.push(attn);
                }
                Ok(FeatureBundle { last_hidden: vit.norm.forward(ctx, h)?, attn_maps: Some(maps) })
            }
            Backbone::EfficientFormerLite(net) => {
                let mut h = x;
                for b in &net.stem {
                    h = b.forward(ctx, h, gelu)?;
                }
                for (down, blocks) in &net.conv_stages {
                    if let Some(d) = down {
                        h = d.forward(ctx, h, gelu)?;
                    }
                    for b in blocks {
                        h = b.forward(ctx, h)?;
                    }
                }
                h = to_tokens(net.last_down.forward(ctx, h, gelu)?)?;
                let mut maps = Vec::with_capacity(net.blocks.len());
                for b in &net.blocks {
                    let (next, attn) = b.forward(ctx, h)?;
                    h = next;
                    maps.push(attn);
                }
                Ok(FeatureBundle { last_hidden: net.norm.forward(ctx, h)?, attn_maps: Some(maps) })
            }
        }
    }
}

pub(crate) fn check_input(spec: &ArchSpec, shape: &[usize]) -> Result<()> {
    let (h, w) = spec.input_size;
    if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w || shape[0] == 0 {
        return Err(dim_err!("expected a [B, 3, {h}, {w}] batch, got {:?}", shape));
    }
    Ok(())
}
