//! A backbone plus its embedding head and per-task classification heads.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_input, ArchSpec, Backbone, Family, FeatureBundle};
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, Dense, Group, ParamStore};
use crate::tensor::{read_tensor, write_tensor, Element, Tape, Tensor, Var};

/// How the embedding head turns backbone features into the representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadStyle {
    /// 1×1 conv to `dim`, batchnorm, swish, global average pool. Needs a
    /// spatial feature map.
    ConvPool,
    /// Pool the tokens (or the map), then a dense projection to `dim`.
    PoolerDense,
    /// Pool only; `dim` must equal the backbone's final width.
    PoolIdentity,
}

/// Reduction of a token sequence to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    /// Use the prepended class token; requires `class_token` in the spec.
    ClassToken,
}

#[derive(Clone, Debug)]
enum HeadLayers {
    ConvPool { conv: Conv2d, bn: BatchNorm },
    PoolerDense { dense: Dense },
    PoolIdentity,
}

#[derive(Clone, Debug)]
struct EmbeddingHead {
    style: HeadStyle,
    dim: usize,
    layers: HeadLayers,
}

#[derive(Clone, Debug)]
struct ClassHead {
    task: String,
    num_classes: usize,
    bn: BatchNorm,
    dense: Dense,
}

/// Which parameters receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainablePolicy {
    All,
    HeadsOnly,
    /// The top `k` parameterized backbone layers, counted from the output.
    TopK(usize),
    /// Nothing trains, heads included.
    None,
}

/// An extracted representation.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub listing_id: String,
    pub normalized: bool,
}

/// Everything in `model.toml` needed to rebuild the graph before loading weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub arch: ArchSpec,
    pub seed: u64,
    pub normalize: bool,
    pub pooling: Pooling,
    pub embedding_head: Option<HeadMeta>,
    #[serde(default)]
    pub class_heads: Vec<TaskMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadMeta {
    pub style: HeadStyle,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMeta {
    pub name: String,
    pub num_classes: usize,
}

/// Forward outputs of the full model on one batch.
pub struct ModelOutput<'t, T: Element> {
    /// `[B, dim]`, L2-normalized when the model normalizes.
    pub embedding: Var<'t, T>,
    /// One `[B, classes]` logit tensor per classification head.
    pub logits: Vec<Var<'t, T>>,
    pub attn_maps: Option<Vec<Var<'t, T>>>,
}

/// Images per forward pass when embedding whole datasets in infer mode.
const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct ModelGraph<T: Element = f32> {
    pub spec: ArchSpec,
    pub store: ParamStore<T>,
    /// L2-normalize extracted embeddings (on by default).
    pub normalize: bool,
    pub pooling: Pooling,
    seed: u64,
    rng: ChaCha8Rng,
    backbone: Backbone,
    embedding_head: Option<EmbeddingHead>,
    class_heads: Vec<ClassHead>,
}

impl<T: Element> ModelGraph<T> {
    /// Builds the backbone for any family; parameters are initialized from `seed`.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(spec, &mut store, &mut rng)?;
        Ok(ModelGraph {
            spec: spec.clone(),
            store,
            normalize: true,
            pooling: Pooling::Mean,
            seed,
            rng,
            backbone,
            embedding_head: None,
            class_heads: Vec::new(),
        })
    }

    pub fn build_convnet(spec: &ArchSpec, seed: u64) -> Result<Self> {
        Self::build_family(spec, seed, Family::Convnet)
    }

    pub fn build_vit(spec: &ArchSpec, seed: u64) -> Result<Self> {
        Self::build_family(spec, seed, Family::Vit)
    }

    pub fn build_efficientformer_lite(spec: &ArchSpec, seed: u64) -> Result<Self> {
        Self::build_family(spec, seed, Family::EfficientformerLite)
    }

    fn build_family(spec: &ArchSpec, seed: u64, family: Family) -> Result<Self> {
        if spec.family != family {
            return Err(config_err!("expected a {family:?} spec, got {:?}", spec.family));
        }
        Self::build(spec, seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn has_attention(&self) -> bool {
        self.spec.family != Family::Convnet
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embedding_head.as_ref().map(|h| h.dim)
    }

    pub fn tasks(&self) -> Vec<(String, usize)> {
        self.class_heads.iter().map(|h| (h.task.clone(), h.num_classes)).collect()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.class_heads.iter().position(|h| h.task == name)
    }

    pub fn attach_embedding_head(&mut self, dim: usize, style: HeadStyle) -> Result<&mut Self> {
        if self.embedding_head.is_some() {
            return Err(contract_err!("model already has an embedding head"));
        }
        if dim == 0 {
            return Err(config_err!("embedding dim must be positive"));
        }
        let width = self.spec.final_width();
        let g = Group::EmbeddingHead;
        let layers = match style {
            HeadStyle::ConvPool => {
                if self.spec.family != Family::Convnet {
                    return Err(config_err!(
                        "conv_pool needs a spatial feature map; use pooler_dense or pool_identity"
                    ));
                }
                let conv = Conv2d::new(&mut self.store, "embed.conv", g, (width, dim, 1), 1, &mut self.rng);
                let bn = BatchNorm::new(&mut self.store, "embed.bn", g, dim);
                HeadLayers::ConvPool { conv, bn }
            }
            HeadStyle::PoolerDense => HeadLayers::PoolerDense {
                dense: Dense::new(&mut self.store, "embed.dense", g, width, dim, &mut self.rng),
            },
            HeadStyle::PoolIdentity => {
                if dim != width {
                    return Err(config_err!("pool_identity keeps width {width}, asked for {dim}"));
                }
                HeadLayers::PoolIdentity
            }
        };
        self.embedding_head = Some(EmbeddingHead { style, dim, layers });
        Ok(self)
    }

    pub fn attach_classification_heads(&mut self, tasks: &[(impl AsRef<str>, usize)]) -> Result<&mut Self> {
        let dim = self
            .embedding_dim()
            .ok_or_else(|| contract_err!("attach an embedding head before classification heads"))?;
        for (name, classes) in tasks {
            let name = name.as_ref();
            if self.task_index(name).is_some() {
                return Err(contract_err!("duplicate task name {name:?}"));
            }
            if *classes < 2 {
                return Err(config_err!("task {name:?} needs at least 2 classes, got {classes}"));
            }
            let i = self.class_heads.len();
            let g = Group::ClassHead(i);
            let bn = BatchNorm::new(&mut self.store, &format!("head.{name}.bn"), g, dim);
            let dense = Dense::new(&mut self.store, &format!("head.{name}.dense"), g, dim, *classes, &mut self.rng);
            self.class_heads.push(ClassHead { task: name.to_string(), num_classes: *classes, bn, dense });
        }
        Ok(self)
    }

    /// Number of parameterized backbone layers (the unit `TopK` counts in).
    pub fn backbone_layer_count(&self) -> usize {
        self.store.layers.iter().filter(|l| l.group == Group::Backbone).count()
    }

    pub fn set_trainable(&mut self, policy: TrainablePolicy) -> Result<()> {
        let layers: Vec<usize> =
            (0..self.store.layers.len()).filter(|&i| self.store.layers[i].group == Group::Backbone).collect();
        let k = match policy {
            TrainablePolicy::All => layers.len(),
            TrainablePolicy::HeadsOnly | TrainablePolicy::None => 0,
            TrainablePolicy::TopK(k) => {
                if k > layers.len() {
                    return Err(config_err!("cannot unfreeze {k} of {} backbone layers", layers.len()));
                }
                k
            }
        };
        let open: std::collections::HashSet<usize> = layers[layers.len() - k..].iter().copied().collect();
        let heads = policy != TrainablePolicy::None;
        for p in &mut self.store.params {
            p.trainable = if p.group.is_head() { heads } else { open.contains(&p.layer) };
        }
        Ok(())
    }

    /// Backbone forward. `x` must be `[B, 3, H, W]` at the spec's input size.
    pub fn forward_features<'t>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<FeatureBundle<'t, T>> {
        check_input(&self.spec, &x.shape())?;
        self.backbone.forward(ctx, x)
    }

    fn pool<'t>(&self, h: Var<'t, T>) -> Result<Var<'t, T>> {
        match (h.shape().len(), self.pooling) {
            (3, Pooling::ClassToken) => {
                if !self.spec.class_token {
                    return Err(config_err!("class-token pooling needs class_token in the spec"));
                }
                h.take_token(0)
            }
            _ => h.global_avg_pool(),
        }
    }

    /// Embedding before any normalization, `[B, dim]`.
    pub fn raw_embedding<'t>(&self, ctx: &Ctx<'t, '_, T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
        let head = self.embedding_head.as_ref().ok_or_else(|| contract_err!("model has no embedding head"))?;
        match &head.layers {
            HeadLayers::ConvPool { conv, bn } => {
                if features.shape().len() != 4 {
                    return Err(dim_err!("conv_pool head needs [B, C, H, W] features, got {:?}", features.shape()));
                }
                bn.forward(ctx, conv.forward(ctx, features)?)?.swish().global_avg_pool()
            }
            HeadLayers::PoolerDense { dense } => dense.forward(ctx, self.pool(features)?),
            HeadLayers::PoolIdentity => self.pool(features),
        }
    }

    fn finish_embedding<'t>(&self, raw: Var<'t, T>) -> Result<Var<'t, T>> {
        if self.normalize {
            raw.l2_normalize()
        } else {
            Ok(raw)
        }
    }

    /// Classification logits from an embedding as returned by [`Self::forward`].
    pub fn head_logits<'t>(&self, ctx: &Ctx<'t, '_, T>, embedding: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.class_heads.iter().map(|h| h.dense.forward(ctx, h.bn.forward(ctx, embedding)?)).collect()
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<ModelOutput<'t, T>> {
        let feats = self.forward_features(ctx, x)?;
        let embedding = self.finish_embedding(self.raw_embedding(ctx, feats.last_hidden)?)?;
        let logits = self.head_logits(ctx, embedding)?;
        Ok(ModelOutput { embedding, logits, attn_maps: feats.attn_maps })
    }

    /// Infer-mode embeddings for a `[B, 3, H, W]` batch, `[B, dim]`.
    pub fn embed_batch(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        if self.embedding_head.is_none() {
            return Err(contract_err!("model has no embedding head"));
        }
        check_input(&self.spec, batch.shape())?;
        let b = batch.shape()[0];
        let per = batch.len() / b;
        let mut rows = Vec::with_capacity(b);
        for start in (0..b).step_by(INFER_CHUNK) {
            let n = INFER_CHUNK.min(b - start);
            let mut shape = batch.shape().to_vec();
            shape[0] = n;
            let chunk = Tensor::new(shape, batch.data()[start * per..(start + n) * per].to_vec())?;
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.store, false, false);
            let feats = self.forward_features(&ctx, tape.constant(chunk))?;
            let e = self.finish_embedding(self.raw_embedding(&ctx, feats.last_hidden)?)?;
            rows.push(e.to_tensor());
        }
        let dim = rows[0].shape()[1];
        Tensor::new(vec![b, dim], rows.into_iter().flat_map(Tensor::into_data).collect())
    }

    /// Infer-mode logits for every head from an embedding matrix.
    pub fn logits_from_embedding(&self, embedding: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, false, false);
        Ok(self.head_logits(&ctx, tape.constant(embedding.clone()))?.into_iter().map(|v| v.to_tensor()).collect())
    }

    /// Infer-mode logits for every head, computed end to end.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, false, false);
        let out = self.forward(&ctx, tape.constant(batch.clone()))?;
        Ok(out.logits.into_iter().map(|v| v.to_tensor()).collect())
    }

    /// Infer-mode attention maps, one `[B, heads, T, T]` tensor per attention block.
    pub fn attention_maps(&self, batch: &Tensor<T>) -> Result<Option<Vec<Tensor<T>>>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, false, false);
        let feats = self.forward_features(&ctx, tape.constant(batch.clone()))?;
        Ok(feats.attn_maps.map(|m| m.into_iter().map(|v| v.to_tensor()).collect()))
    }

    /// Representation of a single `[3, H, W]` image.
    pub fn extract_embedding(&self, image: &Tensor<T>, listing_id: impl Into<String>) -> Result<Embedding> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let e = self.embed_batch(&image.clone().reshape(shape)?)?;
        Ok(Embedding {
            vector: e.data().iter().map(|v| v.as_f64() as f32).collect(),
            listing_id: listing_id.into(),
            normalized: self.normalize,
        })
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            arch: self.spec.clone(),
            seed: self.seed,
            normalize: self.normalize,
            pooling: self.pooling,
            embedding_head: self.embedding_head.as_ref().map(|h| HeadMeta { style: h.style, dim: h.dim }),
            class_heads: self
                .class_heads
                .iter()
                .map(|h| TaskMeta { name: h.task.clone(), num_classes: h.num_classes })
                .collect(),
        }
    }

    /// Rebuilds the graph described by `meta` with freshly initialized weights.
    pub fn from_meta(meta: &ModelMeta) -> Result<Self> {
        let mut m = Self::build(&meta.arch, meta.seed)?;
        m.normalize = meta.normalize;
        m.pooling = meta.pooling;
        if let Some(h) = &meta.embedding_head {
            m.attach_embedding_head(h.dim, h.style)?;
        }
        let tasks: Vec<(&str, usize)> = meta.class_heads.iter().map(|t| (t.name.as_str(), t.num_classes)).collect();
        if !tasks.is_empty() {
            m.attach_classification_heads(&tasks)?;
        }
        Ok(m)
    }

    /// Writes `model.toml`, `index.txt` and one VRT1 file per parameter and buffer.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = toml::to_string(&self.meta()).map_err(|e| Error::Format(e.to_string()))?;
        let meta_path = dir.join("model.toml");
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
        let mut index = String::new();
        let entries = self
            .store
            .params
            .iter()
            .map(|p| (&p.name, &p.value))
            .chain(self.store.buffers.iter().map(|b| (&b.name, &b.value)));
        for (i, (name, value)) in entries.enumerate() {
            let file = format!("t{i:05}.vrt");
            write_tensor(value, dir.join(&file))?;
            writeln!(index, "{name}\t{file}").unwrap();
        }
        let index_path = dir.join("index.txt");
        fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("model.toml");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ModelMeta =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
        let mut m = Self::from_meta(&meta)?;
        let index_path = dir.join("index.txt");
        let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut seen = 0;
        for (line_no, line) in index.lines().enumerate() {
            let (name, file) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: index_path.clone(),
                line: line_no + 1,
                msg: "expected name<TAB>file".into(),
            })?;
            let t: Tensor<T> = read_tensor(dir.join(file))?;
            let slot = if let Some(p) = m.store.params.iter_mut().find(|p| p.name == name) {
                &mut p.value
            } else if let Some(b) = m.store.buffers.iter_mut().find(|b| b.name == name) {
                &mut b.value
            } else {
                return Err(Error::Format(format!("checkpoint tensor {name:?} has no slot in the model")));
            };
            if slot.shape() != t.shape() {
                return Err(dim_err!("checkpoint tensor {name:?}: {:?} vs model {:?}", t.shape(), slot.shape()));
            }
            *slot = t;
            seen += 1;
        }
        let expected = m.store.params.len() + m.store.buffers.len();
        if seen != expected {
            return Err(Error::Format(format!("checkpoint has {seen} tensors, model needs {expected}")));
        }
        Ok(m)
    }
}
