//! Attention heatmaps from attention-bearing backbones.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::Family;
use crate::data::{resize_bilinear, write_ppm};
use crate::error::{dim_err, Error, Result};
use crate::model::ModelGraph;
use crate::tensor::write_tensor;
use crate::tensor::Tensor;

/// Which axis of the `T × T` attention matrix is averaged away.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Mean over queries: how much attention each token receives.
    #[default]
    Query,
    /// Mean over keys. Rows are stochastic, so this is always uniform.
    Key,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Block {
    #[default]
    Last,
    Index(usize),
}

impl std::str::FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "last" {
            return Ok(Block::Last);
        }
        s.parse().map(Block::Index).map_err(|_| Error::Config(format!("block must be `last` or an index, got {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapBundle {
    /// `[heads, S, S]`, each head min-max normalized to `[0, 1]`.
    pub per_head: Tensor,
    /// `[heads, S²]` pooled saliency before normalization.
    pub pooled: Tensor,
    pub side: usize,
    /// Index of the probed attention block.
    pub layer: usize,
    pub axis: Axis,
}

impl HeatmapBundle {
    pub fn heads(&self) -> usize {
        self.per_head.shape()[0]
    }

    pub fn map(&self, head: usize) -> &[f32] {
        self.per_head.row(head)
    }
}

/// Per-head saliency of one attention block for a `[3, H, W]` image.
///
/// With a class token the token's own entry is dropped so the map covers
/// only the spatial grid.
pub fn attention_heatmaps(model: &ModelGraph, image: &Tensor, block: Block, axis: Axis) -> Result<HeatmapBundle> {
    if model.spec.family == Family::Convnet {
        return Err(Error::Capability("convnet backbones have no attention maps".into()));
    }
    if image.rank() != 3 {
        return Err(dim_err!("expected a [3, H, W] image, got {:?}", image.shape()));
    }
    let (h, w) = model.spec.input_size;
    let x = resize_bilinear(image, h, w);
    let batch = x.reshape(vec![1, 3, h, w])?;
    let maps =
        model.attention_maps(&batch)?.ok_or_else(|| Error::Capability("model produced no attention maps".into()))?;
    let layer = match block {
        Block::Last => maps.len() - 1,
        Block::Index(i) if i < maps.len() => i,
        Block::Index(i) => {
            return Err(Error::Config(format!("block {i} out of range for {} attention blocks", maps.len())));
        }
    };
    let a = &maps[layer];
    let (heads, t) = (a.shape()[1], a.shape()[2]);
    let skip = usize::from(model.spec.family == Family::Vit && model.spec.class_token);
    let grid = t - skip;
    let side = (grid as f64).sqrt().round() as usize;
    if side * side != grid {
        return Err(dim_err!("{grid} tokens do not form a square grid"));
    }
    let mut pooled = Vec::with_capacity(heads * grid);
    let mut per_head = Vec::with_capacity(heads * grid);
    for hd in 0..heads {
        let m = &a.data()[hd * t * t..(hd + 1) * t * t];
        let v: Vec<f32> = (skip..t)
            .map(|j| {
                let s: f64 = match axis {
                    Axis::Query => (0..t).map(|i| m[i * t + j] as f64).sum(),
                    Axis::Key => (0..t).map(|k| m[j * t + k] as f64).sum(),
                };
                (s / t as f64) as f32
            })
            .collect();
        let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        per_head.extend(v.iter().map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 1.0 }));
        pooled.extend(v);
    }
    Ok(HeatmapBundle {
        per_head: Tensor::new(vec![heads, side, side], per_head)?,
        pooled: Tensor::new(vec![heads, grid], pooled)?,
        side,
        layer,
        axis,
    })
}

/// Blends one normalized map over a grayscale copy of `image` with alpha 0.5.
/// Heat `h` is drawn as the color `(h, 0, 1 − h)`.
pub fn overlay(image: &Tensor, map: &[f32], side: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || map.len() != side * side {
        return Err(dim_err!("overlay needs a [3, H, W] image and a {side}×{side} map"));
    }
    let (h, w) = (s[1], s[2]);
    let up = resize_bilinear(&Tensor::new(vec![1, side, side], map.to_vec())?, h, w);
    let px = h * w;
    let d = image.data();
    let mut out = vec![0.0f32; 3 * px];
    for i in 0..px {
        let gray = (0.299 * d[i] + 0.587 * d[px + i] + 0.114 * d[2 * px + i]).clamp(0.0, 1.0);
        let heat = up.data()[i].clamp(0.0, 1.0);
        for (c, color) in [heat, 0.0, 1.0 - heat].into_iter().enumerate() {
            out[c * px + i] = 0.5 * gray + 0.5 * color;
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// Writes `head_<i>.ppm` per head and the raw pooled maps as `heatmaps.vrt`.
pub fn export_heatmap_overlay(
    image: &Tensor,
    bundle: &HeatmapBundle,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(bundle.heads() + 1);
    for hd in 0..bundle.heads() {
        let p = dir.join(format!("head_{hd}.ppm"));
        write_ppm(&overlay(image, bundle.map(hd), bundle.side)?, &p)?;
        paths.push(p);
    }
    let raw = dir.join("heatmaps.vrt");
    write_tensor(&bundle.pooled.clone().reshape(vec![bundle.heads(), bundle.side, bundle.side])?, &raw)?;
    paths.push(raw);
    Ok(paths)
}
