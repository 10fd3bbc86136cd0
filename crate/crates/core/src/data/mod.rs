//! Manifests, image loading, augmentation, multi-dataset batching and
//! triplet mining.
//!
//! A training manifest is a tab-separated text file:
//!
//! ```text
//! #manifest	name=shapes	task=shape	classes=4
//! img/0001.ppm	L0001	2
//! img/0002.ppm	L0001	2
//! ```
//!
//! Image paths are resolved relative to the manifest's directory.

#![allow(clippy::tabs_in_doc_comments)]

mod image;
mod sampler;
pub mod synthetic;
mod triplet;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub use image::{
    adjust_brightness, adjust_contrast, augment, decode_image, decode_image_bytes, encode_ppm, resize_bilinear,
    rotate_nearest, write_ppm, AugConfig,
};
pub use sampler::{interleave_batches, listing_batches, materialize, Batch, BatchPlan};
pub use triplet::{sample_triplets, MiningStats, Strategy, Triplet, TripletSample};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value marking "no label for this task".
pub const SENTINEL: i64 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub image_path: PathBuf,
    pub listing_id: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub task_name: String,
    pub num_classes: usize,
    pub rows: Vec<ManifestRow>,
}

fn parse_header(path: &Path, line: &str) -> Result<(String, String, usize)> {
    let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), line: 1, msg: msg.to_string() };
    let mut fields = line.split('\t');
    if fields.next() != Some("#manifest") {
        return Err(bad("expected header starting with #manifest"));
    }
    let kv: HashMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
    let get = |k: &str| kv.get(k).map(|v| v.to_string()).ok_or_else(|| bad(&format!("header lacks {k}=")));
    let classes = get("classes")?.parse::<usize>().map_err(|_| bad("classes= must be an integer"))?;
    Ok((get("name")?, get("task")?, classes))
}

/// Reads and validates a training manifest. Image paths are made absolute
/// against the manifest directory but not opened.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    let header =
        lines.next().ok_or_else(|| Error::Parse { path: path.to_path_buf(), line: 1, msg: "empty file".into() })?;
    let (name, task_name, num_classes) = parse_header(path, header)?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse { path: path.to_path_buf(), line: line_no, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(parse(format!("expected 3 tab-separated fields, got {}", f.len())));
        }
        let label: i64 = f[2].trim().parse().map_err(|_| parse(format!("label {:?} is not an integer", f[2])))?;
        if label < 0 || label as usize >= num_classes {
            return Err(Error::Validation(format!(
                "{}:{line_no}: label {label} outside [0, {num_classes})",
                path.display()
            )));
        }
        if f[1].is_empty() {
            return Err(parse("empty listing id".into()));
        }
        rows.push(ManifestRow { image_path: base.join(f[0]), listing_id: f[1].to_string(), label: label as usize });
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!("{}: manifest has no rows", path.display())));
    }
    if num_classes < 2 {
        return Err(Error::Validation(format!("{}: classes must be at least 2", path.display())));
    }
    Ok(DatasetManifest { name, task_name, num_classes, rows })
}

impl DatasetManifest {
    /// Writes the manifest with image paths relative to `path`'s directory
    /// when possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut out = format!("#manifest\tname={}\ttask={}\tclasses={}\n", self.name, self.task_name, self.num_classes);
        for r in &self.rows {
            let p = r.image_path.strip_prefix(base).unwrap_or(&r.image_path);
            writeln!(out, "{}\t{}\t{}", p.display(), r.listing_id, r.label).unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// An image either on disk or already decoded.
#[derive(Clone, Debug)]
pub enum ImageSource {
    File(PathBuf),
    Memory(Tensor),
}

impl ImageSource {
    pub fn load(&self) -> Result<Tensor> {
        match self {
            ImageSource::File(p) => decode_image(p),
            ImageSource::Memory(t) => Ok(t.clone()),
        }
    }
}

/// One decoded example.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Tensor,
    pub listing_id: String,
    pub label: usize,
}

/// A decoded, in-memory dataset for one task.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub task_name: String,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Decodes every image of a manifest.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let examples = manifest
            .rows
            .iter()
            .map(|r| {
                Ok(Example { image: decode_image(&r.image_path)?, listing_id: r.listing_id.clone(), label: r.label })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            name: manifest.name.clone(),
            task_name: manifest.task_name.clone(),
            num_classes: manifest.num_classes,
            examples,
        })
    }
}
