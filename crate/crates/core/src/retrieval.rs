//! Brute-force nearest-neighbor retrieval and row-wise recall@K.
//!
//! A query row counts as a true positive at `K` when any of its `K` nearest
//! candidates shares its group id; recall is `TP / N` over the `N` queries.
//!
//! The retrieval manifest is tab-separated:
//!
//! ```text
//! #retrieval	name=intra	type=intra_listing
//! Q	q/0001.ppm	L0001
//! C	c/0002.ppm	L0001
//! ```

#![allow(clippy::tabs_in_doc_comments)]

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{decode_image, resize_bilinear, write_ppm, ImageSource};
use crate::error::{config_err, dim_err, Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{Element, Tensor};

/// Default recall cut-offs.
pub const DEFAULT_KS: [usize; 2] = [5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalKind {
    IntraListing,
    IntraListingReviews,
    VisuallySimilarClicks,
    Text2image,
    Custom,
}

impl RetrievalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalKind::IntraListing => "intra_listing",
            RetrievalKind::IntraListingReviews => "intra_listing_reviews",
            RetrievalKind::VisuallySimilarClicks => "visually_similar_clicks",
            RetrievalKind::Text2image => "text2image",
            RetrievalKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            RetrievalKind::IntraListing,
            RetrievalKind::IntraListingReviews,
            RetrievalKind::VisuallySimilarClicks,
            RetrievalKind::Text2image,
            RetrievalKind::Custom,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalItem {
    /// Identity of the underlying image record; queries and candidates must
    /// not share one.
    pub record_id: String,
    pub image: Tensor,
    pub group: String,
}

#[derive(Clone, Debug)]
pub struct RetrievalDataset {
    pub name: String,
    pub kind: RetrievalKind,
    pub queries: Vec<RetrievalItem>,
    pub candidates: Vec<RetrievalItem>,
}

impl RetrievalDataset {
    pub fn new(
        name: impl Into<String>,
        kind: RetrievalKind,
        queries: Vec<RetrievalItem>,
        candidates: Vec<RetrievalItem>,
    ) -> Result<Self> {
        let name = name.into();
        if let Some(item) = queries.iter().chain(&candidates).find(|i| i.group.is_empty()) {
            return Err(Error::Validation(format!("{name}: record {:?} has an empty group id", item.record_id)));
        }
        let qs: HashSet<&str> = queries.iter().map(|q| q.record_id.as_str()).collect();
        if let Some(c) = candidates.iter().find(|c| qs.contains(c.record_id.as_str())) {
            return Err(Error::Validation(format!("{name}: record {:?} is both a query and a candidate", c.record_id)));
        }
        Ok(RetrievalDataset { name, kind, queries, candidates })
    }
}

/// Reads a retrieval manifest; image paths are relative to the manifest.
pub fn load_retrieval_dataset(path: impl AsRef<Path>) -> Result<RetrievalDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let parse = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut fields = header.split('\t');
    if fields.next() != Some("#retrieval") {
        return Err(parse(1, "expected header starting with #retrieval".into()));
    }
    let kv: BTreeMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
    let name = kv.get("name").ok_or_else(|| parse(1, "header lacks name=".into()))?.to_string();
    let kind_s = kv.get("type").ok_or_else(|| parse(1, "header lacks type=".into()))?;
    let kind = RetrievalKind::parse(kind_s).ok_or_else(|| parse(1, format!("unknown dataset type {kind_s:?}")))?;
    let (mut queries, mut candidates) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(parse(i + 2, format!("expected 3 tab-separated fields, got {}", f.len())));
        }
        let target = match f[0] {
            "Q" => &mut queries,
            "C" => &mut candidates,
            other => return Err(parse(i + 2, format!("role must be Q or C, got {other:?}"))),
        };
        target.push(RetrievalItem {
            record_id: f[1].to_string(),
            image: decode_image(base.join(f[1]))?,
            group: f[2].to_string(),
        });
    }
    RetrievalDataset::new(name, kind, queries, candidates)
}

/// Writes images as PPM under `dir/<name>/` and the manifest as `dir/<name>.retrieval.tsv`.
pub fn write_retrieval_dataset(ds: &RetrievalDataset, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    let img_dir = dir.join(&ds.name);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut out = format!("#retrieval\tname={}\ttype={}\n", ds.name, ds.kind.as_str());
    for (role, items) in [("Q", &ds.queries), ("C", &ds.candidates)] {
        for (i, item) in items.iter().enumerate() {
            let rel = format!("{}/{}{:05}.ppm", ds.name, role.to_lowercase(), i);
            write_ppm(&item.image, dir.join(&rel))?;
            writeln!(out, "{role}\t{rel}\t{}", item.group).unwrap();
        }
    }
    let path = dir.join(format!("{}.retrieval.tsv", ds.name));
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Exact index over a candidate embedding matrix.
#[derive(Clone, Debug)]
pub struct Index {
    matrix: Tensor,
}

pub fn build_index(candidates: &Tensor) -> Result<Index> {
    if candidates.rank() != 2 || candidates.shape()[0] == 0 {
        return Err(config_err!("index needs at least one candidate row, got {:?}", candidates.shape()));
    }
    Ok(Index { matrix: candidates.clone() })
}

impl Index {
    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    fn distances(&self, q: &[f32]) -> Vec<f64> {
        (0..self.len())
            .map(|j| self.matrix.row(j).iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

/// The `min(k, N_c)` nearest candidates by Euclidean distance, ascending,
/// ties broken by candidate index.
pub fn query_knn(index: &Index, q: &[f32], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(config_err!("K must be at least 1"));
    }
    if q.len() != index.dim() {
        return Err(dim_err!("query has dim {}, index has {}", q.len(), index.dim()));
    }
    let d = index.distances(q);
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order.into_iter().map(|i| (i, d[i])).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub dataset: String,
    pub k: usize,
    pub recall: f64,
    pub n: usize,
    pub tp: usize,
}

/// Query and candidate embeddings with their group ids.
#[derive(Clone, Debug)]
pub struct EmbeddedDataset {
    pub name: String,
    pub queries: Tensor,
    pub query_groups: Vec<String>,
    pub candidates: Tensor,
    pub candidate_groups: Vec<String>,
}

/// Recall at each `K` in `ks`, sharing one ranking per query.
pub fn recall_reports(ds: &EmbeddedDataset, ks: &[usize]) -> Result<Vec<RecallReport>> {
    let n = ds.query_groups.len();
    if n == 0 {
        return Err(config_err!("{}: no queries", ds.name));
    }
    if ds.queries.rank() != 2 || ds.queries.shape()[0] != n || ds.candidates.shape()[0] != ds.candidate_groups.len() {
        return Err(dim_err!("{}: embeddings and group ids disagree", ds.name));
    }
    let index = build_index(&ds.candidates)?;
    let kmax = ks.iter().copied().max().ok_or_else(|| config_err!("no K values"))?;
    let mut tp = vec![0usize; ks.len()];
    for (qi, group) in ds.query_groups.iter().enumerate() {
        let hits = query_knn(&index, ds.queries.row(qi), kmax)?;
        let first_hit = hits.iter().position(|(c, _)| &ds.candidate_groups[*c] == group);
        for (slot, &k) in tp.iter_mut().zip(ks) {
            if first_hit.is_some_and(|r| r < k) {
                *slot += 1;
            }
        }
    }
    Ok(ks
        .iter()
        .zip(tp)
        .map(|(&k, tp)| RecallReport { dataset: ds.name.clone(), k, recall: tp as f64 / n as f64, n, tp })
        .collect())
}

pub fn recall_at_k(ds: &EmbeddedDataset, k: usize) -> Result<RecallReport> {
    Ok(recall_reports(ds, &[k])?.remove(0))
}

fn embed_items<T: Element>(model: &ModelGraph<T>, items: &[RetrievalItem]) -> Result<Tensor> {
    let (h, w) = model.spec.input_size;
    let imgs: Vec<Tensor<T>> = items
        .iter()
        .map(|i| {
            let s = i.image.shape();
            let img = if (s[1], s[2]) == (h, w) { i.image.clone() } else { resize_bilinear(&i.image, h, w) };
            img.cast()
        })
        .collect();
    Ok(model.embed_batch(&Tensor::stack(&imgs)?)?.cast())
}

/// Embeds queries and candidates with the model's current weights.
pub fn embed_dataset<T: Element>(model: &ModelGraph<T>, ds: &RetrievalDataset) -> Result<EmbeddedDataset> {
    let ctx = |e: Error| Error::Validation(format!("embedding retrieval dataset {}: {e}", ds.name));
    if ds.queries.is_empty() || ds.candidates.is_empty() {
        return Err(config_err!("{}: needs queries and candidates", ds.name));
    }
    Ok(EmbeddedDataset {
        name: ds.name.clone(),
        queries: embed_items(model, &ds.queries).map_err(ctx)?,
        query_groups: ds.queries.iter().map(|q| q.group.clone()).collect(),
        candidates: embed_items(model, &ds.candidates).map_err(ctx)?,
        candidate_groups: ds.candidates.iter().map(|c| c.group.clone()).collect(),
    })
}

/// Every `(dataset, K)` report for the model as it stands.
pub fn epoch_callback<T: Element>(
    model: &ModelGraph<T>,
    datasets: &[RetrievalDataset],
    ks: &[usize],
) -> Result<Vec<RecallReport>> {
    let mut out = Vec::new();
    for ds in datasets {
        out.extend(recall_reports(&embed_dataset(model, ds)?, ks)?);
    }
    Ok(out)
}

/// Writes reports as JSON lines.
pub fn write_reports(reports: &[RecallReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).unwrap());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A fixed-width text table of reports.
pub fn summary_table(reports: &[RecallReport]) -> String {
    let w = reports.iter().map(|r| r.dataset.len()).max().unwrap_or(7).max(7);
    let mut s = format!("{:<w$}  {:>4}  {:>7}  {:>6}  {:>6}\n", "dataset", "K", "recall", "TP", "N");
    for r in reports {
        writeln!(s, "{:<w$}  {:>4}  {:>7.4}  {:>6}  {:>6}", r.dataset, r.k, r.recall, r.tp, r.n).unwrap();
    }
    s
}

/// A text-to-image generator; must be deterministic in `(text, seed)`.
pub trait TextToImage {
    fn generate(&self, text: &str, seed: u64) -> Result<Tensor>;
}

/// Procedural stand-in generator: a shape and color chosen by a hash of
/// the text, drawn on a plain background.
#[derive(Clone, Debug)]
pub struct StubTextToImage {
    pub size: usize,
}

pub(crate) fn text_hash(text: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl TextToImage for StubTextToImage {
    fn generate(&self, text: &str, seed: u64) -> Result<Tensor> {
        let h = text_hash(text) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let shape = (h % 4) as u8;
        let hue = ((h >> 8) % 360) as f32 / 360.0;
        let size = 0.35 + ((h >> 20) % 40) as f32 / 100.0;
        Ok(crate::data::synthetic::render_plain(shape, hue, size, self.size))
    }
}

/// One row of a search log.
#[derive(Clone, Debug)]
pub struct QueryLogRow {
    pub text: String,
    pub clicked_listing_id: String,
    pub hero_image: ImageSource,
}

/// A built text-to-image dataset plus the rows the generator failed on.
#[derive(Clone, Debug)]
pub struct Text2ImageBuild {
    pub dataset: RetrievalDataset,
    pub skipped: usize,
}

/// Generated query images keyed by the clicked listing; one hero candidate per listing.
pub fn build_text2image_eval(log: &[QueryLogRow], generator: &dyn TextToImage, seed: u64) -> Result<Text2ImageBuild> {
    if log.is_empty() {
        return Err(config_err!("query log is empty"));
    }
    let mut queries = Vec::new();
    let mut candidates = Vec::new();
    let mut seen = HashSet::new();
    let mut skipped = 0;
    for (i, row) in log.iter().enumerate() {
        match generator.generate(&row.text, seed) {
            Ok(image) => queries.push(RetrievalItem {
                record_id: format!("gen:{i}"),
                image,
                group: row.clicked_listing_id.clone(),
            }),
            Err(_) => {
                skipped += 1;
                continue;
            }
        }
        if seen.insert(row.clicked_listing_id.clone()) {
            candidates.push(RetrievalItem {
                record_id: format!("hero:{}", row.clicked_listing_id),
                image: row.hero_image.load()?,
                group: row.clicked_listing_id.clone(),
            });
        }
    }
    Ok(Text2ImageBuild {
        dataset: RetrievalDataset::new("text2image", RetrievalKind::Text2image, queries, candidates)?,
        skipped,
    })
}
