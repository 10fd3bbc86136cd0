//! Procedural corpus: colored shapes on noisy backgrounds.
//!
//! Every listing is one object (shape, hue, size, aspect). Its images vary
//! in placement, rotation, lighting and background. Four disjoint training
//! datasets label the object by shape, by color bucket, by size bucket, and
//! by shape again under heavy "buyer photo" noise. Held-out listings form
//! the retrieval sets, where two images match when they show the same
//! listing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, Example, ImageSource, ManifestRow};
use crate::error::{Error, Result};
use crate::retrieval::{write_retrieval_dataset, QueryLogRow, RetrievalDataset, RetrievalItem, RetrievalKind};
use crate::tensor::Tensor;

pub const SHAPES: [&str; 4] = ["rectangle", "ellipse", "cross", "triangle"];
pub const COLORS: [&str; 6] = ["red", "yellow", "green", "cyan", "blue", "magenta"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
const SIZE_RANGE: (f32, f32) = (0.3, 0.75);

/// `(dataset name, task name, classes)` of the four training sets.
pub const TASKS: [(&str, &str, usize); 4] =
    [("shapes", "shape", 4), ("colors", "color", 6), ("sizes", "size", 3), ("reviews", "review_shape", 4)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Listings per training dataset.
    pub listings: usize,
    pub images_per_listing: usize,
    /// Held-out listings in each retrieval set.
    pub eval_listings: usize,
    /// Candidate images per held-out listing (besides its queries).
    pub eval_candidates_per_listing: usize,
    pub queries_per_listing: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 32,
            listings: 150,
            images_per_listing: 3,
            eval_listings: 60,
            eval_candidates_per_listing: 2,
            queries_per_listing: 1,
            seed: 0,
        }
    }
}

/// The fixed properties of one listing's object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Listing {
    pub shape: u8,
    pub hue: f32,
    /// Object extent as a fraction of the image side.
    pub size: f32,
    pub aspect: f32,
}

impl Listing {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Listing {
            shape: rng.random_range(0..4),
            hue: rng.random_range(0.0..1.0),
            size: rng.random_range(SIZE_RANGE.0..SIZE_RANGE.1),
            aspect: rng.random_range(0.7..1.4),
        }
    }

    pub fn color_class(&self) -> usize {
        ((self.hue * 6.0) as usize).min(5)
    }

    pub fn size_class(&self) -> usize {
        let f = (self.size - SIZE_RANGE.0) / (SIZE_RANGE.1 - SIZE_RANGE.0);
        ((f * 3.0) as usize).min(2)
    }

    pub fn describe(&self) -> String {
        format!("{} {} {}", SIZES[self.size_class()], COLORS[self.color_class()], SHAPES[self.shape as usize])
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn inside(shape: u8, u: f32, v: f32) -> bool {
    match shape {
        0 => u.abs() <= 1.0 && v.abs() <= 1.0,
        1 => u * u + v * v <= 1.0,
        2 => (u.abs() <= 1.0 && v.abs() <= 0.35) || (u.abs() <= 0.35 && v.abs() <= 1.0),
        _ => v.abs() <= 1.0 && u.abs() <= (1.0 + v) / 2.0,
    }
}

struct Pose {
    cx: f32,
    cy: f32,
    angle: f32,
    scale: f32,
}

fn draw(canvas: &mut [f32], side: usize, l: &Listing, pose: &Pose, color: [f32; 3]) {
    let n = side * side;
    let half = 0.5 * l.size * pose.scale * side as f32;
    let (hw, hh) = (half * l.aspect.sqrt(), half / l.aspect.sqrt());
    let (sin, cos) = pose.angle.sin_cos();
    for y in 0..side {
        for x in 0..side {
            let dx = x as f32 + 0.5 - pose.cx * side as f32;
            let dy = y as f32 + 0.5 - pose.cy * side as f32;
            let u = (cos * dx + sin * dy) / hw;
            let v = (-sin * dx + cos * dy) / hh;
            if inside(l.shape, u, v) {
                for c in 0..3 {
                    canvas[c * n + y * side + x] = color[c];
                }
            }
        }
    }
}

/// One photo of a listing. `review` adds buyer-photo noise: stronger sensor
/// noise, dimmer lighting and a random occluding patch.
pub fn render(l: &Listing, side: usize, review: bool, rng: &mut ChaCha8Rng) -> Tensor {
    let n = side * side;
    let gray: f32 = rng.random_range(0.15..0.85);
    let tint: [f32; 3] = std::array::from_fn(|_| gray + rng.random_range(-0.12..0.12));
    let mut canvas = vec![0.0f32; 3 * n];
    for c in 0..3 {
        canvas[c * n..(c + 1) * n].fill(tint[c]);
    }
    let pose = Pose {
        cx: 0.5 + rng.random_range(-0.15..0.15),
        cy: 0.5 + rng.random_range(-0.15..0.15),
        angle: rng.random_range(-0.5f32..0.5),
        scale: rng.random_range(0.9..1.1),
    };
    let light = if review { rng.random_range(0.55..0.85) } else { rng.random_range(0.85..1.0) };
    draw(&mut canvas, side, l, &pose, hsv(l.hue, 0.85, 0.95 * light));
    if review {
        let w = side / 4 + 1;
        let (ox, oy) = (rng.random_range(0..side - w), rng.random_range(0..side - w));
        let shade: f32 = rng.random_range(0.0..1.0);
        for c in 0..3 {
            for y in oy..oy + w {
                canvas[c * n + y * side + ox..c * n + y * side + ox + w].fill(shade);
            }
        }
    }
    let noise = Normal::new(0.0f32, if review { 0.18 } else { 0.05 }).unwrap();
    for v in &mut canvas {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, side, side], canvas).unwrap()
}

/// A centered, noise-free drawing on a mid-gray background.
pub fn render_plain(shape: u8, hue: f32, size: f32, side: usize) -> Tensor {
    let n = side * side;
    let mut canvas = vec![0.5f32; 3 * n];
    let l = Listing { shape, hue, size, aspect: 1.0 };
    let pose = Pose { cx: 0.5, cy: 0.5, angle: 0.0, scale: 1.0 };
    draw(&mut canvas, side, &l, &pose, hsv(hue, 0.85, 0.95));
    Tensor::new(vec![3, side, side], canvas).unwrap()
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub datasets: Vec<Dataset>,
    /// `intra_listing`, `intra_listing_reviews` over held-out listings.
    pub retrieval: Vec<RetrievalDataset>,
    /// Search log over the held-out listings for the text-to-image set.
    pub query_log: Vec<QueryLogRow>,
}

pub fn generate(cfg: &SynthConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = cfg.image_size;
    let mut datasets = Vec::new();
    for (d, (name, task, classes)) in TASKS.iter().enumerate() {
        let mut examples = Vec::new();
        for li in 0..cfg.listings {
            let l = Listing::random(&mut rng);
            let label = match d {
                0 | 3 => l.shape as usize,
                1 => l.color_class(),
                _ => l.size_class(),
            };
            for _ in 0..cfg.images_per_listing {
                examples.push(Example {
                    image: render(&l, side, d == 3, &mut rng),
                    listing_id: format!("{name}-L{li:05}"),
                    label,
                });
            }
        }
        datasets.push(Dataset { name: name.to_string(), task_name: task.to_string(), num_classes: *classes, examples });
    }

    let held_out: Vec<Listing> = (0..cfg.eval_listings).map(|_| Listing::random(&mut rng)).collect();
    let mut retrieval = Vec::new();
    let mut heroes = Vec::new();
    for (kind, review_queries) in [(RetrievalKind::IntraListing, false), (RetrievalKind::IntraListingReviews, true)] {
        let (mut queries, mut candidates) = (Vec::new(), Vec::new());
        for (li, l) in held_out.iter().enumerate() {
            let group = format!("eval-L{li:05}");
            for qi in 0..cfg.queries_per_listing {
                queries.push(RetrievalItem {
                    record_id: format!("{group}/q{qi}"),
                    image: render(l, side, review_queries, &mut rng),
                    group: group.clone(),
                });
            }
            for ci in 0..cfg.eval_candidates_per_listing {
                candidates.push(RetrievalItem {
                    record_id: format!("{group}/c{ci}"),
                    image: render(l, side, false, &mut rng),
                    group: group.clone(),
                });
            }
            if kind == RetrievalKind::IntraListing {
                heroes.push(candidates.last().unwrap().image.clone());
            }
        }
        retrieval.push(RetrievalDataset::new(kind.as_str(), kind, queries, candidates).unwrap());
    }
    let query_log = held_out
        .iter()
        .zip(heroes)
        .enumerate()
        .map(|(li, (l, hero))| QueryLogRow {
            text: l.describe(),
            clicked_listing_id: format!("eval-L{li:05}"),
            hero_image: ImageSource::Memory(hero),
        })
        .collect();
    SyntheticCorpus { config: cfg.clone(), datasets, retrieval, query_log }
}

/// Files written by [`write_corpus`].
#[derive(Clone, Debug, Default)]
pub struct CorpusFiles {
    pub manifests: Vec<PathBuf>,
    pub retrieval: Vec<PathBuf>,
    pub query_log: PathBuf,
}

/// Writes PPM images, one training manifest per dataset, the retrieval
/// manifests and a tab-separated query log (`text`, listing, hero path).
pub fn write_corpus(corpus: &SyntheticCorpus, dir: impl AsRef<Path>) -> Result<CorpusFiles> {
    let dir = dir.as_ref();
    let mut files = CorpusFiles::default();
    for ds in &corpus.datasets {
        let img_dir = dir.join(&ds.name);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut rows = Vec::new();
        for (i, ex) in ds.examples.iter().enumerate() {
            let path = img_dir.join(format!("{i:05}.ppm"));
            super::write_ppm(&ex.image, &path)?;
            rows.push(ManifestRow { image_path: path, listing_id: ex.listing_id.clone(), label: ex.label });
        }
        let manifest = DatasetManifest {
            name: ds.name.clone(),
            task_name: ds.task_name.clone(),
            num_classes: ds.num_classes,
            rows,
        };
        let path = dir.join(format!("{}.tsv", ds.name));
        manifest.write(&path)?;
        files.manifests.push(path);
    }
    for r in &corpus.retrieval {
        files.retrieval.push(write_retrieval_dataset(r, dir)?);
    }
    let hero_dir = dir.join("heroes");
    fs::create_dir_all(&hero_dir).map_err(|e| Error::io(&hero_dir, e))?;
    let mut log = String::new();
    for (i, row) in corpus.query_log.iter().enumerate() {
        let rel = format!("heroes/{i:05}.ppm");
        super::write_ppm(&row.hero_image.load()?, dir.join(&rel))?;
        log.push_str(&format!("{}\t{}\t{}\n", row.text, row.clicked_listing_id, rel));
    }
    files.query_log = dir.join("query_log.tsv");
    fs::write(&files.query_log, log).map_err(|e| Error::io(&files.query_log, e))?;
    Ok(files)
}

/// Reads a query log written by [`write_corpus`].
pub fn load_query_log(path: impl AsRef<Path>) -> Result<Vec<QueryLogRow>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected text<TAB>listing<TAB>hero".into(),
                });
            }
            Ok(QueryLogRow {
                text: f[0].to_string(),
                clicked_listing_id: f[1].to_string(),
                hero_image: ImageSource::File(base.join(f[2])),
            })
        })
        .collect()
}
