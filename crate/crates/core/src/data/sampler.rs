//! Epoch plans: which examples go into which minibatch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{augment, AugConfig, Dataset, SENTINEL};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Members of one minibatch as `(dataset, example)` indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub entries: Vec<(usize, usize)>,
}

/// One epoch of interleaved minibatches over datasets of the given sizes.
///
/// Every batch holds exactly `batch_size / D` examples of each dataset.
/// Each dataset is shuffled independently; the epoch ends when the smallest
/// dataset can no longer fill its share, and incomplete shares are dropped.
pub fn interleave_batches(sizes: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BatchPlan>> {
    let d = sizes.len();
    if d == 0 {
        return Err(config_err!("at least one dataset is required"));
    }
    if batch_size == 0 || !batch_size.is_multiple_of(d) {
        return Err(config_err!("batch size {batch_size} not divisible by {d} datasets"));
    }
    let per = batch_size / d;
    let orders: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&n| {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(rng);
            o
        })
        .collect();
    let batches = sizes.iter().map(|&n| n / per).min().unwrap();
    Ok((0..batches)
        .map(|b| BatchPlan {
            entries: orders
                .iter()
                .enumerate()
                .flat_map(|(ds, o)| o[b * per..(b + 1) * per].iter().map(move |&i| (ds, i)))
                .collect(),
        })
        .collect())
}

/// One epoch of listing-grouped minibatches: `batch_size / per_listing`
/// distinct listings, `per_listing` images each. Listings with fewer images
/// are skipped.
pub fn listing_batches(
    datasets: &[Dataset],
    batch_size: usize,
    per_listing: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchPlan>> {
    if per_listing < 2 || !batch_size.is_multiple_of(per_listing) || batch_size / per_listing < 2 {
        return Err(config_err!("batch {batch_size} must hold at least two listings of {per_listing} (≥ 2) images"));
    }
    let mut groups: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (d, ds) in datasets.iter().enumerate() {
        for (i, ex) in ds.examples.iter().enumerate() {
            groups.entry(ex.listing_id.as_str()).or_default().push((d, i));
        }
    }
    let mut eligible: Vec<Vec<(usize, usize)>> = groups.into_values().filter(|g| g.len() >= per_listing).collect();
    eligible.shuffle(rng);
    let p = batch_size / per_listing;
    Ok(eligible
        .chunks_exact_mut(p)
        .map(|chunk| BatchPlan {
            entries: chunk
                .iter_mut()
                .flat_map(|g| {
                    g.shuffle(rng);
                    g[..per_listing].to_vec()
                })
                .collect(),
        })
        .collect())
}

/// A materialized minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, H, W]`.
    pub images: Tensor,
    /// `labels[task][row]`; [`SENTINEL`] where the row's dataset does not
    /// carry that task.
    pub labels: Vec<Vec<i64>>,
    pub listing_ids: Vec<String>,
    pub origin: Vec<(usize, usize)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    /// Labels of one task with the sentinel mapped to `None`.
    pub fn masked_labels(&self, task: usize) -> Vec<Option<usize>> {
        self.labels[task].iter().map(|&l| if l == SENTINEL { None } else { Some(l as usize) }).collect()
    }
}

/// Decodes, augments and stacks the examples of `plan`. `task_of[d]` is the
/// task column that dataset `d` labels.
pub fn materialize(
    plan: &BatchPlan,
    datasets: &[Dataset],
    task_of: &[usize],
    tasks: usize,
    aug: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let b = plan.entries.len();
    let mut images = Vec::with_capacity(b);
    let mut labels = vec![vec![SENTINEL; b]; tasks];
    let mut listing_ids = Vec::with_capacity(b);
    for (row, &(d, i)) in plan.entries.iter().enumerate() {
        let ex = &datasets[d].examples[i];
        images.push(augment(&ex.image, aug, rng)?);
        labels[task_of[d]][row] = ex.label as i64;
        listing_ids.push(ex.listing_id.clone());
    }
    Ok(Batch { images: Tensor::stack(&images)?, labels, listing_ids, origin: plan.entries.clone() })
}
