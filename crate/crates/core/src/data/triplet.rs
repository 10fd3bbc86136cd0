//! In-batch triplet mining over listing ids.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every valid triplet whose hinge is active.
    BatchAll,
    /// For each ordered positive pair, the negative closest to the anchor.
    BatchHard,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletSample {
    pub triplets: Vec<Triplet>,
    /// Valid triplets that existed before any loss filtering.
    pub candidates: usize,
}

/// Running counters across mined batches.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MiningStats {
    pub batches: usize,
    pub batches_without_positives: usize,
}

fn sq_dist<T: Element>(e: &Tensor<T>, i: usize, j: usize) -> f64 {
    e.row(i)
        .iter()
        .zip(e.row(j))
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum()
}

/// Mines triplets from a batch of embeddings `[B, D]` with row listing ids.
///
/// A batch without any positive pair yields an empty sample and bumps
/// `stats.batches_without_positives`.
pub fn sample_triplets<T: Element>(
    embeddings: &Tensor<T>,
    listing_ids: &[String],
    strategy: Strategy,
    margin: f64,
    stats: &mut MiningStats,
) -> Result<TripletSample> {
    let b = listing_ids.len();
    if embeddings.rank() != 2 || embeddings.shape()[0] != b {
        return Err(dim_err!("{} listing ids for embeddings {:?}", b, embeddings.shape()));
    }
    stats.batches += 1;
    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let d = sq_dist(embeddings, i, j);
            dist[i * b + j] = d;
            dist[j * b + i] = d;
        }
    }
    let mut out = TripletSample::default();
    for a in 0..b {
        for p in 0..b {
            if p == a || listing_ids[p] != listing_ids[a] {
                continue;
            }
            let negatives = (0..b).filter(|&n| listing_ids[n] != listing_ids[a]);
            let d_ap = dist[a * b + p];
            match strategy {
                Strategy::BatchAll => {
                    for n in negatives {
                        out.candidates += 1;
                        if d_ap - dist[a * b + n] + margin > 0.0 {
                            out.triplets.push(Triplet { anchor: a, positive: p, negative: n });
                        }
                    }
                }
                Strategy::BatchHard => {
                    let mut best: Option<usize> = None;
                    for n in negatives {
                        out.candidates += 1;
                        if best.is_none_or(|m| dist[a * b + n] < dist[a * b + m]) {
                            best = Some(n);
                        }
                    }
                    if let Some(n) = best {
                        out.triplets.push(Triplet { anchor: a, positive: p, negative: n });
                    }
                }
            }
        }
    }
    if out.candidates == 0 {
        stats.batches_without_positives += 1;
    }
    Ok(out)
}
