//! Retrieval metrics (mAP, CMC) and distance-distribution analyses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{euclidean, l2_normalized};

/// Ranking outcome for one query.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub average_precision: f64,
    /// hit_at[k] is true when a relevant item sits at rank k (0-based);
    /// its cumulative OR is the per-query CMC curve.
    pub hit_at: Vec<bool>,
}

impl RankingResult {
    /// Fraction-of-one CMC value at rank k (1-based).
    pub fn cmc_hit(&self, k: usize) -> bool {
        self.hit_at.iter().take(k).any(|&h| h)
    }
}

/// Aggregated retrieval metrics.
#[derive(Debug, Clone)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// (rank, CMC@rank) pairs in the requested order.
    pub cmc: Vec<(usize, f64)>,
    /// Queries dropped for having zero relevant gallery items.
    pub excluded_queries: usize,
    pub per_query: Vec<RankingResult>,
}

/// Ranks every query against the gallery under Euclidean distance on
/// L2-normalized embeddings, ties broken by gallery index. When `same_set`
/// is true, gallery item i is excluded from query i's ranking (self-match).
/// Queries with no relevant gallery item are excluded and counted; if every
/// query is excluded the metrics are vacuously 1.
pub fn map_cmc(
    query: &[Vec<f64>],
    gallery: &[Vec<f64>],
    query_labels: &[usize],
    gallery_labels: &[usize],
    ranks: &[usize],
    same_set: bool,
) -> Result<RetrievalMetrics> {
    if query.len() != query_labels.len() || gallery.len() != gallery_labels.len() {
        return Err(Error::Shape("labels do not match embeddings".into()));
    }
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Domain("empty query or gallery".into()));
    }
    let qn: Vec<Vec<f64>> = query.iter().map(|v| l2_normalized(v)).collect();
    let gn: Vec<Vec<f64>> = gallery.iter().map(|v| l2_normalized(v)).collect();

    let mut per_query = Vec::new();
    let mut excluded = 0usize;
    let mut ap_sum = 0.0;
    let mut cmc_sums = vec![0.0; ranks.len()];
    for (qi, q) in qn.iter().enumerate() {
        let mut order: Vec<usize> = (0..gn.len())
            .filter(|&gi| !(same_set && gi == qi))
            .collect();
        let dists: Vec<f64> = gn.iter().map(|g| euclidean(q, g)).collect();
        order.sort_by(|&a, &b| {
            dists[a]
                .partial_cmp(&dists[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        let relevant_total = order
            .iter()
            .filter(|&&gi| gallery_labels[gi] == query_labels[qi])
            .count();
        if relevant_total == 0 {
            excluded += 1;
            continue;
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut hit_at = vec![false; order.len()];
        for (rank0, &gi) in order.iter().enumerate() {
            if gallery_labels[gi] == query_labels[qi] {
                hits += 1;
                hit_at[rank0] = true;
                ap += hits as f64 / (rank0 + 1) as f64;
            }
        }
        ap /= relevant_total as f64;
        ap_sum += ap;
        let result = RankingResult {
            average_precision: ap,
            hit_at,
        };
        for (slot, &k) in cmc_sums.iter_mut().zip(ranks) {
            *slot += result.cmc_hit(k) as usize as f64;
        }
        per_query.push(result);
    }

    if per_query.is_empty() {
        // Nothing left to retrieve for any query: vacuously perfect.
        return Ok(RetrievalMetrics {
            map: 1.0,
            cmc: ranks.iter().map(|&k| (k, 1.0)).collect(),
            excluded_queries: excluded,
            per_query,
        });
    }
    let n = per_query.len() as f64;
    Ok(RetrievalMetrics {
        map: ap_sum / n,
        cmc: ranks
            .iter()
            .zip(cmc_sums)
            .map(|(&k, s)| (k, s / n))
            .collect(),
        excluded_queries: excluded,
        per_query,
    })
}

/// Seeded random cross-set Euclidean distances on L2-normalized embeddings.
pub fn pairwise_distance_samples(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_pairs: usize,
    seed: u64,
) -> Vec<f64> {
    assert!(!a.is_empty() && !b.is_empty(), "both sets must be non-empty");
    let an: Vec<Vec<f64>> = a.iter().map(|v| l2_normalized(v)).collect();
    let bn: Vec<Vec<f64>> = b.iter().map(|v| l2_normalized(v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|_| {
            let i = rng.gen_range(0..an.len());
            let j = rng.gen_range(0..bn.len());
            euclidean(&an[i], &bn[j])
        })
        .collect()
}

/// Seeded same-label / different-label distance samples within one set.
pub fn positive_negative_distances(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    n_pairs: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(embeddings.len(), labels.len());
    let normalized: Vec<Vec<f64>> = embeddings.iter().map(|v| l2_normalized(v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |want_same: bool| -> Vec<f64> {
        let mut out = Vec::with_capacity(n_pairs);
        let mut guard = 0usize;
        while out.len() < n_pairs && guard < n_pairs * 1000 {
            guard += 1;
            let i = rng.gen_range(0..normalized.len());
            let j = rng.gen_range(0..normalized.len());
            if i == j || (labels[i] == labels[j]) != want_same {
                continue;
            }
            out.push(euclidean(&normalized[i], &normalized[j]));
        }
        out
    };
    let pos = draw(true);
    let neg = draw(false);
    (pos, neg)
}

/// Equal-width histogram normalized to unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub mass: Vec<f64>,
}

/// Number of bins used for normalized-embedding distance histograms.
pub const DIST_BINS: usize = 50;
/// Distance range for normalized embeddings.
pub const DIST_RANGE: (f64, f64) = (0.0, 2.0);

pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    assert!(bins > 0 && hi > lo);
    let mut mass = vec![0.0; bins];
    if !values.is_empty() {
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let idx = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
            mass[idx] += 1.0;
        }
        for m in &mut mass {
            *m /= values.len() as f64;
        }
    }
    Histogram { lo, hi, mass }
}

/// Distance histogram with the standard binning.
pub fn distance_histogram(values: &[f64]) -> Histogram {
    histogram(values, DIST_BINS, DIST_RANGE.0, DIST_RANGE.1)
}

/// Overlap coefficient of two equal-binned unit-mass histograms.
pub fn distribution_overlap(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.mass.len() != b.mass.len() || a.lo != b.lo || a.hi != b.hi {
        return Err(Error::Domain("histograms have different binning".into()));
    }
    Ok(a.mass.iter().zip(&b.mass).map(|(x, y)| x.min(*y)).sum())
}

/// Overlap between the positive-pair and negative-pair distance
/// distributions of one embedding set; lower means more discriminative.
pub fn pos_neg_overlap(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let (pos, neg) = positive_negative_distances(embeddings, labels, n_pairs, seed);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Domain("no positive or negative pairs available".into()));
    }
    distribution_overlap(&distance_histogram(&pos), &distance_histogram(&neg))
}

/// CSV rendering: `bin_left,bin_right,mass` per line.
pub fn histogram_csv(h: &Histogram) -> String {
    let bins = h.mass.len();
    let width = (h.hi - h.lo) / bins as f64;
    let mut out = String::from("bin_left,bin_right,mass\n");
    for (i, m) in h.mass.iter().enumerate() {
        let left = h.lo + i as f64 * width;
        out.push_str(&format!("{},{},{}\n", left, left + width, m));
    }
    out
}
