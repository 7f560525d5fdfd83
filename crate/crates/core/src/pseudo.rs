//! Target-domain pseudo-labeling: density-based clustering plus the
//! clustering-quality scores used to track pseudo-label quality.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{euclidean, l2_normalized, Tensor};

/// Cluster ids per sample; `None` marks noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Members of each cluster, indexed by cluster id.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                m[*c].push(i);
            }
        }
        m
    }
}

/// Density-based clustering with Euclidean distances. A point is core when
/// at least `min_pts` points (itself included) lie within `eps`; clusters
/// are maximal density-connected sets of cores discovered in index order;
/// non-core points within `eps` of a core join the lowest reachable cluster
/// id; everything else is noise.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if eps <= 0.0 {
        return Err(Error::Domain("eps must be positive".into()));
    }
    if min_pts == 0 {
        return Err(Error::Domain("min_pts must be at least 1".into()));
    }
    let n = points.len();
    if n == 0 {
        return Ok(ClusterAssignment {
            labels: Vec::new(),
            n_clusters: 0,
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points differ in dimension".into()));
    }

    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if euclidean(&points[i], &points[j]) <= eps {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    let core: Vec<bool> = (0..n).map(|i| neighbors[i].len() + 1 >= min_pts).collect();

    // Connected components over core points, discovered in index order.
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    for start in 0..n {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        let cid = n_clusters;
        n_clusters += 1;
        let mut queue = vec![start];
        labels[start] = Some(cid);
        while let Some(p) = queue.pop() {
            for &q in &neighbors[p] {
                if core[q] && labels[q].is_none() {
                    labels[q] = Some(cid);
                    queue.push(q);
                }
            }
        }
    }

    // Border points join the lowest reachable cluster id.
    for i in 0..n {
        if core[i] || labels[i].is_some() {
            continue;
        }
        let best = neighbors[i]
            .iter()
            .filter(|&&j| core[j])
            .filter_map(|&j| labels[j])
            .min();
        labels[i] = best;
    }

    Ok(ClusterAssignment { labels, n_clusters })
}

/// Effective evaluation labels: noise samples count as singleton clusters.
fn effective_labels(pred: &ClusterAssignment) -> Vec<usize> {
    let mut next = pred.n_clusters;
    pred.labels
        .iter()
        .map(|l| match l {
            Some(c) => *c,
            None => {
                let v = next;
                next += 1;
                v
            }
        })
        .collect()
}

/// BCubed precision, recall, and F-score of a predicted clustering against
/// ground-truth labels.
pub fn bcubed(pred: &ClusterAssignment, truth: &[usize]) -> Result<(f64, f64, f64)> {
    if pred.labels.len() != truth.len() {
        return Err(Error::Shape("prediction and truth lengths differ".into()));
    }
    let n = truth.len();
    if n == 0 {
        return Err(Error::Domain("empty clustering".into()));
    }
    let eff = effective_labels(pred);
    let mut precision = 0.0;
    let mut recall = 0.0;
    for i in 0..n {
        let mut same_cluster = 0usize;
        let mut same_class = 0usize;
        let mut both = 0usize;
        for j in 0..n {
            let sc = eff[j] == eff[i];
            let st = truth[j] == truth[i];
            same_cluster += sc as usize;
            same_class += st as usize;
            both += (sc && st) as usize;
        }
        precision += both as f64 / same_cluster as f64;
        recall += both as f64 / same_class as f64;
    }
    precision /= n as f64;
    recall /= n as f64;
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f))
}

/// Harmonic mean of BCubed precision and recall.
pub fn bcubed_fscore(pred: &ClusterAssignment, truth: &[usize]) -> Result<f64> {
    bcubed(pred, truth).map(|(_, _, f)| f)
}

/// Mutual information normalized by the arithmetic mean of entropies.
/// Degenerate zero-entropy cases resolve to 1 when the partitions are
/// identical as partitions, else follow the formula.
pub fn nmi(pred: &ClusterAssignment, truth: &[usize]) -> Result<f64> {
    if pred.labels.len() != truth.len() {
        return Err(Error::Shape("prediction and truth lengths differ".into()));
    }
    let n = truth.len();
    if n == 0 {
        return Err(Error::Domain("empty clustering".into()));
    }
    let eff = effective_labels(pred);
    Ok(nmi_labels(&eff, truth))
}

/// NMI over two plain label sequences.
pub fn nmi_labels(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let compact = |xs: &[usize]| {
        let mut map = BTreeMap::new();
        xs.iter()
            .map(|x| {
                let next = map.len();
                *map.entry(*x).or_insert(next)
            })
            .collect::<Vec<usize>>()
    };
    let ca = compact(a);
    let cb = compact(b);
    let ka = ca.iter().max().map_or(0, |m| m + 1);
    let kb = cb.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0.0; ka * kb];
    let mut ma = vec![0.0; ka];
    let mut mb = vec![0.0; kb];
    for (&x, &y) in ca.iter().zip(&cb) {
        joint[x * kb + y] += 1.0;
        ma[x] += 1.0;
        mb[y] += 1.0;
    }
    let h = |m: &[f64]| -> f64 {
        m.iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| {
                let p = c / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (h(&ma), h(&mb));
    if ha + hb == 0.0 {
        // Both partitions are a single block: identical.
        return 1.0;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0.0 {
                let p = c / n;
                mi += p * (p / ((ma[x] / n) * (mb[y] / n))).ln();
            }
        }
    }
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

/// Clusters L2-normalized embeddings and returns the assignment plus
/// per-cluster centroid means (of the normalized embeddings) for classifier
/// refresh. Noise samples carry no pseudo identity.
pub fn assign_pseudo_labels(
    embeddings: &[Vec<f64>],
    eps: f64,
    min_pts: usize,
) -> Result<(ClusterAssignment, Vec<Tensor>)> {
    let normalized: Vec<Vec<f64>> = embeddings.iter().map(|e| l2_normalized(e)).collect();
    let assignment = dbscan(&normalized, eps, min_pts)?;
    let mut centroids = Vec::with_capacity(assignment.n_clusters);
    for members in assignment.members() {
        let d = normalized[members[0]].len();
        let mut mean = vec![0.0; d];
        for &m in &members {
            for (acc, v) in mean.iter_mut().zip(&normalized[m]) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= members.len() as f64;
        }
        centroids.push(Tensor::from_vec(mean));
    }
    Ok((assignment, centroids))
}
