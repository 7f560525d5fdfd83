//! ReID supervision: classification cross-entropy, batch-hard triplet loss
//! with a cross-batch memory of past embeddings for hard-negative mining,
//! and the combined weighting.

use std::collections::VecDeque;

use crate::backbone::Branch;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor, LOG_CLAMP};

/// One remembered embedding. Entries are detached value snapshots; they
/// never carry gradient.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub embedding: Vec<f64>,
    pub label: usize,
    pub domain: Branch,
}

/// FIFO queue of past embeddings used to enlarge the hard-negative pool.
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
    embed_dim: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, embed_dim: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::new(),
            embed_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends a batch and evicts the oldest entries beyond capacity.
    pub fn update(&mut self, embeddings: &[Vec<f64>], labels: &[usize], domains: &[Branch]) -> Result<()> {
        if embeddings.len() != labels.len() || embeddings.len() != domains.len() {
            return Err(Error::Shape("bank update lengths differ".into()));
        }
        for ((e, &l), &d) in embeddings.iter().zip(labels).zip(domains) {
            if e.len() != self.embed_dim {
                return Err(Error::Shape(format!(
                    "bank embedding dim {} expected {}",
                    e.len(),
                    self.embed_dim
                )));
            }
            self.entries.push_back(BankEntry {
                embedding: e.clone(),
                label: l,
                domain: d,
            });
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }
}

/// Mean negative log-probability of the true class.
pub fn cls_loss_t(tape: &mut Tape, probs: NodeId, labels: &[usize]) -> NodeId {
    assert_eq!(tape.value(probs).shape()[0], labels.len());
    let lp = tape.log_clamped(probs);
    let picked = tape.gather_idx(lp, labels.to_vec());
    let mean = tape.mean_all(picked);
    tape.neg(mean)
}

/// Plain classification loss over a [n, C] batch of distributions.
pub fn cls_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.shape().len() != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::Shape("prediction batch does not match labels".into()));
    }
    let c = probs.shape()[1];
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Domain(format!("label {l} out of {c} classes")));
        }
        total -= probs.row(i)[l].max(LOG_CLAMP).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Result of the triplet loss: the tape node plus mining bookkeeping.
pub struct TripletOutcome {
    pub loss: NodeId,
    /// Anchors that contributed (had both a positive and a negative).
    pub active_anchors: usize,
    /// Anchors skipped for lack of a positive or negative.
    pub skipped_anchors: usize,
    /// True when every anchor was skipped and the loss is a constant zero.
    pub all_skipped: bool,
}

/// Batch-hard triplet loss with memory-extended negative mining: the hardest
/// positive comes from the batch, the hardest negative from batch plus bank,
/// both under Euclidean distance on raw embeddings.
pub fn triplet_xbm_loss_t(
    tape: &mut Tape,
    emb: NodeId,
    labels: &[usize],
    bank: &MemoryBank,
    margin: f64,
) -> TripletOutcome {
    let v = tape.value(emb).clone();
    let n = v.shape()[0];
    let d = v.shape()[1];
    assert_eq!(labels.len(), n, "one label per embedding");

    // Pairwise distance matrix built on the tape so gradients flow through
    // the selected entries: D^2 = |a|^2 + |b|^2 - 2 a.b, floored at zero.
    let gram = tape.matmul_t(emb, emb);
    let e2 = tape.mul(emb, emb);
    let sq = tape.sum_cols(e2);
    let neg2 = tape.scale_shift(gram, -2.0, 0.0);
    let plus_rows = tape.add_bcast_first(neg2, sq);
    let d2 = tape.add_bcast_row(plus_rows, sq);
    let d2 = tape.pos_part(d2);
    let dist = tape.sqrt(d2);
    let dist_vals = tape.value(dist).clone();

    // Bank distances (constants on the bank side).
    let bank_len = bank.len();
    let (bank_dist, bank_dist_vals) = if bank_len > 0 {
        let mut data = Vec::with_capacity(bank_len * d);
        for e in bank.entries() {
            data.extend_from_slice(&e.embedding);
        }
        let bank_mat = Tensor::from_parts(vec![bank_len, d], data);
        let bank_sq: Vec<f64> = (0..bank_len)
            .map(|i| bank_mat.row(i).iter().map(|x| x * x).sum())
            .collect();
        let bank_node = tape.constant(bank_mat);
        let cross = tape.matmul_t(emb, bank_node);
        let neg2 = tape.scale_shift(cross, -2.0, 0.0);
        let plus_rows = tape.add_bcast_first(neg2, sq);
        let bank_sq_node = tape.constant(Tensor::from_vec(bank_sq));
        let d2b = tape.add_bcast_row(plus_rows, bank_sq_node);
        let d2b = tape.pos_part(d2b);
        let db = tape.sqrt(d2b);
        let vals = tape.value(db).clone();
        (Some(db), Some(vals))
    } else {
        (None, None)
    };

    // Hard mining on detached values.
    let bank_labels: Vec<usize> = bank.entries().map(|e| e.label).collect();
    let mut pos_idx = vec![0usize; n];
    let mut neg_batch_idx = vec![0usize; n];
    let mut neg_bank_idx = vec![0usize; n];
    let mut use_bank = vec![false; n];
    let mut valid = Vec::new();
    let mut skipped = 0usize;
    for i in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg_batch: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let dij = dist_vals.row(i)[j];
            if labels[j] == labels[i] {
                if hardest_pos.map_or(true, |(_, best)| dij > best) {
                    hardest_pos = Some((j, dij));
                }
            } else if hardest_neg_batch.map_or(true, |(_, best)| dij < best) {
                hardest_neg_batch = Some((j, dij));
            }
        }
        let mut hardest_neg_bank: Option<(usize, f64)> = None;
        if let Some(bd) = &bank_dist_vals {
            for (j, &bl) in bank_labels.iter().enumerate() {
                if bl == labels[i] {
                    continue;
                }
                let dij = bd.row(i)[j];
                if hardest_neg_bank.map_or(true, |(_, best)| dij < best) {
                    hardest_neg_bank = Some((j, dij));
                }
            }
        }
        let neg = match (hardest_neg_batch, hardest_neg_bank) {
            (Some((bj, bv)), Some((kj, kv))) => Some(if kv < bv { (kj, kv, true) } else { (bj, bv, false) }),
            (Some((bj, bv)), None) => Some((bj, bv, false)),
            (None, Some((kj, kv))) => Some((kj, kv, true)),
            (None, None) => None,
        };
        match (hardest_pos, neg) {
            (Some((pj, _)), Some((nj, _, from_bank))) => {
                pos_idx[i] = pj;
                if from_bank {
                    neg_bank_idx[i] = nj;
                    use_bank[i] = true;
                } else {
                    neg_batch_idx[i] = nj;
                }
                valid.push(i);
            }
            _ => skipped += 1,
        }
    }

    if valid.is_empty() {
        let loss = tape.constant_scalar(0.0);
        return TripletOutcome {
            loss,
            active_anchors: 0,
            skipped_anchors: skipped,
            all_skipped: true,
        };
    }

    let d_ap = tape.gather_idx(dist, pos_idx);
    let d_an_batch = tape.gather_idx(dist, neg_batch_idx);
    let d_an = match bank_dist {
        Some(db) => {
            let d_an_bank = tape.gather_idx(db, neg_bank_idx);
            let mask_bank = Tensor::from_vec(
                use_bank.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            );
            let mask_batch = Tensor::from_vec(
                use_bank.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
            );
            let mb = tape.constant(mask_bank);
            let mk = tape.constant(mask_batch);
            let from_bank = tape.mul(d_an_bank, mb);
            let from_batch = tape.mul(d_an_batch, mk);
            tape.add(from_bank, from_batch)
        }
        None => d_an_batch,
    };
    let diff = tape.sub(d_ap, d_an);
    let shifted = tape.scale_shift(diff, 1.0, margin);
    let hinge = tape.pos_part(shifted);
    let active = tape.gather_rows(hinge, valid.clone());
    let loss = tape.mean_all(active);
    TripletOutcome {
        loss,
        active_anchors: valid.len(),
        skipped_anchors: skipped,
        all_skipped: false,
    }
}

/// Plain triplet loss; returns (value, all_skipped_warning).
pub fn triplet_xbm_loss(
    embeddings: &Tensor,
    labels: &[usize],
    bank: &MemoryBank,
    margin: f64,
) -> Result<(f64, bool)> {
    if embeddings.shape().len() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(Error::Shape("embedding batch does not match labels".into()));
    }
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.clone());
    let out = triplet_xbm_loss_t(&mut tape, e, labels, bank, margin);
    Ok((tape.scalar_value(out.loss), out.all_skipped))
}

/// Combined supervision: (1 - mu1) * cls + tri.
pub fn reid_loss(cls: f64, tri: f64, mu1: f64) -> f64 {
    (1.0 - mu1) * cls + tri
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cls_loss_examples() {
        let perfect = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(cls_loss(&perfect, &[0, 1]).unwrap().abs() < 1e-12);

        let uniform = Tensor::full(vec![3, 4], 0.25);
        assert!((cls_loss(&uniform, &[0, 1, 2]).unwrap() - 4.0f64.ln()).abs() < 1e-12);

        let half = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!((cls_loss(&half, &[0, 1]).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bank_is_fifo_with_eviction() {
        let mut bank = MemoryBank::new(4, 2);
        let embs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 0.0]).collect();
        let labels: Vec<usize> = (0..6).collect();
        let domains = vec![Branch::Source; 6];
        bank.update(&embs, &labels, &domains).unwrap();
        assert_eq!(bank.len(), 4);
        let kept: Vec<usize> = bank.entries().map(|e| e.label).collect();
        assert_eq!(kept, vec![2, 3, 4, 5]);

        bank.update(&[], &[], &[]).unwrap();
        assert_eq!(bank.len(), 4);

        assert!(bank.update(&[vec![1.0]], &[0], &[Branch::Target]).is_err());
    }

    fn emb2(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().cloned().collect()).unwrap()
    }

    #[test]
    fn triplet_hand_cases() {
        let empty = MemoryBank::new(8, 2);

        // d_ap = 0, nearest negative at distance 1, margin 0.3 -> 0.
        let e = emb2(&[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]);
        let (v, warn) = triplet_xbm_loss(&e, &[0, 0, 1], &empty, 0.3).unwrap();
        assert_eq!(v, 0.0);
        assert!(!warn);

        // d_ap = 1, d_an = 0.5, margin 0.3 -> 0.8.
        let e = emb2(&[[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]]);
        let (v, _) = triplet_xbm_loss(&e, &[0, 0, 1], &empty, 0.3).unwrap();
        assert!((v - 0.8).abs() < 1e-12, "{v}");
    }

    #[test]
    fn all_anchors_skipped_warns() {
        let empty = MemoryBank::new(8, 2);
        let e = emb2(&[[0.0, 0.0], [1.0, 0.0]]);
        // Unique labels: no positives anywhere.
        let (v, warn) = triplet_xbm_loss(&e, &[0, 1], &empty, 0.3).unwrap();
        assert_eq!(v, 0.0);
        assert!(warn);
    }

    #[test]
    fn empty_bank_equals_in_batch_mining() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 8;
        let d = 4;
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = Tensor::new(vec![n, d], data).unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let empty = MemoryBank::new(16, d);
        let (v, _) = triplet_xbm_loss(&e, &labels, &empty, 0.3).unwrap();

        // Manual batch-hard reference.
        let dist = |i: usize, j: usize| crate::numerics::euclidean(e.row(i), e.row(j));
        let mut total = 0.0;
        for i in 0..n {
            let mut dap: f64 = 0.0;
            let mut dan = f64::MAX;
            for j in 0..n {
                if j == i {
                    continue;
                }
                if labels[j] == labels[i] {
                    dap = dap.max(dist(i, j));
                } else {
                    dan = dan.min(dist(i, j));
                }
            }
            total += (dap - dan + 0.3).max(0.0);
        }
        assert!((v - total / n as f64).abs() < 1e-12);
    }

    fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
        // Gram-Schmidt on random Gaussian rows.
        let mut rows: Vec<Vec<f64>> = Vec::new();
        while rows.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| crate::params::standard_normal(rng)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= dot * y;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        rows
    }

    #[test]
    fn triplet_is_rotation_invariant_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 6;
        let d = 5;
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = Tensor::new(vec![n, d], data).unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2];
        let bank = {
            let mut b = MemoryBank::new(8, d);
            let embs: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            b.update(&embs, &[5, 6, 7, 8], &[Branch::Target; 4]).unwrap();
            b
        };
        let (v, _) = triplet_xbm_loss(&e, &labels, &bank, 0.3).unwrap();
        assert!(v >= 0.0);

        let q = random_orthogonal(&mut rng, d);
        let rotate = |row: &[f64]| -> Vec<f64> {
            q.iter().map(|qr| qr.iter().zip(row).map(|(a, b)| a * b).sum()).collect()
        };
        let rotated_data: Vec<f64> = (0..n).flat_map(|i| rotate(e.row(i))).collect();
        let rotated = Tensor::new(vec![n, d], rotated_data).unwrap();
        let mut rotated_bank = MemoryBank::new(8, d);
        let rb: Vec<Vec<f64>> = bank.entries().map(|en| rotate(&en.embedding)).collect();
        rotated_bank.update(&rb, &[5, 6, 7, 8], &[Branch::Target; 4]).unwrap();
        let (vr, _) = triplet_xbm_loss(&rotated, &labels, &rotated_bank, 0.3).unwrap();
        assert!((v - vr).abs() < 1e-9, "{v} vs {vr}");
    }

    #[test]
    fn enlarging_the_bank_never_decreases_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 8;
        let d = 4;
        for _ in 0..50 {
            let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e = Tensor::new(vec![n, d], data).unwrap();
            let labels = vec![0, 0, 1, 1, 2, 2, 3, 3];
            let base_embs: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let extra_embs: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut small = MemoryBank::new(64, d);
            small.update(&base_embs, &[9, 10, 11, 12], &[Branch::Source; 4]).unwrap();
            let mut big = MemoryBank::new(64, d);
            big.update(&base_embs, &[9, 10, 11, 12], &[Branch::Source; 4]).unwrap();
            big.update(&extra_embs, &[13, 14, 15, 16], &[Branch::Target; 4]).unwrap();
            let (vs, _) = triplet_xbm_loss(&e, &labels, &small, 0.3).unwrap();
            let (vb, _) = triplet_xbm_loss(&e, &labels, &big, 0.3).unwrap();
            assert!(vb >= vs - 1e-12, "{vb} < {vs}");
        }
    }

    #[test]
    fn reid_loss_examples_and_linearity() {
        assert_eq!(reid_loss(1.0, 0.5, 0.0), 1.5);
        assert_eq!(reid_loss(1.0, 0.5, 1.0), 0.5);
        assert!((reid_loss(1.0, 0.2, 0.7) - 0.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let (c1, t1) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
            let (c2, t2) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
            let mu = rng.gen_range(0.0..=1.0);
            let lhs = reid_loss(c1 + c2, t1 + t2, mu);
            let rhs = reid_loss(c1, t1, mu) + reid_loss(c2, t2, mu);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn triplet_gradients_pass_grad_check() {
        use crate::numerics::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 6;
        let d = 3;
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = Tensor::new(vec![n, d], data).unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2];
        let mut bank = MemoryBank::new(8, d);
        let be: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        bank.update(&be, &[7, 8, 9], &[Branch::Source; 3]).unwrap();

        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let emb = tape.leaf(t.clone());
            let out = triplet_xbm_loss_t(&mut tape, emb, &labels, &bank, 0.3);
            let grads = tape.backward(out.loss);
            (tape.scalar_value(out.loss), grads.get(emb).unwrap().clone())
        };
        let (_, analytic) = run(&e);
        let mut f = |t: &Tensor| Ok(run(t).0);
        let report = grad_check(&mut f, &e, &analytic, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel {}", report.max_rel_err);
    }
}
