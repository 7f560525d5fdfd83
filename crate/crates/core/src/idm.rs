//! Intermediate Domain Module: predicts the per-pair mix ratio, synthesizes
//! intermediate-domain features with mixed identities, and provides the
//! diversity and bridge losses that pull source and target toward the
//! synthesized domains.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Branch, DomainBranchNorm, ForwardMode};
use crate::error::{Error, Result};
use crate::numerics::{population_std, NodeId, Tape, Tensor};
use crate::params::{xavier, ParamId, ParamStore};

/// The pair (a_s, a_t) on the 1-simplex weighting a source/target mix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixRatio {
    pub a_s: f64,
    pub a_t: f64,
}

impl MixRatio {
    pub fn new(a_s: f64, a_t: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&a_s)
            && (0.0..=1.0).contains(&a_t)
            && (a_s + a_t - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(Error::Domain(format!(
                "({a_s}, {a_t}) is not on the 1-simplex"
            )));
        }
        Ok(Self { a_s, a_t })
    }
}

/// Predicts mix ratios from a pair of same-stage hidden maps: pooled
/// descriptors of each domain pass through a shared linear map, are merged by
/// elementwise summation, and a small normalized MLP emits softmax ratios.
pub struct RatioPredictor {
    channels: usize,
    reduction: usize,
    w1: ParamId,
    w2: ParamId,
    w3: ParamId,
    norm: DomainBranchNorm,
}

impl RatioPredictor {
    pub fn new(
        channels: usize,
        reduction: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Domain(format!(
                "reduction ratio {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            w1: store.register("idm/w1", xavier(rng, channels, 2 * channels)),
            w2: store.register("idm/w2", xavier(rng, hidden, channels)),
            w3: store.register("idm/w3", xavier(rng, 2, hidden)),
            norm: DomainBranchNorm::new("idm/norm", hidden, 1e-5, 0.1, store),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    fn pooled_descriptor(&self, tape: &mut Tape, store: &ParamStore, g: NodeId) -> NodeId {
        let shape = tape.value(g).shape().to_vec();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.channels, "predictor channel width");
        let flat = tape.reshape(g, vec![n, h * w, c]);
        let avg = tape.mean_mid(flat);
        let max = tape.max_mid(flat);
        let cat = tape.concat_cols(avg, max);
        let w1 = store.node(tape, self.w1);
        tape.matmul_t(cat, w1)
    }

    /// Batched ratio prediction for index-aligned [n, h, w, c] map pairs.
    /// Returns a [n, 2] tensor of (a_s, a_t) rows.
    pub fn predict_t(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        g_s: NodeId,
        g_t: NodeId,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        if tape.value(g_s).shape() != tape.value(g_t).shape() {
            return Err(Error::Shape("ratio prediction needs equal map shapes".into()));
        }
        let ds = self.pooled_descriptor(tape, store, g_s);
        let dt = self.pooled_descriptor(tape, store, g_t);
        let merged = tape.add(ds, dt);
        let w2 = store.node(tape, self.w2);
        let hidden = tape.matmul_t(merged, w2);
        // The predictor's normalization is not domain-branched.
        let normed = self.norm.forward_2d(tape, store, hidden, Branch::Source, mode);
        let act = tape.tanh(normed);
        let w3 = store.node(tape, self.w3);
        let logits = tape.matmul_t(act, w3);
        Ok(tape.softmax_rows(logits, 1.0))
    }

    /// Single-pair prediction on plain maps (evaluation statistics).
    pub fn predict_ratios(
        &mut self,
        store: &ParamStore,
        g_s: &Tensor,
        g_t: &Tensor,
    ) -> Result<MixRatio> {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::stack(std::slice::from_ref(g_s))?);
        let t = tape.constant(Tensor::stack(std::slice::from_ref(g_t))?);
        let a = self.predict_t(&mut tape, store, s, t, ForwardMode::Eval)?;
        let row = tape.value(a).row(0).to_vec();
        MixRatio::new(row[0], row[1])
    }

    /// Serializable predictor state (parameters, norm buffers, meta).
    pub fn state_entries(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for id in [self.w1, self.w2, self.w3] {
            out.push((store.name(id).to_string(), store.value(id).clone()));
        }
        for id in [self.norm_gamma(), self.norm_beta()] {
            out.push((store.name(id).to_string(), store.value(id).clone()));
        }
        let (mean, var) = self.norm.running(Branch::Source);
        out.push(("idm/norm/run_mean/source".to_string(), mean.clone()));
        out.push(("idm/norm/run_var/source".to_string(), var.clone()));
        out.push((
            "idm/meta".to_string(),
            Tensor::from_vec(vec![self.channels as f64, self.reduction as f64]),
        ));
        out
    }

    /// Reads `(channels, reduction)` back out of a predictor meta record.
    pub fn parse_meta(meta: &Tensor) -> Result<(usize, usize)> {
        if meta.len() != 2 {
            return Err(Error::Checkpoint("bad predictor meta record".into()));
        }
        Ok((meta.data()[0] as usize, meta.data()[1] as usize))
    }

    /// Restores state written by [`state_entries`](Self::state_entries).
    pub fn load_state(
        &mut self,
        store: &mut ParamStore,
        entries: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for id in [self.w1, self.w2, self.w3, self.norm_gamma(), self.norm_beta()] {
            let name = store.name(id).to_string();
            let value = entries
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            store.set(id, value.clone());
        }
        let mean = entries
            .get("idm/norm/run_mean/source")
            .ok_or_else(|| Error::Checkpoint("missing predictor running mean".into()))?;
        let var = entries
            .get("idm/norm/run_var/source")
            .ok_or_else(|| Error::Checkpoint("missing predictor running var".into()))?;
        self.norm.set_running(Branch::Source, mean.clone(), var.clone())
    }

    fn norm_gamma(&self) -> ParamId {
        self.norm.affine_ids().0
    }

    fn norm_beta(&self) -> ParamId {
        self.norm.affine_ids().1
    }
}

/// Splits a [n, 2] ratio tensor into (a_s [n], a_t [n]) nodes.
pub(crate) fn split_ratios(tape: &mut Tape, a: NodeId) -> (NodeId, NodeId) {
    let n = tape.value(a).shape()[0];
    let s2 = tape.slice_cols(a, 0, 1);
    let a_s = tape.reshape(s2, vec![n]);
    let t2 = tape.slice_cols(a, 1, 2);
    let a_t = tape.reshape(t2, vec![n]);
    (a_s, a_t)
}

/// Elementwise per-pair mix of two aligned batches with a [n, 2] ratio
/// tensor: out_i = a_s_i * g_s_i + a_t_i * g_t_i.
pub fn mix_features_t(tape: &mut Tape, g_s: NodeId, g_t: NodeId, a: NodeId) -> NodeId {
    assert_eq!(
        tape.value(g_s).shape(),
        tape.value(g_t).shape(),
        "mix shape mismatch"
    );
    let (a_s, a_t) = split_ratios(tape, a);
    let ws = tape.mul_bcast_first(g_s, a_s);
    let wt = tape.mul_bcast_first(g_t, a_t);
    tape.add(ws, wt)
}

/// Mixes one source/target feature pair and their one-hot labels over the
/// joint class space. Returns the mixed map and the mixed label
/// distribution, which represents a new identity between the two originals.
pub fn mix_features(
    g_s: &Tensor,
    g_t: &Tensor,
    a: MixRatio,
    y_s: &Tensor,
    y_t: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if g_s.shape() != g_t.shape() {
        return Err(Error::Shape("mix_features maps differ in shape".into()));
    }
    if y_s.shape() != y_t.shape() {
        return Err(Error::Shape("mix_features labels differ in shape".into()));
    }
    let g = Tensor::from_parts(
        g_s.shape().to_vec(),
        g_s.data()
            .iter()
            .zip(g_t.data())
            .map(|(s, t)| a.a_s * s + a.a_t * t)
            .collect(),
    );
    let y = Tensor::from_parts(
        y_s.shape().to_vec(),
        y_s.data()
            .iter()
            .zip(y_t.data())
            .map(|(s, t)| a.a_s * s + a.a_t * t)
            .collect(),
    );
    Ok((g, y))
}

/// Negative spread of the mix ratios in a batch:
/// -(std({a_s_i}) + std({a_t_i})), population convention. Minimizing it
/// pushes the pairs toward diverse interpolation points.
pub fn diversity_loss_t(tape: &mut Tape, a: NodeId) -> NodeId {
    let n = tape.value(a).shape()[0];
    assert!(n >= 1, "diversity loss needs a non-empty batch");
    let column_std = |tape: &mut Tape, col: NodeId| {
        let col2 = tape.reshape(col, vec![n, 1]);
        let mean = tape.mean_all(col);
        let neg = tape.neg(mean);
        let centered = tape.add_bcast_row(col2, neg);
        let sq = tape.mul(centered, centered);
        let msd = tape.mean_all(sq);
        tape.sqrt(msd)
    };
    let (a_s, a_t) = split_ratios(tape, a);
    let ss = column_std(tape, a_s);
    let st = column_std(tape, a_t);
    let sum = tape.add(ss, st);
    tape.neg(sum)
}

/// Plain diversity loss over a batch of ratios.
pub fn diversity_loss(ratios: &[MixRatio]) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::Domain("diversity loss of empty batch".into()));
    }
    let a_s: Vec<f64> = ratios.iter().map(|r| r.a_s).collect();
    let a_t: Vec<f64> = ratios.iter().map(|r| r.a_t).collect();
    Ok(-(population_std(&a_s)? + population_std(&a_t)?))
}

/// Prediction-space bridge loss: ratio-weighted cross-entropy of the
/// intermediate predictions against both endpoint labels.
pub fn bridge_pred_loss_t(
    tape: &mut Tape,
    p_inter: NodeId,
    a: NodeId,
    labels_s: &[usize],
    labels_t: &[usize],
) -> NodeId {
    let n = tape.value(p_inter).shape()[0];
    assert_eq!(labels_s.len(), n);
    assert_eq!(labels_t.len(), n);
    let lp = tape.log_clamped(p_inter);
    let ls = tape.gather_idx(lp, labels_s.to_vec());
    let lt = tape.gather_idx(lp, labels_t.to_vec());
    let (a_s, a_t) = split_ratios(tape, a);
    let ts = tape.mul(a_s, ls);
    let tt = tape.mul(a_t, lt);
    let sum = tape.add(ts, tt);
    let mean = tape.mean_all(sum);
    tape.neg(mean)
}

/// Plain bridge prediction loss over a [n, C] prediction batch.
pub fn bridge_pred_loss(
    p_inter: &Tensor,
    ratios: &[MixRatio],
    labels_s: &[usize],
    labels_t: &[usize],
) -> Result<f64> {
    if p_inter.shape().len() != 2 || p_inter.shape()[0] != ratios.len() {
        return Err(Error::Shape("prediction batch does not match ratios".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(p_inter.clone());
    let a = tape.constant(ratio_tensor(ratios));
    let node = bridge_pred_loss_t(&mut tape, p, a, labels_s, labels_t);
    Ok(tape.scalar_value(node))
}

/// Feature-space bridge loss: ratio-weighted Euclidean distances between the
/// intermediate embedding and both endpoint embeddings.
pub fn bridge_feat_loss_t(
    tape: &mut Tape,
    f_s: NodeId,
    f_t: NodeId,
    f_inter: NodeId,
    a: NodeId,
) -> NodeId {
    let row_norm = |tape: &mut Tape, x: NodeId, y: NodeId| {
        let d = tape.sub(x, y);
        let sq = tape.mul(d, d);
        let sums = tape.sum_cols(sq);
        tape.sqrt(sums)
    };
    let ns = row_norm(tape, f_s, f_inter);
    let nt = row_norm(tape, f_t, f_inter);
    let (a_s, a_t) = split_ratios(tape, a);
    let ts = tape.mul(a_s, ns);
    let tt = tape.mul(a_t, nt);
    let sum = tape.add(ts, tt);
    tape.mean_all(sum)
}

/// Plain bridge feature loss over [n, d] embedding batches.
pub fn bridge_feat_loss(
    f_s: &Tensor,
    f_t: &Tensor,
    f_inter: &Tensor,
    ratios: &[MixRatio],
) -> Result<f64> {
    if f_s.shape() != f_t.shape() || f_s.shape() != f_inter.shape() {
        return Err(Error::Shape("embedding batches differ in shape".into()));
    }
    if f_s.shape()[0] != ratios.len() {
        return Err(Error::Shape("embedding batch does not match ratios".into()));
    }
    let mut tape = Tape::new();
    let s = tape.constant(f_s.clone());
    let t = tape.constant(f_t.clone());
    let i = tape.constant(f_inter.clone());
    let a = tape.constant(ratio_tensor(ratios));
    let node = bridge_feat_loss_t(&mut tape, s, t, i, a);
    Ok(tape.scalar_value(node))
}

/// Packs ratios into the [n, 2] tensor layout used on the tape.
pub fn ratio_tensor(ratios: &[MixRatio]) -> Tensor {
    let mut data = Vec::with_capacity(ratios.len() * 2);
    for r in ratios {
        data.push(r.a_s);
        data.push(r.a_t);
    }
    Tensor::from_parts(vec![ratios.len(), 2], data)
}

/// Reads a [n, 2] ratio node back into validated `MixRatio`s.
pub fn ratios_from_tensor(a: &Tensor) -> Result<Vec<MixRatio>> {
    let n = a.shape()[0];
    (0..n).map(|i| MixRatio::new(a.row(i)[0], a.row(i)[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};

    fn random_map_batch(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Tensor {
        let data = (0..n * h * w * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(vec![n, h, w, c], data).unwrap()
    }

    fn setup_predictor(c: usize, r: usize, seed: u64) -> (RatioPredictor, ParamStore, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = RatioPredictor::new(c, r, &mut store, &mut rng).unwrap();
        (pred, store, rng)
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(RatioPredictor::new(8, 3, &mut store, &mut rng).is_err());
        assert!(RatioPredictor::new(8, 2, &mut store, &mut rng).is_ok());
    }

    #[test]
    fn zero_final_layer_gives_half_half() {
        let (mut pred, mut store, mut rng) = setup_predictor(4, 2, 1);
        store.set(pred.w3, Tensor::zeros(vec![2, 2]));
        let gs = random_map_batch(&mut rng, 1, 2, 2, 4).index_first(0);
        let gt = random_map_batch(&mut rng, 1, 2, 2, 4).index_first(0);
        let r = pred.predict_ratios(&store, &gs, &gt).unwrap();
        assert_eq!(r.a_s, 0.5);
        assert_eq!(r.a_t, 0.5);
    }

    #[test]
    fn swap_symmetry_is_exact() {
        let (mut pred, store, mut rng) = setup_predictor(8, 2, 2);
        for _ in 0..50 {
            let gs = random_map_batch(&mut rng, 3, 2, 2, 8);
            let gt = random_map_batch(&mut rng, 3, 2, 2, 8);
            let run = |pred: &mut RatioPredictor, a: &Tensor, b: &Tensor| {
                let mut tape = Tape::new();
                let an = tape.constant(a.clone());
                let bn = tape.constant(b.clone());
                let out = pred
                    .predict_t(&mut tape, &store, an, bn, ForwardMode::train_frozen())
                    .unwrap();
                tape.value(out).clone()
            };
            let fwd = run(&mut pred, &gs, &gt);
            let rev = run(&mut pred, &gt, &gs);
            assert_eq!(fwd, rev);
        }
    }

    #[test]
    fn simplex_closure_over_random_inputs() {
        let (mut pred, store, mut rng) = setup_predictor(8, 2, 3);
        let mut checked = 0;
        while checked < 10_000 {
            let n = 100;
            let gs = random_map_batch(&mut rng, n, 2, 2, 8);
            let gt = random_map_batch(&mut rng, n, 2, 2, 8);
            let mut tape = Tape::new();
            let an = tape.constant(gs);
            let bn = tape.constant(gt);
            let out = pred
                .predict_t(&mut tape, &store, an, bn, ForwardMode::train_frozen())
                .unwrap();
            let v = tape.value(out);
            for i in 0..n {
                let (a_s, a_t) = (v.row(i)[0], v.row(i)[1]);
                assert!((a_s + a_t - 1.0).abs() < 1e-9);
                assert!((0.0..=1.0).contains(&a_s) && (0.0..=1.0).contains(&a_t));
            }
            checked += n;
        }
    }

    #[test]
    fn mix_endpoint_and_linearity() {
        let g_s = Tensor::full(vec![2, 2, 1], 2.0);
        let g_t = Tensor::full(vec![2, 2, 1], 4.0);
        let y_s = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let y_t = Tensor::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

        let (g, y) = mix_features(&g_s, &g_t, MixRatio::new(1.0, 0.0).unwrap(), &y_s, &y_t).unwrap();
        assert_eq!(g, g_s);
        assert_eq!(y, y_s);

        let (g, _) = mix_features(&g_s, &g_t, MixRatio::new(0.5, 0.5).unwrap(), &y_s, &y_t).unwrap();
        assert!(g.data().iter().all(|&v| v == 3.0));

        let y0 = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let y5 = Tensor::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let (_, y) = mix_features(&g_s, &g_t, MixRatio::new(0.7, 0.3).unwrap(), &y0, &y5).unwrap();
        assert!((y.data()[0] - 0.7).abs() < 1e-15);
        assert!((y.data()[5] - 0.3).abs() < 1e-15);
        let total: f64 = y.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mix_ratio_rejects_off_simplex() {
        assert!(MixRatio::new(0.7, 0.4).is_err());
        assert!(MixRatio::new(-0.1, 1.1).is_err());
    }

    #[test]
    fn diversity_examples() {
        let all_half = vec![MixRatio::new(0.5, 0.5).unwrap(); 4];
        assert_eq!(diversity_loss(&all_half).unwrap(), 0.0);

        let split = vec![MixRatio::new(0.0, 1.0).unwrap(), MixRatio::new(1.0, 0.0).unwrap()];
        assert!((diversity_loss(&split).unwrap() + 1.0).abs() < 1e-15);

        assert!(diversity_loss(&[]).is_err());
    }

    #[test]
    fn diversity_equals_twice_source_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let ratios: Vec<MixRatio> = (0..rng.gen_range(1..12))
                .map(|_| {
                    let a = rng.gen_range(0.0..=1.0);
                    MixRatio::new(a, 1.0 - a).unwrap()
                })
                .collect();
            let loss = diversity_loss(&ratios).unwrap();
            let a_s: Vec<f64> = ratios.iter().map(|r| r.a_s).collect();
            let expect = -2.0 * population_std(&a_s).unwrap();
            assert!((loss - expect).abs() < 1e-12);
            assert!((-1.0..=0.0).contains(&loss));
        }
    }

    #[test]
    fn diversity_minimizer_is_balanced_split() {
        // Brute-force search over every 4-element a_s batch on a 0.1 grid.
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let mut best = f64::MAX;
        let mut argmin = Vec::new();
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    for &d in &grid {
                        let ratios = [a, b, c, d]
                            .iter()
                            .map(|&x| MixRatio::new(x, 1.0 - x).unwrap())
                            .collect::<Vec<_>>();
                        let v = diversity_loss(&ratios).unwrap();
                        if v < best - 1e-12 {
                            best = v;
                            argmin = vec![[a, b, c, d]];
                        } else if (v - best).abs() <= 1e-12 {
                            argmin.push([a, b, c, d]);
                        }
                    }
                }
            }
        }
        assert!((best + 1.0).abs() < 1e-12, "minimum {best}");
        for m in argmin {
            let zeros = m.iter().filter(|&&x| x == 0.0).count();
            let ones = m.iter().filter(|&&x| x == 1.0).count();
            assert_eq!(zeros, 2, "{m:?}");
            assert_eq!(ones, 2, "{m:?}");
        }
    }

    #[test]
    fn bridge_pred_examples() {
        // Endpoint ratio with full confidence on the source class.
        let p = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let r = vec![MixRatio::new(1.0, 0.0).unwrap()];
        let v = bridge_pred_loss(&p, &r, &[0], &[2]).unwrap();
        assert!(v.abs() < 1e-12);

        // Uniform predictions give ln C for any simplex ratio.
        let c = 5;
        let p = Tensor::full(vec![1, c], 1.0 / c as f64);
        let r = vec![MixRatio::new(0.3, 0.7).unwrap()];
        let v = bridge_pred_loss(&p, &r, &[1], &[4]).unwrap();
        assert!((v - (c as f64).ln()).abs() < 1e-12);

        // Hand value: -(0.7 ln 0.5 + 0.3 ln 0.25).
        let p = Tensor::new(vec![1, 2], vec![0.5, 0.25]).unwrap();
        let r = vec![MixRatio::new(0.7, 0.3).unwrap()];
        let v = bridge_pred_loss(&p, &r, &[0], &[1]).unwrap();
        let expect = -(0.7 * 0.5f64.ln() + 0.3 * 0.25f64.ln());
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.9011).abs() < 1e-4);
    }

    #[test]
    fn bridge_feat_examples() {
        let d3 = |a: f64, b: f64, c: f64| Tensor::new(vec![1, 3], vec![a, b, c]).unwrap();
        let same = d3(0.3, -0.2, 1.0);
        let r = vec![MixRatio::new(0.4, 0.6).unwrap()];
        assert_eq!(bridge_feat_loss(&same, &same, &same, &r).unwrap(), 0.0);

        // Endpoint: only the target term remains.
        let f_s = d3(9.0, 9.0, 9.0);
        let f_t = d3(1.0, 2.0, 2.0);
        let f_i = d3(0.0, 0.0, 0.0);
        let r = vec![MixRatio::new(0.0, 1.0).unwrap()];
        let v = bridge_feat_loss(&f_s, &f_t, &f_i, &r).unwrap();
        assert!((v - 3.0).abs() < 1e-12);

        // d = 1 hand value.
        let one = |x: f64| Tensor::new(vec![1, 1], vec![x]).unwrap();
        let r = vec![MixRatio::new(0.5, 0.5).unwrap()];
        let v = bridge_feat_loss(&one(0.0), &one(2.0), &one(1.0), &r).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bridge_feat_gradient_is_ratio_weighted_unit_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3;
        let d = 4;
        let rand2 = |rng: &mut ChaCha8Rng| {
            Tensor::new(
                vec![n, d],
                (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap()
        };
        let f_s = rand2(&mut rng);
        let f_t = rand2(&mut rng);
        let f_i = rand2(&mut rng);
        let ratios: Vec<MixRatio> = (0..n)
            .map(|_| {
                let a = rng.gen_range(0.05..0.95);
                MixRatio::new(a, 1.0 - a).unwrap()
            })
            .collect();
        let mut tape = Tape::new();
        let s = tape.constant(f_s.clone());
        let t = tape.constant(f_t.clone());
        let i = tape.leaf(f_i.clone());
        let a = tape.constant(ratio_tensor(&ratios));
        let loss = bridge_feat_loss_t(&mut tape, s, t, i, a);
        let grads = tape.backward(loss);
        let g = grads.get(i).unwrap();
        for row in 0..n {
            let fsr = f_s.row(row);
            let ftr = f_t.row(row);
            let fir = f_i.row(row);
            let ds = crate::numerics::euclidean(fsr, fir);
            let dt = crate::numerics::euclidean(ftr, fir);
            for k in 0..d {
                let unit_s = (fir[k] - fsr[k]) / ds;
                let unit_t = (fir[k] - ftr[k]) / dt;
                let expect = (ratios[row].a_s * unit_s + ratios[row].a_t * unit_t) / n as f64;
                assert!((g.row(row)[k] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn losses_backpropagate_into_predictor() {
        // Ratios are not detached: the diversity and bridge losses must
        // reach the predictor parameters and the input maps.
        let (mut pred, mut store, mut rng) = setup_predictor(4, 2, 6);
        let gs = random_map_batch(&mut rng, 4, 2, 2, 4);
        let gt = random_map_batch(&mut rng, 4, 2, 2, 4);
        let f_s = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let f_t = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let mut eval = |pred: &mut RatioPredictor, store: &ParamStore| {
            let mut tape = Tape::new();
            let gsn = tape.constant(gs.clone());
            let gtn = tape.constant(gt.clone());
            let a = pred
                .predict_t(&mut tape, store, gsn, gtn, ForwardMode::train_frozen())
                .unwrap();
            let gi = mix_features_t(&mut tape, gsn, gtn, a);
            let pooled = {
                let flat = tape.reshape(gi, vec![4, 4, 4]);
                let m = tape.mean_mid(flat);
                tape.slice_cols(m, 0, 3)
            };
            let fsn = tape.constant(f_s.clone());
            let ftn = tape.constant(f_t.clone());
            let bf = bridge_feat_loss_t(&mut tape, fsn, ftn, pooled, a);
            let div = diversity_loss_t(&mut tape, a);
            let loss = tape.add(bf, div);
            (tape, loss)
        };
        let (tape, loss) = eval(&mut pred, &store);
        let grads = tape.backward(loss);
        let mut flat_grad = Vec::new();
        for id in store.ids() {
            match tape.param_node(id.index()).and_then(|n| grads.get(n)) {
                Some(g) => flat_grad.extend_from_slice(g.data()),
                None => flat_grad.extend(std::iter::repeat(0.0).take(store.value(id).len())),
            }
        }
        let w1_grad_norm: f64 = grads
            .get(tape.param_node(pred.w1.index()).unwrap())
            .unwrap()
            .data()
            .iter()
            .map(|v| v * v)
            .sum();
        assert!(w1_grad_norm > 0.0, "predictor receives gradient");

        let params = store.flatten();
        let analytic = Tensor::from_vec(flat_grad);
        let mut f = |flat: &Tensor| {
            store.unflatten(flat).unwrap();
            let (tape, loss) = eval(&mut pred, &store);
            Ok(tape.scalar_value(loss))
        };
        let report = grad_check(&mut f, &params, &analytic, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
