//! Mirrors Generation Module: channel-statistics extraction, adaptive
//! instance normalization onto synthesized styles, and the temperature-scaled
//! symmetric-KL consistency loss between originals and their mirrors.

use crate::backbone::{Branch, ForwardMode, StagedNetwork};
use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, NodeId, Tape, Tensor};
use crate::params::ParamStore;

/// Guard added to the content standard deviation before dividing; constant
/// channels would otherwise divide by zero. Small enough that the identity
/// retarget error |G - mu| * eps / (sigma + eps) stays below 1e-6 for any
/// map with per-channel std >= 0.1.
pub const ADAIN_EPS: f64 = 1e-9;

/// Per-channel (mean, std) profile of a feature map: the unit of domain style.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Tensor,
    pub std: Tensor,
}

/// Per-channel population mean and std over the spatial positions of a
/// single [h, w, c] map.
pub fn channel_stats(g: &Tensor) -> Result<FeatureStats> {
    let shape = g.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected [h, w, c], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h * w == 0 {
        return Err(Error::Domain("empty spatial extent".into()));
    }
    let hw = (h * w) as f64;
    let mut mean = vec![0.0; c];
    for pos in 0..h * w {
        for k in 0..c {
            mean[k] += g.data()[pos * c + k];
        }
    }
    for m in &mut mean {
        *m /= hw;
    }
    let mut var = vec![0.0; c];
    for pos in 0..h * w {
        for k in 0..c {
            let d = g.data()[pos * c + k] - mean[k];
            var[k] += d * d;
        }
    }
    let std = var.into_iter().map(|v| (v / hw).sqrt()).collect();
    Ok(FeatureStats {
        mean: Tensor::from_vec(mean),
        std: Tensor::from_vec(std),
    })
}

/// Tape form of per-sample channel statistics for a [n, h, w, c] batch.
/// Returns (mean [n,c], std [n,c]); `guard` is added under the square root.
pub(crate) fn channel_stats_t(tape: &mut Tape, g: NodeId, guard: f64) -> (NodeId, NodeId) {
    let shape = tape.value(g).shape().to_vec();
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = tape.reshape(g, vec![n, h * w, c]);
    let mean = tape.mean_mid(flat);
    let neg_mean = tape.neg(mean);
    let centered = tape.add_bcast_mid(flat, neg_mean);
    let sq = tape.mul(centered, centered);
    let var = tape.mean_mid(sq);
    let var = tape.scale_shift(var, 1.0, guard);
    let std = tape.sqrt(var);
    (mean, std)
}

/// Retargets each content map onto the per-sample channel statistics of the
/// corresponding style map. Both are [n, h, w, c] batches; gradient flows
/// into both arguments.
pub fn adain_t(tape: &mut Tape, content: NodeId, style: NodeId) -> NodeId {
    let cs = tape.value(content).shape().to_vec();
    assert_eq!(cs, tape.value(style).shape(), "adain shape mismatch");
    let (n, h, w, c) = (cs[0], cs[1], cs[2], cs[3]);
    let (c_mean, c_std) = channel_stats_t(tape, content, 0.0);
    let (s_mean, s_std) = channel_stats_t(tape, style, 0.0);
    let flat = tape.reshape(content, vec![n, h * w, c]);
    let neg_mean = tape.neg(c_mean);
    let centered = tape.add_bcast_mid(flat, neg_mean);
    let denom = tape.scale_shift(c_std, 1.0, ADAIN_EPS);
    let inv = tape.recip(denom);
    let normed = tape.mul_bcast_mid(centered, inv);
    let styled = tape.mul_bcast_mid(normed, s_std);
    let shifted = tape.add_bcast_mid(styled, s_mean);
    tape.reshape(shifted, vec![n, h, w, c])
}

/// Plain single-map adaptive instance normalization.
pub fn adain(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    if content.shape() != style.shape() {
        return Err(Error::Shape(format!(
            "adain shapes {:?} vs {:?}",
            content.shape(),
            style.shape()
        )));
    }
    if content.shape().len() != 3 {
        return Err(Error::Shape("adain expects [h, w, c] maps".into()));
    }
    let mut tape = Tape::new();
    let cb = Tensor::stack(std::slice::from_ref(content))?;
    let sb = Tensor::stack(std::slice::from_ref(style))?;
    let cn = tape.constant(cb);
    let sn = tape.constant(sb);
    let out = adain_t(&mut tape, cn, sn);
    Ok(tape.value(out).index_first(0))
}

/// Builds source and target mirrors by retargeting each original map onto
/// the channel statistics of its index-aligned intermediate map. The i-th
/// intermediate map must have been mixed from the i-th source/target pair;
/// mirrors keep the original (pseudo) labels.
pub fn make_mirrors_t(
    tape: &mut Tape,
    g_s: NodeId,
    g_t: NodeId,
    g_inter: NodeId,
) -> Result<(NodeId, NodeId)> {
    let ss = tape.value(g_s).shape().to_vec();
    if ss != tape.value(g_t).shape() || ss != tape.value(g_inter).shape() {
        return Err(Error::Domain(
            "mirror batches must be index-aligned with equal shapes".into(),
        ));
    }
    Ok((adain_t(tape, g_s, g_inter), adain_t(tape, g_t, g_inter)))
}

/// Plain batch form over per-sample maps; returns (source mirrors, target
/// mirrors) with labels passed through untouched.
pub fn make_mirrors(
    g_s: &[Tensor],
    g_t: &[Tensor],
    g_inter: &[Tensor],
    labels_s: &[usize],
    labels_t: &[usize],
) -> Result<(Vec<(Tensor, usize)>, Vec<(Tensor, usize)>)> {
    if g_s.len() != g_inter.len() || g_t.len() != g_inter.len() {
        return Err(Error::Domain("mirror batches must be index-aligned".into()));
    }
    let mut src = Vec::with_capacity(g_s.len());
    let mut tgt = Vec::with_capacity(g_t.len());
    for i in 0..g_inter.len() {
        src.push((adain(&g_s[i], &g_inter[i])?, labels_s[i]));
        tgt.push((adain(&g_t[i], &g_inter[i])?, labels_t[i]));
    }
    Ok((src, tgt))
}

/// Temperature-scaled class distribution of a hidden map at stage `l`:
/// the map is pushed through the remaining stages on the requested branch
/// and the classifier.
pub fn prediction_dist(
    net: &mut StagedNetwork,
    store: &ParamStore,
    tape: &mut Tape,
    g: NodeId,
    l: usize,
    branch: Branch,
    tau: f64,
    mode: ForwardMode,
) -> Result<NodeId> {
    let emb = net.forward_from_stage(tape, store, g, l, branch, mode)?;
    net.classify(tape, store, emb, tau, mode)
}

/// Mean symmetric KL over index-aligned prediction pairs [n, C].
pub(crate) fn sym_kl_mean_t(tape: &mut Tape, p: NodeId, q: NodeId) -> NodeId {
    assert_eq!(
        tape.value(p).shape(),
        tape.value(q).shape(),
        "sym_kl pair shapes"
    );
    let lp = tape.log_clamped(p);
    let lq = tape.log_clamped(q);
    let diff = tape.sub(lp, lq);
    let fwd = tape.mul(p, diff);
    let neg_diff = tape.neg(diff);
    let bwd = tape.mul(q, neg_diff);
    let sum = tape.add(fwd, bwd);
    let per_pair = tape.sum_cols(sum);
    tape.mean_all(per_pair)
}

/// Consistency loss between originals and their mirrors:
/// tau^2 * mean_i [KL(p_s||p_s2i) + KL(p_s2i||p_s) + KL(p_t||p_t2i) + KL(p_t2i||p_t)].
pub fn consistency_loss_t(
    tape: &mut Tape,
    p_s: NodeId,
    p_s2i: NodeId,
    p_t: NodeId,
    p_t2i: NodeId,
    tau: f64,
) -> NodeId {
    let src = sym_kl_mean_t(tape, p_s, p_s2i);
    let tgt = sym_kl_mean_t(tape, p_t, p_t2i);
    let sum = tape.add(src, tgt);
    tape.scale_shift(sum, tau * tau, 0.0)
}

/// One-sided variant for settings with source mirrors only.
pub fn consistency_loss_single_t(tape: &mut Tape, p: NodeId, p_mirror: NodeId, tau: f64) -> NodeId {
    let sym = sym_kl_mean_t(tape, p, p_mirror);
    tape.scale_shift(sym, tau * tau, 0.0)
}

/// Plain consistency loss over prediction batches (rows are distributions).
pub fn consistency_loss(
    p_s: &Tensor,
    p_s2i: &Tensor,
    p_t: &Tensor,
    p_t2i: &Tensor,
    tau: f64,
) -> Result<f64> {
    for (a, b) in [(p_s, p_s2i), (p_t, p_t2i)] {
        if a.shape() != b.shape() {
            return Err(Error::Shape("consistency pair shapes differ".into()));
        }
    }
    if p_s.shape()[0] != p_t.shape()[0] {
        return Err(Error::Shape("source and target batches differ in size".into()));
    }
    let n = p_s.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        total += kl_divergence(p_s.row(i), p_s2i.row(i))?
            + kl_divergence(p_s2i.row(i), p_s.row(i))?
            + kl_divergence(p_t.row(i), p_t2i.row(i))?
            + kl_divergence(p_t2i.row(i), p_t.row(i))?;
    }
    Ok(tau * tau * total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, spread: f64) -> Tensor {
        let data = (0..h * w * c).map(|_| rng.gen_range(-spread..spread)).collect();
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn channel_stats_constant_map() {
        let g = Tensor::full(vec![3, 3, 2], 4.5);
        let s = channel_stats(&g).unwrap();
        assert_eq!(s.mean.data(), &[4.5, 4.5]);
        assert_eq!(s.std.data(), &[0.0, 0.0]);
    }

    #[test]
    fn channel_stats_hand_value() {
        // One channel with spatial values {1, 3}.
        let g = Tensor::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap();
        let s = channel_stats(&g).unwrap();
        assert_eq!(s.mean.data(), &[2.0]);
        assert_eq!(s.std.data(), &[1.0]);
    }

    #[test]
    fn channel_stats_affine_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_map(&mut rng, 4, 4, 3, 2.0);
        let (a, b) = (0.7, -1.9);
        let mapped = Tensor::new(
            g.shape().to_vec(),
            g.data().iter().map(|v| a + b * v).collect(),
        )
        .unwrap();
        let s0 = channel_stats(&g).unwrap();
        let s1 = channel_stats(&mapped).unwrap();
        for k in 0..3 {
            assert!((s1.mean.data()[k] - (a + b * s0.mean.data()[k])).abs() < 1e-12);
            assert!((s1.std.data()[k] - b.abs() * s0.std.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_stats_rejects_empty() {
        assert!(channel_stats(&Tensor::zeros(vec![0, 2, 3])).is_err());
    }

    fn map_with_std_floor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        // Rejection-free construction: scale channels up until std >= 0.1.
        loop {
            let g = random_map(rng, h, w, c, 1.5);
            let s = channel_stats(&g).unwrap();
            if s.std.data().iter().all(|&v| v >= 0.1) {
                return g;
            }
        }
    }

    #[test]
    fn adain_identity_retarget() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = map_with_std_floor(&mut rng, 4, 4, 3);
        let out = adain(&g, &g).unwrap();
        for (a, b) in out.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn adain_style_postcondition_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let content = map_with_std_floor(&mut rng, 3, 4, 2);
            let style = map_with_std_floor(&mut rng, 3, 4, 2);
            let out = adain(&content, &style).unwrap();
            let so = channel_stats(&out).unwrap();
            let ss = channel_stats(&style).unwrap();
            for k in 0..2 {
                assert!((so.mean.data()[k] - ss.mean.data()[k]).abs() < 1e-6);
                assert!((so.std.data()[k] - ss.std.data()[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adain_preserves_normalized_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let content = map_with_std_floor(&mut rng, 4, 4, 3);
        let style = map_with_std_floor(&mut rng, 4, 4, 3);
        let out = adain(&content, &style).unwrap();
        let sc = channel_stats(&content).unwrap();
        let so = channel_stats(&out).unwrap();
        let c = 3;
        for k in 0..c {
            for pos in 0..16 {
                let nc = (content.data()[pos * c + k] - sc.mean.data()[k]) / sc.std.data()[k];
                let no = (out.data()[pos * c + k] - so.mean.data()[k]) / so.std.data()[k];
                assert!((nc - no).abs() < 1e-6, "channel {k} pos {pos}");
            }
        }
    }

    #[test]
    fn adain_spatial_correlation_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let content = map_with_std_floor(&mut rng, 4, 4, 2);
        let style = map_with_std_floor(&mut rng, 4, 4, 2);
        let out = adain(&content, &style).unwrap();
        for k in 0..2 {
            let xs: Vec<f64> = (0..16).map(|p| content.data()[p * 2 + k]).collect();
            let ys: Vec<f64> = (0..16).map(|p| out.data()[p * 2 + k]).collect();
            let mx = xs.iter().sum::<f64>() / 16.0;
            let my = ys.iter().sum::<f64>() / 16.0;
            let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
            let corr = cov / (vx.sqrt() * vy.sqrt());
            assert!((corr - 1.0).abs() < 1e-9, "corr {corr}");
        }
    }

    #[test]
    fn mirrors_match_intermediate_stats_and_keep_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g_s: Vec<Tensor> = (0..3).map(|_| map_with_std_floor(&mut rng, 4, 4, 2)).collect();
        let g_t: Vec<Tensor> = (0..3).map(|_| map_with_std_floor(&mut rng, 4, 4, 2)).collect();
        let g_i: Vec<Tensor> = (0..3).map(|_| map_with_std_floor(&mut rng, 4, 4, 2)).collect();
        let ls = vec![4, 5, 6];
        let lt = vec![9, 8, 7];
        let (ms, mt) = make_mirrors(&g_s, &g_t, &g_i, &ls, &lt).unwrap();
        for i in 0..3 {
            assert_eq!(ms[i].1, ls[i]);
            assert_eq!(mt[i].1, lt[i]);
            let sm = channel_stats(&ms[i].0).unwrap();
            let si = channel_stats(&g_i[i]).unwrap();
            for k in 0..2 {
                assert!((sm.mean.data()[k] - si.mean.data()[k]).abs() < 1e-6);
                assert!((sm.std.data()[k] - si.std.data()[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mirror_of_endpoint_mix_is_the_source_map() {
        // When the intermediate equals the source map (ratio endpoint), the
        // source mirror reduces to the source map itself.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = map_with_std_floor(&mut rng, 4, 4, 3);
        let mirror = adain(&g, &g).unwrap();
        for (a, b) in mirror.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn consistency_loss_identical_pairs_is_zero() {
        let p = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
        let v = consistency_loss(&p, &p, &p, &p, 0.5).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn consistency_loss_hand_value() {
        // Single batch entry; the target pair is identical so only the
        // source pair contributes: KL(p||q) + KL(q||p) = ln 3.
        let p = Tensor::new(vec![1, 2], vec![0.75, 0.25]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap();
        let same = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let v = consistency_loss(&p, &q, &same, &same, 1.0).unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn consistency_loss_symmetric_under_pair_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let draw = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let a = Tensor::new(vec![1, 4], draw(&mut rng)).unwrap();
        let b = Tensor::new(vec![1, 4], draw(&mut rng)).unwrap();
        let c = Tensor::new(vec![1, 4], draw(&mut rng)).unwrap();
        let d = Tensor::new(vec![1, 4], draw(&mut rng)).unwrap();
        let v0 = consistency_loss(&a, &b, &c, &d, 0.5).unwrap();
        let v1 = consistency_loss(&b, &a, &d, &c, 0.5).unwrap();
        assert!((v0 - v1).abs() < 1e-12);
        assert!(v0 >= 0.0);
    }

    #[test]
    fn tape_and_plain_consistency_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draw = |rng: &mut ChaCha8Rng, n: usize, c: usize| {
            let mut rows = Vec::new();
            for _ in 0..n {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                rows.extend(raw.into_iter().map(|x| x / z));
            }
            Tensor::new(vec![n, c], rows).unwrap()
        };
        let (ps, ps2i, pt, pt2i) = (
            draw(&mut rng, 3, 5),
            draw(&mut rng, 3, 5),
            draw(&mut rng, 3, 5),
            draw(&mut rng, 3, 5),
        );
        let plain = consistency_loss(&ps, &ps2i, &pt, &pt2i, 0.5).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(ps);
        let b = tape.constant(ps2i);
        let c = tape.constant(pt);
        let d = tape.constant(pt2i);
        let node = consistency_loss_t(&mut tape, a, b, c, d, 0.5);
        assert!((tape.scalar_value(node) - plain).abs() < 1e-12);
    }

    #[test]
    fn adain_gradients_flow_through_both_arguments() {
        use crate::numerics::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let content = Tensor::stack(&[map_with_std_floor(&mut rng, 4, 4, 2)]).unwrap();
        let style = Tensor::stack(&[map_with_std_floor(&mut rng, 4, 4, 2)]).unwrap();
        let weights = Tensor::new(
            vec![32],
            (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        for check_style in [false, true] {
            let run = |c: &Tensor, s: &Tensor| {
                let mut tape = Tape::new();
                let cn = tape.leaf(c.clone());
                let sn = tape.leaf(s.clone());
                let out = adain_t(&mut tape, cn, sn);
                let flat = tape.reshape(out, vec![32]);
                let w = tape.constant(weights.clone());
                let prod = tape.mul(flat, w);
                let loss = tape.sum_all(prod);
                let grads = tape.backward(loss);
                let target = if check_style { sn } else { cn };
                (
                    tape.scalar_value(loss),
                    grads.get(target).unwrap().clone(),
                )
            };
            let (_, analytic) = run(&content, &style);
            let base = if check_style { style.clone() } else { content.clone() };
            let mut f = |t: &Tensor| {
                Ok(if check_style {
                    run(&content, t).0
                } else {
                    run(t, &style).0
                })
            };
            let report = grad_check(&mut f, &base, &analytic, 1e-5).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "style={check_style} rel {}",
                report.max_rel_err
            );
        }
    }
}
