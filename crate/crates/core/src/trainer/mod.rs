//! End-to-end training: epoch loop with pseudo-label refresh, mini-batch
//! assembly, mixing and mirror paths, the combined objective, and the
//! domain-generalization variant with a twin prediction branch.

mod adam;

pub use adam::Adam;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::backbone::{Branch, ForwardMode, NetConfig, StagedNetwork};
use crate::error::{Error, Result};
use crate::eval::{
    distance_histogram, distribution_overlap, map_cmc, pairwise_distance_samples, RetrievalMetrics,
};
use crate::idm::{mix_features_t, RatioPredictor};
use crate::losses::MemoryBank;
use crate::mgm::make_mirrors_t;
use crate::numerics::{NodeId, Tape, Tensor};
use crate::params::ParamStore;
use crate::pseudo::assign_pseudo_labels;
use crate::synthdata::Dataset;

/// How mix ratios are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixMode {
    /// Ratios predicted by the trainable module.
    Idm,
    /// Ratios drawn per pair from Beta(alpha, alpha); the predictor and the
    /// diversity loss are bypassed.
    RandomBeta(f64),
    /// Fixed source ratio; diagnostic endpoint.
    Fixed(f64),
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixMode::Idm => write!(f, "idm"),
            MixMode::RandomBeta(a) => write!(f, "random-beta:{a}"),
            MixMode::Fixed(a) => write!(f, "fixed:{a}"),
        }
    }
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "idm" {
            return Ok(MixMode::Idm);
        }
        if let Some(rest) = s.strip_prefix("random-beta:") {
            let a: f64 = rest
                .parse()
                .map_err(|_| Error::Domain(format!("bad beta parameter {rest:?}")))?;
            if a <= 0.0 {
                return Err(Error::Domain("beta parameter must be positive".into()));
            }
            return Ok(MixMode::RandomBeta(a));
        }
        if let Some(rest) = s.strip_prefix("fixed:") {
            let a: f64 = rest
                .parse()
                .map_err(|_| Error::Domain(format!("bad fixed ratio {rest:?}")))?;
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Domain("fixed ratio must lie in [0, 1]".into()));
            }
            return Ok(MixMode::Fixed(a));
        }
        Err(Error::Domain(format!("unknown mix mode {s:?}")))
    }
}

impl Serialize for MixMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MixMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Uda,
    Dg,
}

/// Loss toggles mirroring the ablation table structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationFlags {
    pub bridge_pred: bool,
    pub bridge_feat: bool,
    pub div: bool,
    pub cons: bool,
    pub xbm: bool,
    pub mix: MixMode,
    /// Mirrors join the classification/triplet supervision (off: they only
    /// drive the consistency loss).
    pub mirrors_in_reid: bool,
    /// Mixed samples join triplet mining under their dominant endpoint
    /// label (off: they are supervised only by the bridge losses).
    pub inter_in_reid: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            bridge_pred: true,
            bridge_feat: true,
            div: true,
            cons: true,
            xbm: true,
            mix: MixMode::Idm,
            mirrors_in_reid: false,
            inter_in_reid: false,
        }
    }
}

/// Named flag presets for the directional comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Joint training with memory-backed triplet mining only.
    Baseline,
    /// Baseline plus mixing with bridge and diversity losses.
    Idm,
    /// Everything, including mirrors and the consistency loss.
    IdmPlusPlus,
}

impl Preset {
    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Preset::Baseline => {
                f.bridge_pred = false;
                f.bridge_feat = false;
                f.div = false;
                f.cons = false;
            }
            Preset::Idm => {
                f.cons = false;
            }
            Preset::IdmPlusPlus => {
                // The mirrors also anchor the supervised losses; at desk
                // scale the consistency loss alone degrades the embedding
                // space it is supposed to align.
                f.mirrors_in_reid = true;
            }
        }
        f
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Idm => "idm",
            Preset::IdmPlusPlus => "idmpp",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub mu4: f64,
    pub tau: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    /// Samples per domain per batch (two per identity).
    pub batch_n: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// One-based epochs at whose start the learning rate is divided by 10.
    pub lr_drop_epochs: Vec<usize>,
    pub stage_m: usize,
    pub stage_l: usize,
    pub mode: TrainMode,
    pub flags: AblationFlags,
    pub seed: u64,
    pub cluster_eps: f64,
    /// When set, the clustering radius is recomputed each epoch as this
    /// quantile of the pairwise embedding-distance distribution instead of
    /// the fixed `cluster_eps`; tracks the scale drift of the embedding
    /// space over training.
    pub cluster_eps_quantile: Option<f64>,
    pub cluster_min_pts: usize,
    pub triplet_margin: f64,
    /// Reduction ratio of the ratio predictor.
    pub reduction: usize,
    /// Memory capacity; `None` means the full training-set size.
    pub bank_capacity: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Consistency loss is enabled from this (one-based) epoch on.
    pub cons_warmup_epochs: usize,
    pub net: NetConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: a proportionally shrunk schedule with the paper
    /// hyperparameters for the loss weights, temperature, and optimizer.
    pub fn desk(seed: u64) -> Self {
        Self {
            mu1: 0.7,
            mu2: 0.1,
            mu3: 1.0,
            mu4: 1.0,
            tau: 0.5,
            epochs: 20,
            iters_per_epoch: 50,
            batch_n: 16,
            lr: 3.5e-4,
            weight_decay: 5e-4,
            lr_drop_epochs: vec![8, 16],
            stage_m: 0,
            stage_l: 3,
            mode: TrainMode::Uda,
            flags: AblationFlags::default(),
            seed,
            cluster_eps: 0.45,
            cluster_eps_quantile: None,
            cluster_min_pts: 4,
            triplet_margin: 0.3,
            reduction: 2,
            bank_capacity: None,
            grad_clip: Some(5.0),
            cons_warmup_epochs: 13,
            net: NetConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let last = self.net.last_stage();
        if self.stage_m > self.stage_l || self.stage_l > last {
            return Err(Error::Domain(format!(
                "need 0 <= stage_m <= stage_l <= {last}, got ({}, {})",
                self.stage_m, self.stage_l
            )));
        }
        for (name, v) in [("mu1", self.mu1), ("mu2", self.mu2), ("mu3", self.mu3), ("mu4", self.mu4)] {
            if v < 0.0 {
                return Err(Error::Domain(format!("{name} must be non-negative")));
            }
        }
        if self.tau <= 0.0 {
            return Err(Error::Domain("temperature must be positive".into()));
        }
        if self.batch_n < 4 || self.batch_n % 2 != 0 {
            return Err(Error::Domain(
                "batch_n must be an even count of at least 4 (two per identity)".into(),
            ));
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Loss weights with disabled flags zeroed. Toggling the prediction
    /// bridge off also restores the full classification weight, since
    /// (1 - mu1) discounts cls only against that bridge term.
    pub fn effective_mus(&self) -> (f64, f64, f64, f64) {
        let f = &self.flags;
        let idm_mix = matches!(f.mix, MixMode::Idm);
        (
            if f.bridge_pred { self.mu1 } else { 0.0 },
            if f.bridge_feat { self.mu2 } else { 0.0 },
            if f.div && idm_mix { self.mu3 } else { 0.0 },
            if f.cons { self.mu4 } else { 0.0 },
        )
    }
}

/// One iteration's loss components.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub tri: f64,
    pub bridge_pred: f64,
    pub bridge_feat: f64,
    pub div: f64,
    pub cons: f64,
}

/// The combined objective:
/// (1 - mu1) * cls + tri + mu1 * bridge_pred + mu2 * bridge_feat
/// + mu3 * div + mu4 * cons.
pub fn total_loss(c: &LossComponents, cfg: &TrainConfig) -> f64 {
    let (mu1, mu2, mu3, mu4) = cfg.effective_mus();
    crate::losses::reid_loss(c.cls, c.tri, mu1)
        + mu1 * c.bridge_pred
        + mu2 * c.bridge_feat
        + mu3 * c.div
        + mu4 * c.cons
}

/// Per-epoch log record; one JSON object per line in the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub c_t: usize,
    pub noise: usize,
    pub bcubed_f: Option<f64>,
    pub nmi: Option<f64>,
    pub source_only: bool,
    pub cls: f64,
    pub tri: f64,
    pub bridge_pred: f64,
    pub bridge_feat: f64,
    pub div: f64,
    pub cons: f64,
    pub total: f64,
    pub skipped_iters: usize,
    pub triplet_warnings: usize,
    /// Median predicted a_t / a_s over the epoch (reported, never asserted).
    pub prop1_predicted_ratio: Option<f64>,
    /// Median d(f_s, f_inter) / d(f_t, f_inter) over the epoch.
    pub prop1_embedding_ratio: Option<f64>,
    /// Fraction of shuffle pairs that were self-pairs (domain-generalization
    /// mode only).
    pub self_pair_rate: Option<f64>,
}

/// Full training log.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Line-delimited JSON, one epoch per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }
}

struct PseudoState {
    /// Target sample indices per pseudo identity.
    members: Vec<Vec<usize>>,
    c_t: usize,
    noise: usize,
    bcubed: Option<f64>,
    nmi: Option<f64>,
}

struct IterStats {
    components: LossComponents,
    total: f64,
    triplet_warned: bool,
    prop1_pred: Vec<f64>,
    prop1_emb: Vec<f64>,
    self_pairs: usize,
    pairs: usize,
}

/// Drives one training run. Single-threaded with respect to parameter
/// state; all randomness flows through one seeded generator.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub net: StagedNetwork,
    pub predictor: RatioPredictor,
    /// Duplicated prediction branch for domain-generalization training.
    pub twin: Option<StagedNetwork>,
    adam: Adam,
    rng: ChaCha8Rng,
    source: Dataset,
    target: Dataset,
    bank: MemoryBank,
    c_s: usize,
    class_of: BTreeMap<usize, usize>,
    current_epoch: usize,
    /// Separate stream for mix-ratio draws so configurations that bypass
    /// the predictor stay aligned with the main sampling stream.
    ratio_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new_uda(cfg: TrainConfig, source: Dataset, target: Dataset) -> Result<Self> {
        if cfg.mode != TrainMode::Uda {
            return Err(Error::Domain("config mode is not uda".into()));
        }
        Self::build(cfg, source, target)
    }

    /// Domain generalization: one merged labeled pool, no domain labels and
    /// no clustering; a twin branch from stage l+1 through the classifier
    /// receives the mirrors.
    pub fn new_dg(cfg: TrainConfig, merged: Dataset) -> Result<Self> {
        if cfg.mode != TrainMode::Dg {
            return Err(Error::Domain("config mode is not dg".into()));
        }
        let shape = merged.image_shape;
        Self::build(cfg, merged, Dataset::empty(shape))
    }

    fn build(cfg: TrainConfig, source: Dataset, target: Dataset) -> Result<Self> {
        cfg.validate()?;
        if source.is_empty() {
            return Err(Error::Domain("empty training set".into()));
        }
        let ids = source.identities();
        let class_of: BTreeMap<usize, usize> =
            ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c_s = ids.len();
        let net = StagedNetwork::new(cfg.net.clone(), c_s, &mut store, &mut rng)?;
        let predictor = RatioPredictor::new(
            cfg.net.channels_after(cfg.stage_m),
            cfg.reduction,
            &mut store,
            &mut rng,
        )?;
        let twin = if cfg.mode == TrainMode::Dg {
            let mut t = StagedNetwork::new(cfg.net.clone(), c_s, &mut store, &mut rng)?;
            t.copy_state_from(&mut store, &net)?;
            Some(t)
        } else {
            None
        };
        let adam = Adam::new(cfg.lr, cfg.weight_decay, 0.9, 0.999);
        let capacity = cfg.bank_capacity.unwrap_or(source.len() + target.len());
        let bank = MemoryBank::new(capacity.max(1), cfg.net.embed_dim());
        let cfg_seed = cfg.seed;
        Ok(Self {
            cfg,
            store,
            net,
            predictor,
            twin,
            adam,
            rng,
            source,
            target,
            bank,
            c_s,
            class_of,
            current_epoch: 0,
            ratio_rng: ChaCha8Rng::seed_from_u64(cfg_seed ^ 0x5EED4A71),
        })
    }

    pub fn source_classes(&self) -> usize {
        self.c_s
    }

    /// Dense class index of a source identity.
    fn source_class(&self, identity: usize) -> usize {
        self.class_of[&identity]
    }

    /// Evaluation-mode inference embeddings (classifier-normalized pooled
    /// features) of a dataset, in chunks.
    pub fn embed_dataset(&mut self, ds: &Dataset, branch: Branch) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(ds.len());
        for chunk in ds.samples.chunks(64) {
            let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
            let batch = Tensor::stack(&images)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let emb = self.net.embed(&mut tape, &self.store, x, branch, ForwardMode::Eval)?;
            let neck = self.net.neck(&mut tape, &self.store, emb, ForwardMode::Eval)?;
            let v = tape.value(neck);
            let d = v.shape()[1];
            out.extend((0..v.shape()[0]).map(|i| v.data()[i * d..(i + 1) * d].to_vec()));
        }
        Ok(out)
    }

    /// Retrieval metrics of the current network on a query/gallery split.
    pub fn retrieval(
        &mut self,
        query: &Dataset,
        gallery: &Dataset,
        branch: Branch,
    ) -> Result<RetrievalMetrics> {
        let qe = self.embed_dataset(query, branch)?;
        let ge = self.embed_dataset(gallery, branch)?;
        map_cmc(
            &qe,
            &ge,
            &query.labels(),
            &gallery.labels(),
            &[1, 5, 10],
            false,
        )
    }

    /// The desk adaptation score: mean average precision of cross-domain
    /// retrieval, averaged over both directions (target-styled queries
    /// against the source-styled gallery and vice versa).
    pub fn cross_domain_map(&mut self, bundle: &crate::synthdata::UdaBundle) -> Result<f64> {
        let qt = self.embed_dataset(&bundle.query_target, Branch::Target)?;
        let gs = self.embed_dataset(&bundle.gallery_source, Branch::Source)?;
        let m1 = map_cmc(
            &qt,
            &gs,
            &bundle.query_target.labels(),
            &bundle.gallery_source.labels(),
            &[1, 5, 10],
            false,
        )?;
        let qs = self.embed_dataset(&bundle.query_source, Branch::Source)?;
        let gt = self.embed_dataset(&bundle.gallery_target, Branch::Target)?;
        let m2 = map_cmc(
            &qs,
            &gt,
            &bundle.query_source.labels(),
            &bundle.gallery_target.labels(),
            &[1, 5, 10],
            false,
        )?;
        Ok((m1.map + m2.map) / 2.0)
    }

    /// Alignment diagnostic: overlap between the source-to-intermediate and
    /// target-to-intermediate embedding distance distributions under the
    /// current model. Runs the mixing path in evaluation mode.
    pub fn alignment_overlap(&mut self, n_pairs: usize, seed: u64) -> Result<f64> {
        if self.target.is_empty() {
            return Err(Error::State("alignment overlap needs a target set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = 128usize;
        let src_idx: Vec<usize> = (0..pairs).map(|_| rng.gen_range(0..self.source.len())).collect();
        let tgt_idx: Vec<usize> = (0..pairs).map(|_| rng.gen_range(0..self.target.len())).collect();
        let xs = Tensor::stack(
            &src_idx.iter().map(|&i| self.source.samples[i].image.clone()).collect::<Vec<_>>(),
        )?;
        let xt = Tensor::stack(
            &tgt_idx.iter().map(|&i| self.target.samples[i].image.clone()).collect::<Vec<_>>(),
        )?;
        let m = self.cfg.stage_m;
        let mode = ForwardMode::Eval;
        let mut tape = Tape::new();
        let xs = tape.constant(xs);
        let xt = tape.constant(xt);
        let gs = self.net.forward_to_stage(&mut tape, &self.store, xs, m, Branch::Source, mode)?;
        let gt = self.net.forward_to_stage(&mut tape, &self.store, xt, m, Branch::Target, mode)?;
        let a = self.predictor.predict_t(&mut tape, &self.store, gs, gt, mode)?;
        let gi = mix_features_t(&mut tape, gs, gt, a);
        let f_s = self.net.forward_from_stage(&mut tape, &self.store, gs, m, Branch::Source, mode)?;
        let f_t = self.net.forward_from_stage(&mut tape, &self.store, gt, m, Branch::Target, mode)?;
        let f_i = self.net.forward_from_stage(&mut tape, &self.store, gi, m, Branch::Intermediate, mode)?;
        let f_s = self.net.neck(&mut tape, &self.store, f_s, mode)?;
        let f_t = self.net.neck(&mut tape, &self.store, f_t, mode)?;
        let f_i = self.net.neck(&mut tape, &self.store, f_i, mode)?;
        let rows = |t: &Tensor| -> Vec<Vec<f64>> {
            let d = t.shape()[1];
            (0..t.shape()[0]).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
        };
        let (es, et, ei) = (rows(tape.value(f_s)), rows(tape.value(f_t)), rows(tape.value(f_i)));
        let d_si = pairwise_distance_samples(&es, &ei, n_pairs, seed ^ 0x51);
        let d_ti = pairwise_distance_samples(&et, &ei, n_pairs, seed ^ 0x52);
        distribution_overlap(&distance_histogram(&d_si), &distance_histogram(&d_ti))
    }

    /// Runs every epoch and returns the metrics log.
    pub fn train(&mut self) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        for epoch in 1..=self.cfg.epochs {
            if self.cfg.lr_drop_epochs.contains(&epoch) {
                self.adam.drop_lr();
            }
            self.current_epoch = epoch;
            let record = match self.cfg.mode {
                TrainMode::Uda => self.run_uda_epoch(epoch)?,
                TrainMode::Dg => self.run_dg_epoch(epoch)?,
            };
            log.epochs.push(record);
        }
        Ok(log)
    }

    // ---- UDA ----

    fn refresh_pseudo_labels(&mut self) -> Result<PseudoState> {
        let embeddings = self.embed_dataset(&self.target.clone(), Branch::Target)?;
        let eps = match self.cfg.cluster_eps_quantile {
            Some(q) => distance_quantile(&embeddings, q).max(1e-6),
            None => self.cfg.cluster_eps,
        };
        let (assignment, centroids) =
            assign_pseudo_labels(&embeddings, eps, self.cfg.cluster_min_pts)?;
        self.net.refresh_target_classifier(&mut self.store, &centroids)?;
        for id in self.net.target_block_params() {
            self.adam.reset_param(id);
        }
        // Pseudo identities change meaning across refreshes; stale entries
        // would alias new labels.
        self.bank.clear();
        let truth = self.target.labels();
        let bcubed = crate::pseudo::bcubed_fscore(&assignment, &truth)?;
        let nmi = crate::pseudo::nmi(&assignment, &truth)?;
        Ok(PseudoState {
            members: assignment.members(),
            c_t: assignment.n_clusters,
            noise: assignment.noise_count(),
            bcubed: Some(bcubed),
            nmi: Some(nmi),
        })
    }

    /// Picks `n_ids` groups of two sample indices from identity pools.
    fn sample_identity_batch(
        rng: &mut ChaCha8Rng,
        pools: &[Vec<usize>],
        n_ids: usize,
    ) -> Vec<usize> {
        let mut order: Vec<usize> = (0..pools.len()).collect();
        order.shuffle(rng);
        let mut picked = Vec::with_capacity(n_ids * 2);
        for k in 0..n_ids {
            let pool = &pools[order[k % order.len()]];
            if pool.len() >= 2 {
                let a = rng.gen_range(0..pool.len());
                let mut b = rng.gen_range(0..pool.len() - 1);
                if b >= a {
                    b += 1;
                }
                picked.push(pool[a]);
                picked.push(pool[b]);
            } else {
                picked.push(pool[0]);
                picked.push(pool[0]);
            }
        }
        picked
    }

    fn run_uda_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let pseudo = self.refresh_pseudo_labels()?;
        let source_only = pseudo.c_t == 0;

        let source_pools: Vec<Vec<usize>> =
            self.source.by_identity().into_values().collect();
        let mut sums = LossComponents::default();
        let mut total_sum = 0.0;
        let mut skipped = 0usize;
        let mut warnings = 0usize;
        let mut prop1_pred = Vec::new();
        let mut prop1_emb = Vec::new();
        for _ in 0..self.cfg.iters_per_epoch {
            let stats = if source_only {
                self.source_only_iteration(&source_pools)?
            } else {
                self.uda_iteration(&source_pools, &pseudo)?
            };
            match stats {
                Some(s) => {
                    sums.cls += s.components.cls;
                    sums.tri += s.components.tri;
                    sums.bridge_pred += s.components.bridge_pred;
                    sums.bridge_feat += s.components.bridge_feat;
                    sums.div += s.components.div;
                    sums.cons += s.components.cons;
                    total_sum += s.total;
                    warnings += s.triplet_warned as usize;
                    prop1_pred.extend(s.prop1_pred);
                    prop1_emb.extend(s.prop1_emb);
                }
                None => skipped += 1,
            }
        }
        let done = (self.cfg.iters_per_epoch - skipped).max(1) as f64;
        Ok(EpochRecord {
            epoch,
            lr: self.adam.lr(),
            c_t: pseudo.c_t,
            noise: pseudo.noise,
            bcubed_f: pseudo.bcubed,
            nmi: pseudo.nmi,
            source_only,
            cls: sums.cls / done,
            tri: sums.tri / done,
            bridge_pred: sums.bridge_pred / done,
            bridge_feat: sums.bridge_feat / done,
            div: sums.div / done,
            cons: sums.cons / done,
            total: total_sum / done,
            skipped_iters: skipped,
            triplet_warnings: warnings,
            prop1_predicted_ratio: median(&mut prop1_pred),
            prop1_embedding_ratio: median(&mut prop1_emb),
            self_pair_rate: None,
        })
    }

    /// Produces the ratio node for a source/target pair batch.
    fn ratio_node(
        &mut self,
        tape: &mut Tape,
        g_s: NodeId,
        g_t: NodeId,
        n: usize,
    ) -> Result<(NodeId, bool)> {
        match self.cfg.flags.mix {
            MixMode::Idm => {
                let a = self
                    .predictor
                    .predict_t(tape, &self.store, g_s, g_t, ForwardMode::train())?;
                Ok((a, true))
            }
            MixMode::RandomBeta(alpha) => {
                let beta = Beta::new(alpha, alpha)
                    .map_err(|e| Error::Domain(format!("beta distribution: {e}")))?;
                let mut data = Vec::with_capacity(n * 2);
                for _ in 0..n {
                    let a_s: f64 = beta.sample(&mut self.ratio_rng);
                    data.push(a_s);
                    data.push(1.0 - a_s);
                }
                Ok((tape.constant(Tensor::from_parts(vec![n, 2], data)), false))
            }
            MixMode::Fixed(a_s) => {
                let mut data = Vec::with_capacity(n * 2);
                for _ in 0..n {
                    data.push(a_s);
                    data.push(1.0 - a_s);
                }
                Ok((tape.constant(Tensor::from_parts(vec![n, 2], data)), false))
            }
        }
    }

    fn uda_iteration(
        &mut self,
        source_pools: &[Vec<usize>],
        pseudo: &PseudoState,
    ) -> Result<Option<IterStats>> {
        let cfg = self.cfg.clone();
        let n = cfg.batch_n;
        let n_ids = n / 2;
        let src_idx = Self::sample_identity_batch(&mut self.rng, source_pools, n_ids);
        let tgt_idx = Self::sample_identity_batch(&mut self.rng, &pseudo.members, n_ids);
        let labels_s: Vec<usize> = src_idx
            .iter()
            .map(|&i| self.source_class(self.source.samples[i].identity))
            .collect();
        // Pseudo identities occupy the block after the source classes.
        let pseudo_of = |sample: usize| -> usize {
            pseudo
                .members
                .iter()
                .position(|m| m.contains(&sample))
                .expect("sampled from cluster members")
        };
        let labels_t: Vec<usize> = tgt_idx.iter().map(|&i| self.c_s + pseudo_of(i)).collect();

        let xs = Tensor::stack(
            &src_idx.iter().map(|&i| self.source.samples[i].image.clone()).collect::<Vec<_>>(),
        )?;
        let xt = Tensor::stack(
            &tgt_idx.iter().map(|&i| self.target.samples[i].image.clone()).collect::<Vec<_>>(),
        )?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.rng);

        let mode = ForwardMode::train();
        let mut tape = Tape::new();
        let xs = tape.constant(xs);
        let xt = tape.constant(xt);
        let (m, l) = (cfg.stage_m, cfg.stage_l);
        let g_s_m = self.net.forward_to_stage(&mut tape, &self.store, xs, m, Branch::Source, mode)?;
        let g_t_m = self.net.forward_to_stage(&mut tape, &self.store, xt, m, Branch::Target, mode)?;

        // The mixed path exists only when some enabled loss consumes it;
        // a pure baseline run never touches the predictor or the
        // intermediate branch.
        let (mu1, mu2, mu3, mu4) = cfg.effective_mus();
        let mix_needed = mu1 > 0.0
            || mu2 > 0.0
            || mu3 > 0.0
            || cfg.flags.cons
            || cfg.flags.mirrors_in_reid
            || cfg.flags.inter_in_reid;
        let cons_on = cfg.flags.cons && self.current_epoch > cfg.cons_warmup_epochs;

        let g_s_l = self.net.forward_span(&mut tape, &self.store, g_s_m, m, l, Branch::Source, mode)?;
        let g_t_l = self.net.forward_span(&mut tape, &self.store, g_t_m, m, l, Branch::Target, mode)?;
        let f_s = self.net.forward_from_stage(&mut tape, &self.store, g_s_l, l, Branch::Source, mode)?;
        let f_t = self.net.forward_from_stage(&mut tape, &self.store, g_t_l, l, Branch::Target, mode)?;
        let f_t_perm = tape.gather_rows(f_t, perm.clone());

        let mixed = if mix_needed {
            let g_t_m_perm = tape.gather_rows(g_t_m, perm.clone());
            let (ratios, _) = self.ratio_node(&mut tape, g_s_m, g_t_m_perm, n)?;
            let g_i_m = mix_features_t(&mut tape, g_s_m, g_t_m_perm, ratios);
            let g_i_l =
                self.net.forward_span(&mut tape, &self.store, g_i_m, m, l, Branch::Intermediate, mode)?;
            // Everything carrying intermediate style (the mixed maps and
            // both mirror sets) shares one batch statistic downstream.
            let (f_i, mirrors) = if cons_on || cfg.flags.mirrors_in_reid {
                let g_t_l_perm = tape.gather_rows(g_t_l, perm.clone());
                let (g_s2i, g_t2i) = make_mirrors_t(&mut tape, g_s_l, g_t_l_perm, g_i_l)?;
                let mut g_all = tape.concat_rows(g_i_l, g_s2i);
                g_all = tape.concat_rows(g_all, g_t2i);
                let f_all = self
                    .net
                    .forward_from_stage(&mut tape, &self.store, g_all, l, Branch::Intermediate, mode)?;
                let f_i = tape.slice_rows(f_all, 0, n);
                let f_s2i = tape.slice_rows(f_all, n, 2 * n);
                let f_t2i = tape.slice_rows(f_all, 2 * n, 3 * n);
                (f_i, Some((f_s2i, f_t2i)))
            } else {
                let f_i = self
                    .net
                    .forward_from_stage(&mut tape, &self.store, g_i_l, l, Branch::Intermediate, mode)?;
                (f_i, None)
            };
            Some((ratios, f_i, mirrors))
        } else {
            None
        };

        // One classifier pass over every path keeps one batch statistic.
        let mut emb_all = tape.concat_rows(f_s, f_t);
        if let Some((_, f_i, mirrors)) = &mixed {
            emb_all = tape.concat_rows(emb_all, *f_i);
            if let Some((f_s2i, f_t2i)) = mirrors {
                emb_all = tape.concat_rows(emb_all, *f_s2i);
                emb_all = tape.concat_rows(emb_all, *f_t2i);
            }
        }
        let logits = self.net.logits(&mut tape, &self.store, emb_all, mode)?;
        let probs = tape.softmax_rows(logits, 1.0);

        let labels_t_perm: Vec<usize> = perm.iter().map(|&i| labels_t[i]).collect();

        // Classification over the originals (plus mirrors when configured).
        let mut cls_rows = tape.slice_rows(probs, 0, 2 * n);
        let mut cls_labels: Vec<usize> = labels_s.iter().chain(&labels_t).cloned().collect();
        if cfg.flags.mirrors_in_reid && matches!(&mixed, Some((_, _, Some(_)))) {
            let mirror_rows = tape.slice_rows(probs, 3 * n, 5 * n);
            cls_rows = tape.concat_rows(cls_rows, mirror_rows);
            cls_labels.extend(labels_s.iter().cloned());
            cls_labels.extend(labels_t_perm.iter().cloned());
        }
        let l_cls = crate::losses::cls_loss_t(&mut tape, cls_rows, &cls_labels);

        // Triplet over the original embeddings (batch-hard, memory mining).
        let mut tri_emb = tape.concat_rows(f_s, f_t);
        let mut tri_labels: Vec<usize> = labels_s.iter().chain(&labels_t).cloned().collect();
        if cfg.flags.inter_in_reid {
            if let Some((ratios, f_i, _)) = &mixed {
                tri_emb = tape.concat_rows(tri_emb, *f_i);
                let av = tape.value(*ratios).clone();
                for i in 0..n {
                    let dominant =
                        if av.row(i)[0] >= 0.5 { labels_s[i] } else { labels_t_perm[i] };
                    tri_labels.push(dominant);
                }
            }
        }
        let empty_bank = MemoryBank::new(1, cfg.net.embed_dim());
        let bank_ref = if cfg.flags.xbm { &self.bank } else { &empty_bank };
        let tri =
            crate::losses::triplet_xbm_loss_t(&mut tape, tri_emb, &tri_labels, bank_ref, cfg.triplet_margin);

        // Bridge, diversity, and consistency losses on the mixed path.
        let mut total = tape.scale_shift(l_cls, 1.0 - mu1, 0.0);
        total = tape.add(total, tri.loss);
        let mut components = LossComponents {
            cls: tape.scalar_value(l_cls),
            tri: tape.scalar_value(tri.loss),
            ..LossComponents::default()
        };
        let (mut prop1_pred, mut prop1_emb) = (Vec::new(), Vec::new());
        if let Some((ratios, f_i, mirrors)) = &mixed {
            let p_i = tape.slice_rows(probs, 2 * n, 3 * n);
            if mu1 > 0.0 {
                let l_bp =
                    crate::idm::bridge_pred_loss_t(&mut tape, p_i, *ratios, &labels_s, &labels_t_perm);
                let t = tape.scale_shift(l_bp, mu1, 0.0);
                total = tape.add(total, t);
                components.bridge_pred = tape.scalar_value(l_bp);
            }
            if mu2 > 0.0 {
                let l_bf = crate::idm::bridge_feat_loss_t(&mut tape, f_s, f_t_perm, *f_i, *ratios);
                let t = tape.scale_shift(l_bf, mu2, 0.0);
                total = tape.add(total, t);
                components.bridge_feat = tape.scalar_value(l_bf);
            }
            if mu3 > 0.0 {
                let l_div = crate::idm::diversity_loss_t(&mut tape, *ratios);
                let t = tape.scale_shift(l_div, mu3, 0.0);
                total = tape.add(total, t);
                components.div = tape.scalar_value(l_div);
            }
            if cons_on && mu4 > 0.0 {
                if let Some((f_s2i, f_t2i)) = mirrors {
                    let _ = (f_s2i, f_t2i);
                    let probs_tau = tape.softmax_rows(logits, cfg.tau);
                    let p_s_tau = tape.slice_rows(probs_tau, 0, n);
                    let p_t_tau = tape.slice_rows(probs_tau, n, 2 * n);
                    let p_t_tau_perm = tape.gather_rows(p_t_tau, perm.clone());
                    let p_s2i_tau = tape.slice_rows(probs_tau, 3 * n, 4 * n);
                    let p_t2i_tau = tape.slice_rows(probs_tau, 4 * n, 5 * n);
                    let l_cons = crate::mgm::consistency_loss_t(
                        &mut tape, p_s_tau, p_s2i_tau, p_t_tau_perm, p_t2i_tau, cfg.tau,
                    );
                    let t = tape.scale_shift(l_cons, mu4, 0.0);
                    total = tape.add(total, t);
                    components.cons = tape.scalar_value(l_cons);
                }
            }

            // Property-1 diagnostics from detached values.
            let av = tape.value(*ratios).clone();
            let vs = tape.value(f_s).clone();
            let vt = tape.value(f_t_perm).clone();
            let vi = tape.value(*f_i).clone();
            for i in 0..n {
                let (a_s, a_t) = (av.row(i)[0], av.row(i)[1]);
                if a_s > 1e-9 {
                    prop1_pred.push(a_t / a_s);
                }
                let ds = crate::numerics::euclidean(vs.row(i), vi.row(i));
                let dt = crate::numerics::euclidean(vt.row(i), vi.row(i));
                if dt > 1e-12 {
                    prop1_emb.push(ds / dt);
                }
            }
        }
        let triplet_warned = tri.all_skipped;

        if !self.apply_step(&tape, total)? {
            return Ok(None);
        }

        // Memory update with detached original embeddings.
        if cfg.flags.xbm {
            let to_rows = |t: &Tensor| -> Vec<Vec<f64>> {
                let d = t.shape()[1];
                (0..t.shape()[0]).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
            };
            let mut embs = to_rows(tape.value(f_s));
            embs.extend(to_rows(tape.value(f_t)));
            let mut labels = labels_s.clone();
            labels.extend(labels_t.iter().cloned());
            let mut domains = vec![Branch::Source; n];
            domains.extend(vec![Branch::Target; n]);
            self.bank.update(&embs, &labels, &domains)?;
        }

        Ok(Some(IterStats {
            components,
            total: tape.scalar_value(total),
            triplet_warned,
            prop1_pred,
            prop1_emb,
            self_pairs: 0,
            pairs: n,
        }))
    }

    /// Fallback when clustering produced no pseudo identities: supervised
    /// source training only.
    fn source_only_iteration(&mut self, source_pools: &[Vec<usize>]) -> Result<Option<IterStats>> {
        let cfg = self.cfg.clone();
        let n = cfg.batch_n;
        let src_idx = Self::sample_identity_batch(&mut self.rng, source_pools, n / 2);
        let labels: Vec<usize> = src_idx
            .iter()
            .map(|&i| self.source_class(self.source.samples[i].identity))
            .collect();
        let xs = Tensor::stack(
            &src_idx.iter().map(|&i| self.source.samples[i].image.clone()).collect::<Vec<_>>(),
        )?;
        let mode = ForwardMode::train();
        let mut tape = Tape::new();
        let xs = tape.constant(xs);
        let f = self.net.embed(&mut tape, &self.store, xs, Branch::Source, mode)?;
        let probs = self.net.classify(&mut tape, &self.store, f, 1.0, mode)?;
        let l_cls = crate::losses::cls_loss_t(&mut tape, probs, &labels);
        let empty_bank = MemoryBank::new(1, cfg.net.embed_dim());
        let bank_ref = if cfg.flags.xbm { &self.bank } else { &empty_bank };
        let tri = crate::losses::triplet_xbm_loss_t(&mut tape, f, &labels, bank_ref, cfg.triplet_margin);
        let (mu1, _, _, _) = cfg.effective_mus();
        let mut total = tape.scale_shift(l_cls, 1.0 - mu1, 0.0);
        total = tape.add(total, tri.loss);

        let components = LossComponents {
            cls: tape.scalar_value(l_cls),
            tri: tape.scalar_value(tri.loss),
            ..LossComponents::default()
        };
        let warned = tri.all_skipped;
        if !self.apply_step(&tape, total)? {
            return Ok(None);
        }
        if cfg.flags.xbm {
            let v = tape.value(f).clone();
            let d = v.shape()[1];
            let embs: Vec<Vec<f64>> =
                (0..n).map(|i| v.data()[i * d..(i + 1) * d].to_vec()).collect();
            self.bank.update(&embs, &labels, &vec![Branch::Source; n])?;
        }
        Ok(Some(IterStats {
            components,
            total: tape.scalar_value(total),
            triplet_warned: warned,
            prop1_pred: Vec::new(),
            prop1_emb: Vec::new(),
            self_pairs: 0,
            pairs: 0,
        }))
    }

    // ---- DG ----

    fn run_dg_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let pools: Vec<Vec<usize>> = self.source.by_identity().into_values().collect();
        let mut sums = LossComponents::default();
        let mut total_sum = 0.0;
        let mut skipped = 0usize;
        let mut warnings = 0usize;
        let mut prop1_pred = Vec::new();
        let mut prop1_emb = Vec::new();
        let mut self_pairs = 0usize;
        let mut pairs = 0usize;
        for _ in 0..self.cfg.iters_per_epoch {
            match self.dg_iteration(&pools)? {
                Some(s) => {
                    sums.cls += s.components.cls;
                    sums.tri += s.components.tri;
                    sums.bridge_pred += s.components.bridge_pred;
                    sums.bridge_feat += s.components.bridge_feat;
                    sums.div += s.components.div;
                    sums.cons += s.components.cons;
                    total_sum += s.total;
                    warnings += s.triplet_warned as usize;
                    prop1_pred.extend(s.prop1_pred);
                    prop1_emb.extend(s.prop1_emb);
                    self_pairs += s.self_pairs;
                    pairs += s.pairs;
                }
                None => skipped += 1,
            }
        }
        let done = (self.cfg.iters_per_epoch - skipped).max(1) as f64;
        Ok(EpochRecord {
            epoch,
            lr: self.adam.lr(),
            c_t: 0,
            noise: 0,
            bcubed_f: None,
            nmi: None,
            source_only: false,
            cls: sums.cls / done,
            tri: sums.tri / done,
            bridge_pred: sums.bridge_pred / done,
            bridge_feat: sums.bridge_feat / done,
            div: sums.div / done,
            cons: sums.cons / done,
            total: total_sum / done,
            skipped_iters: skipped,
            triplet_warnings: warnings,
            prop1_predicted_ratio: median(&mut prop1_pred),
            prop1_embedding_ratio: median(&mut prop1_emb),
            self_pair_rate: Some(if pairs > 0 { self_pairs as f64 / pairs as f64 } else { 0.0 }),
        })
    }

    fn dg_iteration(&mut self, pools: &[Vec<usize>]) -> Result<Option<IterStats>> {
        let cfg = self.cfg.clone();
        let n = cfg.batch_n * 2;
        let idx = Self::sample_identity_batch(&mut self.rng, pools, n / 2);
        let labels: Vec<usize> = idx
            .iter()
            .map(|&i| self.source_class(self.source.samples[i].identity))
            .collect();
        let x = Tensor::stack(
            &idx.iter().map(|&i| self.source.samples[i].image.clone()).collect::<Vec<_>>(),
        )?;
        // A fresh shuffle per iteration builds the pseudo-target view;
        // self-pairs are allowed and recorded.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.rng);
        let self_pairs = perm.iter().enumerate().filter(|&(i, &p)| i == p).count();

        let mode = ForwardMode::train();
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let (m, l) = (cfg.stage_m, cfg.stage_l);
        let g_m = self.net.forward_to_stage(&mut tape, &self.store, x, m, Branch::Source, mode)?;
        let g_m_tilde = tape.gather_rows(g_m, perm.clone());
        let (ratios, _) = self.ratio_node(&mut tape, g_m, g_m_tilde, n)?;
        let g_i_m = mix_features_t(&mut tape, g_m, g_m_tilde, ratios);

        let g_l = self.net.forward_span(&mut tape, &self.store, g_m, m, l, Branch::Source, mode)?;
        let g_i_l = self.net.forward_span(&mut tape, &self.store, g_i_m, m, l, Branch::Intermediate, mode)?;

        let f = self.net.forward_from_stage(&mut tape, &self.store, g_l, l, Branch::Source, mode)?;
        let f_i = self.net.forward_from_stage(&mut tape, &self.store, g_i_l, l, Branch::Intermediate, mode)?;
        let f_perm = tape.gather_rows(f, perm.clone());

        let emb_all = tape.concat_rows(f, f_i);
        let logits = self.net.logits(&mut tape, &self.store, emb_all, mode)?;
        let probs = tape.softmax_rows(logits, 1.0);
        let p_orig = tape.slice_rows(probs, 0, n);
        let p_i = tape.slice_rows(probs, n, 2 * n);

        let l_cls = crate::losses::cls_loss_t(&mut tape, p_orig, &labels);
        let empty_bank = MemoryBank::new(1, cfg.net.embed_dim());
        let bank_ref = if cfg.flags.xbm { &self.bank } else { &empty_bank };
        let tri = crate::losses::triplet_xbm_loss_t(&mut tape, f, &labels, bank_ref, cfg.triplet_margin);

        let labels_perm: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let l_bp = crate::idm::bridge_pred_loss_t(&mut tape, p_i, ratios, &labels, &labels_perm);
        let l_bf = crate::idm::bridge_feat_loss_t(&mut tape, f, f_perm, f_i, ratios);
        let use_div = cfg.flags.div && matches!(cfg.flags.mix, MixMode::Idm);
        let l_div = crate::idm::diversity_loss_t(&mut tape, ratios);

        // Source mirrors through the twin branch; consistency between the
        // two branches' tempered predictions.
        let cons_on = cfg.flags.cons && self.current_epoch > cfg.cons_warmup_epochs;
        let (l_cons, cons_active) = if cons_on {
            let mirror_l = crate::mgm::adain_t(&mut tape, g_l, g_i_l);
            let twin = self.twin.as_mut().expect("dg trainer has a twin branch");
            let f_mirror =
                twin.forward_from_stage(&mut tape, &self.store, mirror_l, l, Branch::Intermediate, mode)?;
            let p_mirror_tau = twin.classify(&mut tape, &self.store, f_mirror, cfg.tau, mode)?;
            let logits_orig = tape.slice_rows(logits, 0, n);
            let p_orig_tau = tape.softmax_rows(logits_orig, cfg.tau);
            (
                crate::mgm::consistency_loss_single_t(&mut tape, p_orig_tau, p_mirror_tau, cfg.tau),
                true,
            )
        } else {
            (tape.constant_scalar(0.0), false)
        };

        let (mu1, mu2, mu3, mu4) = cfg.effective_mus();
        let mut total = tape.scale_shift(l_cls, 1.0 - mu1, 0.0);
        total = tape.add(total, tri.loss);
        if mu1 > 0.0 {
            let t = tape.scale_shift(l_bp, mu1, 0.0);
            total = tape.add(total, t);
        }
        if mu2 > 0.0 {
            let t = tape.scale_shift(l_bf, mu2, 0.0);
            total = tape.add(total, t);
        }
        if mu3 > 0.0 {
            let t = tape.scale_shift(l_div, mu3, 0.0);
            total = tape.add(total, t);
        }
        if cons_active && mu4 > 0.0 {
            let t = tape.scale_shift(l_cons, mu4, 0.0);
            total = tape.add(total, t);
        }

        let components = LossComponents {
            cls: tape.scalar_value(l_cls),
            tri: tape.scalar_value(tri.loss),
            bridge_pred: if cfg.flags.bridge_pred { tape.scalar_value(l_bp) } else { 0.0 },
            bridge_feat: if cfg.flags.bridge_feat { tape.scalar_value(l_bf) } else { 0.0 },
            div: if use_div { tape.scalar_value(l_div) } else { 0.0 },
            cons: if cons_active { tape.scalar_value(l_cons) } else { 0.0 },
        };
        let warned = tri.all_skipped;

        let (mut prop1_pred, mut prop1_emb) = (Vec::new(), Vec::new());
        {
            let av = tape.value(ratios).clone();
            let vf = tape.value(f).clone();
            let vp = tape.value(f_perm).clone();
            let vi = tape.value(f_i).clone();
            for i in 0..n {
                let (a_s, a_t) = (av.row(i)[0], av.row(i)[1]);
                if a_s > 1e-9 {
                    prop1_pred.push(a_t / a_s);
                }
                let ds = crate::numerics::euclidean(vf.row(i), vi.row(i));
                let dt = crate::numerics::euclidean(vp.row(i), vi.row(i));
                if dt > 1e-12 {
                    prop1_emb.push(ds / dt);
                }
            }
        }

        if !self.apply_step(&tape, total)? {
            return Ok(None);
        }
        if cfg.flags.xbm {
            let v = tape.value(f).clone();
            let d = v.shape()[1];
            let embs: Vec<Vec<f64>> =
                (0..n).map(|i| v.data()[i * d..(i + 1) * d].to_vec()).collect();
            self.bank.update(&embs, &labels, &vec![Branch::Source; n])?;
        }
        Ok(Some(IterStats {
            components,
            total: tape.scalar_value(total),
            triplet_warned: warned,
            prop1_pred,
            prop1_emb,
            self_pairs,
            pairs: n,
        }))
    }

    /// Backward pass and optimizer step; returns false (iteration skipped)
    /// when the loss or any gradient is non-finite.
    fn apply_step(&mut self, tape: &Tape, total: NodeId) -> Result<bool> {
        if !tape.value(total).all_finite() {
            return Ok(false);
        }
        let grads = tape.backward(total);
        let mut by_param: BTreeMap<usize, Tensor> = BTreeMap::new();
        for id in self.store.ids() {
            if let Some(node) = tape.param_node(id.index()) {
                if let Some(g) = grads.get(node) {
                    if !g.all_finite() {
                        return Ok(false);
                    }
                    by_param.insert(id.index(), g.clone());
                }
            }
        }
        if let Some(clip) = self.cfg.grad_clip {
            let total: f64 = by_param
                .values()
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = total.sqrt();
            if norm > clip {
                let scale = clip / norm;
                for g in by_param.values_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        self.adam.step(&mut self.store, &by_param);
        Ok(true)
    }
}

/// Quantile of the pairwise Euclidean distances between L2-normalized
/// embeddings.
fn distance_quantile(embeddings: &[Vec<f64>], q: f64) -> f64 {
    let normalized: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| crate::numerics::l2_normalized(e))
        .collect();
    let mut dists = Vec::with_capacity(normalized.len() * (normalized.len() - 1) / 2);
    for i in 0..normalized.len() {
        for j in (i + 1)..normalized.len() {
            dists.push(crate::numerics::euclidean(&normalized[i], &normalized[j]));
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((dists.len() - 1) as f64 * q.clamp(0.0, 1.0)) as usize;
    dists[idx]
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(values[values.len() / 2])
}
