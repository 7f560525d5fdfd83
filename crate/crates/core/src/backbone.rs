//! Staged feedforward network with per-domain normalization branches and a
//! hybrid classifier over source identities plus target pseudo-identities.
//!
//! Each stage applies a position-wise linear map over channels to an
//! h x w x c feature map, followed by branch normalization and tanh.
//! Stage 0 additionally halves the spatial extent by average pooling.
//! Plug points exist after every stage: the feature map produced by
//! [`StagedNetwork::forward_to_stage`] can be modified (mixed, re-styled)
//! and pushed through the rest of the network with
//! [`StagedNetwork::forward_from_stage`].

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalized, NodeId, Tape, Tensor};
use crate::params::{gaussian, xavier, ParamId, ParamStore};

/// Normalization branch a batch is routed through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Source,
    Target,
    Intermediate,
}

impl Branch {
    pub(crate) fn index(self) -> usize {
        match self {
            Branch::Source => 0,
            Branch::Target => 1,
            Branch::Intermediate => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Source => "source",
            Branch::Target => "target",
            Branch::Intermediate => "intermediate",
        }
    }
}

/// How a forward pass treats normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics; running statistics updated when `update_stats`.
    Train { update_stats: bool },
    /// Running statistics; fully deterministic.
    Eval,
}

impl ForwardMode {
    pub fn train() -> Self {
        ForwardMode::Train { update_stats: true }
    }

    /// Batch statistics without touching running state. Used wherever the
    /// same loss must be re-evaluated deterministically (gradient checks).
    pub fn train_frozen() -> Self {
        ForwardMode::Train {
            update_stats: false,
        }
    }
}

/// Architecture of the staged network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Input image shape (h0, w0, c0).
    pub input: (usize, usize, usize),
    /// Output channel width of each stage; the last entry is the embedding
    /// dimension d.
    pub widths: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl NetConfig {
    /// Desk-scale default: five stages mirroring a stage-0..4 layout,
    /// 4x4 maps after the stage-0 pool, embedding dimension 32.
    pub fn desk() -> Self {
        Self {
            input: (8, 8, 4),
            widths: vec![8, 16, 16, 32, 32],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Smallest legal network (S = 2), for fast gradient sweeps.
    pub fn tiny() -> Self {
        Self {
            input: (4, 4, 3),
            widths: vec![4, 6, 8],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::Domain(
                "need at least stages 0..2 for distinct plug points".into(),
            ));
        }
        let (h, w, _) = self.input;
        if h % 2 != 0 || w % 2 != 0 || h < 4 || w < 4 {
            return Err(Error::Domain(
                "input spatial dims must be even and at least 4x4".into(),
            ));
        }
        Ok(())
    }

    /// Index of the last stage (S).
    pub fn last_stage(&self) -> usize {
        self.widths.len() - 1
    }

    /// Embedding dimension d.
    pub fn embed_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Spatial extent of the map after stage `m`.
    pub fn map_extent(&self) -> (usize, usize) {
        (self.input.0 / 2, self.input.1 / 2)
    }

    /// Channel count of the map after stage `m`.
    pub fn channels_after(&self, m: usize) -> usize {
        self.widths[m]
    }
}

pub(crate) struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        Self {
            mean: Tensor::zeros(vec![c]),
            var: Tensor::full(vec![c], 1.0),
        }
    }
}

/// Per-channel normalization with shared affine parameters and one set of
/// running statistics per domain branch.
pub struct DomainBranchNorm {
    gamma: ParamId,
    beta: ParamId,
    branches: [RunningStats; 3],
    eps: f64,
    momentum: f64,
}

impl DomainBranchNorm {
    pub(crate) fn new(name: &str, c: usize, eps: f64, momentum: f64, store: &mut ParamStore) -> Self {
        let gamma = store.register(&format!("{name}/gamma"), Tensor::full(vec![c], 1.0));
        let beta = store.register(&format!("{name}/beta"), Tensor::zeros(vec![c]));
        Self {
            gamma,
            beta,
            branches: [RunningStats::new(c), RunningStats::new(c), RunningStats::new(c)],
            eps,
            momentum,
        }
    }

    /// Normalizes a [rows, c] activation. Training mode uses the batch
    /// statistics of exactly the rows passed in; evaluation mode uses the
    /// requested branch's running statistics and never mixes branches.
    pub(crate) fn forward_2d(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        branch: Branch,
        mode: ForwardMode,
    ) -> NodeId {
        let gamma = store.node(tape, self.gamma);
        let beta = store.node(tape, self.beta);
        let (centered, istd) = match mode {
            ForwardMode::Train { update_stats } => {
                let mean = tape.mean_rows(x);
                let neg_mean = tape.neg(mean);
                let centered = tape.add_bcast_row(x, neg_mean);
                let sq = tape.mul(centered, centered);
                let var = tape.mean_rows(sq);
                if update_stats {
                    let rs = &mut self.branches[branch.index()];
                    let m = self.momentum;
                    let bm = tape.value(mean).data();
                    let bv = tape.value(var).data();
                    for (r, &b) in rs.mean.data_mut().iter_mut().zip(bm) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                    for (r, &b) in rs.var.data_mut().iter_mut().zip(bv) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                }
                let shifted = tape.scale_shift(var, 1.0, self.eps);
                let std = tape.sqrt(shifted);
                (centered, tape.recip(std))
            }
            ForwardMode::Eval => {
                let rs = &self.branches[branch.index()];
                let neg_mean = tape.constant(Tensor::from_parts(
                    vec![rs.mean.len()],
                    rs.mean.data().iter().map(|v| -v).collect(),
                ));
                let centered = tape.add_bcast_row(x, neg_mean);
                let istd = tape.constant(Tensor::from_parts(
                    vec![rs.var.len()],
                    rs.var.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
                ));
                (centered, istd)
            }
        };
        let normed = tape.mul_bcast_row(centered, istd);
        let scaled = tape.mul_bcast_row(normed, gamma);
        tape.add_bcast_row(scaled, beta)
    }

    pub(crate) fn running(&self, branch: Branch) -> (&Tensor, &Tensor) {
        let rs = &self.branches[branch.index()];
        (&rs.mean, &rs.var)
    }

    pub(crate) fn affine_ids(&self) -> (ParamId, ParamId) {
        (self.gamma, self.beta)
    }

    pub(crate) fn set_running(&mut self, branch: Branch, mean: Tensor, var: Tensor) -> Result<()> {
        if var.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("running variance must stay positive".into()));
        }
        let rs = &mut self.branches[branch.index()];
        rs.mean = mean;
        rs.var = var;
        Ok(())
    }
}

/// One stage: optional 2x2 pooling, position-wise channel map, branch
/// normalization, tanh.
pub struct Stage {
    weight: ParamId,
    bias: ParamId,
    norm: DomainBranchNorm,
    downsample: bool,
    c_in: usize,
    c_out: usize,
}

impl Stage {
    fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        branch: Branch,
        mode: ForwardMode,
    ) -> NodeId {
        let x = if self.downsample { tape.avg_pool2(x) } else { x };
        let shape = tape.value(x).shape().to_vec();
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(x, vec![n * h * w, self.c_in]);
        let weight = store.node(tape, self.weight);
        let bias = store.node(tape, self.bias);
        let lin = tape.matmul(flat, weight);
        let lin = tape.add_bcast_row(lin, bias);
        let normed = self.norm.forward_2d(tape, store, lin, branch, mode);
        let act = tape.tanh(normed);
        tape.reshape(act, vec![n, h, w, self.c_out])
    }
}

/// Joint classification head: shared feature normalization, then a source
/// block and a resizable target block of a (C_s + C_t) x d linear map.
pub struct HybridClassifier {
    norm: DomainBranchNorm,
    w_src: ParamId,
    b_src: ParamId,
    w_tgt: ParamId,
    b_tgt: ParamId,
    embed_dim: usize,
    c_s: usize,
    c_t: usize,
}

impl HybridClassifier {
    /// Total number of classes C_s + C_t.
    pub fn num_classes(&self) -> usize {
        self.c_s + self.c_t
    }

    pub fn source_classes(&self) -> usize {
        self.c_s
    }

    pub fn target_classes(&self) -> usize {
        self.c_t
    }
}

/// The staged network plus hybrid classifier.
pub struct StagedNetwork {
    cfg: NetConfig,
    stages: Vec<Stage>,
    classifier: HybridClassifier,
}

impl StagedNetwork {
    pub fn new(cfg: NetConfig, c_s: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.widths.len());
        let mut c_in = cfg.input.2;
        for (i, &c_out) in cfg.widths.iter().enumerate() {
            let weight = store.register(&format!("stage{i}/weight"), xavier(rng, c_in, c_out));
            let bias = store.register(&format!("stage{i}/bias"), Tensor::zeros(vec![c_out]));
            let norm = DomainBranchNorm::new(
                &format!("stage{i}/norm"),
                c_out,
                cfg.bn_eps,
                cfg.bn_momentum,
                store,
            );
            stages.push(Stage {
                weight,
                bias,
                norm,
                downsample: i == 0,
                c_in,
                c_out,
            });
            c_in = c_out;
        }
        let d = cfg.embed_dim();
        let norm = DomainBranchNorm::new("cls/norm", d, cfg.bn_eps, cfg.bn_momentum, store);
        let classifier = HybridClassifier {
            norm,
            w_src: store.register("cls/w_src", gaussian(rng, vec![c_s, d], 0.01)),
            b_src: store.register("cls/b_src", Tensor::zeros(vec![c_s])),
            w_tgt: store.register("cls/w_tgt", Tensor::zeros(vec![0, d])),
            b_tgt: store.register("cls/b_tgt", Tensor::zeros(vec![0])),
            embed_dim: d,
            c_s,
            c_t: 0,
        };
        Ok(Self {
            cfg,
            stages,
            classifier,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn classifier(&self) -> &HybridClassifier {
        &self.classifier
    }

    pub fn last_stage(&self) -> usize {
        self.cfg.last_stage()
    }

    fn check_stage(&self, m: usize) -> Result<()> {
        if m > self.cfg.last_stage() {
            return Err(Error::Domain(format!(
                "stage index {m} out of range 0..={}",
                self.cfg.last_stage()
            )));
        }
        Ok(())
    }

    /// Runs stages 0..=m on an input batch [n, h0, w0, c0] and returns the
    /// hidden map after stage m.
    pub fn forward_to_stage(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        m: usize,
        branch: Branch,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        self.check_stage(m)?;
        let shape = tape.value(x).shape().to_vec();
        let (h0, w0, c0) = self.cfg.input;
        if shape.len() != 4 || shape[1] != h0 || shape[2] != w0 || shape[3] != c0 {
            return Err(Error::Shape(format!(
                "input shape {shape:?} does not match configured [n, {h0}, {w0}, {c0}]"
            )));
        }
        let mut g = x;
        for i in 0..=m {
            g = self.stages[i].forward(tape, store, g, branch, mode);
        }
        Ok(g)
    }

    /// Runs stages (after+1)..=to on a hidden map produced (or synthesized)
    /// at stage `after`.
    pub fn forward_span(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        g: NodeId,
        after: usize,
        to: usize,
        branch: Branch,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        self.check_stage(after)?;
        self.check_stage(to)?;
        if after > to {
            return Err(Error::Domain(format!("span {after}..{to} is reversed")));
        }
        let shape = tape.value(g).shape().to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.channels_after(after) {
            return Err(Error::Shape(format!(
                "map shape {shape:?} does not match stage {after} output"
            )));
        }
        let mut g = g;
        for i in (after + 1)..=to {
            g = self.stages[i].forward(tape, store, g, branch, mode);
        }
        Ok(g)
    }

    /// Global average pooling of a [n, h, w, c] map to [n, c].
    pub fn pool(&self, tape: &mut Tape, g: NodeId) -> NodeId {
        let shape = tape.value(g).shape().to_vec();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let flat = tape.reshape(g, vec![n, h * w, c]);
        tape.mean_mid(flat)
    }

    /// Maps a hidden feature from stage m to the pooled embedding [n, d].
    pub fn forward_from_stage(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        g: NodeId,
        m: usize,
        branch: Branch,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        let last = self.cfg.last_stage();
        let g = self.forward_span(tape, store, g, m, last, branch, mode)?;
        Ok(self.pool(tape, g))
    }

    /// Full forward: input batch to embedding [n, d].
    pub fn embed(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        branch: Branch,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        let last = self.cfg.last_stage();
        let g = self.forward_to_stage(tape, store, x, last, branch, mode)?;
        Ok(self.pool(tape, g))
    }

    /// Convenience forward for plain tensors; returns embedding values.
    pub fn embed_tensors(
        &mut self,
        store: &ParamStore,
        images: &[Tensor],
        branch: Branch,
        mode: ForwardMode,
    ) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Tensor::stack(images)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let emb = self.embed(&mut tape, store, x, branch, mode)?;
        let v = tape.value(emb);
        let d = v.shape()[1];
        Ok((0..v.shape()[0])
            .map(|i| v.data()[i * d..(i + 1) * d].to_vec())
            .collect())
    }

    /// Temperature-scaled class distribution over C_s + C_t classes.
    pub fn classify(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        emb: NodeId,
        tau: f64,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(Error::Domain("temperature must be positive".into()));
        }
        let logits = self.logits(tape, store, emb, mode)?;
        Ok(tape.softmax_rows(logits, tau))
    }

    /// The classifier's normalized feature [n, d]: the inference embedding
    /// used for retrieval and clustering.
    pub fn neck(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        emb: NodeId,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        let shape = tape.value(emb).shape();
        if shape.len() != 2 || shape[1] != self.classifier.embed_dim {
            return Err(Error::Shape(format!(
                "embedding shape {shape:?}, expected [n, {}]",
                self.classifier.embed_dim
            )));
        }
        Ok(self
            .classifier
            .norm
            .forward_2d(tape, store, emb, Branch::Source, mode))
    }

    /// Raw classifier logits [n, C_s + C_t].
    pub fn logits(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        emb: NodeId,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        let shape = tape.value(emb).shape();
        if shape.len() != 2 || shape[1] != self.classifier.embed_dim {
            return Err(Error::Shape(format!(
                "embedding shape {shape:?}, expected [n, {}]",
                self.classifier.embed_dim
            )));
        }
        if store.value(self.classifier.w_tgt).shape()[0] != self.classifier.c_t {
            return Err(Error::State(
                "classifier target block does not match recorded pseudo-class count".into(),
            ));
        }
        // Classifier normalization is shared: always routed through one branch.
        let normed = self.neck(tape, store, emb, mode)?;
        let cls = &self.classifier;
        let w_src = store.node(tape, cls.w_src);
        let b_src = store.node(tape, cls.b_src);
        let src = tape.matmul_t(normed, w_src);
        let src = tape.add_bcast_row(src, b_src);
        if cls.c_t == 0 {
            return Ok(src);
        }
        let w_tgt = store.node(tape, cls.w_tgt);
        let b_tgt = store.node(tape, cls.b_tgt);
        let tgt = tape.matmul_t(normed, w_tgt);
        let tgt = tape.add_bcast_row(tgt, b_tgt);
        Ok(tape.concat_cols(src, tgt))
    }

    /// Rebuilds the target block of the classifier from L2-normalized
    /// cluster centroids. The source block is untouched.
    pub fn refresh_target_classifier(
        &mut self,
        store: &mut ParamStore,
        centroids: &[Tensor],
    ) -> Result<()> {
        let d = self.classifier.embed_dim;
        let mut rows = Vec::with_capacity(centroids.len() * d);
        for c in centroids {
            if c.shape() != [d] {
                return Err(Error::Domain(format!(
                    "centroid shape {:?}, expected [{d}]",
                    c.shape()
                )));
            }
            rows.extend(l2_normalized(c.data()));
        }
        let c_t = centroids.len();
        store.set(
            self.classifier.w_tgt,
            Tensor::from_parts(vec![c_t, d], rows),
        );
        store.set(self.classifier.b_tgt, Tensor::zeros(vec![c_t]));
        self.classifier.c_t = c_t;
        Ok(())
    }

    /// Parameter ids of the resizable target block (moment state must be
    /// dropped whenever these change shape).
    pub fn target_block_params(&self) -> [ParamId; 2] {
        [self.classifier.w_tgt, self.classifier.b_tgt]
    }

}

pub(crate) const ALL_BRANCHES: [Branch; 3] = [Branch::Source, Branch::Target, Branch::Intermediate];

fn norm_state(name: &str, norm: &DomainBranchNorm, out: &mut Vec<(String, Tensor)>) {
    for b in ALL_BRANCHES {
        let (mean, var) = norm.running(b);
        out.push((format!("{name}/run_mean/{}", b.name()), mean.clone()));
        out.push((format!("{name}/run_var/{}", b.name()), var.clone()));
    }
}

fn norm_restore(
    name: &str,
    norm: &mut DomainBranchNorm,
    entries: &std::collections::BTreeMap<String, Tensor>,
) -> Result<()> {
    for b in ALL_BRANCHES {
        let mean = entries
            .get(&format!("{name}/run_mean/{}", b.name()))
            .ok_or_else(|| Error::Checkpoint(format!("missing {name} running mean")))?;
        let var = entries
            .get(&format!("{name}/run_var/{}", b.name()))
            .ok_or_else(|| Error::Checkpoint(format!("missing {name} running var")))?;
        norm.set_running(b, mean.clone(), var.clone())?;
    }
    Ok(())
}

impl StagedNetwork {
    /// Serializable state: every learnable parameter plus normalization
    /// buffers and an architecture/meta record.
    pub fn state_entries(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let param = |id: ParamId| (store.name(id).to_string(), store.value(id).clone());
        for (i, s) in self.stages.iter().enumerate() {
            out.push(param(s.weight));
            out.push(param(s.bias));
            out.push(param(s.norm.gamma));
            out.push(param(s.norm.beta));
            norm_state(&format!("stage{i}/norm"), &s.norm, &mut out);
        }
        let c = &self.classifier;
        for id in [c.w_src, c.b_src, c.w_tgt, c.b_tgt, c.norm.gamma, c.norm.beta] {
            out.push(param(id));
        }
        norm_state("cls/norm", &c.norm, &mut out);

        let mut meta = vec![self.cfg.widths.len() as f64];
        meta.extend(self.cfg.widths.iter().map(|&w| w as f64));
        let (h, w, ch) = self.cfg.input;
        meta.extend([h as f64, w as f64, ch as f64, c.c_s as f64, c.c_t as f64]);
        out.push(("meta".to_string(), Tensor::from_vec(meta)));
        out
    }

    /// Reconstructs a `NetConfig` and class counts from a meta record.
    pub fn parse_meta(meta: &Tensor) -> Result<(NetConfig, usize, usize)> {
        let d = meta.data();
        if d.is_empty() {
            return Err(Error::Checkpoint("empty meta record".into()));
        }
        let n_widths = d[0] as usize;
        if d.len() != 1 + n_widths + 5 {
            return Err(Error::Checkpoint("meta record has the wrong length".into()));
        }
        let widths: Vec<usize> = d[1..1 + n_widths].iter().map(|&v| v as usize).collect();
        let rest = &d[1 + n_widths..];
        let cfg = NetConfig {
            input: (rest[0] as usize, rest[1] as usize, rest[2] as usize),
            widths,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        Ok((cfg, rest[3] as usize, rest[4] as usize))
    }

    /// Restores parameters and buffers written by
    /// [`state_entries`](Self::state_entries) into this network.
    pub fn load_state(
        &mut self,
        store: &mut ParamStore,
        entries: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let meta = entries
            .get("meta")
            .ok_or_else(|| Error::Checkpoint("missing meta record".into()))?;
        let (cfg, c_s, c_t) = Self::parse_meta(meta)?;
        if cfg != self.cfg || c_s != self.classifier.c_s {
            return Err(Error::Checkpoint(
                "checkpoint architecture does not match this network".into(),
            ));
        }
        let set_param = |store: &mut ParamStore, id: ParamId| -> Result<()> {
            let name = store.name(id).to_string();
            let value = entries
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            store.set(id, value.clone());
            Ok(())
        };
        for s in &mut self.stages {
            for id in [s.weight, s.bias, s.norm.gamma, s.norm.beta] {
                set_param(store, id)?;
            }
        }
        for i in 0..self.stages.len() {
            let name = format!("stage{i}/norm");
            norm_restore(&name, &mut self.stages[i].norm, entries)?;
        }
        let ids = {
            let c = &self.classifier;
            [c.w_src, c.b_src, c.w_tgt, c.b_tgt, c.norm.gamma, c.norm.beta]
        };
        for id in ids {
            set_param(store, id)?;
        }
        norm_restore("cls/norm", &mut self.classifier.norm, entries)?;
        self.classifier.c_t = c_t;
        Ok(())
    }

    /// Copies every parameter and buffer from `other`, whose parameters live
    /// in the same store (same architecture required). Used to duplicate a
    /// branch for twin-network training.
    pub fn copy_state_from(&mut self, store: &mut ParamStore, other: &StagedNetwork) -> Result<()> {
        if self.cfg != other.cfg {
            return Err(Error::State("twin architecture mismatch".into()));
        }
        for (mine, theirs) in self.stages.iter_mut().zip(&other.stages) {
            for (dst, src) in [
                (mine.weight, theirs.weight),
                (mine.bias, theirs.bias),
                (mine.norm.gamma, theirs.norm.gamma),
                (mine.norm.beta, theirs.norm.beta),
            ] {
                let v = store.value(src).clone();
                store.set(dst, v);
            }
            for b in ALL_BRANCHES {
                let (mean, var) = theirs.norm.running(b);
                mine.norm.set_running(b, mean.clone(), var.clone())?;
            }
        }
        let pairs = {
            let (mc, oc) = (&self.classifier, &other.classifier);
            [
                (mc.w_src, oc.w_src),
                (mc.b_src, oc.b_src),
                (mc.w_tgt, oc.w_tgt),
                (mc.b_tgt, oc.b_tgt),
                (mc.norm.gamma, oc.norm.gamma),
                (mc.norm.beta, oc.norm.beta),
            ]
        };
        for (dst, src) in pairs {
            let v = store.value(src).clone();
            store.set(dst, v);
        }
        for b in ALL_BRANCHES {
            let (mean, var) = other.classifier.norm.running(b);
            self.classifier.norm.set_running(b, mean.clone(), var.clone())?;
        }
        self.classifier.c_t = other.classifier.c_t;
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};

    fn setup(cfg: NetConfig, c_s: usize, seed: u64) -> (StagedNetwork, ParamStore, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = StagedNetwork::new(cfg, c_s, &mut store, &mut rng).unwrap();
        (net, store, rng)
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, cfg: &NetConfig) -> Tensor {
        let (h, w, c) = cfg.input;
        let data = (0..n * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, h, w, c], data).unwrap()
    }

    #[test]
    fn composition_identity_is_bitwise() {
        let (mut net, store, mut rng) = setup(NetConfig::desk(), 5, 42);
        let x = random_batch(&mut rng, 3, net.config());
        for mode in [ForwardMode::Eval, ForwardMode::train_frozen()] {
            let full = {
                let mut tape = Tape::new();
                let xn = tape.constant(x.clone());
                let e = net.embed(&mut tape, &store, xn, Branch::Source, mode).unwrap();
                tape.value(e).clone()
            };
            for m in 0..=net.last_stage() {
                let mut tape = Tape::new();
                let xn = tape.constant(x.clone());
                let g = net
                    .forward_to_stage(&mut tape, &store, xn, m, Branch::Source, mode)
                    .unwrap();
                let e = net
                    .forward_from_stage(&mut tape, &store, g, m, Branch::Source, mode)
                    .unwrap();
                assert_eq!(tape.value(e), &full, "stage {m} mode {mode:?}");
            }
        }
    }

    #[test]
    fn branches_agree_at_init_and_diverge_after_updates() {
        let (mut net, store, mut rng) = setup(NetConfig::tiny(), 4, 7);
        let x = random_batch(&mut rng, 4, net.config());
        let run = |net: &mut StagedNetwork, branch: Branch, mode: ForwardMode, x: &Tensor| {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let e = net.embed(&mut tape, &store, xn, branch, mode).unwrap();
            tape.value(e).clone()
        };
        let s0 = run(&mut net, Branch::Source, ForwardMode::Eval, &x);
        let t0 = run(&mut net, Branch::Target, ForwardMode::Eval, &x);
        assert_eq!(s0, t0, "identical running statistics at initialization");

        // Push a different batch through only the source branch in training
        // mode, then compare eval outputs again.
        let other = random_batch(&mut rng, 4, net.config());
        let _ = run(&mut net, Branch::Source, ForwardMode::train(), &other);
        let s1 = run(&mut net, Branch::Source, ForwardMode::Eval, &x);
        let t1 = run(&mut net, Branch::Target, ForwardMode::Eval, &x);
        assert_ne!(s1, t1, "source branch statistics moved");
        assert_eq!(t0, t1, "target branch untouched");
    }

    #[test]
    fn eval_mode_is_deterministic_and_per_sample() {
        let (mut net, store, mut rng) = setup(NetConfig::tiny(), 4, 3);
        let x = random_batch(&mut rng, 5, net.config());
        let run = |net: &mut StagedNetwork, x: &Tensor| {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let e = net
                .embed(&mut tape, &store, xn, Branch::Source, ForwardMode::Eval)
                .unwrap();
            tape.value(e).clone()
        };
        let a = run(&mut net, &x);
        let b = run(&mut net, &x);
        assert_eq!(a, b, "two identical eval passes");

        // Permuting the batch permutes the embeddings.
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = Tensor::stack(&perm.iter().map(|&i| x.index_first(i)).collect::<Vec<_>>()).unwrap();
        let p = run(&mut net, &permuted);
        let d = a.shape()[1];
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(
                &p.data()[row * d..(row + 1) * d],
                &a.data()[src * d..(src + 1) * d]
            );
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_distribution() {
        let (mut net, mut store, mut rng) = setup(NetConfig::tiny(), 6, 5);
        let w_zero = Tensor::zeros(vec![6, net.config().embed_dim()]);
        store.set(net.classifier.w_src, w_zero);
        let x = random_batch(&mut rng, 2, net.config());
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let e = net
            .embed(&mut tape, &store, xn, Branch::Source, ForwardMode::Eval)
            .unwrap();
        let p = net
            .classify(&mut tape, &store, e, 0.5, ForwardMode::Eval)
            .unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_sums_to_one_and_row_permutation_permutes_probs() {
        let (mut net, mut store, mut rng) = setup(NetConfig::tiny(), 5, 9);
        let x = random_batch(&mut rng, 3, net.config());
        let probs = |net: &mut StagedNetwork, store: &ParamStore| {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let e = net
                .embed(&mut tape, store, xn, Branch::Source, ForwardMode::Eval)
                .unwrap();
            let p = net.classify(&mut tape, store, e, 0.5, ForwardMode::Eval).unwrap();
            tape.value(p).clone()
        };
        let p0 = probs(&mut net, &store);
        for i in 0..p0.shape()[0] {
            let s: f64 = p0.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // Swap classifier rows 0 and 3 (weights and biases).
        let w = store.value(net.classifier.w_src).clone();
        let d = net.config().embed_dim();
        let mut wd = w.data().to_vec();
        for j in 0..d {
            wd.swap(j, 3 * d + j);
        }
        store.set(net.classifier.w_src, Tensor::from_parts(vec![5, d], wd));
        let p1 = probs(&mut net, &store);
        for i in 0..p0.shape()[0] {
            assert!((p1.row(i)[0] - p0.row(i)[3]).abs() < 1e-12);
            assert!((p1.row(i)[3] - p0.row(i)[0]).abs() < 1e-12);
            assert!((p1.row(i)[1] - p0.row(i)[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn refresh_target_classifier_contract() {
        let (mut net, mut store, mut rng) = setup(NetConfig::tiny(), 4, 11);
        let d = net.config().embed_dim();

        // C_t = 0 keeps source-only classification valid.
        net.refresh_target_classifier(&mut store, &[]).unwrap();
        assert_eq!(net.classifier().num_classes(), 4);
        let x = random_batch(&mut rng, 2, net.config());
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let e = net
            .embed(&mut tape, &store, xn, Branch::Source, ForwardMode::Eval)
            .unwrap();
        assert!(net.classify(&mut tape, &store, e, 0.5, ForwardMode::Eval).is_ok());

        // Refresh twice with the same centroids is idempotent.
        let centroids: Vec<Tensor> = (0..3)
            .map(|i| {
                let mut v = vec![0.25; d];
                v[i] = 2.0;
                Tensor::from_vec(v)
            })
            .collect();
        net.refresh_target_classifier(&mut store, &centroids).unwrap();
        let w1 = store.value(net.classifier.w_tgt).clone();
        net.refresh_target_classifier(&mut store, &centroids).unwrap();
        let w2 = store.value(net.classifier.w_tgt).clone();
        assert_eq!(w1, w2);
        assert_eq!(net.classifier().target_classes(), 3);

        // Rows are unit length.
        for i in 0..3 {
            let norm: f64 = w1.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }

        // Dimension mismatch is rejected.
        let bad = Tensor::from_vec(vec![1.0; d + 1]);
        assert!(net.refresh_target_classifier(&mut store, &[bad]).is_err());
    }

    #[test]
    fn classification_loss_gradients_pass_grad_check() {
        let (mut net, mut store, mut rng) = setup(NetConfig::tiny(), 3, 21);
        let x = random_batch(&mut rng, 4, net.config());
        let labels = vec![0usize, 2, 1, 0];
        let mut eval = |net: &mut StagedNetwork, store: &ParamStore| {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let e = net
                .embed(&mut tape, store, xn, Branch::Source, ForwardMode::train_frozen())
                .unwrap();
            let p = net
                .classify(&mut tape, store, e, 1.0, ForwardMode::train_frozen())
                .unwrap();
            let lp = tape.log_clamped(p);
            let picked = tape.gather_idx(lp, labels.clone());
            let mean = tape.mean_all(picked);
            let loss = tape.neg(mean);
            (tape, loss)
        };
        let (tape, loss) = eval(&mut net, &store);
        let grads = tape.backward(loss);
        let mut flat_grad = Vec::new();
        for id in store.ids() {
            match tape.param_node(id.index()).and_then(|n| grads.get(n)) {
                Some(g) => flat_grad.extend_from_slice(g.data()),
                None => flat_grad.extend(std::iter::repeat(0.0).take(store.value(id).len())),
            }
        }
        let params = store.flatten();
        let analytic = Tensor::from_vec(flat_grad);
        let mut f = |flat: &Tensor| {
            store.unflatten(flat).unwrap();
            let (tape, loss) = eval(&mut net, &store);
            Ok(tape.scalar_value(loss))
        };
        let report = grad_check(&mut f, &params, &analytic, 1e-4).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
