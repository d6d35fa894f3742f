//! Two-stage training: per-expert specialization under hard sampling, then
//! router and head training with every expert frozen.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod pipeline;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::ClassificationHead;
use crate::decomp::ExpertKind;
use crate::error::{Error, Result};
use crate::losses::{balance_tape, orth_tape, prior_bases, Basis, BatchRoutingStats, LossConfig};
use crate::model::OmniModel;
use crate::numcore::tape::softmax_rows;
use crate::numcore::{rng, Matrix, Tape, Var};
use crate::router::{argmax, top_k};
use crate::synthdata::{FakeMode, SyntheticSample};
use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Hard cap on optimizer steps per stage run; `None` runs every epoch.
    pub max_steps: Option<usize>,
    pub r: usize,
    pub k_s: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    /// Divide the selected gates by their sum before mixing.
    pub renormalize: bool,
    /// Add the trained universal expert while training semantic experts.
    pub stage1_include_universal: bool,
    /// Push semantic experts away from the universal expert as well.
    pub orth_include_universal: bool,
    /// Verify frozen-group checksums after every optimizer step.
    pub check_freeze: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Small-data profile: r = 4, top-1, λ = (0.01, 0.1, 0.1).
    pub fn small() -> Self {
        Self {
            lr_stage1: 2e-4,
            lr_stage2: 2e-5,
            batch_size: 32,
            epochs_stage1: 1,
            epochs_stage2: 1,
            max_steps: None,
            r: 4,
            k_s: 1,
            loss: LossConfig::SMALL,
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            clip_norm: 1.0,
            renormalize: false,
            stage1_include_universal: false,
            orth_include_universal: true,
            check_freeze: true,
            seed: 7,
        }
    }

    /// Large-data profile: r = 8, top-2, λ = (0.001, 0.1, 0.001).
    pub fn large() -> Self {
        Self {
            lr_stage2: 2e-4,
            r: 8,
            k_s: 2,
            loss: LossConfig::LARGE,
            ..Self::small()
        }
    }

    /// Desk-scale profile for the synthetic toy set. The synthetic set is
    /// tiny, so rates and epochs are raised over the small profile.
    pub fn toy() -> Self {
        Self {
            lr_stage1: 0.05,
            lr_stage2: 0.05,
            epochs_stage1: 3,
            epochs_stage2: 3,
            ..Self::small()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "small" => Ok(Self::small()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown profile '{other}' (toy|small|large)"))),
        }
    }

    pub fn validate(&self, n_semantic: usize) -> Result<()> {
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.r == 0 {
            return Err(Error::InvalidRank { r: 0, max: 0 });
        }
        if self.k_s == 0 || self.k_s > n_semantic {
            return Err(Error::InvalidTopK {
                k: self.k_s,
                n_semantic,
            });
        }
        self.loss.validate()
    }
}

/// Per-term loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub orth: f64,
    pub gating: f64,
    pub balance: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub stage: u8,
    pub expert: Option<ExpertKind>,
    pub step: usize,
    pub losses: LossTerms,
    pub routing_stats: Option<BatchRoutingStats>,
    /// Checksums of the frozen parameter groups after the step.
    pub param_checksums: BTreeMap<String, String>,
}

/// Training log CSV: `step,l_cls,l_orth,l_gating,l_balance,total`.
pub fn log_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from("step,l_cls,l_orth,l_gating,l_balance,total\n");
    for r in records {
        let l = &r.losses;
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.step, l.cls, l.orth, l.gating, l.balance, l.total
        );
    }
    out
}

/// Checks the hard-sampling contract: semantic expert `i` sees only
/// domain-`i` samples; the universal expert sees only purified
/// real/artifact data.
pub fn check_hard_sampling(kind: ExpertKind, data: &[SyntheticSample]) -> Result<()> {
    for (n, s) in data.iter().enumerate() {
        match kind {
            ExpertKind::Semantic(i) if s.domain != i => {
                return Err(Error::HardSamplingViolation(format!(
                    "sample {n} is from domain {} but expert{i} is being trained",
                    s.domain
                )));
            }
            ExpertKind::Universal if !matches!(s.fake_mode, FakeMode::None | FakeMode::Artifact) => {
                return Err(Error::HardSamplingViolation(format!(
                    "sample {n} has fake mode '{}' in the purified artifact set",
                    s.fake_mode.as_str()
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Snapshot of the groups that must not move during a stage.
pub struct FreezeGuard {
    frozen: BTreeMap<String, String>,
}

impl FreezeGuard {
    pub fn new(model: &OmniModel, trainable: impl Fn(&str) -> bool) -> Self {
        let frozen = model.checksums().into_iter().filter(|(k, _)| !trainable(k)).collect();
        Self { frozen }
    }

    pub fn verify(&self, model: &OmniModel) -> Result<BTreeMap<String, String>> {
        let now = model.checksums();
        for (k, v) in &self.frozen {
            if now.get(k) != Some(v) {
                return Err(Error::FreezeViolation(format!("frozen group '{k}' changed")));
            }
        }
        Ok(self.frozen.clone())
    }
}

fn kind_stream(kind: ExpertKind) -> u64 {
    match kind {
        ExpertKind::Universal => 100,
        ExpertKind::Semantic(i) => 101 + i as u64,
    }
}

fn batches(n: usize, cfg: &TrainConfig, epochs: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    'outer: for _ in 0..epochs {
        order.shuffle(rng);
        for c in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| out.len() >= m) {
                break 'outer;
            }
            out.push(c.to_vec());
        }
    }
    out
}

fn labels(data: &[SyntheticSample], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| data[i].label.index()).collect()
}

fn ensure_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalFailure(format!("{what} is not finite")))
    }
}

/// Trains one expert (and a freshly initialized head) on `data`.
///
/// Only the active expert's `(u, sigma, v)` in every adapted layer and the
/// stage-1 head for that expert change. The head is reinitialized on entry.
pub fn train_stage1(
    model: &mut OmniModel,
    kind: ExpertKind,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<Vec<TrainRecord>> {
    cfg.validate(model.n_semantic())?;
    check_hard_sampling(kind, data)?;
    if let ExpertKind::Semantic(i) = kind {
        if i >= model.n_semantic() {
            return Err(Error::InvalidExpertIndex {
                index: i,
                n_semantic: model.n_semantic(),
            });
        }
    }
    let mut r = rng::substream(cfg.seed, kind_stream(kind));
    let mut head = ClassificationHead::new(model.backbone.cfg.embed_dim, 2, &mut r);
    let plan = if data.is_empty() {
        Vec::new()
    } else {
        batches(data.len(), cfg, cfg.epochs_stage1, &mut r)
    };
    let active = kind.to_string();
    let guard = FreezeGuard::new(model, |k| k.ends_with(&format!(".{active}")));
    let priors = stage1_priors(model, kind, cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr_stage1, cfg.clip_norm);
    let mut records = Vec::with_capacity(plan.len());
    for l in model.layers.values_mut() {
        l.pool.get_mut(kind)?.trainable = true;
    }
    for (step, idx) in plan.iter().enumerate() {
        let imgs: Vec<&[f64]> = idx.iter().map(|&i| data[i].image.as_slice()).collect();
        let y = labels(data, idx);
        let mut tape = Tape::new();
        let g = stage1_forward(model, &mut tape, kind, &head, &imgs, &y, &priors, cfg)?;
        let (params, total) = (g.params, g.total);
        let terms = LossTerms {
            cls: tape.scalar(g.cls),
            orth: g.orth.map_or(0.0, |o| tape.scalar(o)),
            gating: 0.0,
            balance: 0.0,
            total: tape.scalar(total),
        };
        ensure_finite(terms.total, "stage-1 loss")?;
        let grads = tape.backward(total)?;
        let gs = params.iter().map(|&v| grads.wrt(v)).collect::<Result<Vec<_>>>()?;
        apply_stage1(model, &mut head, kind, &mut opt, &gs)?;
        let param_checksums = if cfg.check_freeze {
            guard.verify(model)?
        } else {
            BTreeMap::new()
        };
        records.push(TrainRecord {
            stage: 1,
            expert: Some(kind),
            step,
            losses: terms,
            routing_stats: None,
            param_checksums,
        });
    }
    for l in model.layers.values_mut() {
        l.pool.get_mut(kind)?.trainable = false;
    }
    match kind {
        ExpertKind::Universal => model.trained.universal = true,
        ExpertKind::Semantic(i) => model.trained.semantic[i] = true,
    }
    model.stage1_heads.insert(kind, head);
    Ok(records)
}

/// Frozen bases of the orthogonality loss, one list per adapted layer.
pub fn stage1_priors(model: &OmniModel, kind: ExpertKind, cfg: &TrainConfig) -> Result<Vec<Vec<Basis>>> {
    model
        .layers
        .values()
        .map(|l| prior_bases(kind, &l.pool, &l.decomp, cfg.orth_include_universal))
        .collect()
}

/// Handles of one recorded stage-1 objective.
pub struct Stage1Graph {
    pub cls: Var,
    pub orth: Option<Var>,
    pub total: Var,
    /// `u, sigma (1×r), v` of the active expert per layer in layer order,
    /// then head `weight, bias`.
    pub params: Vec<Var>,
}

/// Records the stage-1 objective of expert `kind` with `head` for one batch.
#[allow(clippy::too_many_arguments)]
pub fn stage1_forward(
    model: &OmniModel,
    tape: &mut Tape,
    kind: ExpertKind,
    head: &ClassificationHead,
    images: &[&[f64]],
    labels: &[usize],
    priors: &[Vec<Basis>],
    cfg: &TrainConfig,
) -> Result<Stage1Graph> {
    let with_universal = cfg.stage1_include_universal && kind != ExpertKind::Universal;
    let mut params: Vec<Var> = Vec::new();
    let mut weights = BTreeMap::new();
    let mut orth: Option<Var> = None;
    for ((&id, l), prior) in model.layers.iter().zip(priors) {
        let e = l.pool.get(kind)?;
        let u = tape.param(e.u.clone());
        let s = tape.param(e.sigma_row());
        let v = tape.param(e.v.clone());
        params.extend([u, s, v]);
        let us = tape.scale_cols(u, s);
        let we = tape.matmul_nt(us, v);
        let wm = tape.constant(l.decomp.principal.clone());
        let mut w = tape.add(wm, we);
        if with_universal {
            let wu = tape.constant(l.pool.universal.weight());
            w = tape.add(w, wu);
        }
        weights.insert(id, w);
        if let Some(o) = orth_tape(tape, u, v, prior) {
            orth = Some(match orth {
                Some(acc) => tape.add(acc, o),
                None => o,
            });
        }
    }
    let patches = model.backbone.patchify(images)?;
    let bv = model.backbone.vars(tape, false);
    let p = tape.constant(patches);
    let feats = model
        .backbone
        .forward(tape, p, images.len(), &bv, &crate::backbone::FixedWeights { weights });
    let hv = head.vars(tape, true);
    params.extend([hv.0, hv.1]);
    let logits = ClassificationHead::forward_tape(tape, feats, hv);
    let cls = tape.cross_entropy(logits, labels)?;
    let total = match orth {
        Some(o) => {
            let so = tape.scale(o, cfg.loss.lambda1);
            tape.add(cls, so)
        }
        None => cls,
    };
    Ok(Stage1Graph { cls, orth, total, params })
}

fn apply_stage1(
    model: &mut OmniModel,
    head: &mut ClassificationHead,
    kind: ExpertKind,
    opt: &mut Optimizer,
    grads: &[Matrix],
) -> Result<()> {
    let mut sigmas: Vec<Matrix> = Vec::new();
    for l in model.layers.values() {
        sigmas.push(l.pool.get(kind)?.sigma_row());
    }
    {
        let mut refs: Vec<&mut Matrix> = Vec::new();
        let mut sig_iter = sigmas.iter_mut();
        for l in model.layers.values_mut() {
            let e = l.pool.get_mut(kind)?;
            let s = sig_iter.next().expect("one sigma per layer");
            refs.push(&mut e.u);
            refs.push(s);
            refs.push(&mut e.v);
        }
        let [hw, hb] = head.params_mut();
        refs.push(hw);
        refs.push(hb);
        opt.step(&mut refs, grads);
    }
    for (l, s) in model.layers.values_mut().zip(sigmas) {
        l.pool.get_mut(kind)?.sigma = s.into_data();
    }
    Ok(())
}

/// Trains the router and a reinitialized head against frozen experts on
/// the mixed all-domain stream; expert labels are the sample domains.
pub fn train_stage2(model: &mut OmniModel, data: &[SyntheticSample], cfg: &TrainConfig) -> Result<Vec<TrainRecord>> {
    let n = model.n_semantic();
    cfg.validate(n)?;
    if !model.trained.all() {
        return Err(Error::InvalidInput(
            "every expert must be trained before the router".into(),
        ));
    }
    if let Some(s) = data.iter().find(|s| s.domain >= n) {
        return Err(Error::InvalidInput(format!(
            "sample domain {} has no semantic expert ({n} experts)",
            s.domain
        )));
    }
    let mut r = rng::substream(cfg.seed, 200);
    model.head = ClassificationHead::new(model.backbone.cfg.embed_dim, 2, &mut r);
    let plan = if data.is_empty() {
        Vec::new()
    } else {
        batches(data.len(), cfg, cfg.epochs_stage2, &mut r)
    };
    let guard = FreezeGuard::new(model, |k| k == "router" || k == "head");
    // The router's encoder is frozen, so its features are computed once.
    let feats = if plan.is_empty() {
        Matrix::zeros(0, model.backbone.cfg.embed_dim)
    } else {
        frozen_features_chunked(model, data)?
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr_stage2, cfg.clip_norm);
    let mut records = Vec::with_capacity(plan.len());
    for (step, idx) in plan.iter().enumerate() {
        let imgs: Vec<&[f64]> = idx.iter().map(|&i| data[i].image.as_slice()).collect();
        let y = labels(data, idx);
        let ye: Vec<usize> = idx.iter().map(|&i| data[i].domain).collect();
        let f = gather_rows(&feats, idx);
        let mut tape = Tape::new();
        let out = stage2_forward(model, &mut tape, &imgs, &f, &y, &ye, cfg)?;
        let terms = out.terms(&tape, cfg);
        ensure_finite(terms.total, "stage-2 loss")?;
        let grads = tape.backward(out.total)?;
        let gs = out.params.iter().map(|&v| grads.wrt(v)).collect::<Result<Vec<_>>>()?;
        {
            let mut refs: Vec<&mut Matrix> = model.router.params_mut().into_iter().collect();
            let [hw, hb] = model.head.params_mut();
            refs.push(hw);
            refs.push(hb);
            opt.step(&mut refs, &gs);
        }
        let param_checksums = if cfg.check_freeze {
            guard.verify(model)?
        } else {
            BTreeMap::new()
        };
        records.push(TrainRecord {
            stage: 2,
            expert: None,
            step,
            losses: terms,
            routing_stats: Some(out.stats),
            param_checksums,
        });
    }
    if !plan.is_empty() {
        model.router_trained = true;
    }
    Ok(records)
}

/// Handles of one recorded stage-2 objective.
pub struct Stage2Graph {
    pub cls: Var,
    pub gating: Var,
    pub balance: Var,
    pub total: Var,
    /// Router `w1, b1, w2, b2` followed by head `weight, bias`.
    pub params: Vec<Var>,
    pub stats: BatchRoutingStats,
}

impl Stage2Graph {
    fn terms(&self, tape: &Tape, _cfg: &TrainConfig) -> LossTerms {
        LossTerms {
            cls: tape.scalar(self.cls),
            orth: 0.0,
            gating: tape.scalar(self.gating),
            balance: tape.scalar(self.balance),
            total: tape.scalar(self.total),
        }
    }
}

/// Records the stage-2 objective for one batch. `frozen` holds the router
/// encoder's features of the batch. Top-k selection and the argmax counts
/// `F` are taken from the current gate values and held constant.
pub fn stage2_forward(
    model: &OmniModel,
    tape: &mut Tape,
    images: &[&[f64]],
    frozen: &Matrix,
    labels: &[usize],
    expert_labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Stage2Graph> {
    let n = model.n_semantic();
    let fv = tape.constant(frozen.clone());
    let (logits, rv) = model.router.forward_tape(tape, fv, true);
    let gates = tape.softmax_rows(logits);
    let gate_vals = tape.value(gates).clone();
    let b = images.len();
    let mut mask = Matrix::zeros(b, n);
    let mut f = vec![0.0; n];
    for i in 0..b {
        let row = gate_vals.row(i);
        for j in top_k(row, cfg.k_s) {
            mask[(i, j)] = 1.0;
        }
        f[argmax(row)] += 1.0 / b as f64;
    }
    let mv = tape.constant(mask);
    let mut mixing = tape.mul(gates, mv);
    if cfg.renormalize {
        mixing = tape.normalize_rows(mixing);
    }
    let feats = model.gated_forward(tape, images, Some(mixing), true)?;
    let hv = model.head.vars(tape, true);
    let z = ClassificationHead::forward_tape(tape, feats, hv);
    let cls = tape.cross_entropy(z, labels)?;
    let gating = tape.cross_entropy(logits, expert_labels)?;
    let balance = balance_tape(tape, gates, &f);
    let g2 = tape.scale(gating, cfg.loss.lambda2);
    let b3 = tape.scale(balance, cfg.loss.lambda3);
    let t = tape.add(cls, g2);
    let total = tape.add(t, b3);
    let mut params: Vec<Var> = rv.all().to_vec();
    params.extend([hv.0, hv.1]);
    let p: Vec<f64> = {
        let g = softmax_rows(tape.value(logits));
        (0..n).map(|j| (0..b).map(|i| g[(i, j)]).sum::<f64>() / b as f64).collect()
    };
    Ok(Stage2Graph {
        cls,
        gating,
        balance,
        total,
        params,
        stats: BatchRoutingStats { f, p, batch_size: b },
    })
}

/// Router-encoder features of a dataset, encoded in fixed-size chunks.
pub fn frozen_features_chunked(model: &OmniModel, data: &[SyntheticSample]) -> Result<Matrix> {
    let d = model.backbone.cfg.embed_dim;
    let mut out = Matrix::zeros(data.len(), d);
    for (c, chunk) in data.chunks(EVAL_CHUNK).enumerate() {
        let imgs: Vec<&[f64]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        let f = model.frozen_features(&imgs)?;
        for i in 0..chunk.len() {
            out.row_mut(c * EVAL_CHUNK + i).copy_from_slice(f.row(i));
        }
    }
    Ok(out)
}

/// Batch size for inference passes.
pub const EVAL_CHUNK: usize = 256;

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}
