//! End-to-end run: data streams, pretraining, decomposition and both stages.

use crate::backbone::{pretrain_backbone, Backbone, BackboneConfig, PretrainConfig, PretrainOutcome};
use crate::decomp::{ExpertKind, LayerId};
use crate::error::{Error, Result};
use crate::model::OmniModel;
use crate::numcore::rng;
use crate::synthdata::{FakeMode, GeneratorConfig, SyntheticGenerator, SyntheticSample};

use super::{train_stage1, train_stage2, TrainConfig, TrainRecord};

/// Everything a run needs; see the CLI help for the key reference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub backbone: BackboneConfig,
    pub router_hidden: usize,
    /// Adapted projections; empty means every attention projection.
    pub layers: Vec<LayerId>,
    pub pretrain: PretrainConfig,
    /// Real samples per domain for pretraining.
    pub pretrain_per_domain: usize,
    pub train: TrainConfig,
    /// Samples per domain in each stage's training stream.
    pub samples_per_domain: usize,
    /// Samples per domain in held-out evaluation sets.
    pub eval_per_domain: usize,
    /// Semantic experts see semantic-only fakes (no artifact cue).
    pub semantic_only: bool,
    pub real_frac: f64,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self::with_train("toy", TrainConfig::toy())
    }

    pub fn profile(name: &str) -> Result<Self> {
        Ok(Self::with_train(name, TrainConfig::profile(name)?))
    }

    fn with_train(name: &str, train: TrainConfig) -> Self {
        Self {
            profile: name.to_string(),
            seed: 7,
            generator: GeneratorConfig::default(),
            backbone: BackboneConfig::default(),
            router_hidden: 16,
            layers: Vec::new(),
            pretrain: PretrainConfig::default(),
            pretrain_per_domain: 1000,
            train,
            samples_per_domain: 2000,
            eval_per_domain: 500,
            semantic_only: true,
            real_frac: 0.5,
        }
    }

    /// Propagates the master seed into every sub-config.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.generator.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
    }

    pub fn adapted_layers(&self) -> Vec<LayerId> {
        if self.layers.is_empty() {
            self.backbone.all_layers()
        } else {
            self.layers.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.generator.image_size != self.backbone.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from model.image_size {}",
                self.generator.image_size, self.backbone.image_size
            )));
        }
        if self.router_hidden == 0 {
            return Err(Error::Config("model.router_hidden must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.real_frac) {
            return Err(Error::Config("data.real_frac must be in [0, 1]".into()));
        }
        let max = self.backbone.embed_dim;
        if self.train.r >= max {
            return Err(Error::InvalidRank { r: self.train.r, max });
        }
        if let Some(l) = self.adapted_layers().iter().find(|l| l.block >= self.backbone.n_blocks) {
            return Err(Error::Config(format!("adapt.layers names missing layer {l}")));
        }
        self.train.validate(self.generator.n_domains)
    }

    pub fn generator(&self) -> Result<SyntheticGenerator> {
        SyntheticGenerator::new(self.generator.clone())
    }
}

/// Deterministic data streams of a run, each drawn from its own substream.
pub struct Datasets {
    gen: SyntheticGenerator,
    cfg: RunConfig,
}

const PRETRAIN_STREAM: u64 = 1_000;
const UNIVERSAL_STREAM: u64 = 1_001;
const ROUTER_STREAM: u64 = 1_002;
const HELDOUT_STREAM: u64 = 1_003;
const SEMANTIC_STREAM: u64 = 1_100;
const PROBE_STREAM: u64 = 1_200;

impl Datasets {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            gen: cfg.generator()?,
            cfg: cfg.clone(),
        })
    }

    pub fn generator(&self) -> &SyntheticGenerator {
        &self.gen
    }

    fn n_domains(&self) -> usize {
        self.cfg.generator.n_domains
    }

    /// Real images of every domain, interleaved by domain.
    pub fn pretrain(&self) -> Result<Vec<SyntheticSample>> {
        let mut r = rng::substream(self.cfg.seed, PRETRAIN_STREAM);
        let nd = self.n_domains();
        (0..self.cfg.pretrain_per_domain * nd)
            .map(|i| self.gen.sample(i % nd, FakeMode::None, &mut r))
            .collect()
    }

    /// Training stream of one expert: purified real/artifact pairs for the
    /// universal expert, the expert's own domain for a semantic expert.
    pub fn expert(&self, kind: ExpertKind) -> Result<Vec<SyntheticSample>> {
        match kind {
            ExpertKind::Universal => {
                let mut r = rng::substream(self.cfg.seed, UNIVERSAL_STREAM);
                let n = self.cfg.samples_per_domain * self.n_domains() / 2;
                Ok(self
                    .gen
                    .purified_pairs(n, &mut r)?
                    .into_iter()
                    .flat_map(|(a, b)| [a, b])
                    .collect())
            }
            ExpertKind::Semantic(i) => {
                let mut r = rng::substream(self.cfg.seed, SEMANTIC_STREAM + i as u64);
                self.gen.domain_stream(
                    i,
                    self.cfg.samples_per_domain,
                    self.cfg.real_frac,
                    self.cfg.semantic_only,
                    &mut r,
                )
            }
        }
    }

    /// Mixed all-domain stream for router training.
    pub fn router(&self) -> Result<Vec<SyntheticSample>> {
        let mut r = rng::substream(self.cfg.seed, ROUTER_STREAM);
        self.gen.mixed_stream(self.cfg.samples_per_domain, &mut r)
    }

    /// Held-out mixed set (real, semantic-fake and artifact-fake).
    pub fn heldout(&self) -> Result<Vec<SyntheticSample>> {
        let mut r = rng::substream(self.cfg.seed, HELDOUT_STREAM);
        self.gen.mixed_stream(self.cfg.eval_per_domain, &mut r)
    }

    /// Balanced held-out reals and `mode` fakes from one domain.
    pub fn probe(&self, domain: usize, mode: FakeMode) -> Result<Vec<SyntheticSample>> {
        let tag = PROBE_STREAM + 8 * domain as u64 + mode as u64;
        let mut r = rng::substream(self.cfg.seed, tag);
        self.gen.probe_set(domain, mode, self.cfg.eval_per_domain / 2, &mut r)
    }
}

/// Training logs of one run, tagged by stage run.
#[derive(Debug, Clone, Default)]
pub struct RunLogs {
    pub pretrain_accuracy: f64,
    pub stages: Vec<(String, Vec<TrainRecord>)>,
}

pub fn pretrain(cfg: &RunConfig, data: &Datasets) -> Result<PretrainOutcome> {
    pretrain_backbone(cfg.backbone, &data.pretrain()?, cfg.generator.n_domains, &cfg.pretrain)
}

pub fn build_model(cfg: &RunConfig, backbone: Backbone) -> Result<OmniModel> {
    OmniModel::from_pretrained(
        backbone,
        &cfg.adapted_layers(),
        cfg.train.r,
        cfg.generator.n_domains,
        cfg.router_hidden,
        cfg.seed,
    )
}

/// Stage 1 for every expert: universal first, then semantic in index order.
pub fn train_experts(cfg: &RunConfig, data: &Datasets, model: &mut OmniModel) -> Result<Vec<(String, Vec<TrainRecord>)>> {
    let mut out = Vec::new();
    for kind in model.expert_kinds() {
        let recs = train_stage1(model, kind, &data.expert(kind)?, &cfg.train)?;
        out.push((format!("stage1.{kind}"), recs));
    }
    Ok(out)
}

pub fn train_router(cfg: &RunConfig, data: &Datasets, model: &mut OmniModel) -> Result<Vec<TrainRecord>> {
    train_stage2(model, &data.router()?, &cfg.train)
}

/// Pretraining through stage 2.
pub fn run(cfg: &RunConfig) -> Result<(OmniModel, RunLogs)> {
    cfg.validate()?;
    let data = Datasets::new(cfg)?;
    let pre = pretrain(cfg, &data)?;
    let mut model = build_model(cfg, pre.backbone)?;
    let mut logs = RunLogs {
        pretrain_accuracy: pre.heldout_accuracy,
        stages: train_experts(cfg, &data, &mut model)?,
    };
    logs.stages.push(("stage2".into(), train_router(cfg, &data, &mut model)?));
    Ok((model, logs))
}
