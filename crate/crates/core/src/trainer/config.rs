//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. A `profile` key, if
//! present, is applied before every other key regardless of its position.

use std::str::FromStr;

use crate::decomp::{LayerId, Proj};
use crate::error::{Error, Result};
use crate::trainer::optim::OptimizerKind;

use super::pipeline::RunConfig;

/// (key, description) for every accepted key.
pub const KEYS: &[(&str, &str)] = &[
    ("profile", "toy | small | large; base values for every other key"),
    ("seed", "master seed for data, initialization and shuffling"),
    ("data.n_domains", "number of semantic domains (= semantic experts), 1..=8"),
    ("data.image_size", "image side length in pixels"),
    ("data.base_amplitude", "amplitude of the domain sinusoid"),
    ("data.amplitude_jitter", "relative amplitude jitter in [0, 1)"),
    ("data.semantic_flaw_amplitude", "peak phase warp of semantic fakes (radians)"),
    ("data.artifact_amplitude", "checkerboard amplitude of artifact fakes"),
    ("data.noise_std", "per-pixel Gaussian noise level"),
    ("data.samples_per_domain", "samples per domain in each training stream"),
    ("data.eval_per_domain", "samples per domain in held-out sets"),
    ("data.pretrain_per_domain", "real samples per domain for pretraining"),
    ("data.real_frac", "fraction of reals in semantic-expert streams"),
    ("data.semantic_only", "semantic-expert fakes carry no artifact cue (true|false)"),
    ("model.image_size", "encoder input side length"),
    ("model.patch_size", "square patch side length"),
    ("model.embed_dim", "token width"),
    ("model.n_blocks", "transformer blocks"),
    ("model.n_heads", "attention heads"),
    ("model.ffn_dim", "feed-forward hidden width"),
    ("model.router_hidden", "router MLP hidden width"),
    ("adapt.layers", "adapted projections: all, or a list like 0.q,0.v,1.o"),
    ("pretrain.epochs", "pretraining epochs"),
    ("pretrain.lr", "pretraining learning rate"),
    ("pretrain.batch_size", "pretraining batch size"),
    ("pretrain.momentum", "pretraining SGD momentum"),
    ("pretrain.holdout", "held-out fraction for the pretraining accuracy check"),
    ("train.r", "residual (expert) rank"),
    ("train.k_s", "number of routed semantic experts per input"),
    ("train.lr_stage1", "stage-1 learning rate"),
    ("train.lr_stage2", "stage-2 learning rate"),
    ("train.batch_size", "batch size of both stages"),
    ("train.epochs_stage1", "epochs per expert"),
    ("train.epochs_stage2", "router epochs"),
    ("train.max_steps", "step cap per stage run (none = unlimited)"),
    ("train.clip_norm", "global gradient-norm clip (0 disables)"),
    ("train.check_freeze", "verify frozen checksums after every step (true|false)"),
    ("optim", "sgd | adamw"),
    ("optim.momentum", "SGD momentum"),
    ("optim.weight_decay", "AdamW decoupled weight decay"),
    ("loss.lambda1", "orthogonality weight (stage 1)"),
    ("loss.lambda2", "gating cross-entropy weight (stage 2)"),
    ("loss.lambda3", "load-balance weight (stage 2)"),
    ("router.renormalize", "renormalize selected gates to sum to 1 (true|false)"),
    ("stage1.include_universal", "add the universal expert while training semantic experts"),
    ("orth.include_universal", "include the universal expert in the orthogonality set"),
];

/// Key reference for `--help`.
pub fn key_reference() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    KEYS.iter()
        .map(|(k, d)| format!("  {k:width$}  {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{v}' for {key}"))),
    }
}

/// Parses `0.q,1.v` style layer lists.
pub fn parse_layers(v: &str) -> Result<Vec<LayerId>> {
    if v == "all" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = || Error::Config(format!("invalid layer '{item}' (expected <block>.<q|k|v|o>)"));
        let (b, p) = item.split_once('.').ok_or_else(bad)?;
        let block = b.trim_start_matches("layer").parse().map_err(|_| bad())?;
        let mut chars = p.chars();
        let proj = match (chars.next(), chars.next()) {
            (Some(c), None) => Proj::from_letter(c).ok_or_else(bad)?,
            _ => return Err(bad()),
        };
        let id = LayerId { block, proj };
        if !out.contains(&id) {
            out.push(id);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("adapt.layers is empty".into()));
    }
    out.sort();
    Ok(out)
}

/// Applies one key to `cfg`.
pub fn apply(cfg: &mut RunConfig, key: &str, v: &str) -> Result<()> {
    let g = &mut cfg.generator;
    let b = &mut cfg.backbone;
    let p = &mut cfg.pretrain;
    let t = &mut cfg.train;
    match key {
        "profile" => {
            let seed = cfg.seed;
            *cfg = RunConfig::profile(v)?;
            cfg.set_seed(seed);
        }
        "seed" => cfg.set_seed(parse(key, v)?),
        "data.n_domains" => g.n_domains = parse(key, v)?,
        "data.image_size" => g.image_size = parse(key, v)?,
        "data.base_amplitude" => g.base_amplitude = parse(key, v)?,
        "data.amplitude_jitter" => g.amplitude_jitter = parse(key, v)?,
        "data.semantic_flaw_amplitude" => g.semantic_flaw_amplitude = parse(key, v)?,
        "data.artifact_amplitude" => g.artifact_amplitude = parse(key, v)?,
        "data.noise_std" => g.noise_std = parse(key, v)?,
        "data.samples_per_domain" => cfg.samples_per_domain = parse(key, v)?,
        "data.eval_per_domain" => cfg.eval_per_domain = parse(key, v)?,
        "data.pretrain_per_domain" => cfg.pretrain_per_domain = parse(key, v)?,
        "data.real_frac" => cfg.real_frac = parse(key, v)?,
        "data.semantic_only" => cfg.semantic_only = parse_bool(key, v)?,
        "model.image_size" => b.image_size = parse(key, v)?,
        "model.patch_size" => b.patch_size = parse(key, v)?,
        "model.embed_dim" => b.embed_dim = parse(key, v)?,
        "model.n_blocks" => b.n_blocks = parse(key, v)?,
        "model.n_heads" => b.n_heads = parse(key, v)?,
        "model.ffn_dim" => b.ffn_dim = parse(key, v)?,
        "model.router_hidden" => cfg.router_hidden = parse(key, v)?,
        "adapt.layers" => cfg.layers = parse_layers(v)?,
        "pretrain.epochs" => p.epochs = parse(key, v)?,
        "pretrain.lr" => p.lr = parse(key, v)?,
        "pretrain.batch_size" => p.batch_size = parse(key, v)?,
        "pretrain.momentum" => p.momentum = parse(key, v)?,
        "pretrain.holdout" => p.holdout = parse(key, v)?,
        "train.r" => t.r = parse(key, v)?,
        "train.k_s" => t.k_s = parse(key, v)?,
        "train.lr_stage1" => t.lr_stage1 = parse(key, v)?,
        "train.lr_stage2" => t.lr_stage2 = parse(key, v)?,
        "train.batch_size" => t.batch_size = parse(key, v)?,
        "train.epochs_stage1" => t.epochs_stage1 = parse(key, v)?,
        "train.epochs_stage2" => t.epochs_stage2 = parse(key, v)?,
        "train.max_steps" => {
            t.max_steps = match v {
                "none" => None,
                _ => Some(parse(key, v)?),
            }
        }
        "train.clip_norm" => t.clip_norm = parse(key, v)?,
        "train.check_freeze" => t.check_freeze = parse_bool(key, v)?,
        "optim" => {
            t.optimizer = match v {
                "sgd" => OptimizerKind::Sgd { momentum: 0.9 },
                "adamw" => OptimizerKind::ADAMW_DEFAULT,
                _ => return Err(Error::Config(format!("unknown optimizer '{v}' (sgd|adamw)"))),
            }
        }
        "optim.momentum" => match &mut t.optimizer {
            OptimizerKind::Sgd { momentum } => *momentum = parse(key, v)?,
            _ => return Err(Error::Config("optim.momentum applies to sgd only".into())),
        },
        "optim.weight_decay" => match &mut t.optimizer {
            OptimizerKind::AdamW { weight_decay, .. } => *weight_decay = parse(key, v)?,
            _ => return Err(Error::Config("optim.weight_decay applies to adamw only".into())),
        },
        "loss.lambda1" => t.loss.lambda1 = parse(key, v)?,
        "loss.lambda2" => t.loss.lambda2 = parse(key, v)?,
        "loss.lambda3" => t.loss.lambda3 = parse(key, v)?,
        "router.renormalize" => t.renormalize = parse_bool(key, v)?,
        "stage1.include_universal" => t.stage1_include_universal = parse_bool(key, v)?,
        "orth.include_universal" => t.orth_include_universal = parse_bool(key, v)?,
        _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
    }
    Ok(())
}

/// Parses a config file body on top of the toy profile.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut cfg = RunConfig::toy();
    // The profile and seed lay the base; everything else overrides it.
    for (k, v) in pairs.iter().filter(|(k, _)| k == "seed") {
        apply(&mut cfg, k, v)?;
    }
    for (k, v) in pairs.iter().filter(|(k, _)| k == "profile") {
        apply(&mut cfg, k, v)?;
    }
    for (k, v) in pairs.iter().filter(|(k, _)| k != "profile" && k != "seed") {
        apply(&mut cfg, k, v)?;
    }
    Ok(cfg)
}

/// Renders every key with its current value.
pub fn render(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let g = &cfg.generator;
    let b = &cfg.backbone;
    let p = &cfg.pretrain;
    let layers = if cfg.layers.is_empty() {
        "all".to_string()
    } else {
        cfg.layers
            .iter()
            .map(|l| format!("{}.{}", l.block, l.proj.letter()))
            .collect::<Vec<_>>()
            .join(",")
    };
    let (optim, momentum, wd) = match t.optimizer {
        OptimizerKind::Sgd { momentum } => ("sgd", Some(momentum), None),
        OptimizerKind::AdamW { weight_decay, .. } => ("adamw", None, Some(weight_decay)),
    };
    let mut lines = vec![
        format!("profile = {}", cfg.profile),
        format!("seed = {}", cfg.seed),
        format!("data.n_domains = {}", g.n_domains),
        format!("data.image_size = {}", g.image_size),
        format!("data.base_amplitude = {}", g.base_amplitude),
        format!("data.amplitude_jitter = {}", g.amplitude_jitter),
        format!("data.semantic_flaw_amplitude = {}", g.semantic_flaw_amplitude),
        format!("data.artifact_amplitude = {}", g.artifact_amplitude),
        format!("data.noise_std = {}", g.noise_std),
        format!("data.samples_per_domain = {}", cfg.samples_per_domain),
        format!("data.eval_per_domain = {}", cfg.eval_per_domain),
        format!("data.pretrain_per_domain = {}", cfg.pretrain_per_domain),
        format!("data.real_frac = {}", cfg.real_frac),
        format!("data.semantic_only = {}", cfg.semantic_only),
        format!("model.image_size = {}", b.image_size),
        format!("model.patch_size = {}", b.patch_size),
        format!("model.embed_dim = {}", b.embed_dim),
        format!("model.n_blocks = {}", b.n_blocks),
        format!("model.n_heads = {}", b.n_heads),
        format!("model.ffn_dim = {}", b.ffn_dim),
        format!("model.router_hidden = {}", cfg.router_hidden),
        format!("adapt.layers = {layers}"),
        format!("pretrain.epochs = {}", p.epochs),
        format!("pretrain.lr = {}", p.lr),
        format!("pretrain.batch_size = {}", p.batch_size),
        format!("pretrain.momentum = {}", p.momentum),
        format!("pretrain.holdout = {}", p.holdout),
        format!("train.r = {}", t.r),
        format!("train.k_s = {}", t.k_s),
        format!("train.lr_stage1 = {}", t.lr_stage1),
        format!("train.lr_stage2 = {}", t.lr_stage2),
        format!("train.batch_size = {}", t.batch_size),
        format!("train.epochs_stage1 = {}", t.epochs_stage1),
        format!("train.epochs_stage2 = {}", t.epochs_stage2),
        format!(
            "train.max_steps = {}",
            t.max_steps.map_or("none".to_string(), |m| m.to_string())
        ),
        format!("train.clip_norm = {}", t.clip_norm),
        format!("train.check_freeze = {}", t.check_freeze),
        format!("optim = {optim}"),
    ];
    if let Some(m) = momentum {
        lines.push(format!("optim.momentum = {m}"));
    }
    if let Some(w) = wd {
        lines.push(format!("optim.weight_decay = {w}"));
    }
    lines.extend([
        format!("loss.lambda1 = {}", t.loss.lambda1),
        format!("loss.lambda2 = {}", t.loss.lambda2),
        format!("loss.lambda3 = {}", t.loss.lambda3),
        format!("router.renormalize = {}", t.renormalize),
        format!("stage1.include_universal = {}", t.stage1_include_universal),
        format!("orth.include_universal = {}", t.orth_include_universal),
    ]);
    lines.join("\n") + "\n"
}
