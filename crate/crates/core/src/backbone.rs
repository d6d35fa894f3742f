//! Tiny pre-norm transformer image encoder and the real/fake head.
//!
//! Images are cut into non-overlapping square patches (row-major over the
//! patch grid, row-major pixels inside a patch), embedded linearly, given
//! learned positional embeddings, passed through `n_blocks` pre-norm
//! blocks (attention, then GELU feed-forward), layer-normed and mean-pooled
//! over tokens. Attention projections have no bias so a decomposition
//! covers the whole projection.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decomp::{LayerId, Proj};
use crate::error::{Error, Result};
use crate::numcore::tape::AttnShape;
use crate::numcore::{checksum, rng, Matrix, Tape, Var};
use crate::synthdata::SyntheticSample;
use crate::trainer::optim::{Optimizer, OptimizerKind};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            embed_dim: 32,
            n_blocks: 2,
            n_heads: 2,
            ffn_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("n_blocks and ffn_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    /// Every attention projection of every block.
    pub fn all_layers(&self) -> Vec<LayerId> {
        (0..self.n_blocks)
            .flat_map(|block| Proj::ALL.into_iter().map(move |proj| LayerId { block, proj }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Block {
    fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ffn_dim;
        let sd = 1.0 / (d as f64).sqrt();
        Self {
            ln1_g: Matrix::filled(1, d, 1.0),
            ln1_b: Matrix::zeros(1, d),
            wq: Matrix::randn(d, d, sd, rng),
            wk: Matrix::randn(d, d, sd, rng),
            wv: Matrix::randn(d, d, sd, rng),
            wo: Matrix::randn(d, d, sd, rng),
            ln2_g: Matrix::filled(1, d, 1.0),
            ln2_b: Matrix::zeros(1, d),
            w1: Matrix::randn(f, d, sd, rng),
            b1: Matrix::zeros(1, f),
            w2: Matrix::randn(d, f, 1.0 / (f as f64).sqrt(), rng),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn proj(&self, p: Proj) -> &Matrix {
        match p {
            Proj::Query => &self.wq,
            Proj::Key => &self.wk,
            Proj::Value => &self.wv,
            Proj::Output => &self.wo,
        }
    }

    fn named(&self) -> [(&'static str, &Matrix); 12] {
        [
            ("ln1.gain", &self.ln1_g),
            ("ln1.bias", &self.ln1_b),
            ("attn.q", &self.wq),
            ("attn.k", &self.wk),
            ("attn.v", &self.wv),
            ("attn.o", &self.wo),
            ("ln2.gain", &self.ln2_g),
            ("ln2.bias", &self.ln2_b),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
}

/// Tape handles of every backbone parameter.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub pos: Var,
    pub blocks: Vec<[Var; 12]>,
    pub lnf_g: Var,
    pub lnf_b: Var,
}

impl BackboneVars {
    pub fn flatten(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.pos];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.push(self.lnf_g);
        out.push(self.lnf_b);
        out
    }

    pub fn proj(&self, layer: LayerId) -> Var {
        let b = &self.blocks[layer.block];
        match layer.proj {
            Proj::Query => b[2],
            Proj::Key => b[3],
            Proj::Value => b[4],
            Proj::Output => b[5],
        }
    }
}

/// Supplies the weight of each attention projection during a forward pass.
pub trait AttnWeights {
    /// Returns `h · Wᵀ` for the projection `layer`.
    fn project(&self, tape: &mut Tape, layer: LayerId, h: Var, backbone: &BackboneVars) -> Var;
}

/// The backbone's own attention weights.
pub struct DenseWeights;

impl AttnWeights for DenseWeights {
    fn project(&self, tape: &mut Tape, layer: LayerId, h: Var, backbone: &BackboneVars) -> Var {
        tape.matmul_nt(h, backbone.proj(layer))
    }
}

/// One weight per listed layer for the whole batch; unlisted layers fall
/// back to the dense backbone weights.
pub struct FixedWeights {
    pub weights: BTreeMap<LayerId, Var>,
}

impl AttnWeights for FixedWeights {
    fn project(&self, tape: &mut Tape, layer: LayerId, h: Var, backbone: &BackboneVars) -> Var {
        let w = self.weights.get(&layer).copied().unwrap_or_else(|| backbone.proj(layer));
        tape.matmul_nt(h, w)
    }
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(seed);
        let d = cfg.embed_dim;
        let p = cfg.patch_pixels();
        let patch_w = Matrix::randn(d, p, 1.0 / (p as f64).sqrt(), &mut r);
        let pos = Matrix::randn(cfg.tokens(), d, 0.1, &mut r);
        let blocks = (0..cfg.n_blocks).map(|_| Block::new(&cfg, &mut r)).collect();
        Ok(Self {
            cfg,
            patch_w,
            patch_b: Matrix::zeros(1, d),
            pos,
            blocks,
            lnf_g: Matrix::filled(1, d, 1.0),
            lnf_b: Matrix::zeros(1, d),
        })
    }

    /// All parameters with stable names, in tape order.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_w),
            ("patch_embed.bias".to_string(), &self.patch_b),
            ("pos_embed".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, m) in b.named() {
                out.push((format!("block{i}.{name}"), m));
            }
        }
        out.push(("final_ln.gain".to_string(), &self.lnf_g));
        out.push(("final_ln.bias".to_string(), &self.lnf_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.named_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn checksum(&self) -> String {
        checksum(self.named_params().into_iter().map(|(_, m)| m))
    }

    /// Records all parameters on the tape.
    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let patch_w = leaf(&self.patch_w);
        let patch_b = leaf(&self.patch_b);
        let pos = leaf(&self.pos);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let n = b.named();
                std::array::from_fn(|i| leaf(n[i].1))
            })
            .collect();
        BackboneVars {
            patch_w,
            patch_b,
            pos,
            blocks,
            lnf_g: leaf(&self.lnf_g),
            lnf_b: leaf(&self.lnf_b),
        }
    }

    /// Patch matrix (batch·tokens)×patch_pixels for a batch of images.
    pub fn patchify(&self, images: &[&[f64]]) -> Result<Matrix> {
        let cfg = &self.cfg;
        let (n, p, g) = (cfg.image_size, cfg.patch_size, cfg.image_size / cfg.patch_size);
        let t = cfg.tokens();
        let mut out = Matrix::zeros(images.len() * t, cfg.patch_pixels());
        for (b, img) in images.iter().enumerate() {
            if img.len() != cfg.pixels() {
                return Err(Error::InvalidInput(format!(
                    "image has {} pixels, expected {}",
                    img.len(),
                    cfg.pixels()
                )));
            }
            for py in 0..g {
                for px in 0..g {
                    let row = out.row_mut(b * t + py * g + px);
                    for y in 0..p {
                        for x in 0..p {
                            row[y * p + x] = img[(py * p + y) * n + px * p + x];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Pooled features (batch×embed_dim) on a tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        patches: Var,
        batch: usize,
        vars: &BackboneVars,
        weights: &dyn AttnWeights,
    ) -> Var {
        let cfg = &self.cfg;
        let t = cfg.tokens();
        let shape = AttnShape {
            batch,
            tokens: t,
            heads: cfg.n_heads,
        };
        let x = tape.matmul_nt(patches, vars.patch_w);
        let x = tape.add_row(x, vars.patch_b);
        let mut x = tape.add_tiled(x, vars.pos);
        for (i, b) in vars.blocks.iter().enumerate() {
            let layer = |proj| LayerId { block: i, proj };
            let h = tape.layer_norm(x, b[0], b[1], LN_EPS);
            let q = weights.project(tape, layer(Proj::Query), h, vars);
            let k = weights.project(tape, layer(Proj::Key), h, vars);
            let v = weights.project(tape, layer(Proj::Value), h, vars);
            let a = tape.attention(q, k, v, shape);
            let o = weights.project(tape, layer(Proj::Output), a, vars);
            x = tape.add(x, o);
            let h = tape.layer_norm(x, b[6], b[7], LN_EPS);
            let f = tape.matmul_nt(h, b[8]);
            let f = tape.add_row(f, b[9]);
            let f = tape.gelu(f);
            let f = tape.matmul_nt(f, b[10]);
            let f = tape.add_row(f, b[11]);
            x = tape.add(x, f);
        }
        let x = tape.layer_norm(x, vars.lnf_g, vars.lnf_b, LN_EPS);
        tape.mean_groups(x, t)
    }

    /// Pooled features of a batch through the dense (pretrained) weights.
    pub fn encode(&self, images: &[&[f64]]) -> Result<Matrix> {
        self.encode_with(images, &|_, _| None)
    }

    /// Pooled features with per-layer weight overrides.
    pub fn encode_with(
        &self,
        images: &[&[f64]],
        weight_for: &dyn Fn(&mut Tape, LayerId) -> Option<Var>,
    ) -> Result<Matrix> {
        if images.is_empty() {
            return Ok(Matrix::zeros(0, self.cfg.embed_dim));
        }
        let patches = self.patchify(images)?;
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape, false);
        let mut weights = BTreeMap::new();
        for layer in self.cfg.all_layers() {
            if let Some(w) = weight_for(&mut tape, layer) {
                weights.insert(layer, w);
            }
        }
        let p = tape.constant(patches);
        let out = self.forward(&mut tape, p, images.len(), &vars, &FixedWeights { weights });
        Ok(tape.value(out).clone())
    }

    /// Pooled features with fixed composed weights for the listed layers.
    pub fn encode_composed(&self, images: &[&[f64]], composed: &BTreeMap<LayerId, Matrix>) -> Result<Matrix> {
        self.encode_with(images, &|tape, layer| composed.get(&layer).map(|m| tape.constant(m.clone())))
    }
}

/// Linear map from pooled features to `classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

pub const HEAD_INIT_STD: f64 = 0.02;

impl ClassificationHead {
    /// Gaussian(0, 0.02²) weights and zero bias.
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::randn(classes, embed_dim, HEAD_INIT_STD, rng),
            bias: Matrix::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    /// `features · Wᵀ + b` for a batch of feature rows.
    pub fn classify(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.weight.cols() {
            return Err(Error::InvalidInput(format!(
                "head expects {}-dim features, got {}",
                self.weight.cols(),
                features.cols()
            )));
        }
        let mut out = features.matmul_nt(&self.weight);
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        if trainable {
            (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        }
    }

    pub fn forward_tape(tape: &mut Tape, features: Var, (w, b): (Var, Var)) -> Var {
        let z = tape.matmul_nt(features, w);
        tape.add_row(z, b)
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub clip_norm: f64,
    /// Fraction of the data held out for the accuracy check.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.05,
            batch_size: 32,
            momentum: 0.9,
            clip_norm: 1.0,
            holdout: 0.2,
            seed: 7,
        }
    }
}

/// Held-out accuracy the pretrained encoder must reach before it is handed
/// to the decomposition step.
pub const PRETRAIN_TARGET: f64 = 0.95;
/// Below this the run is treated as diverged.
pub const PRETRAIN_FLOOR: f64 = 0.80;

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub backbone: Backbone,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
}

/// Trains the whole encoder plus a throwaway domain head on domain labels.
pub fn pretrain_backbone(
    cfg: BackboneConfig,
    data: &[SyntheticSample],
    n_domains: usize,
    pcfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidInput("pretraining dataset is empty".into()));
    }
    if n_domains < 2 {
        return Err(Error::InvalidInput("pretraining needs at least two domains".into()));
    }
    if !(0.0..1.0).contains(&pcfg.holdout) || pcfg.batch_size == 0 {
        return Err(Error::Config("invalid pretraining holdout or batch size".into()));
    }
    let n_hold = ((data.len() as f64) * pcfg.holdout).round() as usize;
    let n_hold = n_hold.clamp(1, data.len().saturating_sub(1).max(1));
    let (train, held) = data.split_at(data.len() - n_hold);
    if train.is_empty() {
        return Err(Error::InvalidInput("pretraining dataset too small to split".into()));
    }
    let mut backbone = Backbone::new(cfg, pcfg.seed)?;
    let mut r = rng::substream(pcfg.seed, 1);
    let mut head = ClassificationHead::new(cfg.embed_dim, n_domains, &mut r);
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: pcfg.momentum }, pcfg.lr, pcfg.clip_norm);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..pcfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut r);
        for chunk in order.chunks(pcfg.batch_size) {
            let imgs: Vec<&[f64]> = chunk.iter().map(|&i| train[i].image.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].domain).collect();
            let patches = backbone.patchify(&imgs)?;
            let mut tape = Tape::new();
            let bv = backbone.vars(&mut tape, true);
            let hv = head.vars(&mut tape, true);
            let p = tape.constant(patches);
            let feats = backbone.forward(&mut tape, p, imgs.len(), &bv, &DenseWeights);
            let logits = ClassificationHead::forward_tape(&mut tape, feats, hv);
            let loss = tape.cross_entropy(logits, &labels)?;
            last_loss = tape.scalar(loss);
            if !last_loss.is_finite() {
                return Err(Error::NumericalFailure("pretraining loss is not finite".into()));
            }
            let grads = tape.backward(loss)?;
            let mut vars = bv.flatten();
            vars.push(hv.0);
            vars.push(hv.1);
            let gs = vars.iter().map(|&v| grads.wrt(v)).collect::<Result<Vec<_>>>()?;
            let mut params = backbone.params_mut();
            let [hw, hb] = head.params_mut();
            params.push(hw);
            params.push(hb);
            opt.step(&mut params, &gs);
        }
    }
    let correct = held
        .chunks(256)
        .map(|chunk| -> Result<usize> {
            let imgs: Vec<&[f64]> = chunk.iter().map(|s| s.image.as_slice()).collect();
            let logits = head.classify(&backbone.encode(&imgs)?)?;
            Ok(chunk
                .iter()
                .enumerate()
                .filter(|(i, s)| crate::router::argmax(logits.row(*i)) == s.domain)
                .count())
        })
        .sum::<Result<usize>>()?;
    let acc = correct as f64 / held.len() as f64;
    if acc < PRETRAIN_FLOOR {
        return Err(Error::PretrainDiverged {
            accuracy: acc,
            required: PRETRAIN_FLOOR,
        });
    }
    Ok(PretrainOutcome {
        backbone,
        heldout_accuracy: acc,
        final_loss: last_loss,
    })
}
