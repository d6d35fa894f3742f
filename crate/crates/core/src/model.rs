//! The assembled detector: frozen encoder, adapted layers, router and heads.

use std::collections::BTreeMap;

use crate::backbone::{AttnWeights, Backbone, BackboneVars, ClassificationHead};
use crate::decomp::{
    compose_stage1_with, compose_weight_with, decompose, init_pool, CompositionOptions, ExpertKind, ExpertPool,
    LayerId, WeightDecomposition,
};
use crate::error::{Error, Result};
use crate::numcore::tape::softmax_rows;
use crate::numcore::{checksum, Matrix, Tape, Var};
use crate::router::{route_batch, GatingNet, RouterOutput};

/// One decomposed attention projection and its experts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer {
    pub decomp: WeightDecomposition,
    pub pool: ExpertPool,
}

/// Training progress of each expert.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainedFlags {
    pub universal: bool,
    pub semantic: Vec<bool>,
}

impl TrainedFlags {
    pub fn get(&self, kind: ExpertKind) -> bool {
        match kind {
            ExpertKind::Universal => self.universal,
            ExpertKind::Semantic(i) => self.semantic.get(i).copied().unwrap_or(false),
        }
    }

    pub fn all(&self) -> bool {
        self.universal && self.semantic.iter().all(|&t| t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmniModel {
    /// Pretrained encoder whose attention projections are replaced by the
    /// adapted layers; every other parameter stays frozen.
    pub backbone: Backbone,
    /// Deep copy of the pretrained encoder feeding the router.
    pub router_encoder: Backbone,
    pub layers: BTreeMap<LayerId, AdaptedLayer>,
    pub router: GatingNet,
    /// Real/fake head of the integrated (stage-2) model.
    pub head: ClassificationHead,
    /// Head trained alongside each expert in stage 1.
    pub stage1_heads: BTreeMap<ExpertKind, ClassificationHead>,
    pub trained: TrainedFlags,
    pub router_trained: bool,
}

/// How the semantic experts enter a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixing {
    /// Per-row mixing weights (batch×N_S), zero for unselected experts.
    Dense(Matrix),
    /// No semantic expert contributes.
    None,
}

impl OmniModel {
    /// Decomposes the listed backbone projections and builds fresh pools,
    /// router and heads.
    pub fn from_pretrained(
        backbone: Backbone,
        layers: &[LayerId],
        r: usize,
        n_semantic: usize,
        router_hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("no layers selected for adaptation".into()));
        }
        let mut adapted = BTreeMap::new();
        for &layer in layers {
            if layer.block >= backbone.cfg.n_blocks {
                return Err(Error::Config(format!("{layer} does not exist in the backbone")));
            }
            let w = backbone.blocks[layer.block].proj(layer.proj);
            let decomp = decompose(w, r, layer)?;
            let pool = init_pool(&decomp, n_semantic)?;
            adapted.insert(layer, AdaptedLayer { decomp, pool });
        }
        let d = backbone.cfg.embed_dim;
        let mut r1 = crate::numcore::rng::substream(seed, 10);
        let router = GatingNet::new(d, router_hidden, n_semantic, &mut r1);
        let head = ClassificationHead::new(d, 2, &mut r1);
        Ok(Self {
            router_encoder: backbone.clone(),
            backbone,
            layers: adapted,
            router,
            head,
            stage1_heads: BTreeMap::new(),
            trained: TrainedFlags {
                universal: false,
                semantic: vec![false; n_semantic],
            },
            router_trained: false,
        })
    }

    pub fn n_semantic(&self) -> usize {
        self.router.n_semantic()
    }

    pub fn r(&self) -> usize {
        self.layers.values().next().map_or(0, |l| l.decomp.r)
    }

    pub fn tokens(&self) -> usize {
        self.backbone.cfg.tokens()
    }

    pub fn expert_kinds(&self) -> Vec<ExpertKind> {
        std::iter::once(ExpertKind::Universal)
            .chain((0..self.n_semantic()).map(ExpertKind::Semantic))
            .collect()
    }

    /// Checksums of every parameter group, keyed by group name.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("backbone".into(), self.backbone.checksum());
        out.insert("router_encoder".into(), self.router_encoder.checksum());
        for (id, l) in &self.layers {
            out.insert(format!("{id}.principal"), checksum([&l.decomp.principal]));
            for e in l.pool.iter() {
                let [u, s, v] = e.matrices();
                out.insert(format!("{id}.{}", e.kind), checksum([&u, &s, &v]));
            }
        }
        let [w1, b1, w2, b2] = self.router.params();
        out.insert("router".into(), checksum([w1, b1, w2, b2]));
        out.insert("head".into(), checksum([&self.head.weight, &self.head.bias]));
        for (kind, h) in &self.stage1_heads {
            out.insert(format!("stage1_head.{kind}"), checksum([&h.weight, &h.bias]));
        }
        out
    }

    /// Checksum of one expert across all adapted layers.
    pub fn expert_checksum(&self, kind: ExpertKind) -> Result<String> {
        let mut mats = Vec::new();
        for l in self.layers.values() {
            mats.extend(l.pool.get(kind)?.matrices());
        }
        Ok(checksum(mats.iter()))
    }

    /// Pooled frozen features used by the router.
    pub fn frozen_features(&self, images: &[&[f64]]) -> Result<Matrix> {
        self.router_encoder.encode(images)
    }

    /// Routes a batch of images through the frozen encoder and router.
    pub fn route_images(&self, images: &[&[f64]], k_s: usize) -> Result<Vec<RouterOutput>> {
        let f = self.frozen_features(images)?;
        Ok(route_batch(&f, &self.router, k_s)?.0)
    }

    /// Stage-1 weights for one expert in every adapted layer.
    pub fn stage1_weights(&self, kind: ExpertKind, include_universal: bool) -> Result<BTreeMap<LayerId, Matrix>> {
        self.layers
            .iter()
            .map(|(&id, l)| {
                let active = l.pool.get(kind)?;
                let extra = match kind {
                    ExpertKind::Semantic(_) if include_universal => Some(&l.pool.universal),
                    _ => None,
                };
                Ok((id, compose_stage1_with(&l.decomp, active, extra)))
            })
            .collect()
    }

    /// Features with one expert active (stage-1 composition).
    pub fn stage1_features(&self, images: &[&[f64]], kind: ExpertKind, include_universal: bool) -> Result<Matrix> {
        let w = self.stage1_weights(kind, include_universal)?;
        self.backbone.encode_composed(images, &w)
    }

    /// Features of one image through per-sample composed weights.
    pub fn composed_features(&self, image: &[f64], gates: &RouterOutput, opts: CompositionOptions) -> Result<Matrix> {
        let w = self
            .layers
            .iter()
            .map(|(&id, l)| Ok((id, compose_weight_with(&l.decomp, &l.pool, gates, opts)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        self.backbone.encode_composed(&[image], &w)
    }

    /// Mixing matrix (batch×N_S) from router outputs.
    pub fn mixing_from_routes(routes: &[RouterOutput], renormalize: bool) -> Matrix {
        let n = routes.first().map_or(0, |r| r.gates.len());
        let mut m = Matrix::zeros(routes.len(), n);
        for (i, r) in routes.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&r.dense_mixing(renormalize));
        }
        m
    }

    /// Records the gated forward pass on `tape` and returns pooled features.
    /// `mixing` must be (batch×N_S) when present; it can be a tape variable
    /// so gradients reach the router.
    pub fn gated_forward(
        &self,
        tape: &mut Tape,
        images: &[&[f64]],
        mixing: Option<Var>,
        include_universal: bool,
    ) -> Result<Var> {
        let patches = self.backbone.patchify(images)?;
        let vars = self.backbone.vars(tape, false);
        let t = self.tokens();
        let mut base = BTreeMap::new();
        let mut experts = BTreeMap::new();
        for (&id, l) in &self.layers {
            let mut b = l.decomp.principal.clone();
            if include_universal {
                b.add_assign(&l.pool.universal.weight());
            }
            base.insert(id, tape.constant(b));
            if mixing.is_some() {
                let ws: Vec<Var> = l.pool.semantic.iter().map(|e| tape.constant(e.weight())).collect();
                experts.insert(id, ws);
            }
        }
        let token_gates = match mixing {
            Some(m) => (0..self.n_semantic())
                .map(|i| {
                    let c = tape.column(m, i);
                    tape.repeat_rows(c, t)
                })
                .collect(),
            None => Vec::new(),
        };
        let weights = GatedWeights {
            base,
            experts,
            token_gates,
        };
        let p = tape.constant(patches);
        Ok(self.backbone.forward(tape, p, images.len(), &vars, &weights))
    }

    /// Integrated features for a batch with fixed (non-differentiable) mixing.
    pub fn features(&self, images: &[&[f64]], mixing: &Mixing, include_universal: bool) -> Result<Matrix> {
        if images.is_empty() {
            return Ok(Matrix::zeros(0, self.backbone.cfg.embed_dim));
        }
        let mut tape = Tape::new();
        let m = match mixing {
            Mixing::Dense(m) => {
                if m.shape() != (images.len(), self.n_semantic()) {
                    return Err(Error::InvalidInput("mixing matrix shape mismatch".into()));
                }
                Some(tape.constant(m.clone()))
            }
            Mixing::None => None,
        };
        let f = self.gated_forward(&mut tape, images, m, include_universal)?;
        Ok(tape.value(f).clone())
    }

    /// Fake-class probability from head logits.
    pub fn fake_probability(logits: &Matrix) -> Vec<f64> {
        let p = softmax_rows(logits);
        (0..p.rows()).map(|i| p[(i, 1)]).collect()
    }
}

/// Per-row gated projection: `h·(W_M + W_U)ᵀ + Σ_i diag(g_i) · h·W_iᵀ`,
/// which equals `h·W_Fᵀ` with a per-row composed weight.
struct GatedWeights {
    base: BTreeMap<LayerId, Var>,
    experts: BTreeMap<LayerId, Vec<Var>>,
    token_gates: Vec<Var>,
}

impl AttnWeights for GatedWeights {
    fn project(&self, tape: &mut Tape, layer: LayerId, h: Var, backbone: &BackboneVars) -> Var {
        let Some(&base) = self.base.get(&layer) else {
            return tape.matmul_nt(h, backbone.proj(layer));
        };
        let mut y = tape.matmul_nt(h, base);
        if let Some(ws) = self.experts.get(&layer) {
            for (&w, &g) in ws.iter().zip(&self.token_gates) {
                let yi = tape.matmul_nt(h, w);
                let yi = tape.scale_rows(yi, g);
                y = tape.add(y, yi);
            }
        }
        y
    }
}
