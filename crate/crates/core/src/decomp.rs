//! Principal/residual weight partition, the expert pool, and composed weights.
//!
//! A pretrained projection `W` is split by its SVD into a frozen principal
//! part (top `min(O, I) − r` triplets) and a rank-`r` residual tail. Every
//! expert starts as an independent copy of that tail.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{svd, Matrix};
use crate::router::RouterOutput;

/// Attention projection slot inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Proj {
    Query,
    Key,
    Value,
    Output,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Query, Proj::Key, Proj::Value, Proj::Output];

    pub fn letter(self) -> char {
        match self {
            Proj::Query => 'q',
            Proj::Key => 'k',
            Proj::Value => 'v',
            Proj::Output => 'o',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Proj::ALL.into_iter().find(|p| p.letter() == c)
    }
}

/// Identifies one adapted projection, `layer{block}.{q|k|v|o}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub proj: Proj,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.block, self.proj.letter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightDecomposition {
    pub layer: LayerId,
    /// `W_M`, frozen.
    pub principal: Matrix,
    pub principal_u: Matrix,
    pub principal_sigma: Vec<f64>,
    pub principal_v: Matrix,
    pub resid_u: Matrix,
    pub resid_sigma: Vec<f64>,
    pub resid_v: Matrix,
    pub r: usize,
}

impl WeightDecomposition {
    pub fn shape(&self) -> (usize, usize) {
        self.principal.shape()
    }

    /// `W_R = U_R · diag(Σ_R) · V_Rᵀ`.
    pub fn residual(&self) -> Matrix {
        Matrix::from_factors(&self.resid_u, &self.resid_sigma, &self.resid_v)
    }

    pub fn reconstruct(&self) -> Matrix {
        self.principal.add(&self.residual())
    }
}

/// Splits `w` into principal and residual parts with residual rank `r`.
pub fn decompose(w: &Matrix, r: usize, layer: LayerId) -> Result<WeightDecomposition> {
    let m = w.rows().min(w.cols());
    if r == 0 || r >= m {
        return Err(Error::InvalidRank { r, max: m });
    }
    let s = svd(w)?;
    let keep = m - r;
    let principal_u = s.u.columns(0, keep);
    let principal_v = s.v.columns(0, keep);
    let principal_sigma = s.sigma[..keep].to_vec();
    let principal = Matrix::from_factors(&principal_u, &principal_sigma, &principal_v);
    Ok(WeightDecomposition {
        layer,
        principal,
        principal_u,
        principal_sigma,
        principal_v,
        resid_u: s.u.columns(keep, m),
        resid_sigma: s.sigma[keep..].to_vec(),
        resid_v: s.v.columns(keep, m),
        r,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExpertKind {
    Semantic(usize),
    Universal,
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertKind::Semantic(i) => write!(f, "expert{i}"),
            ExpertKind::Universal => write!(f, "universal"),
        }
    }
}

/// One low-rank residual factor triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
    pub kind: ExpertKind,
    pub trainable: bool,
}

impl Expert {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vᵀ`; entry (a, b) is accumulated as
    /// `Σ_k (u[a,k]·σ_k)·v[b,k]` in ascending `k`, starting from 0.
    pub fn weight(&self) -> Matrix {
        Matrix::from_factors(&self.u, &self.sigma, &self.v)
    }

    pub fn sigma_row(&self) -> Matrix {
        Matrix::row_vector(&self.sigma)
    }

    pub fn matrices(&self) -> [Matrix; 3] {
        [self.u.clone(), self.sigma_row(), self.v.clone()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPool {
    pub semantic: Vec<Expert>,
    pub universal: Expert,
}

impl ExpertPool {
    pub fn n_semantic(&self) -> usize {
        self.semantic.len()
    }

    pub fn get(&self, kind: ExpertKind) -> Result<&Expert> {
        match kind {
            ExpertKind::Universal => Ok(&self.universal),
            ExpertKind::Semantic(i) => self.semantic.get(i).ok_or(Error::InvalidExpertIndex {
                index: i,
                n_semantic: self.semantic.len(),
            }),
        }
    }

    pub fn get_mut(&mut self, kind: ExpertKind) -> Result<&mut Expert> {
        let n = self.semantic.len();
        match kind {
            ExpertKind::Universal => Ok(&mut self.universal),
            ExpertKind::Semantic(i) => self
                .semantic
                .get_mut(i)
                .ok_or(Error::InvalidExpertIndex { index: i, n_semantic: n }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Expert> {
        std::iter::once(&self.universal).chain(self.semantic.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Expert> {
        std::iter::once(&mut self.universal).chain(self.semantic.iter_mut())
    }
}

/// N_S semantic experts and one universal expert, each a copy of the
/// residual triplets, all non-trainable.
pub fn init_pool(d: &WeightDecomposition, n_semantic: usize) -> Result<ExpertPool> {
    if n_semantic == 0 {
        return Err(Error::InvalidInput("expert pool needs at least one semantic expert".into()));
    }
    let copy = |kind| Expert {
        u: d.resid_u.clone(),
        sigma: d.resid_sigma.clone(),
        v: d.resid_v.clone(),
        kind,
        trainable: false,
    };
    Ok(ExpertPool {
        semantic: (0..n_semantic).map(|i| copy(ExpertKind::Semantic(i))).collect(),
        universal: copy(ExpertKind::Universal),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompositionOptions {
    /// Divide selected gates by their sum before mixing.
    pub renormalize: bool,
    pub include_universal: bool,
}

impl Default for CompositionOptions {
    fn default() -> Self {
        Self {
            renormalize: false,
            include_universal: true,
        }
    }
}

/// `W_F = W_M + W_U + Σ_{i∈S} g_i · W_i` with full-softmax gates.
pub fn compose_weight(
    d: &WeightDecomposition,
    pool: &ExpertPool,
    gates: &RouterOutput,
) -> Result<Matrix> {
    compose_weight_with(d, pool, gates, CompositionOptions::default())
}

/// Composition with ablation switches.
///
/// Summation order: start from `W_M`, add `W_U` entrywise, then add
/// `g_i · W_i` entrywise for each `i` in `gates.selected` order.
pub fn compose_weight_with(
    d: &WeightDecomposition,
    pool: &ExpertPool,
    gates: &RouterOutput,
    opts: CompositionOptions,
) -> Result<Matrix> {
    let n = pool.n_semantic();
    if gates.gates.len() != n {
        return Err(Error::InvalidInput(format!(
            "router output has {} gates for {} experts",
            gates.gates.len(),
            n
        )));
    }
    if let Some(&bad) = gates.selected.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidExpertIndex {
            index: bad,
            n_semantic: n,
        });
    }
    let mut out = d.principal.clone();
    if opts.include_universal {
        out.add_assign(&pool.universal.weight());
    }
    let weights = gates.mixing_weights(opts.renormalize);
    for (&i, &g) in gates.selected.iter().zip(&weights) {
        let w = pool.semantic[i].weight();
        for (o, x) in out.data_mut().iter_mut().zip(w.data()) {
            *o += g * x;
        }
    }
    Ok(out)
}

/// Stage-1 weight `W_M + W_active`.
pub fn compose_stage1(d: &WeightDecomposition, active: &Expert) -> Matrix {
    d.principal.add(&active.weight())
}

/// Stage-1 weight with an extra frozen expert (the universal one) added
/// after the active contribution.
pub fn compose_stage1_with(d: &WeightDecomposition, active: &Expert, extra: Option<&Expert>) -> Matrix {
    let mut out = compose_stage1(d, active);
    if let Some(e) = extra {
        out.add_assign(&e.weight());
    }
    out
}
