//! Classification, orthogonality, gating and load-balancing losses.
//!
//! Every loss has a plain value form (for reporting and tests) and a tape
//! form used during training. The two forms share arithmetic order.

use serde::{Deserialize, Serialize};

use crate::decomp::{ExpertKind, ExpertPool, WeightDecomposition};
use crate::error::{Error, Result};
use crate::numcore::tape::cross_entropy_value;
use crate::numcore::{Matrix, Tape, Var};
use crate::router::{argmax, RouterOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the orthogonality term in the stage-1 objective.
    pub lambda1: f64,
    /// Weight of the gating cross-entropy in the stage-2 objective.
    pub lambda2: f64,
    /// Weight of the load-balancing term in the stage-2 objective.
    pub lambda3: f64,
}

impl LossConfig {
    /// Two-category small-data profile.
    pub const SMALL: LossConfig = LossConfig {
        lambda1: 0.01,
        lambda2: 0.1,
        lambda3: 0.1,
    };
    /// Many-domain large-data profile.
    pub const LARGE: LossConfig = LossConfig {
        lambda1: 0.001,
        lambda2: 0.1,
        lambda3: 0.001,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::SMALL
    }
}

/// Per-batch routing statistics: `f[i]` is the fraction of rows whose
/// argmax logit is `i`; `p[i]` is the mean gate value of expert `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRoutingStats {
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub batch_size: usize,
}

impl BatchRoutingStats {
    pub fn from_outputs(outs: &[RouterOutput]) -> Result<Self> {
        let Some(first) = outs.first() else {
            return Err(Error::InvalidInput("routing stats of an empty batch".into()));
        };
        let n = first.gates.len();
        let mut f = vec![0.0; n];
        let mut p = vec![0.0; n];
        for o in outs {
            f[o.argmax()] += 1.0;
            for (acc, g) in p.iter_mut().zip(&o.gates) {
                *acc += g;
            }
        }
        let b = outs.len() as f64;
        f.iter_mut().for_each(|x| *x /= b);
        p.iter_mut().for_each(|x| *x /= b);
        Ok(Self {
            f,
            p,
            batch_size: outs.len(),
        })
    }

    /// Stats from raw logits (rows) and their softmax gates.
    pub fn from_logits_and_gates(logits: &Matrix, gates: &Matrix) -> Result<Self> {
        if logits.rows() == 0 {
            return Err(Error::InvalidInput("routing stats of an empty batch".into()));
        }
        let n = logits.cols();
        let b = logits.rows() as f64;
        let mut f = vec![0.0; n];
        for i in 0..logits.rows() {
            f[argmax(logits.row(i))] += 1.0;
        }
        f.iter_mut().for_each(|x| *x /= b);
        let mut p = vec![0.0; n];
        for i in 0..gates.rows() {
            for (acc, g) in p.iter_mut().zip(gates.row(i)) {
                *acc += g;
            }
        }
        p.iter_mut().for_each(|x| *x /= b);
        Ok(Self {
            f,
            p,
            batch_size: logits.rows(),
        })
    }

    pub fn n_semantic(&self) -> usize {
        self.f.len()
    }
}

/// Mean two-class cross-entropy of the real/fake logits.
pub fn loss_cls(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    Ok(cross_entropy_value(logits, labels))
}

/// Mean cross-entropy of router logits against expert labels `y_e`.
pub fn loss_gating(router_logits: &Matrix, expert_labels: &[usize]) -> Result<f64> {
    check_labels(router_logits, expert_labels)?;
    Ok(cross_entropy_value(router_logits, expert_labels))
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() || labels.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// `N_S · Σ F_i · P_i`.
pub fn loss_balance(stats: &BatchRoutingStats) -> f64 {
    let n = stats.n_semantic() as f64;
    n * stats.f.iter().zip(&stats.p).map(|(f, p)| f * p).sum::<f64>()
}

/// A frozen (U, V) basis pair that the active expert is pushed away from.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    pub u: Matrix,
    pub v: Matrix,
}

/// Frozen bases preceding `active`: the principal block, then (for
/// semantic experts) the universal expert when `include_universal`, then
/// semantic experts `0..i`.
pub fn prior_bases(
    active: ExpertKind,
    pool: &ExpertPool,
    d: &WeightDecomposition,
    include_universal: bool,
) -> Result<Vec<Basis>> {
    let mut out = vec![Basis {
        u: d.principal_u.clone(),
        v: d.principal_v.clone(),
    }];
    if let ExpertKind::Semantic(i) = active {
        if i >= pool.n_semantic() {
            return Err(Error::InvalidExpertIndex {
                index: i,
                n_semantic: pool.n_semantic(),
            });
        }
        if include_universal {
            out.push(Basis {
                u: pool.universal.u.clone(),
                v: pool.universal.v.clone(),
            });
        }
        for e in &pool.semantic[..i] {
            out.push(Basis {
                u: e.u.clone(),
                v: e.v.clone(),
            });
        }
    }
    Ok(out)
}

/// `Σ_j ‖Uᵀ U_j‖_F² + ‖Vᵀ V_j‖_F²` over the frozen bases.
pub fn loss_orth(u: &Matrix, v: &Matrix, prior: &[Basis]) -> Result<f64> {
    let mut total = 0.0;
    for b in prior {
        if b.u.rows() != u.rows() || b.v.rows() != v.rows() {
            return Err(Error::InvalidInput(format!(
                "basis rows ({}, {}) do not match expert ({}, {})",
                b.u.rows(),
                b.v.rows(),
                u.rows(),
                v.rows()
            )));
        }
        total += u.matmul_tn(&b.u).frobenius_sq() + v.matmul_tn(&b.v).frobenius_sq();
    }
    Ok(total)
}

/// Orthogonality loss of expert `active` inside its pool.
pub fn loss_orth_in_pool(
    active: ExpertKind,
    pool: &ExpertPool,
    d: &WeightDecomposition,
    include_universal: bool,
) -> Result<f64> {
    let e = pool.get(active)?;
    loss_orth(&e.u, &e.v, &prior_bases(active, pool, d, include_universal)?)
}

pub fn stage1_objective(cls: f64, orth: f64, cfg: &LossConfig) -> f64 {
    cls + cfg.lambda1 * orth
}

pub fn stage2_objective(cls: f64, gating: f64, balance: f64, cfg: &LossConfig) -> f64 {
    cls + cfg.lambda2 * gating + cfg.lambda3 * balance
}

/// Tape form of [`loss_orth`].
pub fn orth_tape(tape: &mut Tape, u: Var, v: Var, prior: &[Basis]) -> Option<Var> {
    let mut total: Option<Var> = None;
    for b in prior {
        let bu = tape.constant(b.u.clone());
        let bv = tape.constant(b.v.clone());
        let ut = tape.transpose(u);
        let vt = tape.transpose(v);
        let pu = tape.matmul(ut, bu);
        let pv = tape.matmul(vt, bv);
        let su = tape.sum_sq(pu);
        let sv = tape.sum_sq(pv);
        let term = tape.add(su, sv);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    total
}

/// Tape form of [`loss_balance`]; gradients reach the gates through `P`
/// only, `F` is a constant of the batch.
pub fn balance_tape(tape: &mut Tape, gates: Var, f: &[f64]) -> Var {
    let p = tape.mean_rows(gates);
    let fc = tape.constant(Matrix::row_vector(f));
    let fp = tape.mul(p, fc);
    let s = tape.sum(fp);
    tape.scale(s, f.len() as f64)
}
