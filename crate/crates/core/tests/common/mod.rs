//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use omoe::backbone::{Backbone, BackboneConfig};
use omoe::decomp::{init_pool, ExpertPool, WeightDecomposition};
use omoe::model::OmniModel;
use omoe::numcore::{relative_difference, rng, Matrix};
use omoe::router::RouterOutput;
use omoe::synthdata::{GeneratorConfig, SyntheticGenerator};
use rand::Rng;

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Relative agreement required between finite differences and reverse mode.
pub const FD_TOL: f64 = 1e-4;

/// Slow one-sided (Hestenes) Jacobi SVD: singular values, descending, and the
/// factors, written without any shared code with the library solver.
pub struct JacobiSvd {
    pub u: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub v: Vec<Vec<f64>>,
}

pub fn jacobi_svd(w: &Matrix) -> JacobiSvd {
    let (o, i) = w.shape();
    if o < i {
        let t = jacobi_svd(&w.transpose());
        return JacobiSvd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
    }
    // Columns of `a` are rotated until mutually orthogonal; `v` accumulates
    // the rotations.
    let mut a: Vec<Vec<f64>> = (0..i).map(|j| (0..o).map(|r| w[(r, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..i).map(|j| (0..i).map(|r| f64::from(u8::from(r == j))).collect()).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..i {
            for q in p + 1..i {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut a, &mut v] {
                    let (lo, hi) = cols.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, yq) = (*x, *y);
                        *x = c * xp - s * yq;
                        *y = s * xp + c * yq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut triplets: Vec<(f64, Vec<f64>, Vec<f64>)> = a
        .into_iter()
        .zip(v)
        .map(|(col, vc)| {
            let s = dot(&col, &col).sqrt();
            let u = if s > 0.0 { col.iter().map(|x| x / s).collect() } else { col };
            (s, u, vc)
        })
        .collect();
    triplets.sort_by(|x, y| y.0.total_cmp(&x.0));
    JacobiSvd {
        sigma: triplets.iter().map(|t| t.0).collect(),
        u: triplets.iter().map(|t| t.1.clone()).collect(),
        v: triplets.into_iter().map(|t| t.2).collect(),
    }
}

impl JacobiSvd {
    pub fn reconstruct(&self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| {
            self.sigma
                .iter()
                .zip(&self.u)
                .zip(&self.v)
                .map(|((s, u), v)| s * u[r] * v[c])
                .sum()
        })
    }
}

/// Dense composition oracle: for every entry, start from `W_M`, add the
/// universal contribution `Σ_k (u[a,k]·σ_k)·v[b,k]`, then `g_i` times each
/// selected expert's contribution, in `selected` order.
pub fn compose_oracle(d: &WeightDecomposition, pool: &ExpertPool, gates: &RouterOutput, universal: bool) -> Matrix {
    let (o, i) = d.principal.shape();
    let entry = |e: &omoe::decomp::Expert, a: usize, b: usize| {
        let mut acc = 0.0;
        for k in 0..e.sigma.len() {
            acc += (e.u[(a, k)] * e.sigma[k]) * e.v[(b, k)];
        }
        acc
    };
    Matrix::from_fn(o, i, |a, b| {
        let mut x = d.principal[(a, b)];
        if universal {
            x += entry(&pool.universal, a, b);
        }
        for &s in &gates.selected {
            x += gates.gates[s] * entry(&pool.semantic[s], a, b);
        }
        x
    })
}

/// Central finite differences of `f` against reverse-mode `grads`.
///
/// `entry` is the worst per-entry relative difference; `tensor` applies the
/// same metric per parameter tensor in Frobenius norm, which stays
/// meaningful when single entries sit at the finite-difference noise floor
/// (about `ε·|f|/h`).
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub tensor: f64,
    pub entry: f64,
    pub worst_param: usize,
    pub worst_entry: usize,
    pub finite_difference: f64,
    pub reverse_mode: f64,
}

pub fn fd_check(params: &[Matrix], grads: &[Matrix], mut f: impl FnMut(&[Matrix]) -> f64) -> FdReport {
    assert_eq!(params.len(), grads.len());
    let mut p = params.to_vec();
    let mut rep = FdReport::default();
    for t in 0..p.len() {
        assert_eq!(p[t].shape(), grads[t].shape());
        let (mut diff, mut nf, mut ng) = (0.0, 0.0, 0.0);
        for k in 0..p[t].len() {
            let x0 = p[t].data()[k];
            p[t].data_mut()[k] = x0 + FD_STEP;
            let up = f(&p);
            p[t].data_mut()[k] = x0 - FD_STEP;
            let down = f(&p);
            p[t].data_mut()[k] = x0;
            let fd = (up - down) / (2.0 * FD_STEP);
            let g = grads[t].data()[k];
            diff += (fd - g) * (fd - g);
            nf += fd * fd;
            ng += g * g;
            let e = relative_difference(fd, g);
            if e > rep.entry {
                rep.entry = e;
                rep.worst_param = t;
                rep.worst_entry = k;
                rep.finite_difference = fd;
                rep.reverse_mode = g;
            }
        }
        let e = diff.sqrt() / f64::sqrt(nf).max(f64::sqrt(ng)).max(1e-10);
        rep.tensor = rep.tensor.max(e);
    }
    rep
}

/// Worst per-entry relative difference.
pub fn fd_max_error(params: &[Matrix], grads: &[Matrix], f: impl FnMut(&[Matrix]) -> f64) -> f64 {
    fd_check(params, grads, f).entry
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::seeded(seed);
    Matrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
}

pub fn orthonormality_error(m: &Matrix) -> f64 {
    m.matmul_tn(m).sub(&Matrix::identity(m.cols())).frobenius()
}

/// Small encoder for fast structural tests.
pub fn tiny_backbone_config() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        n_blocks: 1,
        n_heads: 2,
        ffn_dim: 16,
    }
}

pub fn tiny_generator(n_domains: usize) -> SyntheticGenerator {
    SyntheticGenerator::new(GeneratorConfig {
        n_domains,
        image_size: 8,
        ..GeneratorConfig::default()
    })
    .expect("valid generator")
}

/// Randomly initialized (not pretrained) model over every projection.
pub fn random_model(cfg: BackboneConfig, r: usize, n_semantic: usize, seed: u64) -> OmniModel {
    let backbone = Backbone::new(cfg, seed).expect("valid backbone");
    let layers = cfg.all_layers();
    OmniModel::from_pretrained(backbone, &layers, r, n_semantic, 16, seed).expect("valid model")
}

pub fn images(samples: &[omoe::synthdata::SyntheticSample]) -> Vec<&[f64]> {
    samples.iter().map(|s| s.image.as_slice()).collect()
}

/// FD-vs-reverse-mode agreement of the stage-1 objective of `kind` on one
/// batch, over the active expert's `u, sigma, v` in every layer and the head.
pub fn stage1_fd_error(
    model: &OmniModel,
    kind: omoe::decomp::ExpertKind,
    batch: &[omoe::synthdata::SyntheticSample],
    cfg: &omoe::trainer::TrainConfig,
    head_seed: u64,
) -> FdReport {
    use omoe::backbone::ClassificationHead;
    use omoe::numcore::Tape;
    use omoe::trainer::{stage1_forward, stage1_priors};

    let head = ClassificationHead::new(model.backbone.cfg.embed_dim, 2, &mut rng::seeded(head_seed));
    let imgs = images(batch);
    let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
    let priors = stage1_priors(model, kind, cfg).unwrap();

    let mut tape = Tape::new();
    let g = stage1_forward(model, &mut tape, kind, &head, &imgs, &labels, &priors, cfg).unwrap();
    let grads = tape.backward(g.total).unwrap();
    let params: Vec<Matrix> = g.params.iter().map(|&v| tape.value(v).clone()).collect();
    let gs: Vec<Matrix> = g.params.iter().map(|&v| grads.wrt(v).unwrap()).collect();

    let mut m = model.clone();
    fd_check(&params, &gs, |p| {
        let ids: Vec<_> = m.layers.keys().copied().collect();
        for (n, id) in ids.iter().enumerate() {
            let e = m.layers.get_mut(id).unwrap().pool.get_mut(kind).unwrap();
            e.u = p[3 * n].clone();
            e.sigma = p[3 * n + 1].data().to_vec();
            e.v = p[3 * n + 2].clone();
        }
        let h = ClassificationHead {
            weight: p[p.len() - 2].clone(),
            bias: p[p.len() - 1].clone(),
        };
        let mut tape = Tape::new();
        let g = stage1_forward(&m, &mut tape, kind, &h, &imgs, &labels, &priors, cfg).unwrap();
        tape.scalar(g.total)
    })
}

/// Smallest gap between the k-th and (k+1)-th gate of any row; FD probes
/// are only meaningful when no perturbation can change the selection.
pub fn selection_margin(model: &OmniModel, frozen: &Matrix, k: usize) -> f64 {
    let z = model.router.logits(frozen).unwrap();
    let g = omoe::numcore::tape::softmax_rows(&z);
    (0..g.rows())
        .map(|i| {
            let mut row = g.row(i).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            let top = if k < row.len() { row[k - 1] - row[k] } else { f64::INFINITY };
            // The argmax feeding F must also be stable.
            top.min(row[0] - row.get(1).copied().unwrap_or(f64::NEG_INFINITY))
        })
        .fold(f64::INFINITY, f64::min)
}

/// FD-vs-reverse-mode agreement of the stage-2 objective on one batch,
/// over the router and head parameters.
pub fn stage2_fd_error(
    model: &OmniModel,
    batch: &[omoe::synthdata::SyntheticSample],
    cfg: &omoe::trainer::TrainConfig,
) -> FdReport {
    use omoe::numcore::Tape;
    use omoe::trainer::stage2_forward;

    let imgs = images(batch);
    let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
    let ye: Vec<usize> = batch.iter().map(|s| s.domain).collect();
    let frozen = model.frozen_features(&imgs).unwrap();
    assert!(selection_margin(model, &frozen, cfg.k_s) > 1e-6, "batch sits on a routing tie");

    let mut tape = Tape::new();
    let g = stage2_forward(model, &mut tape, &imgs, &frozen, &labels, &ye, cfg).unwrap();
    let grads = tape.backward(g.total).unwrap();
    let params: Vec<Matrix> = g.params.iter().map(|&v| tape.value(v).clone()).collect();
    let gs: Vec<Matrix> = g.params.iter().map(|&v| grads.wrt(v).unwrap()).collect();

    let mut m = model.clone();
    fd_check(&params, &gs, |p| {
        m.router.w1 = p[0].clone();
        m.router.b1 = p[1].clone();
        m.router.w2 = p[2].clone();
        m.router.b2 = p[3].clone();
        m.head.weight = p[4].clone();
        m.head.bias = p[5].clone();
        let mut tape = Tape::new();
        let g = stage2_forward(&m, &mut tape, &imgs, &frozen, &labels, &ye, cfg).unwrap();
        tape.scalar(g.total)
    })
}

/// Seeded batch of mixed real, semantic-fake and artifact-fake samples.
pub fn mixed_batch(gen: &SyntheticGenerator, n_per_domain: usize, seed: u64) -> Vec<omoe::synthdata::SyntheticSample> {
    gen.mixed_stream(n_per_domain, &mut rng::seeded(seed)).unwrap()
}

/// Encoder pretrained on the toy profile's pretraining stream, shared by
/// every test in one binary.
pub fn pretrained_backbone() -> Backbone {
    use omoe::trainer::pipeline::{pretrain, Datasets, RunConfig};
    static CELL: std::sync::OnceLock<Backbone> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig::toy();
        let data = Datasets::new(&cfg).expect("valid datasets");
        pretrain(&cfg, &data).expect("pretraining converges").backbone
    })
    .clone()
}

/// Fresh model over every projection of the pretrained toy encoder.
pub fn pretrained_model(r: usize, n_semantic: usize, seed: u64) -> OmniModel {
    let b = pretrained_backbone();
    let layers = b.cfg.all_layers();
    OmniModel::from_pretrained(b, &layers, r, n_semantic, 16, seed).expect("valid model")
}

/// Pool whose experts are independently perturbed away from the residual
/// copy, so every expert contributes a distinct matrix.
pub fn perturbed_pool(d: &WeightDecomposition, n: usize, seed: u64) -> ExpertPool {
    let mut pool = init_pool(d, n).unwrap();
    let mut r = rng::seeded(seed);
    let (o, i) = d.shape();
    for e in std::iter::once(&mut pool.universal).chain(pool.semantic.iter_mut()) {
        e.u = Matrix::from_fn(o, d.r, |_, _| r.gen_range(-1.0..1.0));
        e.v = Matrix::from_fn(i, d.r, |_, _| r.gen_range(-1.0..1.0));
        e.sigma = (0..d.r).map(|_| r.gen_range(0.0..2.0)).collect();
    }
    pool
}

pub fn random_gates(n: usize, k: usize, seed: u64) -> RouterOutput {
    let mut r = rng::seeded(seed);
    let logits: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
    RouterOutput::from_logits(&logits, k).unwrap()
}
