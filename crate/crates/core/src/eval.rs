//! Detection metrics, routing inspection and perturbation probes.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::decomp::ExpertKind;
use crate::error::{Error, Result};
use crate::model::{Mixing, OmniModel};
use crate::numcore::{par, rng, Matrix};
use crate::router::{argmax, route_batch, RouterOutput};
use crate::synthdata::{Label, SyntheticSample};
use crate::trainer::EVAL_CHUNK;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub k_s: usize,
    pub renormalize: bool,
    pub include_universal: bool,
}

impl EvalOptions {
    pub fn new(k_s: usize) -> Self {
        Self {
            k_s,
            renormalize: false,
            include_universal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainMetrics {
    pub domain: usize,
    pub n_real: usize,
    pub n_fake: usize,
    /// `None` when the domain has no samples of that class.
    pub real_accuracy: Option<f64>,
    pub fake_accuracy: Option<f64>,
    pub accuracy: f64,
    pub average_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub domains: Vec<DomainMetrics>,
    /// Unweighted mean of per-domain accuracy over domains with samples.
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
    /// Fraction of samples whose router argmax equals the domain; `None`
    /// for predictions made without routing.
    pub routing_accuracy: Option<f64>,
    /// `confusion[true_domain][routed_expert]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Model outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub fake_prob: Vec<f64>,
    pub predicted: Vec<Label>,
    pub routes: Option<Vec<RouterOutput>>,
}

/// How a prediction pass composes the adapted weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composition {
    /// Routed integrated model with the stage-2 head.
    Routed(EvalOptions),
    /// One expert alone with its stage-1 head.
    Isolated(ExpertKind),
    /// Integrated model with every semantic gate zeroed: `W_M + W_U` and
    /// the stage-2 head.
    UniversalOnly,
}

fn label_of(logits: &[f64]) -> Label {
    if argmax(logits) == 1 {
        Label::Fake
    } else {
        Label::Real
    }
}

fn chunk_predict(model: &OmniModel, chunk: &[&[f64]], comp: Composition) -> Result<(Matrix, Option<Vec<RouterOutput>>)> {
    match comp {
        Composition::Routed(opts) => {
            let f = model.frozen_features(chunk)?;
            let (routes, _) = route_batch(&f, &model.router, opts.k_s)?;
            let mix = OmniModel::mixing_from_routes(&routes, opts.renormalize);
            let feats = model.features(chunk, &Mixing::Dense(mix), opts.include_universal)?;
            Ok((model.head.classify(&feats)?, Some(routes)))
        }
        Composition::Isolated(kind) => {
            let head = model
                .stage1_heads
                .get(&kind)
                .ok_or_else(|| Error::InvalidInput(format!("{kind} has no stage-1 head (not trained)")))?;
            let feats = model.stage1_features(chunk, kind, false)?;
            Ok((head.classify(&feats)?, None))
        }
        Composition::UniversalOnly => {
            let feats = model.features(chunk, &Mixing::None, true)?;
            Ok((model.head.classify(&feats)?, None))
        }
    }
}

/// Runs the model over `images` in fixed chunks.
pub fn predict(model: &OmniModel, images: &[&[f64]], comp: Composition) -> Result<Predictions> {
    let chunks: Vec<&[&[f64]]> = images.chunks(EVAL_CHUNK).collect();
    let parts = par::map_range(chunks.len(), |c| chunk_predict(model, chunks[c], comp));
    let mut fake_prob = Vec::with_capacity(images.len());
    let mut predicted = Vec::with_capacity(images.len());
    let mut routes: Option<Vec<RouterOutput>> = None;
    for part in parts {
        let (logits, r) = part?;
        fake_prob.extend(OmniModel::fake_probability(&logits));
        predicted.extend((0..logits.rows()).map(|i| label_of(logits.row(i))));
        if let Some(r) = r {
            routes.get_or_insert_with(Vec::new).extend(r);
        }
    }
    Ok(Predictions {
        fake_prob,
        predicted,
        routes,
    })
}

/// Average precision of ranking `scores` against `positive`.
///
/// Precision is taken at each distinct score threshold (descending) and
/// weighted by the recall gained there, so tied scores form a single
/// operating point. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - last_recall) * tp as f64 / (tp + fp) as f64;
        last_recall = recall;
    }
    Some(ap)
}

/// Assembles a report from predictions.
pub fn report(data: &[SyntheticSample], pred: &Predictions, n_domains: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("evaluation dataset is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| s.domain >= n_domains) {
        return Err(Error::InvalidInput(format!("sample domain {} out of range", s.domain)));
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let mut domains = Vec::new();
    let mut correct_total = 0;
    for d in 0..n_domains {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].domain == d).collect();
        let n_real = idx.iter().filter(|&&i| data[i].label == Label::Real).count();
        let n_fake = idx.len() - n_real;
        let ok = |i: &&usize| pred.predicted[**i] == data[**i].label;
        let real_ok = idx.iter().filter(|i| data[**i].label == Label::Real).filter(ok).count();
        let fake_ok = idx.iter().filter(|i| data[**i].label == Label::Fake).filter(ok).count();
        correct_total += real_ok + fake_ok;
        if idx.is_empty() {
            continue;
        }
        let scores: Vec<f64> = idx.iter().map(|&i| pred.fake_prob[i]).collect();
        let pos: Vec<bool> = idx.iter().map(|&i| data[i].label == Label::Fake).collect();
        domains.push(DomainMetrics {
            domain: d,
            n_real,
            n_fake,
            real_accuracy: rate(real_ok, n_real),
            fake_accuracy: rate(fake_ok, n_fake),
            accuracy: (real_ok + fake_ok) as f64 / idx.len() as f64,
            average_precision: average_precision(&scores, &pos),
        });
    }
    let mut confusion = vec![vec![0usize; n_domains]; n_domains];
    let routing_accuracy = pred.routes.as_ref().map(|routes| {
        let mut hit = 0;
        for (s, r) in data.iter().zip(routes) {
            let a = r.argmax();
            confusion[s.domain][a] += 1;
            hit += usize::from(a == s.domain);
        }
        hit as f64 / data.len() as f64
    });
    Ok(EvalReport {
        n: data.len(),
        mean_accuracy: domains.iter().map(|d| d.accuracy).sum::<f64>() / domains.len() as f64,
        overall_accuracy: correct_total as f64 / data.len() as f64,
        routing_accuracy,
        confusion,
        domains,
    })
}

fn images(data: &[SyntheticSample]) -> Vec<&[f64]> {
    data.iter().map(|s| s.image.as_slice()).collect()
}

/// Report of the routed integrated model.
pub fn evaluate(model: &OmniModel, data: &[SyntheticSample], opts: EvalOptions) -> Result<EvalReport> {
    evaluate_with(model, data, Composition::Routed(opts))
}

pub fn evaluate_with(model: &OmniModel, data: &[SyntheticSample], comp: Composition) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("evaluation dataset is empty".into()));
    }
    let pred = predict(model, &images(data), comp)?;
    report(data, &pred, model.n_semantic())
}

/// Plain accuracy of `comp` on `data`.
pub fn accuracy(model: &OmniModel, data: &[SyntheticSample], comp: Composition) -> Result<f64> {
    Ok(evaluate_with(model, data, comp)?.overall_accuracy)
}

/// Per-sample routing table:
/// `index,domain,y_e,gate0..gateN-1,selected,argmax,correct`.
pub fn inspect_routing(model: &OmniModel, data: &[SyntheticSample], k_s: usize) -> Result<String> {
    let n = model.n_semantic();
    let mut out = String::from("index,domain,y_e");
    for i in 0..n {
        let _ = write!(out, ",gate{i}");
    }
    out.push_str(",selected,argmax,correct\n");
    for (c, chunk) in data.chunks(EVAL_CHUNK).enumerate() {
        let routes = model.route_images(&images(chunk), k_s)?;
        for (j, (s, r)) in chunk.iter().zip(&routes).enumerate() {
            let _ = write!(out, "{},{},{}", c * EVAL_CHUNK + j, s.domain, s.domain);
            for g in &r.gates {
                let _ = write!(out, ",{g:e}");
            }
            let sel: Vec<String> = r.selected.iter().map(|i| i.to_string()).collect();
            let a = r.argmax();
            let _ = writeln!(out, ",{},{a},{}", sel.join(";"), a == s.domain);
        }
    }
    Ok(out)
}

/// Report as CSV rows: one per domain plus an `all` row.
pub fn report_csv(r: &EvalReport) -> String {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    let mut out = String::from("domain,n_real,n_fake,real_acc,fake_acc,accuracy,ap\n");
    for d in &r.domains {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{}",
            d.domain,
            d.n_real,
            d.n_fake,
            opt(d.real_accuracy),
            opt(d.fake_accuracy),
            d.accuracy,
            opt(d.average_precision)
        );
    }
    let nr: usize = r.domains.iter().map(|d| d.n_real).sum();
    let nf: usize = r.domains.iter().map(|d| d.n_fake).sum();
    let _ = writeln!(out, "all,{nr},{nf},,,{:.6},", r.overall_accuracy);
    let _ = writeln!(out, "mean,,,,,{:.6},", r.mean_accuracy);
    if let Some(ra) = r.routing_accuracy {
        let _ = writeln!(out, "routing,,,,,{ra:.6},");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    Blur { sigma: f64 },
    Noise { std: f64, seed: u64 },
}

/// Normalized Gaussian taps over `[-⌈3σ⌉, ⌈3σ⌉]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Mirror index without repeating the edge pixel (`d c b | a b c d | c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur of a square row-major image.
pub fn gaussian_blur(img: &[f64], side: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("blur sigma must be finite and >= 0, got {sigma}")));
    }
    if img.len() != side * side {
        return Err(Error::InvalidInput("image is not side×side".into()));
    }
    if sigma == 0.0 {
        return Ok(img.to_vec());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * img[y * side + reflect(x as i64 + t as i64 - r, side)])
                .sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[reflect(y as i64 + t as i64 - r, side) * side + x])
                .sum();
        }
    }
    Ok(out)
}

/// Applies `p` to every sample. Zero strength returns the data unchanged.
pub fn perturb(data: &[SyntheticSample], p: Perturbation) -> Result<Vec<SyntheticSample>> {
    match p {
        Perturbation::Blur { sigma } => {
            if !(sigma >= 0.0) {
                return Err(Error::InvalidInput(format!("blur sigma must be >= 0, got {sigma}")));
            }
            data.iter()
                .map(|s| {
                    let side = (s.image.len() as f64).sqrt() as usize;
                    Ok(SyntheticSample {
                        image: gaussian_blur(&s.image, side, sigma)?,
                        ..s.clone()
                    })
                })
                .collect()
        }
        Perturbation::Noise { std, seed } => {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(Error::InvalidInput(format!("noise std must be finite and >= 0, got {std}")));
            }
            if std == 0.0 {
                return Ok(data.to_vec());
            }
            let mut r = rng::seeded(seed);
            Ok(data
                .iter()
                .map(|s| {
                    let image = s
                        .image
                        .iter()
                        .map(|&x| {
                            let z: f64 = StandardNormal.sample(&mut r);
                            (x + std * z).clamp(0.0, 1.0)
                        })
                        .collect();
                    SyntheticSample { image, ..s.clone() }
                })
                .collect())
        }
    }
}

pub fn perturb_eval(
    model: &OmniModel,
    data: &[SyntheticSample],
    p: Perturbation,
    opts: EvalOptions,
) -> Result<EvalReport> {
    evaluate(model, &perturb(data, p)?, opts)
}

/// Headline metrics of a toy run on held-out data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyMetrics {
    /// Router argmax vs domain on the held-out mixed set.
    pub routing_accuracy: f64,
    /// Integrated-model accuracy on the held-out mixed set.
    pub overall_accuracy: f64,
    /// `W_M + W_U` with the universal expert's own stage-1 head, real vs
    /// artifact-fake, per domain.
    pub universal_artifact: Vec<f64>,
    /// Same composition with the stage-2 head (semantic gates zeroed in the
    /// integrated model).
    pub universal_gates_zeroed: Vec<f64>,
    /// `semantic[i][j]`: expert i alone, real vs semantic-fake of domain j.
    pub semantic: Vec<Vec<f64>>,
    /// Integrated model, real vs artifact-fake over every domain.
    pub artifact_full: f64,
    /// Same with the universal expert removed from the composition.
    pub artifact_without_universal: f64,
    pub heldout: EvalReport,
}

/// Computes [`ToyMetrics`]; every probe set is balanced real/fake.
pub fn toy_metrics(
    model: &OmniModel,
    data: &crate::trainer::pipeline::Datasets,
    opts: EvalOptions,
) -> Result<ToyMetrics> {
    use crate::synthdata::FakeMode;
    let n = model.n_semantic();
    let heldout = evaluate(model, &data.heldout()?, opts)?;
    let mut universal_artifact = Vec::with_capacity(n);
    let mut universal_gates_zeroed = Vec::with_capacity(n);
    let mut artifact_all = Vec::new();
    for d in 0..n {
        let probe = data.probe(d, FakeMode::Artifact)?;
        universal_artifact.push(accuracy(model, &probe, Composition::Isolated(ExpertKind::Universal))?);
        universal_gates_zeroed.push(accuracy(model, &probe, Composition::UniversalOnly)?);
        artifact_all.extend(probe);
    }
    let semantic_probes = (0..n)
        .map(|d| data.probe(d, FakeMode::Semantic))
        .collect::<Result<Vec<_>>>()?;
    let semantic = (0..n)
        .map(|i| {
            semantic_probes
                .iter()
                .map(|p| accuracy(model, p, Composition::Isolated(ExpertKind::Semantic(i))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let artifact_full = accuracy(model, &artifact_all, Composition::Routed(opts))?;
    let without = EvalOptions {
        include_universal: false,
        ..opts
    };
    let artifact_without_universal = accuracy(model, &artifact_all, Composition::Routed(without))?;
    Ok(ToyMetrics {
        routing_accuracy: heldout.routing_accuracy.unwrap_or(0.0),
        overall_accuracy: heldout.overall_accuracy,
        universal_artifact,
        universal_gates_zeroed,
        semantic,
        artifact_full,
        artifact_without_universal,
        heldout,
    })
}
