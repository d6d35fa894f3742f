//! Deterministic synthetic images with planted domain, semantic-flaw and
//! artifact signals.
//!
//! Every image is `0.5 + a·sin(θ_d(x, y)) + noise`, where `θ_d` is a fixed
//! low-frequency phase field per domain and `a` is a jittered amplitude.
//! Semantic fakes warp the phase with a domain-specific low-frequency field;
//! artifact fakes add a global ±checkerboard that is identical for every
//! domain. Draws from the rng are the same for every fake mode, so samples
//! generated from cloned rng states differ only by the planted cues.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// (template frequency, template phase, warp frequency) per domain.
const DOMAIN_TABLE: [((i32, i32), f64, (i32, i32)); 8] = [
    ((1, 0), 0.4, (0, 3)),
    ((0, 1), 1.1, (3, 0)),
    ((1, 1), 2.0, (1, -2)),
    ((1, -1), 2.7, (2, 1)),
    ((2, 0), 0.9, (1, 3)),
    ((0, 2), 1.7, (3, 1)),
    ((2, 1), 2.3, (1, -3)),
    ((1, 2), 0.2, (3, -1)),
];

pub const MAX_DOMAINS: usize = DOMAIN_TABLE.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FakeMode {
    None,
    Semantic,
    Artifact,
    Both,
}

impl FakeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FakeMode::None => "none",
            FakeMode::Semantic => "semantic",
            FakeMode::Artifact => "artifact",
            FakeMode::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(FakeMode::None),
            "semantic" => Some(FakeMode::Semantic),
            "artifact" => Some(FakeMode::Artifact),
            "both" => Some(FakeMode::Both),
            _ => None,
        }
    }

    pub fn label(self) -> Label {
        match self {
            FakeMode::None => Label::Real,
            _ => Label::Fake,
        }
    }

    fn semantic(self) -> bool {
        matches!(self, FakeMode::Semantic | FakeMode::Both)
    }

    fn artifact(self) -> bool {
        matches!(self, FakeMode::Artifact | FakeMode::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    /// Row-major grayscale pixels in [0, 1].
    pub image: Vec<f64>,
    pub domain: usize,
    pub label: Label,
    pub fake_mode: FakeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_domains: usize,
    pub image_size: usize,
    /// Amplitude of the domain sinusoid.
    pub base_amplitude: f64,
    /// Relative amplitude jitter: a ~ base·U(1−j, 1+j).
    pub amplitude_jitter: f64,
    /// Peak phase warp (radians) of a semantic fake.
    pub semantic_flaw_amplitude: f64,
    /// Checkerboard amplitude of an artifact fake.
    pub artifact_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_domains: 2,
            image_size: 16,
            base_amplitude: 0.2,
            amplitude_jitter: 0.2,
            semantic_flaw_amplitude: 0.6,
            artifact_amplitude: 0.05,
            noise_std: 0.04,
            seed: 7,
        }
    }
}

/// Minimum ratio of the closest template pair's half-distance to the
/// per-pixel noise level.
pub const MIN_DOMAIN_MARGIN: f64 = 3.0;

/// Generator with precomputed phase fields and the checkerboard.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    cfg: GeneratorConfig,
    phases: Vec<Vec<f64>>,
    warps: Vec<Vec<f64>>,
    checker: Vec<f64>,
}

impl SyntheticGenerator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        if cfg.n_domains == 0 || cfg.n_domains > MAX_DOMAINS {
            return Err(Error::Config(format!(
                "n_domains must be in 1..={MAX_DOMAINS}, got {}",
                cfg.n_domains
            )));
        }
        if cfg.image_size < 2 || cfg.image_size % 2 != 0 {
            return Err(Error::Config("image_size must be even and >= 2".into()));
        }
        for (name, v) in [
            ("base_amplitude", cfg.base_amplitude),
            ("semantic_flaw_amplitude", cfg.semantic_flaw_amplitude),
            ("artifact_amplitude", cfg.artifact_amplitude),
            ("noise_std", cfg.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&cfg.amplitude_jitter) {
            return Err(Error::Config("amplitude_jitter must be in [0, 1)".into()));
        }
        let n = cfg.image_size;
        let field = |k: (i32, i32), phase: f64| -> Vec<f64> {
            let mut out = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    let t = 2.0 * PI * (k.0 as f64 * x as f64 + k.1 as f64 * y as f64) / n as f64;
                    out.push(t + phase);
                }
            }
            out
        };
        let phases: Vec<Vec<f64>> = DOMAIN_TABLE[..cfg.n_domains]
            .iter()
            .map(|&(k, phi, _)| field(k, phi))
            .collect();
        let warps: Vec<Vec<f64>> = DOMAIN_TABLE[..cfg.n_domains]
            .iter()
            .map(|&(_, _, m)| field(m, 0.0).into_iter().map(f64::sin).collect())
            .collect();
        let checker = (0..n * n)
            .map(|i| if ((i / n) + (i % n)) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let gen = Self {
            cfg,
            phases,
            warps,
            checker,
        };
        gen.check_construction()?;
        Ok(gen)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn n_pixels(&self) -> usize {
        self.cfg.image_size * self.cfg.image_size
    }

    /// Noise-free real template of `domain` at unit amplitude, DC removed.
    pub fn template(&self, domain: usize) -> Vec<f64> {
        self.phases[domain].iter().map(|t| t.sin()).collect()
    }

    /// The ±1 checkerboard.
    pub fn checkerboard(&self) -> &[f64] {
        &self.checker
    }

    fn check_construction(&self) -> Result<()> {
        let cb_norm = (self.n_pixels() as f64).sqrt();
        for d in 0..self.cfg.n_domains {
            let t = self.template(d);
            let tn = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            let ip: f64 = t.iter().zip(&self.checker).map(|(a, b)| a * b).sum();
            if ip.abs() > 1e-9 * tn * cb_norm {
                return Err(Error::Config(format!(
                    "artifact pattern is not orthogonal to domain {d} template ({ip:e})"
                )));
            }
            let dc: f64 = self.checker.iter().sum();
            if dc != 0.0 {
                return Err(Error::Config("checkerboard has a DC component".into()));
            }
        }
        if let Some(m) = self.domain_margin() {
            if m < MIN_DOMAIN_MARGIN {
                return Err(Error::Config(format!(
                    "domain templates not separable at this noise level (margin {m:.2} < {MIN_DOMAIN_MARGIN})"
                )));
            }
        }
        Ok(())
    }

    /// Half the smallest distance between two domain templates at the
    /// lowest jittered amplitude, in units of noise std. `None` with one
    /// domain or zero noise.
    pub fn domain_margin(&self) -> Option<f64> {
        if self.cfg.n_domains < 2 || self.cfg.noise_std == 0.0 {
            return None;
        }
        let a = self.cfg.base_amplitude * (1.0 - self.cfg.amplitude_jitter);
        let mut best = f64::INFINITY;
        for i in 0..self.cfg.n_domains {
            for j in i + 1..self.cfg.n_domains {
                let (ti, tj) = (self.template(i), self.template(j));
                let d: f64 = ti.iter().zip(&tj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                best = best.min(a * d / 2.0);
            }
        }
        Some(best / self.cfg.noise_std)
    }

    /// Unclamped pixel values and the sample metadata.
    pub fn sample_unclamped<R: Rng + ?Sized>(
        &self,
        domain: usize,
        mode: FakeMode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if domain >= self.cfg.n_domains {
            return Err(Error::InvalidInput(format!(
                "domain {domain} out of range for {} domains",
                self.cfg.n_domains
            )));
        }
        let j = self.cfg.amplitude_jitter;
        let jitter: f64 = rng.gen_range(-1.0..=1.0);
        let amp = self.cfg.base_amplitude * (1.0 + j * jitter);
        let beta = if mode.semantic() {
            self.cfg.semantic_flaw_amplitude
        } else {
            0.0
        };
        let art = if mode.artifact() {
            self.cfg.artifact_amplitude
        } else {
            0.0
        };
        let phase = &self.phases[domain];
        let warp = &self.warps[domain];
        let mut out = Vec::with_capacity(self.n_pixels());
        for i in 0..self.n_pixels() {
            let z: f64 = StandardNormal.sample(rng);
            let mut p = 0.5 + amp * (phase[i] + beta * warp[i]).sin() + self.cfg.noise_std * z;
            if art != 0.0 {
                p += art * self.checker[i];
            }
            out.push(p);
        }
        Ok(out)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        domain: usize,
        mode: FakeMode,
        rng: &mut R,
    ) -> Result<SyntheticSample> {
        let image = self
            .sample_unclamped(domain, mode, rng)?
            .into_iter()
            .map(|p| p.clamp(0.0, 1.0))
            .collect();
        Ok(SyntheticSample {
            image,
            domain,
            label: mode.label(),
            fake_mode: mode,
        })
    }

    /// `n` (real, artifact-fake) pairs sharing domain, amplitude and noise.
    /// Domains cycle `0, 1, …` so every domain is covered evenly.
    pub fn purified_pairs<R: Rng + Clone>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<(SyntheticSample, SyntheticSample)>> {
        (0..n)
            .map(|i| {
                let d = i % self.cfg.n_domains;
                let mut twin = rng.clone();
                let real = self.sample(d, FakeMode::None, rng)?;
                let fake = self.sample(d, FakeMode::Artifact, &mut twin)?;
                Ok((real, fake))
            })
            .collect()
    }

    /// `n` samples of one domain; each is real with probability
    /// `real_frac`, otherwise a semantic fake (or semantic + artifact when
    /// `semantic_only` is false).
    pub fn domain_stream<R: Rng + ?Sized>(
        &self,
        domain: usize,
        n: usize,
        real_frac: f64,
        semantic_only: bool,
        rng: &mut R,
    ) -> Result<Vec<SyntheticSample>> {
        if !(0.0..=1.0).contains(&real_frac) {
            return Err(Error::InvalidInput("real_frac must be in [0, 1]".into()));
        }
        let fake = if semantic_only {
            FakeMode::Semantic
        } else {
            FakeMode::Both
        };
        (0..n)
            .map(|_| {
                let real = rng.gen_bool(real_frac);
                self.sample(domain, if real { FakeMode::None } else { fake }, rng)
            })
            .collect()
    }

    /// Mixed all-domain set with `n_per_domain` samples per domain in the
    /// ratio real : semantic : artifact = 2 : 1 : 1, shuffled.
    pub fn mixed_stream<R: Rng + ?Sized>(&self, n_per_domain: usize, rng: &mut R) -> Result<Vec<SyntheticSample>> {
        const CYCLE: [FakeMode; 4] = [FakeMode::None, FakeMode::Semantic, FakeMode::None, FakeMode::Artifact];
        let nd = self.cfg.n_domains;
        let mut out = (0..n_per_domain * nd)
            .map(|i| self.sample(i % nd, CYCLE[(i / nd) % 4], rng))
            .collect::<Result<Vec<_>>>()?;
        out.shuffle(rng);
        Ok(out)
    }

    /// Balanced reals and fakes of one mode from one domain, shuffled.
    pub fn probe_set<R: Rng + ?Sized>(
        &self,
        domain: usize,
        mode: FakeMode,
        n_per_class: usize,
        rng: &mut R,
    ) -> Result<Vec<SyntheticSample>> {
        let mut out = Vec::with_capacity(2 * n_per_class);
        for _ in 0..n_per_class {
            out.push(self.sample(domain, FakeMode::None, rng)?);
            out.push(self.sample(domain, mode, rng)?);
        }
        out.shuffle(rng);
        Ok(out)
    }
}

/// Flattens samples into an n×pixels matrix.
pub fn images_matrix(samples: &[SyntheticSample]) -> Matrix {
    let p = samples.first().map_or(0, |s| s.image.len());
    let mut data = Vec::with_capacity(samples.len() * p);
    for s in samples {
        data.extend_from_slice(&s.image);
    }
    Matrix::new(samples.len(), p, data).expect("uniform image sizes")
}

/// Labels CSV: `index,domain,label,fake_mode`.
pub fn labels_csv(samples: &[SyntheticSample]) -> String {
    let mut out = String::from("index,domain,label,fake_mode\n");
    for (i, s) in samples.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{}\n", s.domain, s.label.as_str(), s.fake_mode.as_str()));
    }
    out
}
