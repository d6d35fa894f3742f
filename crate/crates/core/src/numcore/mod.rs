//! Dense linear algebra, SVD, seeded randomness and reverse-mode gradients.

mod matrix;
pub mod par;
pub mod rng;
mod svd;
pub mod tape;

pub use matrix::{checksum, Matrix};
pub use svd::{svd, SvdResult};
pub use tape::{grad, Gradients, Tape, Var};

/// `|a − b| / max(|a|, |b|, 1e-10)`.
pub fn relative_difference(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}
