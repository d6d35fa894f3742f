//! Orthogonal mixture-of-experts adaptation for synthetic forgery detection.

pub mod backbone;
pub mod decomp;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod router;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
