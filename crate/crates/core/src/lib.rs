//! Weakly-supervised alignment of a source embedding space (for example
//! image-region vectors) onto a target embedding space (for example word
//! vectors).
//!
//! The alignment runs in three stages:
//!
//! 1. [`adversarial`]: a linear generator is trained against an MLP
//!    discriminator until mapped sources look like targets;
//! 2. coarse calibration: a structure dictionary of CSLS mutual nearest
//!    neighbors ([`dictionary`]) feeds an orthogonal Procrustes solve
//!    ([`procrustes`]);
//! 3. refinement: a semantic dictionary built from detector labels and query
//!    nouns is subsampled and solved again.
//!
//! [`pipeline`] chains the stages, [`eval`] scores maps, and [`relevance`]
//! is a small query/ad matching demo that consumes a finished map.

pub mod adversarial;
pub mod dictionary;
pub mod error;
pub mod eval;
pub mod format;
pub mod map;
pub mod pipeline;
pub mod procrustes;
pub mod relevance;
pub mod similarity;
pub mod space;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use map::AlignmentMap;
pub use space::{EmbeddingSpace, Normalization};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;
