//! Global graph attention laboratory.
//!
//! * [`numerics`] – dense matrices, stable softmax, seeded randomness
//! * [`attention`] – dense softmax attention, attention entropy, the closed-form score gradient
//! * [`wideformer`] – clustered (divided) aggregation with attention guidance
//! * [`theory`] – the entropy lower bound and its monotonicity in `n`
//! * [`autograd`] – a small reverse-mode tape over matrices
//! * [`model`] – toy node classifier, entropy-regularized loss, training loop
//! * [`data`] – planted-partition graphs, splits and the text graph format

pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod theory;
pub mod wideformer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
