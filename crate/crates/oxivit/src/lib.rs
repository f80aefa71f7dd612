//! Joint class/value supervision for oxygen-saturation prediction from
//! retinal image stacks, on a self-contained f64 autodiff engine.
//!
//! The crate covers the full pipeline: dense tensors with a reverse-mode
//! tape ([`tensor`]), a dual-head vision transformer ([`vit`]), BCE/MSE and
//! their lambda-weighted joint combination ([`loss`]), long-tailed dataset
//! construction with balancing augmentation ([`data`]), training ([`train`]),
//! checkpointing ([`ckpt`]), and a cross-validated evaluation harness with an
//! ablation runner ([`eval`]).

pub mod check;
pub mod ckpt;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
