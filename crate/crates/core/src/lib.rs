//! Robustness analysis of reconstruction maps for underdetermined linear
//! inverse problems `y = A x + e`.
//!
//! The crate provides model-based (total-variation minimization solved by
//! ADMM) and learned (post-processing, fully-learned and iterative
//! data-consistency networks) reconstruction maps, worst-case measurement
//! perturbations found by projected gradient ascent through a reverse-mode
//! tape, statistical noise models, and the experiment harness that turns
//! all of it into noise-to-error curves.

pub mod adam;
pub mod attacks;
pub mod bench;
pub mod container;
pub mod error;
pub mod idx;
pub mod nets;
pub mod operators;
pub mod program;
pub mod prox;
pub mod recon;
pub mod rng;
pub mod signals;
pub mod tape;
pub mod tensor;
pub mod tv;

pub use error::{Error, Result};
pub use tensor::Tensor;
