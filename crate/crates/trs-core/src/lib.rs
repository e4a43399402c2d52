//! Diversified robust ensemble training and transferability analysis.
//!
//! The crate provides, end to end:
//!
//! * a reverse-mode differentiation engine with one level of nesting, so
//!   parameter-gradients of input-gradient functionals are exact
//!   ([`tape`], [`autodiff`]);
//! * differentiable MLP classifiers and probability-averaging ensembles
//!   ([`models`]);
//! * the gradient-based evasion attack family — FGSM, BIM, PGD, MIM, CW,
//!   EAD — with effectiveness measurement ([`attacks`]);
//! * instance-level transferability, transfer matrices, and a simplified
//!   blackbox transfer protocol ([`transfer`]);
//! * estimators for model constants together with the transferability
//!   lower/upper bound formulas and their supporting vector lemmas, plus
//!   an exact discrete checker for the total-variation results
//!   ([`bounds`]);
//! * the TRS ensemble training loop with its similarity and smoothness
//!   regularizers, the GAL baseline, ablations, and adversarial-training
//!   combinations ([`training`]);
//! * synthetic two-moons / Gaussian-blob datasets and an IDX image loader
//!   ([`data`]).
//!
//! Numeric kernels are generic over the [`scalar::Scalar`] element type;
//! the crate-root aliases fix f64, which all estimators assume.

pub mod attacks;
pub mod autodiff;
pub mod bounds;
pub mod data;
pub mod error;
pub mod models;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};

/// Dense f64 tensor used throughout the library.
pub type Tensor = tensor::TensorBase<f64>;
/// f64 operation tape.
pub type Tape = tape::TapeBase<f64>;
/// f64 gradient functional selector.
pub type GradFunctional = autodiff::GradFunctional<f64>;
