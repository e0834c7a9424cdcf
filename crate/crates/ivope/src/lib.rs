//! Offline policy evaluation (OPE) through the lens of instrumental-variable
//! regression.
//!
//! The crate provides:
//!
//! - [`env`]: finite tabular MDPs, the stochastic chain benchmark, and an
//!   exact dynamic-programming oracle for ground-truth Q values.
//! - [`data`]: offline transition datasets, distribution-shift resampling,
//!   train/validation splitting, and CSV round-tripping.
//! - [`features`]: Gaussian grid features, random Fourier features, one-hot
//!   encoders, and state-action concatenation.
//! - [`nn`]: a minimal reverse-mode autodiff tape over dense matrices,
//!   multilayer perceptrons, Adam/optimistic-Adam, and categorical/mixture
//!   density heads.
//! - [`linear`]: closed-form estimators — 2SLS, LSTD-Q, deterministic Bellman
//!   residual minimization, iterative linear FQE, and kernel IV over random
//!   Fourier features.
//! - [`neural`]: neural estimators under one fitting contract — Bellman
//!   residual minimization, FQE with a target network, Deep IV, DFIV, and
//!   the adversarial GMM family (DeepGMM, AGMM, ASEM).
//! - [`evaluation`]: policy-value estimation from a fitted Q function,
//!   normalization, and error metrics.

pub mod data;
pub mod env;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod linalg;
pub mod linear;
pub mod neural;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
