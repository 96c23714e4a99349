//! Desk-scale laboratory for multilingual preference optimization.
//!
//! The crate builds a fully analytic stand-in for the usual alignment stack:
//! a log-linear autoregressive policy with exact log-probabilities and
//! gradients ([`policy`]), a synthetic multilingual environment whose
//! translated channel carries detectable artifacts ([`synthlang`]),
//! programmable rewards ([`reward`]), offline ([`dpo`]) and online ([`rloo`])
//! preference trainers, declarative data mixtures ([`mixtures`]), and a
//! pairwise win-rate harness ([`eval`]). Everything is seeded and
//! deterministic, and every estimator has an enumeration or finite-difference
//! oracle next to it in the tests.
//!
//! Numeric code is generic over the [`scalar::Scalar`] floating-point type;
//! the aliases below pin the common `f32`/`f64` instantiations. The
//! experiment pipeline runs in `f64`.

pub mod dpo;
pub mod error;
pub mod eval;
pub mod io;
pub mod mixtures;
pub mod policy;
pub mod reward;
pub mod rloo;
pub mod scalar;
pub mod seed;
pub mod synthlang;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Log-linear policy over `f32` weights.
pub type Policy32 = policy::PolicyParams<f32>;
/// Log-linear policy over `f64` weights (the pipeline default).
pub type Policy64 = policy::PolicyParams<f64>;
/// Synthetic environment over `f32` generators.
pub type Environment32 = synthlang::Environment<f32>;
/// Synthetic environment over `f64` generators (the pipeline default).
pub type Environment64 = synthlang::Environment<f64>;
