//! Purification of bulk tumor expression profiles by self-supervised
//! decorrelation, with baselines, benchmarks, and downstream analysis.
//!
//! The pipeline, end to end:
//!
//! 1. [`data`]: load expression matrices with clinical metadata, transform
//!    to log2 space, split cohorts.
//! 2. [`synth`]: generate fully synthetic cohorts with planted subtype
//!    programs, for tests and benchmarks.
//! 3. [`augment`]: build synthetic-normal mixtures and contamination views.
//! 4. [`nn`]: a small dense network stack (explicit backward passes, Adam,
//!    finite-difference checking).
//! 5. [`model`]: the twin-view decorrelation model plus autoencoder, noisy
//!    twin, and PCA baselines behind one embedding interface.
//! 6. [`classify`]: multinomial logistic regression, cross-validated
//!    ensembles, and the dilution robustness benchmark.
//! 7. [`interpret`]: per-dimension gene rankings, signature extraction, and
//!    permutation-tested uniqueness.
//! 8. [`survival`]: Cox regression, Kaplan-Meier curves, log-rank tests,
//!    concordance.
//! 9. [`cli`]: the `purebulk` command-line frontend tying it together.

pub mod augment;
pub mod classify;
pub mod cli;
pub mod data;
pub mod error;
pub mod interpret;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod survival;
pub mod synth;

pub use error::{Error, Result};
