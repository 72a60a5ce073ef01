//! Supervised factor models that contrast two supervision styles: local
//! supervision, where per-observation factor scores are free variables
//! shared with the outcome, and encoded supervision, where scores are a
//! deterministic function of the predictors alone. The crate covers the
//! closed-form linear case, supervised non-negative matrix factorization,
//! spectral feature extraction for multichannel time series, and a
//! cross-spectral-mixture Gaussian-process factor toy, together with the
//! experiment harness exposed through the `supfactor` binary.

pub mod csm;
pub mod error;
pub mod harness;
pub mod idx;
pub mod io;
pub mod linalg;
pub mod linear;
pub mod metrics;
pub mod nmf;
pub mod optim;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
