//! Numerical constants shared across the crate.
//!
//! | Constant | Value | Used by |
//! |---|---|---|
//! | [`NORM_EPS`] | 1e-12 | l2 normalisation, cosine denominators, z-scoring |
//! | [`FD_STEP`] | 1e-4 | default central-difference step |
//! | [`GRAD_TOL`] | 1e-3 | default relative tolerance for gradient checks |
//! | [`REL_ERR_FLOOR`] | 1e-8 | denominator floor in relative error |

/// Added inside every norm and denominator.
pub const NORM_EPS: f64 = 1e-12;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Default relative error tolerance for finite-difference checks.
pub const GRAD_TOL: f64 = 1e-3;

/// Floor for `|a - n| / max(|a|, |n|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Default overlap bounds for paired crops.
pub const GAMMA_MIN: f64 = 0.4;
pub const GAMMA_MAX: f64 = 0.8;

/// Default temperature for both NT-Xent uses.
pub const TEMPERATURE: f64 = 0.1;

/// Default EMA decay of the teacher.
pub const EMA_DECAY: f64 = 0.996;
