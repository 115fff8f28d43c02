//! Tunable universal formulas for control-barrier-function (CBF) safety filters.
//!
//! A control-affine system `x' = f(x) + g(x) u` and a barrier `h` with class-K
//! term `beta` give the pointwise constraint `c + d u >= 0`, where
//! `c = grad h . f + beta(h)` and `d = grad h . g`. Every controller here is a
//! closed-form solution of the tightened constraint `c + d u >= kappa * Gamma`,
//! with `Gamma = sqrt(c^2 + s(|d|^2) |d|^2)`:
//! `kappa = 0` is the min-norm (QP) controller, `kappa = 1` is Sontag's formula,
//! and intermediate `kappa` trades smoothness and robustness against
//! conservatism.

// `!(x > 0.0)` style guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod formulas;
pub mod manipulator;
pub mod model;
pub mod simulate;

pub use analysis::{
    check_compatibility, disturbed_residual, estimate_margin, kappa_bi_upper,
    probe_derivative_jump, safety_margin_at, Compatibility, DisturbanceSpec, MarginReport,
};
pub use error::{CbfError, RangeBound, Result};
pub use formulas::{
    evaluate_controller, kappa_from_eta, lambda_pmn, lambda_stg, lambda_tun_relu,
    lambda_tun_smooth, ControllerOutput, ControllerSpec, NominalController,
};
pub use model::{
    evaluate_constraint, gamma_sontag, AffineConstraint, BarrierFunction, ControlAffineSystem,
    ExtendedClassK, ShapingFunction, TunableTermPolicy,
};
pub use simulate::{run, Integrator, SimConfig, Trajectory};
