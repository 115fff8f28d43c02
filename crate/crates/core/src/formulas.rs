//! Closed-form controllers built on the single half-space constraint
//! `c + d u >= kappa * Gamma`.
//!
//! Every controller here has the shape `u = lambda(c, |d|^2, ...) d^T`
//! (plus the nominal input for the safety-filter form). The scalar `lambda`
//! functions take `d_sq = |d|^2` and return zero on the `d = 0` branch.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{CbfError, RangeBound, Result};
use crate::model::{
    gamma_sontag_parts, AffineConstraint, ShapingFunction, TunableTermPolicy, D_SQ_EPS,
};

/// Slack on the lower end of `K_SM`; anything closer is a tie and yields `lambda = 0`.
const KAPPA_TIE_TOL: f64 = 1e-12;

/// Min-norm solution of `c + d u >= 0`: `ReLU(-c / |d|^2)`.
pub fn lambda_pmn(c: f64, d_sq: f64) -> f64 {
    if d_sq <= D_SQ_EPS {
        0.0
    } else {
        (-c / d_sq).max(0.0)
    }
}

/// `kappa * Gamma - c`, rationalised for `c > 0` so `kappa = 1` does not cancel.
fn tightened_numerator(c: f64, d_sq: f64, kappa: f64, s: &ShapingFunction) -> f64 {
    let w = s.weighted(d_sq);
    let gamma = gamma_sontag_parts(c, d_sq, s);
    if c > 0.0 && kappa > 0.0 {
        ((kappa - 1.0) * (kappa + 1.0) * c * c + kappa * kappa * w) / (kappa * gamma + c)
    } else {
        kappa * gamma - c
    }
}

/// Sontag's formula: `(-c + sqrt(c^2 + s(d) d)) / d`.
pub fn lambda_stg(c: f64, d_sq: f64, s: &ShapingFunction) -> f64 {
    if d_sq <= D_SQ_EPS {
        return 0.0;
    }
    tightened_numerator(c, d_sq, 1.0, s) / d_sq
}

/// ReLU form of the tunable formula. With `safety_critical` set, `kappa` must
/// lie in `(0, 1]`.
pub fn lambda_tun_relu(
    c: f64,
    d_sq: f64,
    kappa: f64,
    s: &ShapingFunction,
    safety_critical: bool,
) -> Result<f64> {
    if safety_critical {
        check_unit_interval(kappa, "K_SA")?;
    }
    if d_sq <= D_SQ_EPS {
        return Ok(0.0);
    }
    Ok(tightened_numerator(c, d_sq, kappa, s).max(0.0) / d_sq)
}

/// Smooth tunable formula; requires `max(c / Gamma, 0) < kappa <= 1`.
///
/// At `d = 0` that interval is empty (`c / Gamma = 1`), so only `(0, 1]` is
/// checked there and the `d = 0` branch returns zero.
pub fn lambda_tun_smooth(c: f64, d_sq: f64, kappa: f64, s: &ShapingFunction) -> Result<f64> {
    check_unit_interval(kappa, "K_SM")?;
    if d_sq <= D_SQ_EPS {
        return Ok(0.0);
    }
    let gamma = gamma_sontag_parts(c, d_sq, s);
    let lower = (c / gamma).max(0.0);
    if kappa < lower - KAPPA_TIE_TOL {
        return Err(CbfError::KappaRange {
            kappa,
            limit: lower,
            bound: RangeBound::Lower,
            set: "K_SM",
        });
    }
    Ok(tightened_numerator(c, d_sq, kappa, s).max(0.0) / d_sq)
}

fn check_unit_interval(kappa: f64, set: &'static str) -> Result<()> {
    if !(kappa > 0.0) {
        return Err(CbfError::KappaRange {
            kappa,
            limit: 0.0,
            bound: RangeBound::Lower,
            set,
        });
    }
    if kappa > 1.0 {
        return Err(CbfError::KappaRange {
            kappa,
            limit: 1.0,
            bound: RangeBound::Upper,
            set,
        });
    }
    Ok(())
}

/// `kappa = (1 - eta) c / Gamma + eta`, defined where `c > 0` or `|d|^2 > 0`.
pub fn kappa_from_eta(c: f64, d_sq: f64, eta: f64, s: &ShapingFunction) -> Result<f64> {
    if c <= 0.0 && d_sq <= D_SQ_EPS {
        return Err(CbfError::Domain { c, d_sq });
    }
    let gamma = gamma_sontag_parts(c, d_sq, s);
    Ok((1.0 - eta) * (c / gamma) + eta)
}

/// Lin-Sontag choice `eta = 1 / (sqrt(s(|d|^2) / gamma^2 + 1) + 1)` for the
/// norm bound `|u| <= gamma`.
pub fn lin_sontag_eta(d_sq: f64, gamma: f64, s: &ShapingFunction) -> f64 {
    1.0 / ((s.eval(d_sq) / (gamma * gamma) + 1.0).sqrt() + 1.0)
}

/// Resolves `kappa` at the pair `(c, |d|^2)` observed at state `x`.
pub fn resolve_kappa(
    policy: &TunableTermPolicy,
    c: f64,
    d_sq: f64,
    x: &DVector<f64>,
    s: &ShapingFunction,
) -> Result<f64> {
    let kappa = match policy {
        TunableTermPolicy::EtaConstant(eta) => kappa_from_eta(c, d_sq, *eta, s)?,
        TunableTermPolicy::EtaFunction(eta) => kappa_from_eta(c, d_sq, eta(c, d_sq), s)?,
        TunableTermPolicy::KappaDirect(kappa) => kappa(x),
    };
    if !kappa.is_finite() {
        return Err(CbfError::NonFinite("tunable term"));
    }
    Ok(kappa)
}

type NominalFn = dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync;

/// Nominal input `k_d(x, t)` wrapped by the safety-filter form.
#[derive(Clone)]
pub struct NominalController(Arc<NominalFn>);

impl NominalController {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        Self(Arc::new(f))
    }

    pub fn zero(input_dim: usize) -> Self {
        Self::new(move |_, _| DVector::zeros(input_dim))
    }

    pub fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.0)(x, t)
    }
}

impl fmt::Debug for NominalController {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("NominalController(..)")
    }
}

#[derive(Debug, Clone)]
pub enum ControllerSpec {
    /// `kappa = 0`: the QP-synthesised (pointwise min-norm) controller.
    Qp,
    /// `kappa = 1`.
    Sontag { shaping: ShapingFunction },
    Tunable {
        shaping: ShapingFunction,
        policy: TunableTermPolicy,
        /// Use the ReLU form instead of the smooth form.
        relu: bool,
    },
    /// ReLU-form tunable formula with `|u| <= gamma`.
    BoundedInput {
        shaping: ShapingFunction,
        policy: TunableTermPolicy,
        gamma: f64,
    },
    /// Applies `inner` to `c_bar = c + d k_d` and adds `k_d` back.
    SafetyFilter {
        inner: Box<ControllerSpec>,
        nominal: NominalController,
    },
}

impl ControllerSpec {
    pub fn sontag(shaping: ShapingFunction) -> Self {
        Self::Sontag { shaping }
    }

    pub fn tunable(shaping: ShapingFunction, policy: TunableTermPolicy) -> Self {
        Self::Tunable {
            shaping,
            policy,
            relu: false,
        }
    }

    pub fn tunable_relu(shaping: ShapingFunction, policy: TunableTermPolicy) -> Self {
        Self::Tunable {
            shaping,
            policy,
            relu: true,
        }
    }

    pub fn bounded_input(
        shaping: ShapingFunction,
        policy: TunableTermPolicy,
        gamma: f64,
    ) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(CbfError::Config(format!(
                "input bound gamma must be positive, got {gamma}"
            )));
        }
        Ok(Self::BoundedInput {
            shaping,
            policy,
            gamma,
        })
    }

    /// Bounded-input formula with the Lin-Sontag eta.
    pub fn bounded_input_lin_sontag(shaping: ShapingFunction, gamma: f64) -> Result<Self> {
        let s = shaping.clone();
        let policy =
            TunableTermPolicy::eta_function(move |_, d_sq| lin_sontag_eta(d_sq, gamma, &s));
        Self::bounded_input(shaping, policy, gamma)
    }

    pub fn safety_filter(inner: ControllerSpec, nominal: NominalController) -> Result<Self> {
        if matches!(inner, Self::SafetyFilter { .. }) {
            return Err(CbfError::Config("safety filters cannot be nested".into()));
        }
        Ok(Self::SafetyFilter {
            inner: Box::new(inner),
            nominal,
        })
    }

    pub fn shaping(&self) -> Option<&ShapingFunction> {
        match self {
            Self::Qp => None,
            Self::Sontag { shaping }
            | Self::Tunable { shaping, .. }
            | Self::BoundedInput { shaping, .. } => Some(shaping),
            Self::SafetyFilter { inner, .. } => inner.shaping(),
        }
    }

    pub fn nominal(&self) -> Option<&NominalController> {
        match self {
            Self::SafetyFilter { nominal, .. } => Some(nominal),
            _ => None,
        }
    }

    /// The half-space formula, with any safety-filter wrapper removed.
    pub fn core_kind(&self) -> &ControllerSpec {
        match self {
            Self::SafetyFilter { inner, .. } => inner,
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerOutput {
    pub u: DVector<f64>,
    pub lambda: f64,
    /// `None` for the QP kind.
    pub kappa: Option<f64>,
    /// `Gamma` evaluated at `effective_c`; `None` for the QP kind.
    pub gamma_stg: Option<f64>,
    /// `c`, or `c + d k_d` for the safety-filter form.
    pub effective_c: f64,
    /// `c + d u - kappa * Gamma` (just `c + d u` for QP).
    pub constraint_residual: f64,
}

impl ControllerOutput {
    /// Tightened right-hand side `kappa * Gamma` (zero for QP).
    pub fn required_rhs(&self) -> f64 {
        match (self.kappa, self.gamma_stg) {
            (Some(k), Some(g)) => k * g,
            _ => 0.0,
        }
    }
}

struct HalfSpaceSolution {
    lambda: f64,
    kappa: Option<f64>,
    gamma_stg: Option<f64>,
}

fn solve_half_space(
    spec: &ControllerSpec,
    c: f64,
    d: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<HalfSpaceSolution> {
    let d_sq = d.norm_squared();
    if d_sq <= D_SQ_EPS && c <= 0.0 {
        return Err(CbfError::Infeasible { c, d_sq });
    }
    let solution = match spec {
        ControllerSpec::Qp => HalfSpaceSolution {
            lambda: lambda_pmn(c, d_sq),
            kappa: None,
            gamma_stg: None,
        },
        ControllerSpec::Sontag { shaping } => HalfSpaceSolution {
            lambda: lambda_stg(c, d_sq, shaping),
            kappa: Some(1.0),
            gamma_stg: Some(gamma_sontag_parts(c, d_sq, shaping)),
        },
        ControllerSpec::Tunable {
            shaping,
            policy,
            relu,
        } => {
            let kappa = resolve_kappa(policy, c, d_sq, x, shaping)?;
            let lambda = if *relu {
                lambda_tun_relu(c, d_sq, kappa, shaping, true)?
            } else {
                lambda_tun_smooth(c, d_sq, kappa, shaping)?
            };
            HalfSpaceSolution {
                lambda,
                kappa: Some(kappa),
                gamma_stg: Some(gamma_sontag_parts(c, d_sq, shaping)),
            }
        }
        ControllerSpec::BoundedInput {
            shaping,
            policy,
            gamma,
        } => {
            let d_norm = d_sq.sqrt();
            let slack = gamma * d_norm + c;
            if slack < 0.0 {
                return Err(CbfError::Incompatible { deficit: -slack });
            }
            let gamma_stg = gamma_sontag_parts(c, d_sq, shaping);
            let upper = slack / gamma_stg;
            let kappa = resolve_kappa(policy, c, d_sq, x, shaping)?;
            if !(kappa > 0.0) {
                return Err(CbfError::KappaRange {
                    kappa,
                    limit: 0.0,
                    bound: RangeBound::Lower,
                    set: "K_SA-BI",
                });
            }
            if kappa > upper * (1.0 + KAPPA_TIE_TOL) {
                return Err(CbfError::KappaRange {
                    kappa,
                    limit: upper,
                    bound: RangeBound::Upper,
                    set: "K_SA-BI",
                });
            }
            HalfSpaceSolution {
                lambda: lambda_tun_relu(c, d_sq, kappa, shaping, false)?,
                kappa: Some(kappa),
                gamma_stg: Some(gamma_stg),
            }
        }
        ControllerSpec::SafetyFilter { .. } => {
            return Err(CbfError::Config("safety filters cannot be nested".into()))
        }
    };
    Ok(solution)
}

/// Evaluates `spec` on the constraint observed at `(x, t)`.
///
/// Fails on a vanishing `d` with `c <= 0`, on tunable terms outside their
/// admissible set, and on incompatibility with the input bound.
pub fn evaluate_controller(
    spec: &ControllerSpec,
    con: &AffineConstraint,
    x: &DVector<f64>,
    t: f64,
) -> Result<ControllerOutput> {
    let (kernel, nominal) = match spec {
        ControllerSpec::SafetyFilter { inner, nominal } => {
            let k_d = nominal.eval(x, t);
            if k_d.len() != con.d.len() {
                return Err(CbfError::DimensionMismatch {
                    what: "nominal input",
                    expected: con.d.len().to_string(),
                    got: k_d.len().to_string(),
                });
            }
            if k_d.iter().any(|v| !v.is_finite()) {
                return Err(CbfError::NonFinite("nominal input"));
            }
            (inner.as_ref(), Some(k_d))
        }
        other => (other, None),
    };
    let effective_c = match &nominal {
        Some(k_d) => con.c + con.d.dot(k_d),
        None => con.c,
    };
    let sol = solve_half_space(kernel, effective_c, &con.d, x)?;
    let mut u = &con.d * sol.lambda;
    if let Some(k_d) = &nominal {
        u += k_d;
    }
    let rhs = match (sol.kappa, sol.gamma_stg) {
        (Some(k), Some(g)) => k * g,
        _ => 0.0,
    };
    let constraint_residual = con.residual(&u) - rhs;
    Ok(ControllerOutput {
        u,
        lambda: sol.lambda,
        kappa: sol.kappa,
        gamma_stg: sol.gamma_stg,
        effective_c,
        constraint_residual,
    })
}
