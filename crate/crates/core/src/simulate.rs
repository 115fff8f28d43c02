//! Fixed-step closed-loop integration of `x' = f(x) + g(x) (k(x, t) + w(t))`.

use std::fmt;

use nalgebra::DVector;

use crate::analysis::{margin_from_parts, DisturbanceSpec};
use crate::error::{CbfError, Result};
use crate::formulas::{evaluate_controller, ControllerSpec};
use crate::model::{evaluate_constraint, AffineConstraint, BarrierFunction, ControlAffineSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Rk4,
    Euler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub integrator: Integrator,
    pub record_every: usize,
    /// Hold the input over each step instead of re-evaluating it at every stage.
    pub zoh: bool,
    pub require_safe_start: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 10.0,
            integrator: Integrator::Rk4,
            record_every: 1,
            zoh: false,
            require_safe_start: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(CbfError::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(CbfError::Config(format!(
                "horizon must be nonnegative, got {}",
                self.horizon
            )));
        }
        if self.horizon > 0.0 && self.dt > self.horizon {
            return Err(CbfError::Config(format!(
                "dt = {} exceeds horizon = {}",
                self.dt, self.horizon
            )));
        }
        if self.record_every == 0 {
            return Err(CbfError::Config("record_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        (self.horizon / self.dt + 1e-9).floor() as usize
    }

    pub fn record_count(&self) -> usize {
        self.step_count() / self.record_every + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FailureReason {
    Controller(CbfError),
    BlowUp,
}

impl From<CbfError> for FailureReason {
    fn from(e: CbfError) -> Self {
        match e {
            CbfError::NonFinite(_) => Self::BlowUp,
            other => Self::Controller(other),
        }
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Controller(e) => write!(f, "{e}"),
            Self::BlowUp => f.write_str("state became non-finite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFailure {
    pub step: usize,
    pub time: f64,
    pub reason: FailureReason,
}

impl fmt::Display for SimFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} (t = {}): {}", self.step, self.time, self.reason)
    }
}

/// Recorded closed-loop run. All sequences share one length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Applied inputs, disturbance included.
    pub inputs: Vec<DVector<f64>>,
    pub h_values: Vec<f64>,
    /// `c + d u` with the applied input.
    pub residuals: Vec<f64>,
    /// Zero for the QP kind.
    pub kappas: Vec<f64>,
    /// `NaN` where the margin is degenerate.
    pub margins: Vec<f64>,
    pub failure: Option<SimFailure>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    pub fn min_h(&self) -> f64 {
        self.h_values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_input_norm(&self) -> f64 {
        self.inputs.iter().map(|u| u.norm()).fold(0.0, f64::max)
    }

    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }

    fn push(&mut self, t: f64, x: &DVector<f64>, u: DVector<f64>, s: &FeedbackSample) {
        self.residuals.push(s.constraint.residual(&u));
        self.times.push(t);
        self.states.push(x.clone());
        self.inputs.push(u);
        self.h_values.push(s.h);
        self.kappas.push(s.kappa);
        self.margins.push(s.margin);
    }
}

/// Feedback evaluation with the diagnostics recorded alongside the input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSample {
    pub u: DVector<f64>,
    /// Safety function value reported in the trajectory.
    pub h: f64,
    /// Constraint whose residual is recorded.
    pub constraint: AffineConstraint,
    pub kappa: f64,
    pub margin: f64,
}

pub trait Feedback {
    fn control(&self, x: &DVector<f64>, t: f64) -> Result<FeedbackSample>;

    /// Safety value checked against `require_safe_start`.
    fn initial_h(&self, x: &DVector<f64>) -> f64;
}

/// A closed-form controller on a single barrier.
pub struct CbfFeedback<'a> {
    pub sys: &'a ControlAffineSystem,
    pub spec: &'a ControllerSpec,
    pub barrier: &'a BarrierFunction,
}

impl Feedback for CbfFeedback<'_> {
    fn control(&self, x: &DVector<f64>, t: f64) -> Result<FeedbackSample> {
        let con = evaluate_constraint(self.sys, self.barrier, x)?;
        let out = evaluate_controller(self.spec, &con, x, t)?;
        let kappa = out.kappa.unwrap_or(0.0);
        let margin = margin_from_parts(out.effective_c, kappa, out.gamma_stg.unwrap_or(0.0))
            .unwrap_or(f64::NAN);
        Ok(FeedbackSample {
            u: out.u,
            h: self.barrier.value(x),
            constraint: con,
            kappa,
            margin,
        })
    }

    fn initial_h(&self, x: &DVector<f64>) -> f64 {
        self.barrier.value(x)
    }
}

/// One integration step of `x' = f(x) + g(x) (k(x, t) + w)`.
///
/// `u0` is the input at `(x, t)` if already known; with `zoh` it is held for
/// the whole step.
#[allow(clippy::too_many_arguments)]
pub fn step<K>(
    sys: &ControlAffineSystem,
    controller: K,
    x: &DVector<f64>,
    t: f64,
    dt: f64,
    integrator: Integrator,
    u0: Option<DVector<f64>>,
    zoh: bool,
) -> Result<DVector<f64>>
where
    K: Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    let u0 = match u0 {
        Some(u) => u,
        None => controller(x, t)?,
    };
    let field = |xs: &DVector<f64>, ts: f64| -> Result<DVector<f64>> {
        if zoh {
            sys.vector_field(xs, &u0)
        } else {
            sys.vector_field(xs, &controller(xs, ts)?)
        }
    };
    match integrator {
        Integrator::Euler => Ok(x + sys.vector_field(x, &u0)? * dt),
        Integrator::Rk4 => {
            let k1 = sys.vector_field(x, &u0)?;
            let k2 = field(&(x + &k1 * (0.5 * dt)), t + 0.5 * dt)?;
            let k3 = field(&(x + &k2 * (0.5 * dt)), t + 0.5 * dt)?;
            let k4 = field(&(x + &k3 * dt), t + dt)?;
            Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0))
        }
    }
}

/// Runs any [`Feedback`] in closed loop. Mid-run failures truncate the
/// trajectory and are reported in `failure`.
pub fn run_feedback<F: Feedback + ?Sized>(
    sys: &ControlAffineSystem,
    feedback: &F,
    x0: &DVector<f64>,
    cfg: &SimConfig,
    dist: Option<&DisturbanceSpec>,
) -> Result<Trajectory> {
    cfg.validate()?;
    if x0.len() != sys.state_dim() {
        return Err(CbfError::DimensionMismatch {
            what: "initial state",
            expected: sys.state_dim().to_string(),
            got: x0.len().to_string(),
        });
    }
    if let Some(w) = dist {
        w.validate(sys.input_dim())?;
    }
    if cfg.require_safe_start {
        let h = feedback.initial_h(x0);
        if !(h >= 0.0) {
            return Err(CbfError::UnsafeStart { h });
        }
    }

    let m = sys.input_dim();
    let n_steps = cfg.step_count();
    let mut traj = Trajectory::default();
    let mut x = x0.clone();
    for k in 0..=n_steps {
        let t = k as f64 * cfg.dt;
        let fail = |reason| SimFailure {
            step: k,
            time: t,
            reason,
        };
        let sample = match feedback.control(&x, t) {
            Ok(s) => s,
            Err(e) => {
                traj.failure = Some(fail(e.into()));
                break;
            }
        };
        let w = dist.map(|d| d.eval(m, t));
        let applied = match &w {
            Some(w) => &sample.u + w,
            None => sample.u.clone(),
        };
        if k % cfg.record_every == 0 {
            traj.push(t, &x, applied.clone(), &sample);
        }
        if k == n_steps {
            break;
        }
        let controller = |xs: &DVector<f64>, ts: f64| -> Result<DVector<f64>> {
            let u = feedback.control(xs, ts)?.u;
            Ok(match &w {
                Some(w) => u + w,
                None => u,
            })
        };
        match step(
            sys,
            controller,
            &x,
            t,
            cfg.dt,
            cfg.integrator,
            Some(applied),
            cfg.zoh,
        ) {
            Ok(next) if next.iter().all(|v| v.is_finite()) => x = next,
            Ok(_) => {
                traj.failure = Some(SimFailure {
                    step: k + 1,
                    time: t + cfg.dt,
                    reason: FailureReason::BlowUp,
                });
                break;
            }
            Err(e) => {
                traj.failure = Some(fail(e.into()));
                break;
            }
        }
    }
    Ok(traj)
}

/// Closed-loop run of `spec` on the barrier `bar`.
pub fn run(
    sys: &ControlAffineSystem,
    spec: &ControllerSpec,
    bar: &BarrierFunction,
    x0: &DVector<f64>,
    cfg: &SimConfig,
    dist: Option<&DisturbanceSpec>,
) -> Result<Trajectory> {
    let fb = CbfFeedback {
        sys,
        spec,
        barrier: bar,
    };
    run_feedback(sys, &fb, x0, cfg, dist)
}
