//! Planar two-link arm: rigid-body model, a velocity-level safety filter on
//! the elbow angle, safe backstepping to torque level and the bounded-input
//! study on the virtual velocity input.

use std::f64::consts::FRAC_PI_3;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector4};
use rayon::prelude::*;

use crate::error::{CbfError, Result};
use crate::formulas::{evaluate_controller, ControllerSpec, NominalController};
use crate::model::{
    gamma_sontag_parts, AffineConstraint, BarrierFunction, ControlAffineSystem, ExtendedClassK,
    ShapingFunction, TunableTermPolicy,
};
use crate::simulate::{run, run_feedback, Feedback, FeedbackSample, SimConfig, Trajectory};

/// Point masses at the link ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManipulatorParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub gravity: f64,
}

impl Default for ManipulatorParams {
    fn default() -> Self {
        Self {
            m1: 1.0,
            m2: 1.0,
            l1: 1.0,
            l2: 1.0,
            gravity: 9.8,
        }
    }
}

impl ManipulatorParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.m1, self.m2, self.l1, self.l2, self.gravity];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(CbfError::Config(format!(
                "manipulator parameters must be positive: {self:?}"
            )))
        }
    }

    pub fn mass_matrix(&self, q: &Vector2<f64>) -> Matrix2<f64> {
        let (m1, m2, l1, l2) = (self.m1, self.m2, self.l1, self.l2);
        let cross = m2 * l1 * l2 * q[1].cos();
        let m22 = m2 * l2 * l2;
        Matrix2::new(
            (m1 + m2) * l1 * l1 + m22 + 2.0 * cross,
            m22 + cross,
            m22 + cross,
            m22,
        )
    }

    /// Christoffel-symbol Coriolis matrix, so `M' - 2C` is skew.
    pub fn coriolis(&self, q: &Vector2<f64>, qdot: &Vector2<f64>) -> Matrix2<f64> {
        let hh = -self.m2 * self.l1 * self.l2 * q[1].sin();
        Matrix2::new(hh * qdot[1], hh * (qdot[0] + qdot[1]), -hh * qdot[0], 0.0)
    }

    /// Gradient of [`Self::potential_energy`].
    pub fn gravity_torque(&self, q: &Vector2<f64>) -> Vector2<f64> {
        let g = self.gravity;
        let outer = self.m2 * g * self.l2 * (q[0] + q[1]).cos();
        Vector2::new(
            (self.m1 + self.m2) * g * self.l1 * q[0].cos() + outer,
            outer,
        )
    }

    pub fn potential_energy(&self, q: &Vector2<f64>) -> f64 {
        let g = self.gravity;
        (self.m1 + self.m2) * g * self.l1 * q[0].sin() + self.m2 * g * self.l2 * (q[0] + q[1]).sin()
    }

    pub fn energy(&self, q: &Vector2<f64>, qdot: &Vector2<f64>) -> f64 {
        0.5 * qdot.dot(&(self.mass_matrix(q) * qdot)) + self.potential_energy(q)
    }

    /// `(Phi, H)` with `v' = Phi + H u`.
    pub fn drift_and_gain(
        &self,
        q: &Vector2<f64>,
        qdot: &Vector2<f64>,
    ) -> Result<(Vector2<f64>, Matrix2<f64>)> {
        let h = self
            .mass_matrix(q)
            .try_inverse()
            .ok_or(CbfError::Singular("manipulator mass matrix"))?;
        let phi = -(h * (self.coriolis(q, qdot) * qdot + self.gravity_torque(q)));
        Ok((phi, h))
    }

    /// `[qdot; Phi + H u]`.
    pub fn dynamics(
        &self,
        q: &Vector2<f64>,
        qdot: &Vector2<f64>,
        u: &Vector2<f64>,
    ) -> Result<Vector4<f64>> {
        let (phi, h) = self.drift_and_gain(q, qdot)?;
        let acc = phi + h * u;
        Ok(Vector4::new(qdot[0], qdot[1], acc[0], acc[1]))
    }

    /// Full-order state `[q; v]` with torque input.
    pub fn system(&self) -> Result<ControlAffineSystem> {
        self.validate()?;
        let p = *self;
        let p2 = *self;
        ControlAffineSystem::new(
            4,
            2,
            move |x| {
                let (q, v) = split_state(x);
                match p.drift_and_gain(&q, &v) {
                    Ok((phi, _)) => DVector::from_vec(vec![v[0], v[1], phi[0], phi[1]]),
                    Err(_) => DVector::from_element(4, f64::NAN),
                }
            },
            move |x| {
                let (q, _) = split_state(x);
                let mut g = DMatrix::zeros(4, 2);
                match p2.mass_matrix(&q).try_inverse() {
                    Some(h) => g.view_mut((2, 0), (2, 2)).copy_from(&h),
                    None => g.fill(f64::NAN),
                }
                g
            },
        )
    }
}

fn split_state(x: &DVector<f64>) -> (Vector2<f64>, Vector2<f64>) {
    (Vector2::new(x[0], x[1]), Vector2::new(x[2], x[3]))
}

/// `q_d(t) = offset + amplitude * sin(freq t)` in both joints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceTrajectory {
    pub offset: [f64; 2],
    pub amplitude: f64,
    pub freq: f64,
}

impl Default for ReferenceTrajectory {
    fn default() -> Self {
        Self {
            offset: [1.0, 0.0],
            amplitude: 2.0,
            freq: 1.0,
        }
    }
}

impl ReferenceTrajectory {
    /// Derivative of order `k` in both joints.
    fn derivative(&self, k: u32, t: f64) -> Vector2<f64> {
        let w = self.freq;
        let phase = w * t;
        let s = match k % 4 {
            0 => phase.sin(),
            1 => phase.cos(),
            2 => -phase.sin(),
            _ => -phase.cos(),
        };
        let v = self.amplitude * w.powi(k as i32) * s;
        if k == 0 {
            Vector2::new(self.offset[0] + v, self.offset[1] + v)
        } else {
            Vector2::new(v, v)
        }
    }

    pub fn position(&self, t: f64) -> Vector2<f64> {
        self.derivative(0, t)
    }

    pub fn velocity(&self, t: f64) -> Vector2<f64> {
        self.derivative(1, t)
    }

    pub fn acceleration(&self, t: f64) -> Vector2<f64> {
        self.derivative(2, t)
    }
}

/// Closed-form formula used for the virtual velocity input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VirtualKind {
    Qp,
    Sontag,
    Tunable {
        eta: f64,
    },
    /// `eta = None` selects the Lin-Sontag choice.
    BoundedInput {
        eta: Option<f64>,
        gamma: f64,
    },
}

/// Velocity-level design: `h = q2_max - q2`, `beta(h) = alpha h`, nominal
/// `k_d = -K_P (q - q_d) + q_d'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityDesign {
    pub kind: VirtualKind,
    pub sigma: f64,
    pub q2_max: f64,
    pub alpha: f64,
    pub kp: [f64; 2],
    pub reference: ReferenceTrajectory,
}

impl VelocityDesign {
    pub fn new(kind: VirtualKind, sigma: f64) -> Self {
        Self {
            kind,
            sigma,
            q2_max: FRAC_PI_3,
            alpha: 1.5,
            kp: [1.0, 1.0],
            reference: ReferenceTrajectory::default(),
        }
    }

    pub fn h(&self, q: &Vector2<f64>) -> f64 {
        self.q2_max - q[1]
    }

    pub fn nominal(&self, q: &Vector2<f64>, t: f64) -> Vector2<f64> {
        let kp = Vector2::from(self.kp);
        -kp.component_mul(&(q - self.reference.position(t))) + self.reference.velocity(t)
    }

    /// `d k_d / dt` at fixed `q`.
    fn nominal_time_derivative(&self, t: f64) -> Vector2<f64> {
        Vector2::from(self.kp).component_mul(&self.reference.velocity(t))
            + self.reference.acceleration(t)
    }

    fn shaping(&self) -> Result<ShapingFunction> {
        ShapingFunction::linear(self.sigma)
    }

    /// The half-space formula applied to `c_bar = c + d k_d`.
    pub fn kernel_spec(&self) -> Result<ControllerSpec> {
        let s = self.shaping()?;
        Ok(match self.kind {
            VirtualKind::Qp => ControllerSpec::Qp,
            VirtualKind::Sontag => ControllerSpec::sontag(s),
            VirtualKind::Tunable { eta } => {
                ControllerSpec::tunable(s, TunableTermPolicy::eta_constant(eta)?)
            }
            VirtualKind::BoundedInput { eta: None, gamma } => {
                ControllerSpec::bounded_input_lin_sontag(s, gamma)?
            }
            VirtualKind::BoundedInput {
                eta: Some(eta),
                gamma,
            } => ControllerSpec::bounded_input(s, TunableTermPolicy::eta_constant(eta)?, gamma)?,
        })
    }

    pub fn nominal_controller(&self) -> NominalController {
        let design = *self;
        NominalController::new(move |x, t| {
            let v = design.nominal(&Vector2::new(x[0], x[1]), t);
            DVector::from_column_slice(v.as_slice())
        })
    }

    pub fn barrier(&self) -> Result<BarrierFunction> {
        let q2_max = self.q2_max;
        Ok(BarrierFunction::new(
            move |x| q2_max - x[1],
            |_| DVector::from_vec(vec![0.0, -1.0]),
            ExtendedClassK::linear(self.alpha)?,
        ))
    }

    /// `eta` in `lambda = eta * lambda_Stg`, which every non-QP kind reduces to here.
    fn effective_eta(&self, d_sq: f64) -> f64 {
        match self.kind {
            VirtualKind::Qp => 0.0,
            VirtualKind::Sontag => 1.0,
            VirtualKind::Tunable { eta } => eta,
            VirtualKind::BoundedInput { eta: Some(eta), .. } => eta,
            VirtualKind::BoundedInput { eta: None, gamma } => {
                1.0 / ((self.sigma * d_sq / (gamma * gamma) + 1.0).sqrt() + 1.0)
            }
        }
    }
}

/// Velocity-level problem `q' = v` ready for [`run`].
#[derive(Debug, Clone)]
pub struct VelocityScenario {
    pub design: VelocityDesign,
    pub system: ControlAffineSystem,
    pub barrier: BarrierFunction,
    pub nominal: NominalController,
    pub spec: ControllerSpec,
    pub x0: DVector<f64>,
}

impl VelocityScenario {
    pub fn run(&self, cfg: &SimConfig) -> Result<Trajectory> {
        run(&self.system, &self.spec, &self.barrier, &self.x0, cfg, None)
    }
}

pub fn velocity_level_scenario(eta: f64, sigma: f64) -> Result<VelocityScenario> {
    velocity_level_scenario_with(VelocityDesign::new(VirtualKind::Tunable { eta }, sigma))
}

pub fn velocity_level_scenario_with(design: VelocityDesign) -> Result<VelocityScenario> {
    let system =
        ControlAffineSystem::new(2, 2, |_| DVector::zeros(2), |_| DMatrix::identity(2, 2))?;
    let nominal = design.nominal_controller();
    let spec = ControllerSpec::safety_filter(design.kernel_spec()?, nominal.clone())?;
    Ok(VelocityScenario {
        design,
        system,
        barrier: design.barrier()?,
        nominal,
        spec,
        x0: DVector::from_column_slice(design.reference.position(0.0).as_slice()),
    })
}

/// Filtered velocity `k0(q, t)` with its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityCommand {
    pub v: Vector2<f64>,
    /// `d k0 / d q`.
    pub jac_q: Matrix2<f64>,
    /// `d k0 / d t` at fixed `q`.
    pub d_dt: Vector2<f64>,
    pub h: f64,
    pub c_bar: f64,
    pub lambda: f64,
    pub kappa: Option<f64>,
}

/// Velocity-level safety filter evaluated directly on `(q, t)`, with
/// analytic Jacobians for backstepping.
#[derive(Debug, Clone)]
pub struct VelocityFilter {
    design: VelocityDesign,
    kernel: ControllerSpec,
    shaping: ShapingFunction,
}

impl VelocityFilter {
    pub fn new(design: VelocityDesign) -> Result<Self> {
        Ok(Self {
            kernel: design.kernel_spec()?,
            shaping: design.shaping()?,
            design,
        })
    }

    pub fn design(&self) -> &VelocityDesign {
        &self.design
    }

    pub fn command(&self, q: &Vector2<f64>, t: f64) -> Result<VelocityCommand> {
        let dz = &self.design;
        // d = L_g h = [0, -1], |d|^2 = 1
        let d = Vector2::new(0.0, -1.0);
        let d_sq = 1.0;
        let h = dz.h(q);
        let k_d = dz.nominal(q, t);
        let c_bar = dz.alpha * h + d.dot(&k_d);
        let con = AffineConstraint::new(c_bar, DVector::from_column_slice(d.as_slice()))?;
        let x = DVector::from_column_slice(q.as_slice());
        let out = evaluate_controller(&self.kernel, &con, &x, t)?;

        let slope = self.lambda_slope(c_bar, d_sq);
        let kp = Vector2::from(dz.kp);
        let dc_dq = Vector2::new(0.0, -dz.alpha) - kp.component_mul(&d);
        let dc_dt = d.dot(&dz.nominal_time_derivative(t));
        let jac_q = Matrix2::from_diagonal(&(-kp)) + d * (slope * dc_dq).transpose();
        let d_dt = dz.nominal_time_derivative(t) + d * (slope * dc_dt);
        Ok(VelocityCommand {
            v: k_d + Vector2::new(out.u[0], out.u[1]),
            jac_q,
            d_dt,
            h,
            c_bar,
            lambda: out.lambda,
            kappa: out.kappa,
        })
    }

    /// `d lambda / d c_bar`.
    fn lambda_slope(&self, c_bar: f64, d_sq: f64) -> f64 {
        match self.design.kind {
            VirtualKind::Qp => {
                if c_bar < 0.0 {
                    -1.0 / d_sq
                } else {
                    0.0
                }
            }
            _ => {
                let gamma = gamma_sontag_parts(c_bar, d_sq, &self.shaping);
                self.design.effective_eta(d_sq) * (c_bar / gamma - 1.0) / d_sq
            }
        }
    }

    /// Central-difference Jacobians of [`Self::command`], for cross-checks.
    pub fn fd_jacobians(
        &self,
        q: &Vector2<f64>,
        t: f64,
        step: f64,
    ) -> Result<(Matrix2<f64>, Vector2<f64>)> {
        let mut jac = Matrix2::zeros();
        for j in 0..2 {
            let mut qp = *q;
            let mut qm = *q;
            qp[j] += step;
            qm[j] -= step;
            let diff = (self.command(&qp, t)?.v - self.command(&qm, t)?.v) / (2.0 * step);
            jac.set_column(j, &diff);
        }
        let dt = (self.command(q, t + step)?.v - self.command(q, t - step)?.v) / (2.0 * step);
        Ok((jac, dt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BacksteppingConfig {
    pub mu: f64,
    pub kp_bar: [f64; 2],
    pub alpha_b: f64,
    /// Apply the QP filter on the composite barrier; off leaves the bare tracking torque.
    pub filter_torque: bool,
}

impl Default for BacksteppingConfig {
    fn default() -> Self {
        Self {
            mu: 20.0,
            kp_bar: [1.0, 1.0],
            alpha_b: 1.5,
            filter_torque: true,
        }
    }
}

impl BacksteppingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.mu, self.kp_bar[0], self.kp_bar[1], self.alpha_b]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(CbfError::Config(format!(
                "backstepping gains must be positive: {self:?}"
            )))
        }
    }
}

/// One evaluation of the torque-level filter.
#[derive(Debug, Clone, PartialEq)]
pub struct BacksteppingOutput {
    pub torque: Vector2<f64>,
    /// Composite barrier `h - |v - k0|^2 / (2 mu)`.
    pub b: f64,
    pub c_b: f64,
    pub d_b: Vector2<f64>,
    /// Tracking nominal `M (-Phi + k0' - K_P_bar (v - k0))`.
    pub k_d: Vector2<f64>,
    pub k0: VelocityCommand,
}

impl BacksteppingOutput {
    pub fn tracking_error(&self, v: &Vector2<f64>) -> f64 {
        (v - self.k0.v).norm()
    }
}

/// QP safety filter on the composite barrier around the tracking nominal.
pub fn backstepping_controller(
    params: &ManipulatorParams,
    cfg: &BacksteppingConfig,
    k0: &VelocityFilter,
    x: &DVector<f64>,
    t: f64,
) -> Result<BacksteppingOutput> {
    let (q, v) = split_state(x);
    let (phi, hm) = params.drift_and_gain(&q, &v)?;
    let mass = params.mass_matrix(&q);
    let cmd = k0.command(&q, t)?;

    let e = v - cmd.v;
    let mu = cfg.mu;
    let b = cmd.h - e.norm_squared() / (2.0 * mu);
    let grad_h = Vector2::new(0.0, -1.0);
    let db_dq = grad_h + cmd.jac_q.transpose() * e / mu;
    let db_dv = -e / mu;
    let db_dt = e.dot(&cmd.d_dt) / mu;
    let c_b = db_dq.dot(&v) + db_dv.dot(&phi) + db_dt + cfg.alpha_b * b;
    let d_b = hm.transpose() * db_dv;

    let k0_dot = cmd.jac_q * v + cmd.d_dt;
    let kp_bar = Vector2::from(cfg.kp_bar);
    let k_d = mass * (-phi + k0_dot - kp_bar.component_mul(&e));

    let torque = if cfg.filter_torque {
        let shifted = AffineConstraint::new(
            c_b + d_b.dot(&k_d),
            DVector::from_column_slice(d_b.as_slice()),
        )?;
        let corr = evaluate_controller(&ControllerSpec::Qp, &shifted, x, t)?;
        k_d + Vector2::new(corr.u[0], corr.u[1])
    } else {
        k_d
    };
    Ok(BacksteppingOutput {
        torque,
        b,
        c_b,
        d_b,
        k_d,
        k0: cmd,
    })
}

/// Full-order closed loop `[q; v]` under the backstepping torque.
#[derive(Debug, Clone)]
pub struct BacksteppingFeedback {
    pub params: ManipulatorParams,
    pub cfg: BacksteppingConfig,
    pub filter: VelocityFilter,
}

impl BacksteppingFeedback {
    pub fn new(
        params: ManipulatorParams,
        cfg: BacksteppingConfig,
        design: VelocityDesign,
    ) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        Ok(Self {
            params,
            cfg,
            filter: VelocityFilter::new(design)?,
        })
    }

    pub fn evaluate(&self, x: &DVector<f64>, t: f64) -> Result<BacksteppingOutput> {
        backstepping_controller(&self.params, &self.cfg, &self.filter, x, t)
    }

    /// Starts on the reference at `t = 0` with `v = q_d'(0)`.
    pub fn default_x0(&self) -> DVector<f64> {
        let r = &self.filter.design.reference;
        let (q, v) = (r.position(0.0), r.velocity(0.0));
        DVector::from_vec(vec![q[0], q[1], v[0], v[1]])
    }

    /// `|v - k0(q, t)|`.
    pub fn tracking_error(&self, x: &DVector<f64>, t: f64) -> Result<f64> {
        let (q, v) = split_state(x);
        Ok((v - self.filter.command(&q, t)?.v).norm())
    }

    pub fn run(&self, x0: &DVector<f64>, cfg: &SimConfig) -> Result<Trajectory> {
        run_feedback(&self.params.system()?, self, x0, cfg, None)
    }
}

impl Feedback for BacksteppingFeedback {
    fn control(&self, x: &DVector<f64>, t: f64) -> Result<FeedbackSample> {
        let out = self.evaluate(x, t)?;
        let constraint =
            AffineConstraint::new(out.c_b, DVector::from_column_slice(out.d_b.as_slice()))?;
        Ok(FeedbackSample {
            u: DVector::from_column_slice(out.torque.as_slice()),
            h: out.k0.h,
            constraint,
            kappa: 0.0,
            margin: if out.c_b + out.d_b.dot(&out.k_d) != 0.0 {
                0.0
            } else {
                f64::NAN
            },
        })
    }

    /// The composite barrier, which lower-bounds `h`.
    fn initial_h(&self, x: &DVector<f64>) -> f64 {
        self.evaluate(x, 0.0).map(|o| o.b).unwrap_or(f64::NAN)
    }
}

/// `max_k |u_k - k_d(x_k, t_k)|` over a recorded trajectory.
pub fn max_correction_norm(traj: &Trajectory, nominal: &NominalController) -> f64 {
    traj.states
        .iter()
        .zip(&traj.inputs)
        .zip(&traj.times)
        .map(|((x, u), &t)| (u - nominal.eval(x, t)).norm())
        .fold(0.0, f64::max)
}

/// One row of the bounded-input study.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedInputRow {
    pub eta: f64,
    /// Largest filter correction of the unbounded tunable run.
    pub max_correction: f64,
    pub satisfies_bound: bool,
    /// The bounded-input run kept the tunable term admissible at every step.
    pub valid_under_bi: bool,
    /// Largest correction of the bounded-input run (up to a failure, if any).
    pub bi_max_correction: f64,
    pub bi_failure: Option<String>,
}

/// Runs the unbounded and the bounded-input filter for every `eta`.
pub fn bounded_input_study(
    gamma: f64,
    etas: &[f64],
    sigma: f64,
    cfg: &SimConfig,
) -> Result<Vec<BoundedInputRow>> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(CbfError::Config(format!(
            "input bound must be positive, got {gamma}"
        )));
    }
    etas.par_iter()
        .map(|&eta| {
            let plain = velocity_level_scenario(eta, sigma)?;
            let traj = plain.run(cfg)?;
            if let Some(f) = &traj.failure {
                return Err(CbfError::Config(format!(
                    "unbounded run with eta = {eta} failed at {f}"
                )));
            }
            let max_correction = max_correction_norm(&traj, &plain.nominal);

            let bi = velocity_level_scenario_with(VelocityDesign::new(
                VirtualKind::BoundedInput {
                    eta: Some(eta),
                    gamma,
                },
                sigma,
            ))?;
            let bi_traj = bi.run(cfg)?;
            Ok(BoundedInputRow {
                eta,
                max_correction,
                satisfies_bound: max_correction <= gamma,
                valid_under_bi: bi_traj.is_complete(),
                bi_max_correction: max_correction_norm(&bi_traj, &bi.nominal),
                bi_failure: bi_traj.failure.map(|f| f.to_string()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gravity_compensation_holds_the_arm() {
        let p = ManipulatorParams::default();
        let q = Vector2::new(0.4, -1.1);
        let z = Vector2::zeros();
        let acc = p.dynamics(&q, &z, &p.gravity_torque(&q)).unwrap();
        assert!(acc.norm() < 1e-12);
    }

    #[test]
    fn mass_matrix_is_symmetric_positive_definite() {
        let p = ManipulatorParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let q = Vector2::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            let m = p.mass_matrix(&q);
            assert_eq!(m, m.transpose());
            let eig = m.symmetric_eigenvalues();
            assert!(eig.min() > 0.0);
        }
    }

    #[test]
    fn coriolis_is_skew_compatible() {
        // x^T (M' - 2C) x = 0
        let p = ManipulatorParams {
            m1: 1.3,
            m2: 0.7,
            l1: 0.9,
            l2: 1.2,
            gravity: 9.8,
        };
        let q = Vector2::new(0.3, 1.1);
        let qd = Vector2::new(-0.8, 1.7);
        let eps = 1e-6;
        let mdot = (p.mass_matrix(&(q + qd * eps)) - p.mass_matrix(&(q - qd * eps))) / (2.0 * eps);
        let s = mdot - 2.0 * p.coriolis(&q, &qd);
        let x = Vector2::new(0.5, -2.0);
        assert!(x.dot(&(s * x)).abs() < 1e-8);
    }

    #[test]
    fn gravity_is_the_potential_gradient() {
        let p = ManipulatorParams::default();
        let q = Vector2::new(0.7, -0.2);
        let eps = 1e-6;
        for j in 0..2 {
            let mut a = q;
            let mut b = q;
            a[j] += eps;
            b[j] -= eps;
            let fd = (p.potential_energy(&a) - p.potential_energy(&b)) / (2.0 * eps);
            assert!((fd - p.gravity_torque(&q)[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn velocity_filter_matches_the_generic_controller() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [
            VirtualKind::Qp,
            VirtualKind::Sontag,
            VirtualKind::Tunable { eta: 0.7 },
            VirtualKind::BoundedInput {
                eta: None,
                gamma: 2.3,
            },
        ] {
            let design = VelocityDesign::new(kind, 0.2);
            let sc = velocity_level_scenario_with(design).unwrap();
            let filter = VelocityFilter::new(design).unwrap();
            for _ in 0..200 {
                let q = Vector2::new(rng.random_range(-2.0..3.0), rng.random_range(-1.0..1.0));
                let t = rng.random_range(0.0..10.0);
                let x = DVector::from_column_slice(q.as_slice());
                let con = crate::model::evaluate_constraint(&sc.system, &sc.barrier, &x).unwrap();
                let generic = match evaluate_controller(&sc.spec, &con, &x, t) {
                    Ok(o) => o,
                    Err(_) => continue,
                };
                let cmd = filter.command(&q, t).unwrap();
                assert!((cmd.v[0] - generic.u[0]).abs() < 1e-12);
                assert!((cmd.v[1] - generic.u[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [
            VirtualKind::Qp,
            VirtualKind::Sontag,
            VirtualKind::Tunable { eta: 0.7 },
            VirtualKind::Tunable { eta: 0.5 },
        ] {
            let filter = VelocityFilter::new(VelocityDesign::new(kind, 0.2)).unwrap();
            let mut checked = 0;
            while checked < 100 {
                let q = Vector2::new(rng.random_range(-2.0..3.0), rng.random_range(-1.0..1.0));
                let t = rng.random_range(0.0..10.0);
                let cmd = filter.command(&q, t).unwrap();
                if cmd.c_bar.abs() < 1e-3 {
                    continue;
                }
                let (jac, dt) = filter.fd_jacobians(&q, t, 1e-6).unwrap();
                assert!((jac - cmd.jac_q).abs().max() < 1e-4, "{kind:?}");
                assert!((dt - cmd.d_dt).abs().max() < 1e-4, "{kind:?}");
                checked += 1;
            }
        }
    }

    #[test]
    fn tracking_manifold_is_invariant_under_the_nominal() {
        let fb = BacksteppingFeedback::new(
            ManipulatorParams::default(),
            BacksteppingConfig::default(),
            VelocityDesign::new(VirtualKind::Tunable { eta: 0.7 }, 0.2),
        )
        .unwrap();
        let q = Vector2::new(0.5, 0.2);
        let t = 1.3;
        let k0 = fb.filter.command(&q, t).unwrap();
        let x = DVector::from_vec(vec![q[0], q[1], k0.v[0], k0.v[1]]);
        let out = fb.evaluate(&x, t).unwrap();
        assert!((out.b - out.k0.h).abs() < 1e-15);
        assert!(out.d_b.norm() < 1e-15);
        // v' = Phi + H k_d = k0'
        let (phi, hm) = fb.params.drift_and_gain(&q, &k0.v).unwrap();
        let vdot = phi + hm * out.k_d;
        let k0_dot = k0.jac_q * k0.v + k0.d_dt;
        assert!((vdot - k0_dot).norm() < 1e-10);
    }

    #[test]
    fn composite_barrier_rate_matches_finite_differences() {
        let fb = BacksteppingFeedback::new(
            ManipulatorParams::default(),
            BacksteppingConfig::default(),
            VelocityDesign::new(VirtualKind::Tunable { eta: 0.7 }, 0.2),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.8, 0.3, 1.1, -0.4]);
        let t = 0.6;
        let out = fb.evaluate(&x, t).unwrap();
        let u = Vector2::new(0.7, -1.9);
        let sys = fb.params.system().unwrap();
        let xdot = sys
            .vector_field(&x, &DVector::from_column_slice(u.as_slice()))
            .unwrap();
        let eps = 1e-6;
        let b_at = |dx: f64| fb.evaluate(&(&x + &xdot * dx), t + dx).unwrap().b;
        let fd = (b_at(eps) - b_at(-eps)) / (2.0 * eps);
        let analytic = out.c_b - fb.cfg.alpha_b * out.b + out.d_b.dot(&u);
        assert!((fd - analytic).abs() < 1e-6, "fd {fd} analytic {analytic}");
    }
}
