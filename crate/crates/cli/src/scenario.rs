//! Turns a validated [`ScenarioConfig`] into runnable objects.

use anyhow::{anyhow, bail, ensure, Context, Result};
use nalgebra::{DMatrix, DVector};
use tunable_cbf::manipulator::{
    BacksteppingConfig, BacksteppingFeedback, ManipulatorParams, VelocityDesign, VirtualKind,
};
use tunable_cbf::simulate::{run_feedback, CbfFeedback};
use tunable_cbf::{
    BarrierFunction, ControlAffineSystem, ControllerSpec, DisturbanceSpec, ExtendedClassK,
    Integrator, NominalController, ShapingFunction, SimConfig, Trajectory, TunableTermPolicy,
};

use crate::config::{
    BarrierKind, ControllerConfig, ControllerKind, DisturbanceKind, IntegratorName, Level,
    NominalKind, ScenarioConfig, SystemKind,
};

/// A closed-form controller on a single barrier.
#[derive(Debug, Clone)]
pub struct FormulaScenario {
    pub system: ControlAffineSystem,
    pub barrier: BarrierFunction,
    pub spec: ControllerSpec,
    pub x0: DVector<f64>,
}

#[derive(Debug, Clone)]
pub enum Plant {
    Formula(FormulaScenario),
    /// Two-link arm driven at torque level through the backstepping barrier.
    Backstepping {
        feedback: BacksteppingFeedback,
        system: ControlAffineSystem,
        x0: DVector<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub plant: Plant,
    pub sim: SimConfig,
    pub disturbance: Option<DisturbanceSpec>,
}

impl Scenario {
    pub fn x0(&self) -> &DVector<f64> {
        match &self.plant {
            Plant::Formula(f) => &f.x0,
            Plant::Backstepping { x0, .. } => x0,
        }
    }

    pub fn run(&self) -> Result<Trajectory> {
        let dist = self.disturbance.as_ref();
        let traj = match &self.plant {
            Plant::Formula(f) => {
                let fb = CbfFeedback {
                    sys: &f.system,
                    spec: &f.spec,
                    barrier: &f.barrier,
                };
                run_feedback(&f.system, &fb, &f.x0, &self.sim, dist)?
            }
            Plant::Backstepping {
                feedback,
                system,
                x0,
            } => run_feedback(system, feedback, x0, &self.sim, dist)?,
        };
        Ok(traj)
    }

    /// Nominal input used to measure filter corrections, if the controller is a filter.
    pub fn nominal(&self) -> Option<&NominalController> {
        match &self.plant {
            Plant::Formula(f) => f.spec.nominal(),
            Plant::Backstepping { .. } => None,
        }
    }

    pub fn formula(&self) -> Option<&FormulaScenario> {
        match &self.plant {
            Plant::Formula(f) => Some(f),
            Plant::Backstepping { .. } => None,
        }
    }
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| anyhow!("missing key `{key}`"))
}

fn check_len(v: &[f64], n: usize, key: &str) -> Result<()> {
    ensure!(
        v.len() == n,
        "`{key}` must have {n} entries, got {}",
        v.len()
    );
    ensure!(v.iter().all(|e| e.is_finite()), "`{key}` must be finite");
    Ok(())
}

fn shaping(c: &ControllerConfig) -> Result<ShapingFunction> {
    Ok(ShapingFunction::linear(c.sigma)?)
}

fn policy(c: &ControllerConfig) -> Result<TunableTermPolicy> {
    match (c.eta, c.kappa) {
        (Some(_), Some(_)) => bail!("`controller.eta` and `controller.kappa` are exclusive"),
        (Some(eta), None) => Ok(TunableTermPolicy::eta_constant(eta)?),
        (None, Some(kappa)) => {
            ensure!(
                kappa > 0.0 && kappa <= 1.0,
                "`controller.kappa` must lie in (0, 1], got {kappa}"
            );
            Ok(TunableTermPolicy::kappa_direct(move |_| kappa))
        }
        (None, None) => bail!("missing key `controller.eta` (or `controller.kappa`)"),
    }
}

/// The half-space formula, without any nominal wrapper.
fn kernel(c: &ControllerConfig) -> Result<ControllerSpec> {
    Ok(match c.kind {
        ControllerKind::Qp => ControllerSpec::Qp,
        ControllerKind::Sontag => ControllerSpec::sontag(shaping(c)?),
        ControllerKind::Tunable if c.relu => ControllerSpec::tunable_relu(shaping(c)?, policy(c)?),
        ControllerKind::Tunable => ControllerSpec::tunable(shaping(c)?, policy(c)?),
        ControllerKind::BoundedInput => {
            let gamma = required(c.gamma, "controller.gamma")?;
            if c.eta.is_none() && c.kappa.is_none() {
                ControllerSpec::bounded_input_lin_sontag(shaping(c)?, gamma)?
            } else {
                ControllerSpec::bounded_input(shaping(c)?, policy(c)?, gamma)?
            }
        }
    })
}

fn virtual_kind(c: &ControllerConfig) -> Result<VirtualKind> {
    ensure!(
        c.kappa.is_none(),
        "`controller.kappa` is not supported for two_link"
    );
    ensure!(!c.relu, "`controller.relu` is not supported for two_link");
    Ok(match c.kind {
        ControllerKind::Qp => VirtualKind::Qp,
        ControllerKind::Sontag => VirtualKind::Sontag,
        ControllerKind::Tunable => VirtualKind::Tunable {
            eta: required(c.eta, "controller.eta")?,
        },
        ControllerKind::BoundedInput => VirtualKind::BoundedInput {
            eta: c.eta,
            gamma: required(c.gamma, "controller.gamma")?,
        },
    })
}

fn sim_config(cfg: &ScenarioConfig) -> SimConfig {
    SimConfig {
        dt: cfg.sim.dt,
        horizon: cfg.sim.horizon,
        integrator: match cfg.sim.integrator {
            IntegratorName::Rk4 => Integrator::Rk4,
            IntegratorName::Euler => Integrator::Euler,
        },
        record_every: cfg.sim.record_every,
        zoh: cfg.sim.zoh,
        require_safe_start: cfg.sim.require_safe_start,
    }
}

fn disturbance(cfg: &ScenarioConfig, input_dim: usize) -> Result<Option<DisturbanceSpec>> {
    let Some(d) = &cfg.disturbance else {
        return Ok(None);
    };
    let spec = match d.kind {
        DisturbanceKind::Constant => {
            let v = required(d.value.as_ref(), "disturbance.value")?;
            check_len(v, input_dim, "disturbance.value")?;
            DisturbanceSpec::Constant(DVector::from_column_slice(v))
        }
        DisturbanceKind::Sinusoidal => {
            let a = required(d.amplitude.as_ref(), "disturbance.amplitude")?;
            check_len(a, input_dim, "disturbance.amplitude")?;
            DisturbanceSpec::Sinusoidal {
                amplitude: DVector::from_column_slice(a),
                freq: required(d.freq, "disturbance.freq")?,
            }
        }
        DisturbanceKind::BoundedRandom => DisturbanceSpec::BoundedRandom {
            magnitude: required(d.magnitude, "disturbance.magnitude")?,
            seed: d
                .seed
                .or(cfg.seed)
                .ok_or_else(|| anyhow!("missing key `disturbance.seed` (or top-level `seed`)"))?,
        },
    };
    spec.validate(input_dim)?;
    Ok(Some(spec))
}

fn integrator_system(kind: SystemKind, dim: usize) -> Result<ControlAffineSystem> {
    Ok(match kind {
        SystemKind::SingleIntegrator => ControlAffineSystem::new(
            dim,
            dim,
            move |_| DVector::zeros(dim),
            move |_| DMatrix::identity(dim, dim),
        )?,
        SystemKind::DoubleIntegrator => ControlAffineSystem::new(
            2,
            1,
            |x| DVector::from_vec(vec![x[1], 0.0]),
            |_| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        )?,
        SystemKind::TwoLink => unreachable!("two_link is built separately"),
    })
}

fn barrier(cfg: &ScenarioConfig, n: usize) -> Result<BarrierFunction> {
    let b = &cfg.barrier;
    let class_k = ExtendedClassK::linear(b.alpha)?;
    let index = |key| -> Result<usize> {
        let i = required(b.index, key)?;
        ensure!(
            i < n,
            "`barrier.index` = {i} is out of range for a {n}-dimensional state"
        );
        Ok(i)
    };
    Ok(match b.kind {
        BarrierKind::UpperBound => {
            let i = index("barrier.index")?;
            let bound = required(b.bound, "barrier.bound")?;
            BarrierFunction::new(
                move |x| bound - x[i],
                move |x| {
                    let mut g = DVector::zeros(x.len());
                    g[i] = -1.0;
                    g
                },
                class_k,
            )
        }
        BarrierKind::LowerBound => {
            let i = index("barrier.index")?;
            let bound = required(b.bound, "barrier.bound")?;
            BarrierFunction::new(
                move |x| x[i] - bound,
                move |x| {
                    let mut g = DVector::zeros(x.len());
                    g[i] = 1.0;
                    g
                },
                class_k,
            )
        }
        BarrierKind::Disk => {
            let center = required(b.center.clone(), "barrier.center")?;
            let radius = required(b.radius, "barrier.radius")?;
            ensure!(
                !center.is_empty() && center.len() <= n,
                "`barrier.center` must have between 1 and {n} entries"
            );
            ensure!(radius > 0.0, "`barrier.radius` must be positive");
            let k = center.len();
            let c1 = center.clone();
            BarrierFunction::new(
                move |x| radius * radius - (0..k).map(|j| (x[j] - c1[j]).powi(2)).sum::<f64>(),
                move |x| {
                    let mut g = DVector::zeros(x.len());
                    for j in 0..k {
                        g[j] = -2.0 * (x[j] - center[j]);
                    }
                    g
                },
                class_k,
            )
        }
        BarrierKind::Stopping => {
            ensure!(
                cfg.system.kind == SystemKind::DoubleIntegrator,
                "barrier kind `stopping` needs the double_integrator system"
            );
            let bound = required(b.bound, "barrier.bound")?;
            let decel = required(b.decel, "barrier.decel")?;
            ensure!(decel > 0.0, "`barrier.decel` must be positive");
            BarrierFunction::new(
                move |x| bound - x[0] - x[1].max(0.0) * x[1] / (2.0 * decel),
                move |x| DVector::from_vec(vec![-1.0, -x[1].max(0.0) / decel]),
                class_k,
            )
        }
    })
}

fn nominal(cfg: &ScenarioConfig, n: usize, m: usize) -> Result<Option<NominalController>> {
    let Some(nc) = &cfg.controller.nominal else {
        return Ok(None);
    };
    Ok(Some(match nc.kind {
        NominalKind::Zero => NominalController::zero(m),
        NominalKind::Constant => {
            let v = required(nc.value.as_ref(), "controller.nominal.value")?;
            check_len(v, m, "controller.nominal.value")?;
            let v = DVector::from_column_slice(v);
            NominalController::new(move |_, _| v.clone())
        }
        NominalKind::Setpoint => {
            let target = required(nc.target.clone(), "controller.nominal.target")?;
            let kp = required(nc.kp, "controller.nominal.kp")?;
            match cfg.system.kind {
                SystemKind::SingleIntegrator => {
                    check_len(&target, n, "controller.nominal.target")?;
                    let target = DVector::from_vec(target);
                    NominalController::new(move |x, _| (x - &target) * -kp)
                }
                SystemKind::DoubleIntegrator => {
                    check_len(&target, 1, "controller.nominal.target")?;
                    let kd = required(nc.kd, "controller.nominal.kd")?;
                    let p = target[0];
                    NominalController::new(move |x, _| {
                        DVector::from_element(1, -kp * (x[0] - p) - kd * x[1])
                    })
                }
                SystemKind::TwoLink => unreachable!(),
            }
        }
        NominalKind::Reference => {
            bail!("nominal kind `reference` is only available for two_link")
        }
    }))
}

fn initial_state(cfg: &ScenarioConfig, n: usize, default: DVector<f64>) -> Result<DVector<f64>> {
    match &cfg.system.x0 {
        Some(x0) => {
            check_len(x0, n, "system.x0")?;
            Ok(DVector::from_column_slice(x0))
        }
        None => Ok(default),
    }
}

fn two_link(cfg: &ScenarioConfig) -> Result<Plant> {
    let s = &cfg.system;
    let b = &cfg.barrier;
    ensure!(
        b.kind == BarrierKind::UpperBound && b.index == Some(1),
        "two_link supports the elbow limit only: barrier kind `upper_bound` with index = 1"
    );
    if let Some(nc) = &cfg.controller.nominal {
        ensure!(
            nc.kind == NominalKind::Reference,
            "two_link uses the `reference` nominal; set the gain with `system.kp`"
        );
    }
    let mut design = VelocityDesign::new(virtual_kind(&cfg.controller)?, cfg.controller.sigma);
    design.q2_max = required(b.bound, "barrier.bound")?;
    design.alpha = b.alpha;
    if let Some(kp) = s.kp {
        design.kp = kp;
    }
    match s.level {
        Level::Velocity => {
            let sc = tunable_cbf::manipulator::velocity_level_scenario_with(design)?;
            let x0 = initial_state(cfg, 2, sc.x0.clone())?;
            Ok(Plant::Formula(FormulaScenario {
                system: sc.system,
                barrier: sc.barrier,
                spec: sc.spec,
                x0,
            }))
        }
        Level::Torque => {
            let d = ManipulatorParams::default();
            let params = ManipulatorParams {
                m1: s.m1.unwrap_or(d.m1),
                m2: s.m2.unwrap_or(d.m2),
                l1: s.l1.unwrap_or(d.l1),
                l2: s.l2.unwrap_or(d.l2),
                gravity: s.gravity.unwrap_or(d.gravity),
            };
            let mut bcfg = BacksteppingConfig::default();
            if let Some(bs) = &cfg.backstepping {
                bcfg.mu = bs.mu.unwrap_or(bcfg.mu);
                bcfg.kp_bar = bs.kp_bar.unwrap_or(bcfg.kp_bar);
                bcfg.alpha_b = bs.alpha_b.unwrap_or(bcfg.alpha_b);
                bcfg.filter_torque = bs.filter_torque.unwrap_or(bcfg.filter_torque);
            }
            let feedback = BacksteppingFeedback::new(params, bcfg, design)?;
            let x0 = initial_state(cfg, 4, feedback.default_x0())?;
            Ok(Plant::Backstepping {
                system: params.system()?,
                feedback,
                x0,
            })
        }
    }
}

impl Scenario {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self> {
        let s = &cfg.system;
        if s.kind != SystemKind::TwoLink {
            ensure!(
                s.m1.is_none()
                    && s.m2.is_none()
                    && s.l1.is_none()
                    && s.l2.is_none()
                    && s.gravity.is_none()
                    && s.kp.is_none()
                    && s.level == Level::Velocity,
                "arm parameters are only valid for two_link"
            );
            ensure!(
                cfg.backstepping.is_none(),
                "[backstepping] is only valid for two_link"
            );
        }
        if s.kind != SystemKind::SingleIntegrator {
            ensure!(
                s.dim.is_none(),
                "`system.dim` is only valid for single_integrator"
            );
        }
        if s.kind == SystemKind::TwoLink && s.level == Level::Velocity {
            ensure!(
                cfg.backstepping.is_none(),
                "[backstepping] needs `system.level = \"torque\"`"
            );
        }
        let plant = match s.kind {
            SystemKind::TwoLink => two_link(cfg)?,
            kind => {
                let n = match kind {
                    SystemKind::SingleIntegrator => s.dim.unwrap_or(1),
                    _ => 2,
                };
                ensure!(n > 0, "`system.dim` must be positive");
                let system = integrator_system(kind, n)?;
                let m = system.input_dim();
                let barrier = barrier(cfg, n)?;
                let inner = kernel(&cfg.controller)?;
                let spec = match nominal(cfg, n, m)? {
                    Some(k) => ControllerSpec::safety_filter(inner, k)?,
                    None => inner,
                };
                let x0 = initial_state(cfg, n, DVector::zeros(n))?;
                Plant::Formula(FormulaScenario {
                    system,
                    barrier,
                    spec,
                    x0,
                })
            }
        };
        let input_dim = match &plant {
            Plant::Formula(f) => f.system.input_dim(),
            Plant::Backstepping { system, .. } => system.input_dim(),
        };
        let sim = sim_config(cfg);
        sim.validate().context("invalid [sim] section")?;
        Ok(Self {
            disturbance: disturbance(cfg, input_dim)?,
            plant,
            sim,
        })
    }
}

/// The same controller without its input bound; other kinds are returned as is.
pub fn unbounded_counterpart(spec: &ControllerSpec) -> ControllerSpec {
    match spec {
        ControllerSpec::BoundedInput {
            shaping, policy, ..
        } => ControllerSpec::tunable_relu(shaping.clone(), policy.clone()),
        ControllerSpec::SafetyFilter { inner, nominal } => ControllerSpec::SafetyFilter {
            inner: Box::new(unbounded_counterpart(inner)),
            nominal: nominal.clone(),
        },
        other => other.clone(),
    }
}
