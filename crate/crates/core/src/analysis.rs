//! Safety margins, input-bound compatibility, disturbance residuals and a
//! finite-difference smoothness probe.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CbfError, Result};
use crate::formulas::{evaluate_controller, ControllerSpec};
use crate::model::{
    evaluate_constraint, gamma_sontag, gamma_sontag_parts, AffineConstraint, BarrierFunction,
    ControlAffineSystem, ShapingFunction,
};

const MARGIN_EPS: f64 = 1e-12;

/// `M = -1 + c / (c - kappa * Gamma)`.
pub fn margin_from_parts(c: f64, kappa: f64, gamma_stg: f64) -> Result<f64> {
    let denominator = c - kappa * gamma_stg;
    if denominator.abs() <= MARGIN_EPS {
        return Err(CbfError::DegenerateMargin { denominator });
    }
    Ok(-1.0 + c / denominator)
}

pub fn safety_margin_at(con: &AffineConstraint, kappa: f64, s: &ShapingFunction) -> Result<f64> {
    margin_from_parts(con.c, kappa, gamma_sontag(con, s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Compatibility {
    Compatible,
    Incompatible { deficit: f64 },
}

impl Compatibility {
    pub fn is_compatible(&self) -> bool {
        matches!(self, Self::Compatible)
    }
}

/// Some `|u| <= gamma` satisfies `c + d u >= 0` iff `gamma |d| + c >= 0`.
pub fn check_compatibility(con: &AffineConstraint, gamma: f64) -> Compatibility {
    let slack = gamma * con.d_norm() + con.c;
    if slack >= 0.0 {
        Compatibility::Compatible
    } else {
        Compatibility::Incompatible { deficit: -slack }
    }
}

/// Right endpoint `(gamma |d| + c) / Gamma` of the bounded-input range.
pub fn kappa_bi_upper(con: &AffineConstraint, gamma: f64, s: &ShapingFunction) -> Result<f64> {
    match check_compatibility(con, gamma) {
        Compatibility::Incompatible { deficit } => Err(CbfError::Incompatible { deficit }),
        Compatibility::Compatible => {
            let g = gamma_sontag(con, s);
            if g == 0.0 {
                return Err(CbfError::Domain {
                    c: con.c,
                    d_sq: con.d_norm_sq(),
                });
            }
            Ok((gamma * con.d_norm() + con.c) / g)
        }
    }
}

/// Slope jump of `lam(c, d_sq)` across `c = 0` at fixed `d_sq`.
///
/// The one-sided slopes are central differences centred at `c = +step` and
/// `c = -step`.
pub fn probe_derivative_jump<F>(lam: F, d_sq: f64, step: f64) -> f64
where
    F: Fn(f64, f64) -> f64,
{
    let at_zero = lam(0.0, d_sq);
    let above = (lam(2.0 * step, d_sq) - at_zero) / (2.0 * step);
    let below = (at_zero - lam(-2.0 * step, d_sq)) / (2.0 * step);
    (above - below).abs()
}

/// Additive input disturbance `w(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceSpec {
    Constant(DVector<f64>),
    /// `amplitude * sin(freq * t)`, componentwise.
    Sinusoidal {
        amplitude: DVector<f64>,
        freq: f64,
    },
    /// Uniform in the cube of half-width `magnitude / sqrt(m)`, so `|w| <= magnitude`.
    /// Each time instant draws from its own stream, making `w` a pure function of `t`.
    BoundedRandom {
        magnitude: f64,
        seed: u64,
    },
}

impl DisturbanceSpec {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let check_len = |v: &DVector<f64>| {
            if v.len() != input_dim {
                return Err(CbfError::DimensionMismatch {
                    what: "disturbance",
                    expected: input_dim.to_string(),
                    got: v.len().to_string(),
                });
            }
            if v.iter().any(|e| !e.is_finite()) {
                return Err(CbfError::NonFinite("disturbance"));
            }
            Ok(())
        };
        match self {
            Self::Constant(w) => check_len(w),
            Self::Sinusoidal { amplitude, freq } => {
                check_len(amplitude)?;
                if !freq.is_finite() {
                    return Err(CbfError::NonFinite("disturbance frequency"));
                }
                Ok(())
            }
            Self::BoundedRandom { magnitude, .. } => {
                if !(magnitude.is_finite() && *magnitude >= 0.0) {
                    return Err(CbfError::Config(format!(
                        "disturbance magnitude must be finite and nonnegative, got {magnitude}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, input_dim: usize, t: f64) -> DVector<f64> {
        match self {
            Self::Constant(w) => w.clone(),
            Self::Sinusoidal { amplitude, freq } => amplitude * (freq * t).sin(),
            Self::BoundedRandom { magnitude, seed } => {
                if input_dim == 0 {
                    return DVector::zeros(0);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(t.to_bits());
                let half = magnitude / (input_dim as f64).sqrt();
                DVector::from_fn(input_dim, |_, _| half * rng.random_range(-1.0..=1.0))
            }
        }
    }
}

/// `c + d (u + w(t))` for the controller output `u` at `x`.
pub fn disturbed_residual(
    spec: &ControllerSpec,
    con: &AffineConstraint,
    x: &DVector<f64>,
    w: &DisturbanceSpec,
    t: f64,
) -> Result<f64> {
    let out = evaluate_controller(spec, con, x, t)?;
    let w_t = w.eval(con.d.len(), t);
    if w_t.len() != out.u.len() {
        return Err(CbfError::DimensionMismatch {
            what: "disturbance",
            expected: out.u.len().to_string(),
            got: w_t.len().to_string(),
        });
    }
    Ok(con.residual(&(out.u + w_t)))
}

/// Pointwise margin for an evaluated controller; the QP kind uses `kappa = 0`.
pub fn controller_margin(
    spec: &ControllerSpec,
    con: &AffineConstraint,
    x: &DVector<f64>,
    t: f64,
) -> Result<f64> {
    let out = evaluate_controller(spec, con, x, t)?;
    let kappa = out.kappa.unwrap_or(0.0);
    let gamma = match (out.gamma_stg, spec.shaping()) {
        (Some(g), _) => g,
        (None, Some(s)) => gamma_sontag_parts(out.effective_c, con.d_norm_sq(), s),
        (None, None) => 0.0,
    };
    margin_from_parts(out.effective_c, kappa, gamma)
}

/// Sample-based estimate of the margin supremum over a finite state set.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    pub m_of_x: Vec<f64>,
    /// Max of `m_of_x`; a sample estimate, not a certified supremum.
    pub xi_bar_estimate: f64,
    pub sample_count: usize,
}

/// Evaluates `M(x)` at every sample (in parallel). Any failing sample aborts
/// with its error.
pub fn estimate_margin(
    sys: &ControlAffineSystem,
    spec: &ControllerSpec,
    bar: &BarrierFunction,
    samples: &[DVector<f64>],
    t: f64,
) -> Result<MarginReport> {
    let m_of_x = samples
        .par_iter()
        .map(|x| {
            let con = evaluate_constraint(sys, bar, x)?;
            controller_margin(spec, &con, x, t)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MarginReport::from_values(m_of_x))
}

impl MarginReport {
    pub fn from_values(m_of_x: Vec<f64>) -> Self {
        let xi_bar_estimate = m_of_x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            sample_count: m_of_x.len(),
            m_of_x,
            xi_bar_estimate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulas::{kappa_from_eta, lambda_pmn, lambda_stg, lambda_tun_smooth};
    use crate::model::TunableTermPolicy;
    use nalgebra::dvector;

    fn sigma(v: f64) -> ShapingFunction {
        ShapingFunction::linear(v).unwrap()
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_from_parts(0.0, 0.7, 2.0).unwrap(), -1.0);
        let con = AffineConstraint::new(3.0, dvector![2.0]).unwrap();
        assert!((safety_margin_at(&con, 0.8, &sigma(1.0)).unwrap() + 4.0).abs() < 1e-12);
        let far = AffineConstraint::new(-1e6, dvector![1.0]).unwrap();
        let m = safety_margin_at(&far, 1.0, &sigma(0.2)).unwrap();
        assert!((m + 0.5).abs() < 1e-6 && m < -0.5);
        assert!(matches!(
            margin_from_parts(1.0, 0.5, 2.0),
            Err(CbfError::DegenerateMargin { .. })
        ));
    }

    #[test]
    fn compatibility_examples() {
        let con = AffineConstraint::new(-2.0, dvector![1.0]).unwrap();
        assert!(check_compatibility(&con, 2.3).is_compatible());
        let con = AffineConstraint::new(-3.0, dvector![1.0]).unwrap();
        match check_compatibility(&con, 2.3) {
            Compatibility::Incompatible { deficit } => assert!((deficit - 0.7).abs() < 1e-12),
            _ => panic!("expected incompatibility"),
        }
        let con = AffineConstraint::new(0.1, dvector![0.0]).unwrap();
        assert!(check_compatibility(&con, 1e-3).is_compatible());
    }

    #[test]
    fn kappa_bi_upper_examples() {
        let con = AffineConstraint::new(-2.0, dvector![1.0]).unwrap();
        let up = kappa_bi_upper(&con, 2.3, &sigma(0.2)).unwrap();
        assert!((up - 0.3 / 4.2f64.sqrt()).abs() < 1e-12);
        assert!((up - 0.14639).abs() < 1e-5);
        let con = AffineConstraint::new(0.0, dvector![1.0]).unwrap();
        assert_eq!(kappa_bi_upper(&con, 1.0, &sigma(1.0)).unwrap(), 1.0);
        let con = AffineConstraint::new(-1.5, dvector![1.0]).unwrap();
        assert_eq!(kappa_bi_upper(&con, 1.5, &sigma(1.0)).unwrap(), 0.0);
        let con = AffineConstraint::new(-3.0, dvector![1.0]).unwrap();
        assert!(matches!(
            kappa_bi_upper(&con, 2.3, &sigma(0.2)),
            Err(CbfError::Incompatible { .. })
        ));
    }

    #[test]
    fn derivative_jump_examples() {
        let s = sigma(0.2);
        let pmn = probe_derivative_jump(lambda_pmn, 1.0, 1e-5);
        assert!((pmn - 1.0).abs() < 1e-9);
        let stg = probe_derivative_jump(|c, d| lambda_stg(c, d, &s), 1.0, 1e-5);
        assert!(stg <= 1e-4);
        let half = probe_derivative_jump(
            |c, d| {
                let k = kappa_from_eta(c, d, 0.5, &s).unwrap();
                lambda_tun_smooth(c, d, k, &s).unwrap()
            },
            1.0,
            1e-5,
        );
        assert!(half <= 1e-4);
    }

    #[test]
    fn disturbed_residual_examples() {
        let s = sigma(0.2);
        let con = AffineConstraint::new(-0.4, dvector![1.0, 0.5]).unwrap();
        let x = dvector![0.0];
        let sontag = ControllerSpec::sontag(s.clone());
        let gamma = gamma_sontag(&con, &s);
        let zero = DisturbanceSpec::Constant(dvector![0.0, 0.0]);
        let r = disturbed_residual(&sontag, &con, &x, &zero, 0.0).unwrap();
        assert!((r - gamma).abs() < 1e-12);

        // d w = -0.5 Gamma
        let w = &con.d * (-0.5 * gamma / con.d_norm_sq());
        let push = DisturbanceSpec::Constant(w);
        let r_stg = disturbed_residual(&sontag, &con, &x, &push, 0.0).unwrap();
        let r_qp = disturbed_residual(&ControllerSpec::Qp, &con, &x, &push, 0.0).unwrap();
        assert!((r_stg - 0.5 * gamma).abs() < 1e-12);
        assert!((r_qp + 0.5 * gamma).abs() < 1e-12);

        let orth = DisturbanceSpec::Constant(dvector![0.5, -1.0]);
        let tun = ControllerSpec::tunable(s, TunableTermPolicy::EtaConstant(0.7));
        let a = disturbed_residual(&tun, &con, &x, &zero, 0.0).unwrap();
        let b = disturbed_residual(&tun, &con, &x, &orth, 0.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn random_disturbance_is_bounded_and_reproducible() {
        let w = DisturbanceSpec::BoundedRandom {
            magnitude: 0.3,
            seed: 7,
        };
        for k in 0..200 {
            let t = k as f64 * 1e-3;
            let a = w.eval(3, t);
            assert!(a.norm() <= 0.3 + 1e-15);
            assert_eq!(a, w.eval(3, t));
        }
        assert_ne!(w.eval(2, 0.0), w.eval(2, 1e-3));
        let other = DisturbanceSpec::BoundedRandom {
            magnitude: 0.3,
            seed: 8,
        };
        assert_ne!(w.eval(2, 0.5), other.eval(2, 0.5));
    }

    #[test]
    fn margin_report_takes_the_max() {
        let r = MarginReport::from_values(vec![-0.9, -0.6, -0.75]);
        assert_eq!(r.xi_bar_estimate, -0.6);
        assert_eq!(r.sample_count, 3);
    }
}
