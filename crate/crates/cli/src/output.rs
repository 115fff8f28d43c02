//! CSV emission and trajectory summaries.
//!
//! Numbers are written with `{:.16e}` (17 significant digits, Rust's own
//! formatter, so no locale) and rows end in a bare `\n`.

use std::fmt::Write as _;

use nalgebra::DVector;
use tunable_cbf::{NominalController, Trajectory};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trajectory_header(n: usize, m: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..n).map(|i| format!("x{i}")));
    cols.extend((0..m).map(|i| format!("u{i}")));
    cols.extend(["h", "residual", "kappa", "margin"].map(String::from));
    cols.join(",")
}

/// Renders a trajectory with header `t,x0..,u0..,h,residual,kappa,margin`.
pub fn trajectory_csv(traj: &Trajectory, n: usize, m: usize) -> String {
    let mut out = trajectory_header(n, m);
    out.push('\n');
    for k in 0..traj.len() {
        let mut fields = Vec::with_capacity(n + m + 5);
        fields.push(traj.times[k]);
        fields.extend(traj.states[k].iter());
        fields.extend(traj.inputs[k].iter());
        fields.extend([
            traj.h_values[k],
            traj.residuals[k],
            traj.kappas[k],
            traj.margins[k],
        ]);
        for (i, v) in fields.into_iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

/// Per-run numbers reported by the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub min_h: f64,
    /// Largest `|u - k_d|` for filters, `|u|` otherwise.
    pub max_input_norm: f64,
    /// Largest jump of the finite-difference derivative of the same signal.
    pub max_deriv_jump: f64,
    /// Smallest finite margin; NaN when none is defined.
    pub margin_min: f64,
}

/// The signal summarised by the sweep: the filter correction when a nominal
/// exists, the applied input otherwise.
pub fn input_signal(traj: &Trajectory, nominal: Option<&NominalController>) -> Vec<DVector<f64>> {
    match nominal {
        Some(k) => traj
            .states
            .iter()
            .zip(&traj.inputs)
            .zip(&traj.times)
            .map(|((x, u), &t)| u - k.eval(x, t))
            .collect(),
        None => traj.inputs.clone(),
    }
}

impl RunSummary {
    pub fn of(traj: &Trajectory, nominal: Option<&NominalController>) -> Self {
        let signal = input_signal(traj, nominal);
        let step = match traj.times.as_slice() {
            [a, b, ..] => b - a,
            _ => f64::NAN,
        };
        let max_deriv_jump = signal
            .windows(3)
            .map(|w| (&w[2] - &w[1] * 2.0 + &w[0]).norm() / step)
            .fold(0.0, f64::max);
        let margin_min = traj
            .margins
            .iter()
            .copied()
            .filter(|m| m.is_finite())
            .fold(f64::NAN, f64::min);
        Self {
            min_h: traj.min_h(),
            max_input_norm: signal.iter().map(|v| v.norm()).fold(0.0, f64::max),
            max_deriv_jump,
            margin_min,
        }
    }
}
