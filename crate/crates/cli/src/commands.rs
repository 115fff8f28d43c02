//! Subcommand implementations. Each returns the process exit code and writes
//! diagnostics to standard error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use tunable_cbf::analysis::{check_compatibility, controller_margin, Compatibility};
use tunable_cbf::simulate::Feedback;
use tunable_cbf::{
    evaluate_constraint, evaluate_controller, kappa_bi_upper, AffineConstraint, CbfError,
};

use crate::config::{CheckSection, ControllerKind, GridKind, ScenarioConfig};
use crate::output::{fmt_f64, trajectory_csv, RunSummary};
use crate::scenario::{unbounded_counterpart, FormulaScenario, Plant, Scenario};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_RUN: u8 = 2;
pub const EXIT_VIOLATION: u8 = 3;

/// Relative slack on the bounded-input upper endpoint of the kappa range.
const KAPPA_UPPER_RTOL: f64 = 1e-12;
/// Offending grid points spelled out on standard error.
const MAX_LISTED: usize = 10;

#[derive(Debug)]
pub enum CmdError {
    /// Bad config, bad arguments, unwritable output.
    Config(anyhow::Error),
    /// Infeasibility or blow-up during a run.
    Run(anyhow::Error),
    /// `check` found offending grid points.
    Violation(String),
}

impl CmdError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Run(_) => EXIT_RUN,
            Self::Violation(_) => EXIT_VIOLATION,
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(e) => write!(f, "config error: {e:#}"),
            Self::Run(e) => write!(f, "run failed: {e:#}"),
            Self::Violation(s) => write!(f, "check failed: {s}"),
        }
    }
}

type CmdResult<T> = std::result::Result<T, CmdError>;

fn config_err(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError::Config(e.into())
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: PathBuf,
    pub set: Vec<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub zoh: bool,
    pub strict_range: bool,
}

impl CommonArgs {
    pub fn new(config: impl Into<PathBuf>) -> Self {
        Self {
            config: config.into(),
            ..Self::default()
        }
    }

    fn overrides(&self, extra: &[String]) -> Vec<String> {
        let mut all = self.set.clone();
        if let Some(seed) = self.seed {
            all.push(format!("seed={seed}"));
        }
        if self.zoh {
            all.push("sim.zoh=true".into());
        }
        all.extend_from_slice(extra);
        all
    }

    fn load(&self, extra: &[String]) -> CmdResult<ScenarioConfig> {
        ScenarioConfig::load(&self.config, &self.overrides(extra)).map_err(config_err)
    }

    fn out_dir(&self, cfg: &ScenarioConfig) -> CmdResult<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))
            .map_err(config_err)?;
        Ok(dir)
    }
}

fn write_file(path: &Path, contents: &str) -> CmdResult<()> {
    fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(config_err)
}

fn finish(result: CmdResult<()>) -> u8 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("tuncbf: {e}");
            e.exit_code()
        }
    }
}

fn is_range_error(e: &CbfError) -> bool {
    matches!(
        e,
        CbfError::KappaRange { .. }
            | CbfError::Domain { .. }
            | CbfError::Incompatible { .. }
            | CbfError::Infeasible { .. }
    )
}

/// Evaluates the controller once at `(x0, 0)` and rejects the config if the
/// tunable term is already out of range there.
fn preverify_range(sc: &Scenario) -> CmdResult<()> {
    let at_x0 = match &sc.plant {
        Plant::Formula(f) => evaluate_constraint(&f.system, &f.barrier, &f.x0)
            .and_then(|con| evaluate_controller(&f.spec, &con, &f.x0, 0.0).map(|_| ())),
        Plant::Backstepping { feedback, x0, .. } => feedback.control(x0, 0.0).map(|_| ()),
    };
    match at_x0 {
        Err(e) if is_range_error(&e) => Err(CmdError::Config(anyhow!(
            "strict range: controller is out of range at the initial state: {e}"
        ))),
        _ => Ok(()),
    }
}

fn build(cfg: &ScenarioConfig, strict: bool) -> CmdResult<Scenario> {
    let sc = Scenario::build(cfg).map_err(config_err)?;
    if strict {
        preverify_range(&sc)?;
    }
    Ok(sc)
}

/// Runs the scenario; only start-up problems are errors, mid-run failures are
/// left in the trajectory.
fn run_scenario(sc: &Scenario) -> CmdResult<tunable_cbf::Trajectory> {
    sc.run().map_err(CmdError::Config)
}

fn dims(sc: &Scenario) -> (usize, usize) {
    match &sc.plant {
        Plant::Formula(f) => (f.system.state_dim(), f.system.input_dim()),
        Plant::Backstepping { system, .. } => (system.state_dim(), system.input_dim()),
    }
}

pub fn simulate(args: &CommonArgs) -> CmdResult<PathBuf> {
    let cfg = args.load(&[])?;
    let sc = build(&cfg, args.strict_range)?;
    let traj = run_scenario(&sc)?;
    let (n, m) = dims(&sc);
    let path = args.out_dir(&cfg)?.join("trajectory.csv");
    write_file(&path, &trajectory_csv(&traj, n, m))?;
    if let Some(f) = &traj.failure {
        return Err(CmdError::Run(anyhow!(
            "{f}; partial trajectory in {}",
            path.display()
        )));
    }
    eprintln!(
        "tuncbf: {} samples, min h = {}, written to {}",
        traj.len(),
        fmt_f64(traj.min_h()),
        path.display()
    );
    Ok(path)
}

pub fn cmd_simulate(args: &CommonArgs) -> u8 {
    finish(simulate(args).map(|_| ()))
}

/// Outcome of one sweep value.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub summary: Option<RunSummary>,
    /// `None` when the run completed.
    pub failure: Option<String>,
}

fn sweep_key(param: &str) -> String {
    if param.contains('.') {
        param.to_string()
    } else {
        format!("controller.{param}")
    }
}

fn sweep_one(args: &CommonArgs, key: &str, value: f64, dir: &Path, label: &str) -> SweepRow {
    let fail = |msg: String| SweepRow {
        value,
        summary: None,
        failure: Some(msg),
    };
    let sc = match args
        .load(&[format!("{key}={value:?}")])
        .and_then(|cfg| build(&cfg, args.strict_range))
    {
        Ok(sc) => sc,
        Err(e) => return fail(e.to_string()),
    };
    let traj = match run_scenario(&sc) {
        Ok(t) => t,
        Err(e) => return fail(e.to_string()),
    };
    let (n, m) = dims(&sc);
    let path = dir.join(format!("{label}_{value}.csv"));
    if let Err(e) = write_file(&path, &trajectory_csv(&traj, n, m)) {
        return fail(e.to_string());
    }
    SweepRow {
        value,
        summary: Some(RunSummary::of(&traj, sc.nominal())),
        failure: traj.failure.as_ref().map(|f| f.to_string()),
    }
}

/// One trajectory CSV per value, `summary.csv` with the metrics, and
/// `summary_status.csv` with the per-row outcome.
pub fn sweep(args: &CommonArgs, param: &str, values: &[f64]) -> CmdResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(config_err(anyhow!("no sweep values given")));
    }
    let key = sweep_key(param);
    // the swept key must exist in the schema and the base config must be valid
    let cfg = args.load(&[format!("{key}={:?}", values[0])])?;
    Scenario::build(&cfg).map_err(config_err)?;
    let dir = args.out_dir(&cfg)?;
    let label = key.rsplit('.').next().unwrap_or(&key).to_string();

    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|&v| sweep_one(args, &key, v, &dir, &label))
        .collect();

    let mut summary = format!("{label},min_h,max_input_norm,max_deriv_jump,margin_min\n");
    let mut status = format!("{label},status,detail\n");
    for row in &rows {
        let s = row.summary.unwrap_or(RunSummary {
            min_h: f64::NAN,
            max_input_norm: f64::NAN,
            max_deriv_jump: f64::NAN,
            margin_min: f64::NAN,
        });
        summary.push_str(
            &[
                row.value,
                s.min_h,
                s.max_input_norm,
                s.max_deriv_jump,
                s.margin_min,
            ]
            .map(fmt_f64)
            .join(","),
        );
        summary.push('\n');
        let (st, detail) = match &row.failure {
            None => ("ok", String::new()),
            Some(msg) => ("failed", msg.replace(['\n', ','], " ")),
        };
        status.push_str(&format!("{},{st},{detail}\n", fmt_f64(row.value)));
    }
    write_file(&dir.join("summary.csv"), &summary)?;
    write_file(&dir.join("summary_status.csv"), &status)?;

    let failed: Vec<String> = rows
        .iter()
        .filter_map(|r| {
            r.failure
                .as_ref()
                .map(|f| format!("{label} = {}: {f}", r.value))
        })
        .collect();
    if !failed.is_empty() {
        return Err(CmdError::Run(anyhow!(
            "{} run(s) failed:\n  {}",
            failed.len(),
            failed.join("\n  ")
        )));
    }
    Ok(rows)
}

pub fn cmd_sweep(args: &CommonArgs, param: &str, values: &[f64]) -> u8 {
    finish(sweep(args, param, values).map(|_| ()))
}

/// A state (and time) at which the controller is examined.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub t: f64,
    pub x: DVector<f64>,
}

fn formula_of(sc: &Scenario) -> CmdResult<&FormulaScenario> {
    sc.formula().ok_or_else(|| {
        config_err(anyhow!(
            "grid evaluation needs a single-barrier scenario; the torque-level arm is not supported"
        ))
    })
}

fn grid_points(cfg: &ScenarioConfig, sc: &Scenario) -> CmdResult<Vec<GridPoint>> {
    let check: &CheckSection = cfg
        .check
        .as_ref()
        .ok_or_else(|| config_err(anyhow!("missing key `check`")))?;
    let f = formula_of(sc)?;
    let n = f.system.state_dim();
    let points = match check.grid {
        GridKind::Box => {
            let lo = check
                .lo
                .as_ref()
                .ok_or_else(|| config_err(anyhow!("missing key `check.lo`")))?;
            let hi = check
                .hi
                .as_ref()
                .ok_or_else(|| config_err(anyhow!("missing key `check.hi`")))?;
            let per_axis = check
                .points
                .ok_or_else(|| config_err(anyhow!("missing key `check.points`")))?;
            if lo.len() != n || hi.len() != n {
                return Err(config_err(anyhow!(
                    "`check.lo` and `check.hi` need {n} entries"
                )));
            }
            box_grid(lo, hi, per_axis)
                .into_iter()
                .map(|x| GridPoint { t: check.t, x })
                .collect()
        }
        GridKind::Trajectory => {
            let unbounded = Scenario {
                plant: Plant::Formula(FormulaScenario {
                    spec: unbounded_counterpart(&f.spec),
                    ..f.clone()
                }),
                ..sc.clone()
            };
            let traj = run_scenario(&unbounded)?;
            if let Some(fail) = &traj.failure {
                eprintln!(
                    "tuncbf: unbounded run stopped early ({fail}); checking the visited states"
                );
            }
            let stride = check.stride.unwrap_or(1).max(1);
            traj.times
                .iter()
                .zip(&traj.states)
                .step_by(stride)
                .map(|(&t, x)| GridPoint { t, x: x.clone() })
                .collect()
        }
    };
    Ok(points)
}

/// Tensor grid with `per_axis` points per dimension, endpoints included.
pub fn box_grid(lo: &[f64], hi: &[f64], per_axis: usize) -> Vec<DVector<f64>> {
    if per_axis == 0 || lo.is_empty() {
        return Vec::new();
    }
    let n = lo.len();
    let coord = |i: usize, k: usize| {
        if per_axis == 1 {
            0.5 * (lo[i] + hi[i])
        } else {
            lo[i] + (hi[i] - lo[i]) * k as f64 / (per_axis - 1) as f64
        }
    };
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            DVector::from_fn(n, |i, _| {
                let k = idx % per_axis;
                if i + 1 < n {
                    idx /= per_axis;
                }
                coord(i, k)
            })
        })
        .collect()
}

/// Result of the range checks at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub point: GridPoint,
    /// `c`, shifted by the nominal for filters.
    pub c: f64,
    pub d_norm: f64,
    pub kappa: Option<f64>,
    /// `-(c + gamma |d|)` when positive.
    pub deficit: Option<f64>,
    pub violation: Option<String>,
}

fn check_point(f: &FormulaScenario, gamma: Option<f64>, p: &GridPoint) -> CheckRow {
    let mut row = CheckRow {
        point: p.clone(),
        c: f64::NAN,
        d_norm: f64::NAN,
        kappa: None,
        deficit: None,
        violation: None,
    };
    let con = match evaluate_constraint(&f.system, &f.barrier, &p.x) {
        Ok(con) => con,
        Err(e) => {
            row.violation = Some(e.to_string());
            return row;
        }
    };
    let c = match f.spec.nominal() {
        Some(k) => con.c + con.d.dot(&k.eval(&p.x, p.t)),
        None => con.c,
    };
    row.c = c;
    row.d_norm = con.d_norm();
    let mut problems = Vec::new();
    if let Some(gamma) = gamma {
        if let Compatibility::Incompatible { deficit } = check_compatibility(
            &AffineConstraint {
                c,
                d: con.d.clone(),
            },
            gamma,
        ) {
            row.deficit = Some(deficit);
            problems.push(format!(
                "incompatible with |u| <= {gamma} (deficit {deficit:.6e})"
            ));
        }
    }
    match evaluate_controller(&f.spec, &con, &p.x, p.t) {
        Ok(out) => {
            row.kappa = out.kappa;
            if let (Some(gamma), Some(kappa), Some(s), None) =
                (gamma, out.kappa, f.spec.shaping(), row.deficit)
            {
                let shifted = AffineConstraint {
                    c,
                    d: con.d.clone(),
                };
                if let Ok(upper) = kappa_bi_upper(&shifted, gamma, s) {
                    if kappa > upper * (1.0 + KAPPA_UPPER_RTOL) {
                        problems.push(format!(
                            "kappa {kappa:.6e} above the bounded-input limit {upper:.6e}"
                        ));
                    }
                }
            }
        }
        Err(e) => {
            if !matches!(e, CbfError::Incompatible { .. }) || row.deficit.is_none() {
                problems.push(e.to_string());
            }
        }
    }
    if !problems.is_empty() {
        row.violation = Some(problems.join("; "));
    }
    row
}

fn fmt_point(p: &GridPoint) -> String {
    let xs: Vec<String> = p.x.iter().map(|v| format!("{v:.6}")).collect();
    format!("t = {:.4}, x = [{}]", p.t, xs.join(", "))
}

/// Evaluates every grid point without printing; violations are in the rows.
pub fn evaluate_check(args: &CommonArgs) -> CmdResult<Vec<CheckRow>> {
    let cfg = args.load(&[])?;
    let sc = build(&cfg, false)?;
    let points = grid_points(&cfg, &sc)?;
    if points.is_empty() {
        return Err(config_err(anyhow!("the check grid is empty")));
    }
    let f = formula_of(&sc)?;
    let gamma = cfg
        .check
        .as_ref()
        .and_then(|c| c.gamma)
        .or(cfg.controller.gamma);
    if cfg.controller.kind == ControllerKind::BoundedInput && gamma.is_none() {
        return Err(config_err(anyhow!("missing key `controller.gamma`")));
    }
    Ok(points
        .par_iter()
        .map(|p| check_point(f, gamma, p))
        .collect())
}

/// Compatibility and kappa-range membership over the configured grid.
pub fn check(args: &CommonArgs) -> CmdResult<Vec<CheckRow>> {
    let rows = evaluate_check(args)?;
    println!(
        "{:>8} {:>12} {:>14} {:>14} {:>14}  status",
        "index", "t", "c", "|d|", "kappa"
    );
    for (i, r) in rows.iter().enumerate() {
        let kappa = r.kappa.map_or("-".to_string(), |k| format!("{k:.6e}"));
        let status = if r.violation.is_some() { "FAIL" } else { "ok" };
        println!(
            "{i:>8} {:>12.6} {:>14.6e} {:>14.6e} {kappa:>14}  {status}",
            r.point.t, r.c, r.d_norm
        );
    }
    let bad: Vec<String> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            r.violation
                .as_ref()
                .map(|v| format!("#{i} ({}): {v}", fmt_point(&r.point)))
        })
        .collect();
    if !bad.is_empty() {
        let shown = bad
            .iter()
            .take(MAX_LISTED)
            .cloned()
            .collect::<Vec<_>>()
            .join("\n  ");
        let more = if bad.len() > MAX_LISTED {
            format!("\n  ... and {} more", bad.len() - MAX_LISTED)
        } else {
            String::new()
        };
        return Err(CmdError::Violation(format!(
            "{} of {} grid points violate the checks:\n  {shown}{more}",
            bad.len(),
            rows.len()
        )));
    }
    eprintln!("tuncbf: all {} grid points pass", rows.len());
    Ok(rows)
}

pub fn cmd_check(args: &CommonArgs) -> u8 {
    finish(check(args).map(|_| ()))
}

#[derive(Debug, Clone, Serialize)]
struct MarginLine<'a> {
    t: f64,
    x: &'a [f64],
    margin: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MarginSummary {
    /// Sample maximum of the margin; an estimate, not a certified bound.
    pub xi_bar_estimate: f64,
    pub sample_count: usize,
    /// Points where the margin is undefined (`c = kappa Gamma`, e.g. `d = 0`).
    pub degenerate_count: usize,
    /// Points where the controller itself could not be evaluated.
    pub failed_count: usize,
}

/// Pointwise margin over the grid: `margin.jsonl` with one line per point and
/// a JSON summary on standard output.
pub fn margin(args: &CommonArgs) -> CmdResult<MarginSummary> {
    let cfg = args.load(&[])?;
    let sc = build(&cfg, args.strict_range)?;
    let points = grid_points(&cfg, &sc)?;
    if points.is_empty() {
        return Err(config_err(anyhow!("the margin grid is empty")));
    }
    let f = formula_of(&sc)?;
    let values: Vec<Result<f64, CbfError>> = points
        .par_iter()
        .map(|p| {
            let con = evaluate_constraint(&f.system, &f.barrier, &p.x)?;
            controller_margin(&f.spec, &con, &p.x, p.t)
        })
        .collect();

    let mut lines = String::new();
    for (p, v) in points.iter().zip(&values) {
        let line = MarginLine {
            t: p.t,
            x: p.x.as_slice(),
            margin: v.as_ref().ok().copied(),
            error: v.as_ref().err().map(|e| e.to_string()),
        };
        lines.push_str(&serde_json::to_string(&line).map_err(config_err)?);
        lines.push('\n');
    }
    let dir = args.out_dir(&cfg)?;
    write_file(&dir.join("margin.jsonl"), &lines)?;

    let ok: Vec<f64> = values
        .iter()
        .filter_map(|v| v.as_ref().ok().copied())
        .collect();
    let summary = MarginSummary {
        xi_bar_estimate: ok.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        sample_count: ok.len(),
        degenerate_count: values
            .iter()
            .filter(|v| matches!(v, Err(CbfError::DegenerateMargin { .. })))
            .count(),
        failed_count: 0,
    };
    let summary = MarginSummary {
        failed_count: values.len() - ok.len() - summary.degenerate_count,
        ..summary
    };
    println!("{}", serde_json::to_string(&summary).map_err(config_err)?);
    if summary.failed_count > 0 {
        return Err(CmdError::Run(anyhow!(
            "margin undefined at {} of {} points (see margin.jsonl)",
            summary.failed_count,
            values.len()
        )));
    }
    Ok(summary)
}

pub fn cmd_margin(args: &CommonArgs) -> u8 {
    finish(margin(args).map(|_| ()))
}
