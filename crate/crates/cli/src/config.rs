//! Declarative scenario files (TOML).
//!
//! Every table rejects unknown keys. `--set a.b=v` overrides are applied to the
//! parsed document before it is checked against the schema, so an override
//! can add a key but cannot smuggle in an unknown one.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    pub system: SystemConfig,
    pub barrier: BarrierConfig,
    pub controller: ControllerConfig,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub disturbance: Option<DisturbanceConfig>,
    #[serde(default)]
    pub backstepping: Option<BacksteppingSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub check: Option<CheckSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    SingleIntegrator,
    DoubleIntegrator,
    TwoLink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    #[default]
    Velocity,
    Torque,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub kind: SystemKind,
    /// Single integrator state dimension.
    #[serde(default)]
    pub dim: Option<usize>,
    /// Two-link only.
    #[serde(default)]
    pub level: Level,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub m1: Option<f64>,
    #[serde(default)]
    pub m2: Option<f64>,
    #[serde(default)]
    pub l1: Option<f64>,
    #[serde(default)]
    pub l2: Option<f64>,
    #[serde(default)]
    pub gravity: Option<f64>,
    /// Joint-space tracking gain of the velocity nominal.
    #[serde(default)]
    pub kp: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    /// `h = bound - x[index]`.
    UpperBound,
    /// `h = x[index] - bound`.
    LowerBound,
    /// `h = radius^2 - |x[..k] - center|^2`.
    Disk,
    /// Double integrator: `h = bound - p - max(v, 0) v / (2 decel)`.
    Stopping,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierConfig {
    pub kind: BarrierKind,
    /// Slope of the linear class-K term.
    pub alpha: f64,
    #[serde(default)]
    pub index: Option<usize>,
    #[serde(default)]
    pub bound: Option<f64>,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub decel: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Qp,
    Sontag,
    Tunable,
    BoundedInput,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    #[serde(default)]
    pub eta: Option<f64>,
    /// Constant tunable term, instead of `eta`.
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub relu: bool,
    #[serde(default)]
    pub nominal: Option<NominalConfig>,
}

fn default_sigma() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NominalKind {
    Zero,
    Constant,
    /// Single integrator `-kp (x - target)`; double integrator
    /// `-kp (p - target) - kd v`.
    Setpoint,
    /// Two-link reference tracking.
    Reference,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalConfig {
    pub kind: NominalKind,
    #[serde(default)]
    pub value: Option<Vec<f64>>,
    #[serde(default)]
    pub target: Option<Vec<f64>>,
    #[serde(default)]
    pub kp: Option<f64>,
    #[serde(default)]
    pub kd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorName {
    #[default]
    Rk4,
    Euler,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub integrator: IntegratorName,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub zoh: bool,
    #[serde(default = "default_true")]
    pub require_safe_start: bool,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_horizon() -> f64 {
    10.0
}
fn default_record_every() -> usize {
    1
}
fn default_true() -> bool {
    true
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            horizon: default_horizon(),
            integrator: IntegratorName::default(),
            record_every: default_record_every(),
            zoh: false,
            require_safe_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Constant,
    Sinusoidal,
    BoundedRandom,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub kind: DisturbanceKind,
    #[serde(default)]
    pub value: Option<Vec<f64>>,
    #[serde(default)]
    pub amplitude: Option<Vec<f64>>,
    #[serde(default)]
    pub freq: Option<f64>,
    #[serde(default)]
    pub magnitude: Option<f64>,
    /// Falls back to the top-level seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacksteppingSection {
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub kp_bar: Option<[f64; 2]>,
    #[serde(default)]
    pub alpha_b: Option<f64>,
    #[serde(default)]
    pub filter_torque: Option<bool>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// States visited by the run without the input bound.
    Trajectory,
    /// Tensor grid between `lo` and `hi`.
    Box,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    pub grid: GridKind,
    #[serde(default)]
    pub lo: Option<Vec<f64>>,
    #[serde(default)]
    pub hi: Option<Vec<f64>>,
    /// Points per axis for the box grid.
    #[serde(default)]
    pub points: Option<usize>,
    /// Evaluation time for box grids.
    #[serde(default)]
    pub t: f64,
    /// Input bound to check; defaults to `controller.gamma`.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Keep every n-th trajectory sample.
    #[serde(default)]
    pub stride: Option<usize>,
}

/// Parses a `key.path=value` override. The value is read as a TOML literal,
/// falling back to a bare string.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{raw}` is not of the form key=value"))?;
    let path: Vec<String> = key
        .trim()
        .split('.')
        .map(|s| s.trim().to_string())
        .collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override `{raw}` has an empty key segment");
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(doc: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for seg in parents {
        let entry = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            anyhow!(
                "override path `{}` crosses a non-table value",
                path.join(".")
            )
        })?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl ScenarioConfig {
    pub fn from_str_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            apply_override(&mut doc, &path, value)?;
        }
        let cfg: ScenarioConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!("invalid config: {}", e.message()))?;
        if cfg.schema != SCHEMA_VERSION {
            bail!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                cfg.schema
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_str_with(&text, overrides)
            .with_context(|| format!("in config {}", path.display()))
    }
}
