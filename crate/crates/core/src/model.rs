//! Shared domain types: the control-affine plant, the barrier function and
//! the pointwise affine constraint `c(x) + d(x) u >= 0` that every controller
//! formula consumes.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{CbfError, Result};

/// Threshold on `|d|^2` below which `d` is treated as exactly zero.
pub const D_SQ_EPS: f64 = 1e-12;

pub type VectorMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixMap = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ScalarMap = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `x' = f(x) + g(x) u` with `x` in R^n and `u` in R^m.
#[derive(Clone)]
pub struct ControlAffineSystem {
    state_dim: usize,
    input_dim: usize,
    drift: VectorMap,
    input_map: MatrixMap,
}

impl ControlAffineSystem {
    pub fn new<F, G>(state_dim: usize, input_dim: usize, drift: F, input_map: G) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        if state_dim == 0 || input_dim == 0 {
            return Err(CbfError::Config(format!(
                "system dimensions must be positive (n = {state_dim}, m = {input_dim})"
            )));
        }
        Ok(Self {
            state_dim,
            input_dim,
            drift: Arc::new(drift),
            input_map: Arc::new(input_map),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(CbfError::DimensionMismatch {
                what: "state",
                expected: self.state_dim.to_string(),
                got: x.len().to_string(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CbfError::NonFinite("state"));
        }
        Ok(())
    }

    pub fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        let f = (self.drift)(x);
        if f.len() != self.state_dim {
            return Err(CbfError::DimensionMismatch {
                what: "drift",
                expected: self.state_dim.to_string(),
                got: f.len().to_string(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(CbfError::NonFinite("drift"));
        }
        Ok(f)
    }

    pub fn input_map(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let g = (self.input_map)(x);
        if g.shape() != (self.state_dim, self.input_dim) {
            return Err(CbfError::DimensionMismatch {
                what: "input map",
                expected: format!("{}x{}", self.state_dim, self.input_dim),
                got: format!("{}x{}", g.nrows(), g.ncols()),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CbfError::NonFinite("input map"));
        }
        Ok(g)
    }

    /// `f(x) + g(x) u`.
    pub fn vector_field(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.input_dim {
            return Err(CbfError::DimensionMismatch {
                what: "input",
                expected: self.input_dim.to_string(),
                got: u.len().to_string(),
            });
        }
        let mut dx = self.drift(x)?;
        dx.gemv(1.0, &self.input_map(x)?, u, 1.0);
        Ok(dx)
    }
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .finish_non_exhaustive()
    }
}

/// Extended class-K function: continuous, strictly increasing, zero at zero.
#[derive(Clone)]
pub enum ExtendedClassK {
    Linear { alpha: f64 },
    Custom(ScalarFn),
}

impl ExtendedClassK {
    pub fn linear(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(CbfError::Config(format!(
                "class-K slope must be positive, got {alpha}"
            )));
        }
        Ok(Self::Linear { alpha })
    }

    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self::Custom(Arc::new(f))
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Self::Linear { alpha } => alpha * s,
            Self::Custom(f) => f(s),
        }
    }

    /// Checks `beta(0) = 0` and strict monotonicity over `grid` (sorted internally).
    pub fn check_on_grid(&self, grid: &[f64]) -> Result<()> {
        if self.eval(0.0) != 0.0 {
            return Err(CbfError::Config("class-K function must vanish at 0".into()));
        }
        let mut pts = grid.to_vec();
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        for w in pts.windows(2) {
            if self.eval(w[1]) <= self.eval(w[0]) {
                return Err(CbfError::Config(format!(
                    "class-K function not strictly increasing between {} and {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Debug for ExtendedClassK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { alpha } => f.debug_struct("Linear").field("alpha", alpha).finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Shaping function `s` entering `Gamma = sqrt(c^2 + s(|d|^2) |d|^2)`.
#[derive(Clone)]
pub enum ShapingFunction {
    /// `s(d) = sigma * d`.
    Linear {
        sigma: f64,
    },
    Custom(ScalarFn),
}

impl ShapingFunction {
    pub fn linear(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(CbfError::Config(format!(
                "shaping slope sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self::Linear { sigma })
    }

    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self::Custom(Arc::new(f))
    }

    pub fn eval(&self, d_sq: f64) -> f64 {
        match self {
            Self::Linear { sigma } => sigma * d_sq,
            Self::Custom(f) => f(d_sq),
        }
    }

    /// `s(d) * d`, the term added to `c^2` under the square root.
    pub fn weighted(&self, d_sq: f64) -> f64 {
        self.eval(d_sq) * d_sq
    }

    pub fn check_on_grid(&self, grid: &[f64]) -> Result<()> {
        if self.eval(0.0) != 0.0 {
            return Err(CbfError::Config("shaping function must vanish at 0".into()));
        }
        for &d in grid.iter().filter(|d| **d > 0.0) {
            if !(self.eval(d) > 0.0) {
                return Err(CbfError::Config(format!(
                    "shaping function must be positive at d = {d}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Debug for ShapingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { sigma } => f.debug_struct("Linear").field("sigma", sigma).finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// How the tunable term `kappa` is obtained at a point.
///
/// Eta-based policies are resolved in `(c, |d|^2)` space through
/// `kappa = (1 - eta) c / Gamma + eta`; `KappaDirect` bypasses that map.
#[derive(Clone)]
pub enum TunableTermPolicy {
    EtaConstant(f64),
    /// `eta(c, |d|^2)`.
    EtaFunction(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
    KappaDirect(ScalarMap),
}

impl TunableTermPolicy {
    /// Accepts `0 < eta <= 1`. Only `[0.5, 1]` is valid for every state; smaller
    /// values need the pointwise range check done at evaluation time.
    pub fn eta_constant(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(CbfError::Config(format!(
                "constant eta must lie in (0, 1], got {eta}"
            )));
        }
        Ok(Self::EtaConstant(eta))
    }

    pub fn eta_function<F: Fn(f64, f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self::EtaFunction(Arc::new(f))
    }

    pub fn kappa_direct<F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self::KappaDirect(Arc::new(f))
    }

    /// False only for constant eta in `[0.5, 1]`, which is valid everywhere.
    pub fn needs_pointwise_check(&self) -> bool {
        !matches!(self, Self::EtaConstant(eta) if (0.5..=1.0).contains(eta))
    }
}

impl fmt::Debug for TunableTermPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EtaConstant(eta) => f.debug_tuple("EtaConstant").field(eta).finish(),
            Self::EtaFunction(_) => f.write_str("EtaFunction(..)"),
            Self::KappaDirect(_) => f.write_str("KappaDirect(..)"),
        }
    }
}

/// Barrier `h` with its analytic gradient and class-K function `beta`.
/// The safe set is `{h >= 0}`.
#[derive(Clone)]
pub struct BarrierFunction {
    value: ScalarMap,
    gradient: VectorMap,
    class_k: ExtendedClassK,
}

impl BarrierFunction {
    pub fn new<H, DH>(value: H, gradient: DH, class_k: ExtendedClassK) -> Self
    where
        H: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        DH: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            class_k,
        }
    }

    /// Barrier whose gradient is a central finite difference of `value`.
    /// Intended for tests and quick experiments only.
    pub fn with_fd_gradient<H>(value: H, class_k: ExtendedClassK) -> Self
    where
        H: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        let value: ScalarMap = Arc::new(value);
        let inner = value.clone();
        Self {
            value,
            gradient: Arc::new(move |x| central_difference_gradient(&*inner, x)),
            class_k,
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }

    pub fn class_k(&self) -> &ExtendedClassK {
        &self.class_k
    }

    pub fn fd_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        central_difference_gradient(&*self.value, x)
    }
}

impl fmt::Debug for BarrierFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BarrierFunction")
            .field("class_k", &self.class_k)
            .finish_non_exhaustive()
    }
}

/// Central difference with step `1e-6 * (1 + |x_i|)`.
pub fn central_difference_gradient<F>(f: &F, x: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64 + ?Sized,
{
    let mut probe = x.clone();
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|i| {
            let step = 1e-6 * (1.0 + x[i].abs());
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        }),
    )
}

/// The pointwise CBF constraint `c + d u >= 0`, with `d` stored as a column.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub c: f64,
    pub d: DVector<f64>,
}

impl AffineConstraint {
    pub fn new(c: f64, d: DVector<f64>) -> Result<Self> {
        if !c.is_finite() || d.iter().any(|v| !v.is_finite()) {
            return Err(CbfError::NonFinite("affine constraint"));
        }
        Ok(Self { c, d })
    }

    pub fn d_norm_sq(&self) -> f64 {
        self.d.norm_squared()
    }

    pub fn d_norm(&self) -> f64 {
        self.d.norm()
    }

    /// True when `|d|^2` is below [`D_SQ_EPS`].
    pub fn d_vanishes(&self) -> bool {
        self.d_norm_sq() <= D_SQ_EPS
    }

    /// Strict CBF convention: a vanishing `d` requires `c > 0`.
    pub fn check_strict(&self) -> Result<()> {
        if self.d_vanishes() && self.c <= 0.0 {
            return Err(CbfError::Infeasible {
                c: self.c,
                d_sq: self.d_norm_sq(),
            });
        }
        Ok(())
    }

    /// `c + d u`.
    pub fn residual(&self, u: &DVector<f64>) -> f64 {
        self.c + self.d.dot(u)
    }
}

/// `c = dh/dx f + beta(h)`, `d = dh/dx g`.
pub fn evaluate_constraint(
    sys: &ControlAffineSystem,
    bar: &BarrierFunction,
    x: &DVector<f64>,
) -> Result<AffineConstraint> {
    let f = sys.drift(x)?;
    let g = sys.input_map(x)?;
    let grad = bar.gradient(x);
    if grad.len() != sys.state_dim() {
        return Err(CbfError::DimensionMismatch {
            what: "barrier gradient",
            expected: sys.state_dim().to_string(),
            got: grad.len().to_string(),
        });
    }
    let h = bar.value(x);
    if !h.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(CbfError::NonFinite("barrier"));
    }
    let c = grad.dot(&f) + bar.class_k().eval(h);
    let d = g.tr_mul(&grad);
    AffineConstraint::new(c, d)
}

/// `sqrt(c^2 + s(|d|^2) |d|^2)` from the raw pair.
pub fn gamma_sontag_parts(c: f64, d_sq: f64, s: &ShapingFunction) -> f64 {
    c.hypot(s.weighted(d_sq).max(0.0).sqrt())
}

pub fn gamma_sontag(con: &AffineConstraint, s: &ShapingFunction) -> f64 {
    gamma_sontag_parts(con.c, con.d_norm_sq(), s)
}
