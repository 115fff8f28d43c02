use thiserror::Error;

/// Which end of a tunable-term interval was violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeBound {
    /// `kappa` must be strictly above this value.
    Lower,
    /// `kappa` must not exceed this value.
    Upper,
}

impl std::fmt::Display for RangeBound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RangeBound::Lower => write!(f, "lower"),
            RangeBound::Upper => write!(f, "upper"),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CbfError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value while evaluating {0}")]
    NonFinite(&'static str),

    /// `d(x) = 0` together with `c(x) <= 0`: no input can satisfy the strict CBF condition.
    #[error("infeasible CBF constraint: c = {c:e} with |d|^2 = {d_sq:e}")]
    Infeasible { c: f64, d_sq: f64 },

    #[error("tunable term {kappa} violates the {bound} bound {limit} of {set}")]
    KappaRange {
        kappa: f64,
        limit: f64,
        bound: RangeBound,
        set: &'static str,
    },

    /// `(c, |d|^2)` lies outside `{c > 0 or |d|^2 > 0}` where the eta-to-kappa map is defined.
    #[error("(c = {c:e}, |d|^2 = {d_sq:e}) is outside the domain of the eta construction")]
    Domain { c: f64, d_sq: f64 },

    #[error("CBF constraint incompatible with the input bound: deficit {deficit:e}")]
    Incompatible { deficit: f64 },

    #[error("degenerate safety margin: c - kappa*Gamma = {denominator:e}")]
    DegenerateMargin { denominator: f64 },

    #[error("initial state is outside the safe set: h(x0) = {h:e}")]
    UnsafeStart { h: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),
}

pub type Result<T> = std::result::Result<T, CbfError>;
