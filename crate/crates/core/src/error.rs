use thiserror::Error;

/// Errors raised across the library.
///
/// Messages name the violated assumption where one applies, so that the CLI
/// can surface them verbatim.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum QsaError {
    #[error("invalid frequency pair ({a}, {b}): need distinct positive integers")]
    InvalidPair { a: u64, b: u64 },

    #[error("pairs {first} and {second} yield the same frequency: frequencies must be distinct")]
    DuplicateFrequency { first: usize, second: usize },

    #[error("frequency index {k:?} out of range: {reason}")]
    InvalidFrequencyIndex { k: Vec<i32>, reason: String },

    #[error("k = {k:?} satisfies <k, omega> = 0 exactly: Poisson's equation has no solution (frequencies are rationally dependent)")]
    ZeroDivisor { k: Vec<i32> },

    #[error("forcing function has a k = 0 term; remove the mean before solving Poisson's equation")]
    NotZeroMean,

    #[error("coefficient at k = {k:?} has no Jacobian available")]
    MissingJacobian { k: Vec<i32> },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },

    #[error("no convergence: {0}")]
    NonConvergent(String),

    #[error("finite-difference Jacobian is singular (condition number {cond:e})")]
    SingularJacobian { cond: f64 },

    #[error("s = {s} lies on an eigenvalue of F: resolvent is singular")]
    SingularResolvent { s: String },

    #[error("F is singular: DC gain undefined")]
    SingularF,

    #[error("washout matrix F is not Hurwitz (max real eigenvalue part {max_re})")]
    NonHurwitz { max_re: f64 },

    #[error("objective value {value} is negative at {theta:?}: objective-scaled probing gain requires a non-negative objective")]
    NegativeObjective { value: f64, theta: Vec<f64> },

    #[error("Lyapunov exponent inconclusive: first half {first_half}, second half {second_half}")]
    Inconclusive { first_half: f64, second_half: f64 },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("log-log fit is degenerate: all abscissae are equal")]
    DegenerateFit,

    #[error("at beta = {beta}: {source}")]
    AtBeta { beta: f64, source: Box<QsaError> },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for QsaError {
    fn from(e: std::io::Error) -> Self {
        QsaError::Io(e.to_string())
    }
}

impl QsaError {
    /// The underlying error, looking through sweep-point context.
    pub fn root(&self) -> &QsaError {
        match self {
            QsaError::AtBeta { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, QsaError>;
