use thiserror::Error;

/// Crate-wide error type.
///
/// Variants carry enough location detail (row/column indices, file paths,
/// offending names) that a failure in a long harness run can be traced
/// without re-running under a debugger.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: missing header line")]
    MissingHeader { path: String },

    #[error("{path}: malformed header {found:?}, expected x1,...,xd,y")]
    MalformedHeader { path: String, found: String },

    #[error("{path}: ragged row at line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: non-numeric value {value:?} at row {row}, column {col}")]
    NonNumeric {
        path: String,
        row: usize,
        col: usize,
        value: String,
    },

    #[error("{path}: no data rows")]
    EmptyFile { path: String },

    #[error("non-finite coordinate {value} at position {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("dimension mismatch: {context} (expected {expected}, found {found})")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("negative weight {value} at index {index}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("weights sum to zero")]
    ZeroMass,

    #[error("empty sample: {context}")]
    EmptySample { context: String },

    #[error("coupling marginal residual {residual:e} exceeds tolerance {tolerance:e}")]
    MarginalViolation { residual: f64, tolerance: f64 },

    #[error("negative coupling entry {value} at ({row}, {col})")]
    NegativeCouplingEntry { row: usize, col: usize, value: f64 },

    #[error("distance matrix not symmetric at ({row}, {col}): {a} vs {b}")]
    AsymmetricDistance { row: usize, col: usize, a: f64, b: f64 },

    #[error("distance matrix has nonzero diagonal at {index}: {value}")]
    NonzeroDiagonal { index: usize, value: f64 },

    #[error("stable index {index} out of range for d = {d}")]
    StableIndexOutOfRange { index: usize, d: usize },

    #[error("unknown scenario id {0} (valid: 1..=11)")]
    UnknownScenario(u32),

    #[error("scenario {scenario} requires d = {required}, got {found}")]
    ScenarioDimension {
        scenario: u32,
        required: usize,
        found: usize,
    },

    #[error("singular linear system in {context}")]
    SingularSystem { context: String },

    #[error("synthesis failed at point {index}: {reason}")]
    SynthesisFailure { index: usize, reason: String },

    #[error("unknown method {0:?}")]
    UnknownMethod(String),

    #[error("method {method} must not receive a dataset with role {role}")]
    OracleLeak { method: String, role: String },

    #[error("dataset role {found} where {expected} was required")]
    RoleMismatch { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("metric set mismatch: report {report} is missing metric {metric:?}")]
    MetricSetMismatch { report: usize, metric: String },

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
