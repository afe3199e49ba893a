use thiserror::Error;

/// Errors produced by the estimation, testing and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("need at least {required} {what}, got {actual}")]
    TooSmall {
        what: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("asset `{asset}` has zero variance about the origin")]
    DegenerateColumn { asset: String },

    #[error("length {len} is not a triangular number N(N-1)/2")]
    Shape { len: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "FDP-adjusted p-values cannot be produced: 1 > gamma*(R_1 + 1) with R_1 = {r1}, gamma = {gamma}"
    )]
    FdpUnavailable { r1: usize, gamma: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("matrix is singular; {0}")]
    Singular(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("window formed at row {t_b} failed: {source}")]
    Window {
        t_b: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("experiment cell N={n}, T={t}, delta={delta}, {innovation} failed: {source}")]
    Cell {
        n: usize,
        t: usize,
        delta: f64,
        innovation: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
