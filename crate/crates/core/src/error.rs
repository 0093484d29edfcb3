//! Crate-wide error type.

/// Errors produced by table construction, validation, estimation, and parsing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Construction-time validation failure (dimensions, indices, counts, argument shapes).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A data key uses a missing code other than -1, which the standard
    /// correspondence cannot interpret.
    #[error(
        "data key {key} uses a missing code other than -1; \
         supply an explicit correspondence file for nonstandard codes"
    )]
    NonStandardMissingCode { key: String },

    /// A data key has no entry in the correspondence map.
    #[error("data key {key} has no correspondence entry")]
    MissingCorrespondence { key: String },

    /// A structural assumption on the correspondence map is violated.
    #[error("structural assumption {name} violated: {witness}")]
    StructuralViolation { name: &'static str, witness: String },

    /// Redistribution would divide by zero: a key carries positive count but
    /// every candidate cell it can send mass to is currently zero.
    #[error(
        "redistribution stalled: key {key} has count {count} \
         but its candidate cells sum to zero"
    )]
    ZeroCandidateMass { key: String, count: f64 },

    /// The mean map would overflow: linear predictor exceeds the exp range.
    #[error("mean overflow at cell {cell}: linear predictor {eta} exceeds 709")]
    MeanOverflow { cell: String, eta: f64 },

    /// The design matrix does not have full column rank.
    #[error("design matrix is rank deficient for dims {n_a}x{n_b}")]
    RankDeficient { n_a: usize, n_b: usize },

    /// Newton iteration exhausted its budget without meeting the gradient tolerance.
    #[error(
        "regression did not converge within {iterations} iterations: \
         relative gradient norm {grad_norm}"
    )]
    NonConvergence { iterations: usize, grad_norm: f64 },

    /// The likelihood appears unbounded: parameters diverged while the
    /// likelihood kept increasing (separation in the response pattern).
    #[error(
        "regression diverged: parameter magnitude {magnitude} exceeds bound \
         while the likelihood is still increasing; no finite optimum exists"
    )]
    Separation { magnitude: f64 },

    /// Curvature matrix could not be factorized even after ridge escalation.
    #[error("curvature factorization failed at iteration {iteration}")]
    HessianFactorization { iteration: usize },

    /// Fixed-point reconstruction needs a strictly positive quantity that is zero.
    #[error(
        "reconstruction requires positive {what}: zero at {position} \
         (a positive delta clamp may help)"
    )]
    ZeroInReconstruction { what: &'static str, position: String },

    /// Text parsing failure; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
