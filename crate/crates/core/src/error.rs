use thiserror::Error;

/// Failures raised by the numerical stages.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric: asymmetry {asymmetry:e} exceeds {tolerance:e}")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("near-singular matrix: eigenvalue {min_eigenvalue:e} below threshold {threshold:e}")]
    NearSingular { min_eigenvalue: f64, threshold: f64 },

    #[error("degenerate generator: |det| = {det:e} below {threshold:e}")]
    DegenerateGenerator { det: f64, threshold: f64 },

    #[error("shift window exhausted: position {position} outside the representable window")]
    WindowExhausted { position: i64 },

    #[error(
        "Lyapunov series diverges at epsilon = {epsilon} (term {term} of {terms} non-decreasing); \
         try a larger epsilon"
    )]
    SeriesDivergence { epsilon: f64, term: usize, terms: usize },

    #[error("invariance residual {residual:e} exceeds {tolerance:e} at sample {point}")]
    InvarianceResidualExceeded { residual: f64, tolerance: f64, point: usize },

    #[error("orthogonality defect {defect:e} exceeds {tolerance:e} at sample {point}")]
    DefectExceeded { defect: f64, tolerance: f64, point: usize },

    #[error(
        "insufficient domination at horizon {horizon}: invariance angle {defect:e} exceeds \
         {tolerance:e}; increase the bundle horizon"
    )]
    InsufficientGap { horizon: usize, defect: f64, tolerance: f64 },

    #[error("adapted metric not found: best margin {margin} (needs > 1) over epsilon grid {grid:?}")]
    AdaptedMetricFailure { margin: f64, grid: Vec<f64> },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// Innermost error, with stage attributions peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
