use std::path::PathBuf;

/// Every failure the toolkit can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("unknown phantom feature label `{0}`")]
    UnknownLabel(String),
    #[error("ultrasound plane does not intersect the sphere (offset {offset_mm:.3} mm, radius {radius_mm:.3} mm)")]
    NoIntersection { offset_mm: f64, radius_mm: f64 },
    #[error("no circle found: {0}")]
    NoCircleFound(String),
    #[error("ambiguous accumulator peak: support {first} vs {second}")]
    AmbiguousPeak { first: u32, second: u32 },
    #[error("point is behind the camera (depth {0} mm)")]
    BehindCamera(f64),
    #[error("degenerate planar target: {0}")]
    DegenerateTarget(String),
    #[error("pose refinement diverged: {0}")]
    DivergedRefinement(String),
    #[error("only {kept} frames survive the {threshold_mm} mm threshold, need at least 3")]
    TooFewInliers { kept: usize, threshold_mm: f64 },
    #[error("{}:{line}: {msg}", file.display())]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}:{line}: unit error: {msg}", file.display())]
    Unit { file: PathBuf, line: usize, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    /// Stable machine-readable code for the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "DEGENERATE_INPUT",
            Error::NumericalFailure(_) => "NUMERICAL_FAILURE",
            Error::UnknownLabel(_) => "UNKNOWN_LABEL",
            Error::NoIntersection { .. } => "NO_INTERSECTION",
            Error::NoCircleFound(_) => "NO_CIRCLE_FOUND",
            Error::AmbiguousPeak { .. } => "AMBIGUOUS_PEAK",
            Error::BehindCamera(_) => "BEHIND_CAMERA",
            Error::DegenerateTarget(_) => "DEGENERATE_TARGET",
            Error::DivergedRefinement(_) => "DIVERGED_REFINEMENT",
            Error::TooFewInliers { .. } => "TOO_FEW_INLIERS",
            Error::Parse { .. } => "PARSE_ERROR",
            Error::MissingFile(_) => "MISSING_FILE",
            Error::Unit { .. } => "UNIT_ERROR",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::Io { .. } => "IO_ERROR",
        }
    }

    /// True for failures caused by the numbers rather than by the user's input files or flags.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateInput(_)
                | Error::NumericalFailure(_)
                | Error::NoIntersection { .. }
                | Error::NoCircleFound(_)
                | Error::AmbiguousPeak { .. }
                | Error::BehindCamera(_)
                | Error::DegenerateTarget(_)
                | Error::DivergedRefinement(_)
                | Error::TooFewInliers { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
