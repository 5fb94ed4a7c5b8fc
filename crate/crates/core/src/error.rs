use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid Fock dimension {0}: need at least 2")]
    InvalidDimension(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("truncation too small: tail population {tail:.3e} beyond dim {dim} exceeds {limit:.1e}")]
    TruncationTooSmall { dim: usize, tail: f64, limit: f64 },
    #[error("Lamb-Dicke violation: eta*sqrt(N+1) = {value:.3} >= 1")]
    LambDickeViolation { value: f64 },
    #[error("non-positive rate `{name}` = {value}")]
    NonpositiveRate { name: &'static str, value: f64 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("frequency ratio {ratio} below the minimum of {min}")]
    RatioTooSmall { ratio: f64, min: f64 },
    #[error("positivity breach at t = {t:.6e} s: minimum eigenvalue {min_eig:.3e}")]
    PositivityBreach { t: f64, min_eig: f64 },
    #[error("truncation breach at t = {t:.6e} s: top-level population {top_pop:.3e}")]
    TruncationBreach { t: f64, top_pop: f64 },
    #[error("numerical instability: {0}")]
    NumericalInstability(String),
    #[error("sample rate {fs} Hz too low for center {center} Hz (need > 4x)")]
    SampleRateTooLow { fs: f64, center: f64 },
    #[error("beam split {0} outside (0, 1)")]
    SplitOutOfRange(f64),
    #[error("series too short: {len} samples, need {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("exclusion band leaves {kept} of {total} bins (< 25%)")]
    ExclusionTooWide { kept: usize, total: usize },
    #[error("Lorentzian fit failed after {iterations} iterations (rmse {rmse:.3e}): {reason}")]
    FitFailed {
        iterations: usize,
        rmse: f64,
        reason: String,
    },
    #[error("calibration infeasible: {0}")]
    CalibrationInfeasible(String),
    #[error("gain calibration needs a reference sweep point")]
    ReferenceMissing,
    #[error("negative theory gain {0} is outside the modeled regime")]
    NegativeGain(f64),
    #[error("unphysical prediction: {0}")]
    Unphysical(String),
    #[error("trajectory {index} failed: {source}")]
    Trajectory {
        index: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
