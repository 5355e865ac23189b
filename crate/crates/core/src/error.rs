use std::path::PathBuf;

/// Errors raised by the toolkit.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A decay model cannot realize the requested spike-time table.
    #[error("conversion infeasible at step k={k}: target value {value} is unreachable ({reason})")]
    Infeasible {
        /// Logical step whose target value cannot be produced.
        k: usize,
        /// Target device output.
        value: f64,
        /// Why the value is unreachable.
        reason: String,
    },

    /// A calibration target lies outside the energy range of its bounds.
    #[error("calibration infeasible: target {target} mJ is outside the achievable range [{lo}, {hi}] mJ")]
    CalibrationInfeasible {
        /// Requested energy.
        target: f64,
        /// Energy at the lower bound.
        lo: f64,
        /// Energy at the upper bound.
        hi: f64,
    },

    /// Tensor dimensions disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Spike protocol violation (duplicate events, out-of-range steps).
    #[error("spike protocol violation: {0}")]
    Protocol(String),

    /// Adjacent layers do not share quantizers.
    #[error("quantizer chain broken between layer {layer} and its predecessor: {reason}")]
    Chaining {
        /// Index of the offending layer.
        layer: usize,
        /// Details.
        reason: String,
    },

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Too few samples for a fit.
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData {
        /// Minimum sample count.
        needed: usize,
        /// Provided sample count.
        got: usize,
    },

    /// Binarization of an all-zero tensor.
    #[error("binarization scale is zero (all-zero tensor)")]
    ZeroScale,

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged {
        /// Epoch in which the loss became non-finite.
        epoch: usize,
    },

    /// Malformed input file.
    #[error("invalid file {path}: {reason}")]
    Format {
        /// File path.
        path: PathBuf,
        /// Details.
        reason: String,
    },

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// File path.
        path: PathBuf,
        /// Cause.
        #[source]
        source: std::io::Error,
    },
}

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
