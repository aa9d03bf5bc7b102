use std::path::PathBuf;

use thiserror::Error;

/// One iterate of the label-denoising threshold search.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenoiseIterate {
    pub n: f64,
    pub theta_sd: f64,
    pub removal: f64,
    pub addition: f64,
}

fn format_trace(trace: &[DenoiseIterate]) -> String {
    trace
        .iter()
        .map(|it| format!("(n={:.2}, rm={:.3}, add={:.3})", it.n, it.removal, it.addition))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty series: {0}")]
    EmptySeries(&'static str),

    #[error("non-positive speed {value} at slot {slot}")]
    NonPositiveSpeed { slot: usize, value: f64 },

    #[error("series length mismatch: expected {expected}, got {actual} ({what})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown density code {code:?} at slot {slot}")]
    UnknownDensityCode { slot: usize, code: String },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid road graph: {0}")]
    InvalidGraph(String),

    #[error("segment {0} has no upstream segments within {1} miles; widen the distance or exclude the segment")]
    NoUpstream(String, f64),

    #[error("unknown segment {0}")]
    UnknownSegment(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("slowdown matrix is degenerate (threshold {theta_sd} at n={n}); exclude this segment")]
    DegenerateSlowdown { n: f64, theta_sd: f64 },

    #[error("no incident reports in the calibration span; removal and addition rates are undefined")]
    NoReports,

    #[error("unreasonable thresholds: removal {removal:.3} > theta1 and addition {addition:.3} > theta2 at n={n:.2}")]
    UnreasonableThresholds { n: f64, removal: f64, addition: f64 },

    #[error("label denoising did not converge within {iters} iterations: {}", format_trace(.trace))]
    NoConvergence {
        iters: usize,
        trace: Vec<DenoiseIterate>,
    },

    #[error("slowdown percentile left (0, 100) during search: {}", format_trace(.trace))]
    PercentileOutOfRange { trace: Vec<DenoiseIterate> },

    #[error("too few days ({0}) for a non-empty tune and validation split")]
    TooFewDays(usize),

    #[error("no positive step targets; anomaly weight is undefined")]
    NoPositives,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in {stage}; parameter norms: encoder {enc_norm:.3e}, decoder {dec_norm:.3e}, head {head_norm:.3e}")]
    NonFinite {
        stage: &'static str,
        enc_norm: f64,
        dec_norm: f64,
        head_norm: f64,
    },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact {path}: run the `{stage}` stage first")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
