use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {message}")]
    InvalidParameter { field: String, message: String },

    #[error("no spin-changing decay channel: effective lifetime diverges for beta = 1")]
    NoDecayChannel,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-unique steady state: generator null space has dimension {0}")]
    NonUniqueSteadyState(usize),

    #[error("spectra are sampled on different frequency grids")]
    GridMismatch,

    #[error("readout at {at_ms} ms lies outside the simulated horizon [0, {horizon_ms}] ms")]
    ReadoutBeyondHorizon { at_ms: f64, horizon_ms: f64 },

    #[error("overlapping {channel} pulses: [{a_start}, {a_end}] and [{b_start}, {b_end}] ms")]
    OverlappingPulses {
        channel: &'static str,
        a_start: f64,
        a_end: f64,
        b_start: f64,
        b_end: f64,
    },

    #[error("baseline optical depth vanishes inside the metrics window")]
    TransparentBaseline,

    #[error("not enough data for {model} fit: {message}")]
    InsufficientData { model: &'static str, message: String },

    #[error("configuration is invalid:\n{}", format_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One problem found while validating a configuration, addressed by its
/// dotted field path (`rates.beta`, `sequence[2].duration_ms`, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field: field.into(),
        message: message.into(),
    }
}
