//! Rate-equation simulation of spectral hole burning in a Zeeman-split
//! four-level ensemble, with pulse sequences, readout spectra and fitting.

pub mod analysis;
pub mod calibration;
pub mod config;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod levels;
pub mod presets;
pub mod scenario;
pub mod sequence;

pub use analysis::{FitParameter, FitResult, LinearFit, PitProfile, ResidualMetrics};
pub use config::{parse_config, ExperimentConfig, SweepConfig, SweepMetric, SweepParameter};
pub use engine::{IonClassState, LaserLineshape, RateMatrix};
pub use ensemble::{EnsembleState, InhomogeneousProfile, Spectrum};
pub use error::{Error, Result};
pub use levels::{RateParams, ZeemanConfig};
pub use presets::{list_presets, preset};
pub use scenario::{run_scenario, simulate, RunManifest, ScenarioOutcome};
pub use sequence::{Pulse, ReadoutResult, RunOutput};
