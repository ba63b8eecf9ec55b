//! Covariance shaping for massive-MIMO downlink.
//!
//! Each UE applies a unit-norm statistical beamformer `v_k` so the BS sees a
//! single effective channel row `ḡ_k = v_k^H H_k` per UE. The crate builds
//! channel statistics from a geometric scenario, picks shaping vectors that
//! decorrelate the effective covariances, estimates channels under pilot
//! contamination and evaluates sum rates by Monte Carlo and in closed form.

pub mod covariance;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod optimizer;
pub mod pilots;
pub mod rates;
pub mod scenario_file;

pub use covariance::{
    delta_metric, kronecker_covariance, omega_sample, path_covariance, BlockCovariance, ChannelSampler, CovarianceRepr,
    EffectiveCovariance, PathTerm, ShapingVector,
};
pub use error::{CovshapeError, Result};
pub use optimizer::{optimize_multi, optimize_pair, OptimizerReport, OptimizerSettings};
pub use geometry::{sample_channel, ula_response, upa_response, ArrayGeometry, ArrayKind, PropagationPath, Scenario};
pub use harness::{
    run_point, run_sweep, validate, ExperimentConfig, PrecoderKind, ResultRecord, Scheme, SchemeSelection, Sweep,
    SweepVariable, ValidationReport,
};
pub use pilots::{build_pilot_book, EstimateSet, MmseEstimator, PilotBook, PilotMode};
pub use rates::{
    effective_sinr_imperfect, effective_sinr_perfect, ergodic_rate_lb, mmse_precoder, mrt_precoder, sum_rate_cs,
    sum_rate_sm, PrecodingMatrix, RateBreakdown,
};
pub use scenario_file::ScenarioFile;
