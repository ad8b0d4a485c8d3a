//! Conformal prediction sets for classifiers.
//!
//! The crate covers split-conformal baselines (naive, APS, RAPS and their
//! randomized variants), CPSN (a learned per-example threshold conformalized
//! on held-out data), temperature scaling, a binary dataset format and an
//! evaluation harness with a synthetic task generator.

pub mod conformal;
pub mod cpsn;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod example;
pub mod json;
pub mod prepare;
pub mod regressor;
pub mod score;
pub mod seed;
pub mod set;
pub mod simplex;
pub mod tempscale;

pub use conformal::{calibrate, conformal_quantile, naive_threshold, CalibratedThreshold, Method};
pub use cpsn::CpsnConformalizer;
pub use dataio::{Dataset, ScoreKind};
pub use error::{Error, ErrorKind, Result};
pub use eval::{
    run_experiment, DataSource, EvalReport, ExperimentConfig, ExperimentReport, SyntheticConfig,
    SyntheticTask,
};
pub use example::LabeledExample;
pub use prepare::{prepare_split, PreparedSplit};
pub use regressor::{RegressorModel, TrainConfig};
pub use score::{RapsParams, ScoreFamily};
pub use set::{build_prediction_set, PredictionSet, SetPolicy, SetRule};
pub use simplex::{ProbabilityVector, RankedProbabilities};
pub use tempscale::{apply_temperature, fit_temperature, TemperatureModel};
