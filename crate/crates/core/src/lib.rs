//! Laboratory for bimodal linear contrastive learning with stochastically
//! corrupted pairs: a generative model, the closed-form contrastive solver,
//! score-based data filtering, score statistics and a reproducible
//! experiment harness.

pub mod cli_io;
pub mod contrastive;
pub mod error;
pub mod experiments;
pub mod filtering;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod score_stats;
pub mod verify;

pub use contrastive::Encoders;
pub use error::{LabError, Result};
pub use linalg::{CovMode, Matrix};
pub use model::{Dataset, ModelParams, PairedSamples, SamplePair};
