//! Multimodal chronic-disease risk model over clinical notes, lab panels and
//! demographics.
//!
//! The crate holds everything that does not need a network or a disk-backed
//! store: tokenization, the attention-fusion network with hand-written
//! backpropagation, training, gradient checking, Shapley attribution,
//! synthetic cohort generation and evaluation reports.

pub mod catalog;
pub mod checkpoint;
pub mod cohort;
mod error;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod params;
pub mod record;
pub mod shapley;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{Model, ModelInput, Prediction};
pub use params::{ModelConfig, ModelParams};
pub use record::{
    Demographics, Disease, DiseaseLabels, HorizonRisks, LabPanel, PatientRecord, RiskScores, Sex,
    HORIZON_DAYS,
};
