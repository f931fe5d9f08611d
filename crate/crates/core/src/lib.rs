//! Fairness assessment toolkit for contrastive self-supervised learning on
//! multivariate time series.
//!
//! The pipeline runs: synthetic (or imported) cohort → contrastive
//! pretraining → freeze-mask fine-tuning strategies → segment-conditioned
//! fairness evaluation and representation similarity.

pub mod error;
pub mod rng;
pub mod tensorcore;

pub use error::{Error, Result};
pub mod batching;
pub mod dataset;
pub mod fairmetrics;
pub mod finetune;
pub mod model;
pub mod simcka;
pub mod ssl;
pub mod hashing;
pub mod synthcohort;
pub mod pipeline;
