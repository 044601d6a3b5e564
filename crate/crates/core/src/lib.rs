//! Mixture-density modelling of phone-level prosody embeddings.
//!
//! An autoregressive predictor emits a diagonal Gaussian mixture for every
//! phone. In multi-speaker mode the speaker-independent component means and
//! log-variances are mapped to speaker-dependent ones by a transform shared
//! across components, so a component index denotes the same kind of prosody
//! for every speaker. That property is what [`cloning`] exploits to transport
//! prosody between speakers.

pub mod checkpoint;
pub mod cli;
pub mod cloning;
pub mod error;
pub mod fsutil;
pub mod gmm;
pub mod metrics;
pub mod model;
pub mod predictor;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use gmm::{DiagGmm, Embedding, RawGmmParams};
pub use model::{ModelConfig, PredictorParams};
pub use predictor::PhoneSeq;
