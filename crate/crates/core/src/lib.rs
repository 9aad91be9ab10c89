//! Roof replacement ("reroof") year detection from ordered yearly rooftop
//! images.
//!
//! Images are embedded with a β-VAE, adjacent latent pairs are scored by a
//! binary same/different-roof classifier, and the year with the highest
//! change probability is reported when that probability reaches 0.5. The
//! crate also ships the feature and categorical baselines, the evaluation
//! metrics, a synthetic data generator used as a verification oracle, and the
//! CO₂ impact chain for roof-age-aware solar prospecting.

pub mod changepoint;
pub mod data;
pub mod error;
pub mod evalmetrics;
pub mod exec;
pub mod impact;
pub mod numerics;
pub mod pairclf;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};
