//! Stochastic lane-departure driver model.
//!
//! The pipeline reduces pre-segmented departure traces to 8-parameter
//! feature vectors ([`trace`]), fits a bounded Gaussian mixture to each
//! side's corpus ([`bgmm`]), regenerates new events from the fitted model
//! ([`sampler`]) and scores a lane-departure-correction controller on them in
//! closed-loop bicycle-model simulation ([`vehicle`], [`metrics`]).
//! [`synth`] builds corpora with known ground truth.

pub mod bgmm;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod trace;
pub mod vehicle;

pub use error::{Error, Result};
