//! Learning to defer to an expert population from a handful of
//! demonstrations, at desk scale.
//!
//! The pipeline: a frozen feature map over a synthetic classification task
//! ([`data`]), a simulated population of oracle-set experts ([`experts`]), a
//! context-set behavior model trained semi-supervised and used to synthesize
//! expert labels ([`behavior`]), and a population-aware deferral model
//! trained on those labels ([`l2d`]). [`harness`] wires it into sweeps.

pub mod behavior;
pub mod data;
pub mod error;
pub mod experts;
pub mod harness;
pub mod l2d;
pub mod numcore;
pub mod rng;

pub use error::{Error, Result};
