//! Sense-unit read/write decisions for simultaneous speech translation.
//!
//! The crate is organised bottom-up:
//!
//! - [`cif`]: weight scaling, threshold segmentation and integrate-and-fire.
//! - [`sud`]: the streaming detector and its weight oracles.
//! - [`sat`]: quantity losses and a toy detector trained on them.
//! - [`datagen`]: synthetic corpora with nested sense-unit annotations.
//! - [`policies`]: sense-unit, wait-k, local-agreement and mock-LLM policies.
//! - [`simulator`]: discrete-event simulation of a streaming session.
//! - [`metrics`]: LAAL, decision time, RTF and BLEU.
//! - [`report`]: per-utterance and aggregate CSV tables and sweeps.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cif;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod policies;
pub mod report;
pub mod sat;
pub mod simulator;
pub mod sud;

pub use error::{Error, Result};
