//! Deterministic simulator of voltage-glitch fault-injection campaigns
//! against an embedded neural network that corrects 5-qubit readout.
//!
//! The pipeline mirrors a bench setup: a synthetic IQ dataset
//! ([`dataset`]) trains the 32-class network ([`model`], [`train`]); the
//! forward pass is compiled into a cycle-annotated micro-op trace
//! ([`trace`]); a glitch configuration is resolved into corruptions of
//! in-flight state by a susceptibility profile ([`fault`]); campaigns run
//! the reset/feed/glitch/log protocol ([`campaign`]); black-box search looks
//! for high-impact configurations ([`search`]); [`analysis`] produces the
//! Hamming, per-bit and class statistics; [`defense`] evaluates
//! countermeasures against the same attacker.

pub mod analysis;
pub mod campaign;
pub mod dataset;
pub mod defense;
pub mod error;
pub mod fault;
pub mod model;
pub mod search;
pub mod seed;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
