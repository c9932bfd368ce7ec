//! Synchrophasor GPS-spoofing attack and defense workbench.
//!
//! The pipeline: a DC power-flow simulator produces PMU phase-angle and
//! branch-flow streams ([`grid`]); the attacker forecasts those streams with
//! Hankel low-rank models ([`hankel`]) and injects a relentless sequence of
//! small, residual-invisible phase shifts ([`attack`]); the defender runs four
//! bad-data detectors over the result ([`detectors`]). [`harness`] wires the
//! whole experiment together and [`export`] writes plot-ready CSV files.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod config;
pub mod detectors;
pub mod error;
pub mod export;
pub mod grid;
pub mod hankel;
pub mod harness;

pub use error::{Error, Result};
