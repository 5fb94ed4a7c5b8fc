//! Feedback ("cold damping") cooling of a single trapped ion under continuous
//! homodyne position measurement.
//!
//! The crate is organised bottom-up:
//!
//! * [`fock`]: truncated Fock-space operators and density matrices.
//! * [`params`]: physical parameters, unit handling and validity checks.
//! * [`sme`]: the conditional stochastic master equation engine.
//! * [`gaussian`]: the exact conditional-Gaussian fast path.
//! * [`circuit`]: feedback electronics (bandpass, phase shifter, gain, delay).
//! * [`trajectory`]: the causal measurement/feedback loop shared by both engines.
//! * [`moments`]: the averaged feedback master equation and its steady state.
//! * [`spectra`]: Welch PSD, shot-noise normalisation, Lorentzian fits.
//! * [`scenarios`]: ensemble spectra and gain sweeps.
//! * [`validation`]: the acceptance criteria, shared by the CLI and tests.
//! * [`cli`]: configuration and scenario runner.
//!
//! Frequencies in configuration files are plain Hz; every rate inside the
//! crate is angular (rad/s).

// negated comparisons reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circuit;
pub mod cli;
pub mod error;
pub mod fock;
pub mod gaussian;
pub mod moments;
pub mod params;
pub mod record;
pub mod rng;
pub mod scenarios;
pub mod sme;
pub mod spectra;
pub mod trajectory;
pub mod validation;

pub use error::{Error, Result};
