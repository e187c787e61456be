//! Desk-scale laboratory for certified trust-region training of
//! shared-context token teams.
//!
//! The crate builds small, exactly solvable token MDPs in which several
//! tabular-softmax agents take turns extending a shared context. On top of
//! that it provides exact occupancy/value/advantage evaluation by linear
//! solves, token-level KL functionals with sampled monitors, group-normalized
//! advantage estimation, a stage-wise sequential trust-region trainer with
//! stale/joint baselines, improvement certificates with all penalty terms,
//! plug-and-play agent replacement with probe-set alignment, and the
//! diagnostics (stale gaps, scaling exponents, ESS, calibration) needed to
//! check every bound against ground truth.

pub mod advantage;
pub mod certificate;
pub mod config;
pub mod diagnostics;
pub mod divergence;
pub mod env;
pub mod error;
pub mod exact;
pub mod plugswap;
pub mod policy;
pub mod runner;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
