#![allow(clippy::needless_range_loop)]

//! Desk-scale multi-task learning laboratory.
//!
//! The model family here combines a shared embedding/attention feature
//! pipeline with a bank of structurally different experts (deep, cross,
//! and field-wise interaction stacks), explicit elementwise mappings of
//! public expert outputs, per-task gates over the mapped outputs, and a
//! training-time "virtual gradient" that rescales each gate's gradient by
//! a coefficient computed from batch label similarity and inter-task gate
//! differences. A synthetic two-task benchmark generator and a training /
//! evaluation harness round out the crate.

pub mod error;
pub mod fd;
pub mod params;
pub mod tape;

pub mod experts;
pub mod feature;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod vgrad;

pub mod config;
pub mod report;
pub mod train;

pub use error::{Error, Result};
