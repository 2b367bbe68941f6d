//! Clinically-aware, density-regularized model-based offline RL for
//! mechanical circulatory support (MCS) weaning.

// `!(x >= 0.0)` rejects NaN along with negatives
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod eval;
pub mod guardian;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod reward;
pub mod rl;
pub mod rng;
pub mod service;
pub mod synth;
pub mod twin;

pub use error::{Error, Result};
