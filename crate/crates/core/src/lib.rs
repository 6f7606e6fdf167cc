//! Sampling from the Sherrington-Kirkpatrick Gibbs measure by algorithmic
//! stochastic localization driven by the TAP free energy, with Jarzynski
//! reweighting, a polarized-walk terminal sampler, annealed partition
//! function estimates and rejection-sampling correction.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anneal;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod instance;
pub mod oracle;
pub mod pipeline;
pub mod rejection;
pub mod rng;
pub mod solver;
pub mod tap;
pub mod walk;

pub use error::{Error, Result};
pub use instance::SkInstance;
