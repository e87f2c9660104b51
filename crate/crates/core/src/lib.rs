//! Preference optimization as sampled negative-log-likelihood estimation on
//! discrete environments small enough to enumerate, so that every
//! normalizer, gradient and expectation can be checked exactly.

pub mod cli;
pub mod env;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod grad;
pub mod gradcheck;
pub mod losses;
pub mod numerics;
pub mod partition;
pub mod policy;
pub mod samplers;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
