//! Estimating-equation inference with estimated nuisance parameters.

pub mod bootstrap;
pub mod data;
pub mod eecore;
pub mod error;
pub mod estimators;
pub mod nuisance;
pub mod numkit;
pub mod pipeline;
pub mod simlab;
pub mod variance;

pub use error::{Error, Result};
