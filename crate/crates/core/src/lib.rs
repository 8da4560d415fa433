//! Angular-margin metric learning with per-class margins driven by measured
//! class favoritism, plus verification and fairness evaluation.

pub mod checkpoint;
pub mod cli;
pub mod data;
mod dd;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod favoritism;
pub mod gradcheck;
pub mod loss;
pub mod primitives;
pub mod trainer;

pub use error::{Error, Result};
