//! Attacks, margin triplet embedding regularization, and robustness
//! evaluation for MNIST classifiers built on `mter-nn`.

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod report;
pub mod seed;

pub use error::{MterError, Result};
