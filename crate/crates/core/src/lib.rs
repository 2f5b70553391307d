//! Routed mixture-of-experts answering model with debiased score fusion,
//! a synthetic shifted-prior benchmark, training and evaluation.

pub mod copnet;
pub mod error;
pub mod evaluation;
pub mod moe;
pub mod numerics;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
