//! Uncertainty-aware distributional adversarial training.

pub mod attacks;
pub mod aum;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod shapiro;
pub mod statistics;
pub mod training;

pub use error::{Result, UadError};
