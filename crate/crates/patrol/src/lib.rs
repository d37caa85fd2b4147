//! Randomized patrol strategies on weighted graphs: surveillance metrics
//! (weighted mean hitting time, return-time entropy, Stackelberg capture
//! probability), exact gradients through the chain computations, multi-start
//! RMSprop optimization, greedy defense placement and a Monte Carlo
//! simulator for cross-checking the formulas.

pub mod chain;
pub mod error;
pub mod graph;
pub mod defense;
pub mod grad;
pub mod mc;
pub mod objective;
pub mod optimize;

mod linalg;
mod tape;

pub use error::{Error, Result};
