//! Gated-feedback recurrent networks with exact truncated backpropagation through time.
// Index loops over several parallel arrays read closer to the math than zipped iterators.
#![allow(clippy::needless_range_loop)]

pub mod cells;
pub mod charlm;
pub mod cli;
pub mod error;
pub mod gfstack;
pub mod gradcheck;
pub mod numerics;
pub mod progeval;
pub mod training;

pub use error::{Error, Result};
