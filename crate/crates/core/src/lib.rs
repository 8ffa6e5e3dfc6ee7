pub mod alignment;
pub mod checkpoint;
pub mod clustering;
pub mod counting;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scenegen;
pub mod separation;
pub mod trainer;

pub use error::{Error, Result};
