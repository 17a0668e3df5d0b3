//! Zero-shot detection by synthesizing unseen-class features for a grid-cell
//! detector's confidence head.

pub mod detector;
pub mod error;
pub mod eval;
pub mod generator;
pub mod geometry;
pub mod numerics;
pub mod pipeline;
pub mod resample;
pub mod retrain;
pub mod rng;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
