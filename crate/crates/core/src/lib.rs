//! Hover state estimation for sub-gram flying robots.
//!
//! The crate covers the whole estimation chain for planar (x-z) hover:
//! a linear plant simulator, gyroscope/pressure/camera sensor models,
//! Lucas-Kanade optic flow, a gyro-as-input Kalman observer with takeoff
//! blanking, covariance calibration, an onboard compute budget model and a
//! replay/evaluation harness.

pub mod budget;
pub mod calibration;
pub mod dynamics;
pub mod error;
pub mod flow;
pub mod harness;
pub mod kf;
pub mod model;
pub mod sensors;

pub use error::{Error, Result};
pub use model::{Config, InputVec, MeasVec, Model, NoiseConfig, PlantParams, StateVec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG stream for trial `trial` of a run seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Formats a value with 9 significant digits for CSV output.
pub(crate) fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}
