//! Simulation and analysis of optical Stern-Gerlach spin detection for
//! ⁸⁷Sr atoms imaged with an EMCCD camera.

pub mod camera;
pub mod classifier;
pub mod config;
pub mod constants;
pub mod error;
pub mod experiment;
pub mod io;
pub mod montecarlo;
pub mod optics;
pub mod pipeline;
pub mod rng;
pub mod spin;

pub use error::{Error, Result};
