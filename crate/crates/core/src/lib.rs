pub mod autoencoder;
pub mod backend;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod repro;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
