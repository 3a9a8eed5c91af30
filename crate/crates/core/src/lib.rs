//! Occlusion-masked diffusion for pedestrian motion reconstruction and
//! crossing-intention prediction.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file pin the common instantiations.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod intention;
pub mod model;
pub mod nn;
pub mod occlusion;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use diffusion::NoiseSchedule;
pub use error::{OdmError, Result};
pub use scalar::Scalar;
pub use tensor::Mat;

pub type Mat64 = Mat<f64>;
pub type Mat32 = Mat<f32>;
pub type OdmModel64 = model::OdmModel<f64>;
pub type OdmModel32 = model::OdmModel<f32>;
