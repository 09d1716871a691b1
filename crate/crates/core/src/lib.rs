//! Mining semantic concepts from captioned landmark photo collections and
//! distilling them into per-pixel and per-point predictions.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fusion;
pub mod ids;
pub mod labeling;
pub mod mining;
pub mod numerics;
pub mod pairs;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod sfm;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Raster32 = raster::Raster<f32>;
pub type Raster64 = raster::Raster<f64>;
pub type FeatureMap32 = numerics::FeatureMap<f32>;
pub type FeatureMap64 = numerics::FeatureMap<f64>;
pub type ScoreMaps32 = numerics::ScoreMaps<f32>;
pub type ScoreMaps64 = numerics::ScoreMaps<f64>;
pub type ToyModel32 = trainer::ToyModel<f32>;
pub type ToyModel64 = trainer::ToyModel<f64>;
pub type ScoredCloud32 = fusion::ScoredCloud<f32>;
pub type ScoredCloud64 = fusion::ScoredCloud<f64>;
