//! Human-object interaction detection with a set-prediction transformer whose
//! queries are refined by semantic and spatial support features.

pub mod error;
pub mod evalmod;
pub mod datamodel;
pub mod geometry;
pub mod heads;
pub mod matchloss;
pub mod model;
pub mod nnkit;
pub mod semantic;
pub mod sfg;
pub mod spatial;
pub mod trainer;

pub use error::{Error, Result};
