//! Perceptual material-appearance similarity learned from relative
//! comparisons: data model, losses, encoder training, evaluation,
//! embedding, adaptive sampling, analysis and gamut solving.

pub mod analysis;
pub mod answers;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gamut;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pdsc;
pub mod sampling;
pub mod synth;
pub mod train;
pub mod tste;

pub use error::{Error, Result};
