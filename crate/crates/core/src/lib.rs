//! Prompt-driven style voice conversion.
//!
//! A conditional VAE converts discrete linguistic units back into mel
//! features under a global style vector. At conversion time the style
//! vector comes either from a reference utterance or from a latent
//! diffusion model conditioned on a natural-language prompt.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod duration;
pub mod error;
pub mod evaluation;
pub mod featio;
pub mod harness;
pub mod model;
pub mod nn;
pub mod prosody;
pub mod style;
pub mod synthesis;
pub mod units;

pub use error::{Error, Result};

pub type Matrix = ndarray::Array2<f64>;
