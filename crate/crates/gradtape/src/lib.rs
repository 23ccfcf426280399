//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Everything is two-dimensional: vectors are `1 × n` rows, scalars are
//! `1 × 1`. Elementwise binary operations broadcast unit dimensions.

mod adam;
mod average;
mod params;
mod tape;

pub use adam::Adam;
pub use average::WeightAverage;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

pub type Matrix = ndarray::Array2<f64>;
