//! Multi-object 3D visual grounding: a small reverse-mode autodiff engine,
//! a stage-refined fusion transformer, teacher/student training on a
//! synthetic indoor benchmark, and F1@0.5 evaluation.

pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod params;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
