//! Geometry-aware reconstruction of deformable surfaces from a single image.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod depthnet;
pub mod detect2d;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod procrustes;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Op, Tape, Var};
pub use tensor::{Tensor, TensorError};
