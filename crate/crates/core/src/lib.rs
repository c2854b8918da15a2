//! Guided image-to-image translation with bi-directional feature
//! transformation, built on a small reverse-mode differentiation engine.

pub mod blob;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod params;
pub mod resize;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{Gradients, ParamStore};
pub use tensor::{DType, Element, Shape, Tensor};
