//! DSFormer: a spike-driven decision transformer for offline reinforcement
//! learning, built on a small from-scratch autodiff engine.

pub mod attention;
pub mod data;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod neuron;
pub mod norm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
