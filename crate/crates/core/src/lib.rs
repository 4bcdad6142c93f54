//! Spatial-temporal networks (super-image 2-D backbones with temporal 3-D blocks and
//! a temporal Xception head) and early+late multimodal fusion, built on a small
//! dense tensor library with reverse-mode autodiff.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod fusion;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod sampling;
pub mod stnet;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
