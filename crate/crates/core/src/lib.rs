//! Building blocks for identity-aware facial attribute transfer: a small
//! tensor library with reverse-mode autodiff, the transform, discriminator,
//! enhancement and embedding networks, every training objective, and ADAM.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). The type
//! aliases at the crate root pin the two precisions used in practice:
//! `f32` for training and `f64` for gradient checks.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod selfcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use graph::{Graph, Var};
pub use nn::{Checkpoint, LayerKind, LayerSpec, Network, NetworkSpec, ParamMode, Scale};
pub use optim::{Adam, AdamConfig, Gradients, NonFinitePolicy};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Adam32 = Adam<f32>;
pub type Adam64 = Adam<f64>;
