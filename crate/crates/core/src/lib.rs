//! Sparse-view volumetric structure prediction.
//!
//! A small reverse-mode tensor engine, the four 2D/3D encoder-decoder
//! topologies with depth/channel transforms and a task-conditioned head,
//! Z-axis interpolation, synthetic data, training with Gaussian sliding-window
//! inference, metrics and analytic resource profiling.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two instantiations.

pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod interp;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod profile;
pub mod scalar;
pub mod tensor;
pub mod topology;
pub mod transform;
pub mod verify;
pub mod voxel;

pub use autograd::{Tape, Var};
pub use error::{Result, SspError};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Network32 = topology::NetworkSpec<f32>;
pub type Network64 = topology::NetworkSpec<f64>;
