//! Interactive semantic segmentation of point clouds by test-time training.
//!
//! The library is generic over the scalar type (`f32` or `f64`); the aliases
//! below fix it to `f32`, which is what the service and the benchmark use.

pub mod eval;
pub mod optim;
pub mod refine;
pub mod scalar;
pub mod scene;
pub mod segnet;
pub mod sim;
pub mod tensor;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f32>;
pub type Tape = tensor::Tape<f32>;
pub type NetworkParams = segnet::NetworkParams<f32>;
pub type SegmentationState = segnet::SegmentationState<f32>;
pub type Session = refine::RefinementSession<f32>;
pub type Optimizer = optim::Optimizer<f32>;
