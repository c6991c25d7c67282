//! Differentiable network: tensors, kernels, the layer graph, the
//! dual-branch model and its checkpoint format.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
pub use graph::{Gradients, LayerGraph, ParamGroup, Tape};
pub use model::{stage_size, NetOutputs, NetworkConfig, OutputGrads, UsNet};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
