//! Dense `f64` tensors, layers with manual backpropagation, Adam, gradient
//! checking and checkpoint files.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::LayerSpec;
pub use network::{ForwardPass, Network, NetworkSpec};
pub use tensor::Tensor;
