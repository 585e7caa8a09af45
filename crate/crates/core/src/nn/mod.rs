//! Minimal deterministic layer toolkit: tensors, conv/linear/relu layers with
//! analytic backward passes, losses and SGD.

mod gemm;
pub mod init;
pub mod layers;
pub mod loss;
pub mod optim;
mod params;
mod tensor;

pub use layers::{conv2d, Conv2d, ConvGeometry, Layer, LayerCache, Linear, Sequential, Trace};
pub use loss::{
    binary_cross_entropy, l2_point_loss, sigmoid, sigmoid_binary_cross_entropy,
    softmax_cross_entropy, BCE_CLAMP,
};
pub use optim::{sgd_step, CosineSchedule};
pub use params::{Param, ParamId, ParamSet};
pub use tensor::Tensor;
