//! Dense CNN kernels: forward and backward passes for every layer the U-net
//! uses, the fused sigmoid + binary cross-entropy loss, and Adam.

mod activation;
mod adam;
mod conv;
mod loss;
mod norm;
mod pool;
mod tensor;

pub use activation::{
    concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar,
    split_channels,
};
pub use adam::{adam_step, AdamState};
pub use conv::{conv2d, conv2d_backward, transposed_conv2d, transposed_conv2d_backward};
pub use loss::bce_with_sigmoid;
pub use norm::{
    batchnorm2d, batchnorm2d_backward, infer_affine, BatchNorm, BnCache, Mode, BN_EPS,
    BN_MOMENTUM,
};
pub use pool::{maxpool2x2, maxpool2x2_backward, PoolIndices};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("target value {0} outside [0, 1]")]
    Target(f64),
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Gradients of a parametrized layer.
#[derive(Debug, Clone)]
pub struct LayerGrads<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Tensor<T>,
}
