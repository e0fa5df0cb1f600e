//! Layers with hand-written backward passes.

mod activation;
mod conv;
mod norm;

pub use activation::{maxpool2, maxpool2_backward, relu, relu_backward, sigmoid, sigmoid_backward};
pub use conv::{Conv2d, ConvGrad};
pub use norm::{BatchNorm, BnCache};
