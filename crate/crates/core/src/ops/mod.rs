//! Differentiable layer operations with hand-written backward passes.

mod activation;
mod concat;
pub(crate) mod conv;
mod init;
mod pool;
mod upconv;

pub use activation::{relu_backward, relu_forward, sigmoid, sigmoid_backward, sigmoid_forward};
pub(crate) use activation::{relu_in_place, relu_mask_in_place};
pub use concat::{concat_channels, split_channels_backward};
pub use conv::{
    conv2d_backward, conv2d_backward_opt, conv2d_forward, conv_strided_backward,
    conv_strided_forward, ConvGrads,
};
pub use init::{fan_in, lecun_bound, lecun_uniform_fill};
pub use pool::{maxpool2_backward, maxpool2_forward, min_window_gap, Argmax};
pub use upconv::{
    convtranspose2_backward, convtranspose2_forward, UP_CROP, UP_KERNEL, UP_STRIDE,
};
