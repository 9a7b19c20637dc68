//! Segmentation engine: tensors and layer ops with hand-written gradients,
//! the TernausNet U-Net, its BCE − ln(Jaccard) loss, Adam, data loading and
//! the training loop.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
