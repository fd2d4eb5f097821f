//! Uniform access to a layered image classifier: full forward, split
//! forward at a cataloged hidden layer, and tail gradients.

mod adapter;
pub mod network;
mod resize;

pub use adapter::{
    argmax, softmax_rows, AdapterConfig, ImageBatch, InputSize, LayerId, ModelHandle, Normalization, ResizeApplied,
};
pub use resize::resize_bilinear;

#[cfg(test)]
#[allow(unused_imports)]
pub(crate) use adapter::toy_model;
