#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod attribution;
pub mod concepts;
pub mod contrast;
pub mod crop_index;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod harness;
pub mod model;
pub mod nmf;
pub mod persist;
pub mod seed;

pub use error::{Error, Result};
