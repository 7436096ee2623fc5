#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
