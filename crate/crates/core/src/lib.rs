#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod landscape;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
