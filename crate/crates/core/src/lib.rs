// `!(x > 0.0)` style checks deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod rng;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
