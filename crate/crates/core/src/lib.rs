//! Hierarchical patching mixer for long-term multivariate time-series
//! forecasting: a learnable cycle branch for periodicity and a residual
//! branch built from a learnable stationary wavelet transform, channel-mixing
//! attention and coarse/fine patch mixers.

pub mod cycle;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod patching;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
