//! Hammersley-Chapman-Robbins lower bounds on how well any unbiased estimator
//! can reconstruct the input of a feed-forward network from its dithered
//! (noise-added) features.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail positivity checks.

pub mod cli;
pub mod data;
pub mod dct;
pub mod error;
pub mod hcr;
pub mod lsqr;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{RngStream, Tensor};
