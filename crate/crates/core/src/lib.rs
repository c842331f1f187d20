//! Self-supervised monocular depth with adaptive discrete disparity volumes.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;

pub mod checkpoint;
pub mod datagen;
pub mod ddv;
pub mod diffcore;
pub mod discretize;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod nets;
pub mod parallel;
pub mod params;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
