// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Numeric kernels index several buffers with one counter.
#![allow(clippy::needless_range_loop, clippy::type_complexity)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
