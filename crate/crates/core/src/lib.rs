// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod axes;
pub mod cli;
pub mod ba;
pub mod error;
pub mod geometry;
pub mod ids;
pub mod synth;
pub mod vanish;

pub use error::{Error, Result};
