// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod feeder;
pub mod nn;
pub mod opf;
pub mod risk;
pub mod trainer;
pub mod experiment;
