// `!(x > 0.0)` is used on purpose so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod engine;
pub mod estimator;
pub mod harness;
pub mod objective;
pub mod streams;
pub mod topology;
