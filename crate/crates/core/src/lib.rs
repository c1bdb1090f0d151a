// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod bench;
pub mod cell;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod patch;
pub mod search;
pub mod train;

pub use error::{Result, StnasError};
