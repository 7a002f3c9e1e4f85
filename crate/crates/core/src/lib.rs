#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod local_pca;
pub mod highrank;
pub mod matching;
pub mod pipeline;
pub mod regression;
pub mod simulation;
pub mod stats;
pub mod tuning;

pub use error::{Error, Result};
