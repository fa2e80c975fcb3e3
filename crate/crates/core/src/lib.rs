#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod autodiff;
pub mod bayes;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod predictor;
pub mod training;

pub use error::{Error, Result};
