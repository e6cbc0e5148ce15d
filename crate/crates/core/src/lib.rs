//! Counterfactual-size evaluation and prompt pipeline.

// NaN-rejecting guards read as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clients;
pub mod dataset;
pub mod dpo;
pub mod error;
pub mod evaluator;
pub mod jsonl;
pub mod label;
pub mod mask;
pub mod pair;
pub mod ranking;
pub mod report;
pub mod synthetic;

pub use error::{Error, Result};
pub use pair::ObjectPair;
