//! Chinese spelling correction with an auxiliary pronunciation-prediction
//! task: pinyin handling, corpus synthesis, a small transformer trained with
//! reverse-mode autodiff, iterative inference and evaluation.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod pinyin;
pub mod training;

pub use error::{Error, Result};
