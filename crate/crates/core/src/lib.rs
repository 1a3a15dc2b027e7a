//! Proactive cooperative edge caching driven by an autoencoder demand
//! predictor, trained either at the CS or across MENs with the CS acting as a
//! synchronous parameter server.

// Validation uses negated comparisons so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cache;
pub mod data;
pub mod dist;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
