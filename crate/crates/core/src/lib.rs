//! Dual-channel knowledge-aware recommender: data handling, differentiable
//! building blocks, training and evaluation.

pub mod cf_propagation;
pub mod corpus;
pub mod diffkit;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod gradsuite;
pub mod kg_encoder;
pub mod ssl;
pub mod trainer;
pub mod translate;

pub use error::{Error, Result};
