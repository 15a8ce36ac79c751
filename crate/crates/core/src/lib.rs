//! Auditing LLM-generated writing feedback for attribute-conditioned lexical bias.
//!
//! The pipeline builds contrastive prompts ([`promptgen`]), collects feedback from chat models
//! ([`llmgen`]), finds words whose usage odds differ between a marked condition and its contrast
//! ([`lexstats`]), measures how concentrated each document is in those words and regresses that
//! concentration on prompt condition ([`inference`]), and checks the stability of the results
//! ([`robustness`]). [`report`] ties the stages together and renders tables.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases below fix `f64`.

pub mod corpus;
pub mod inference;
pub mod lexstats;
pub mod linalg;
pub mod llmgen;
pub mod promptgen;
pub mod report;
pub mod robustness;
pub mod scalar;

pub use scalar::Scalar;

pub type MarkedWordResult = lexstats::MarkedWordResult<f64>;
pub type RegressionFit = inference::RegressionFit<f64>;
pub type DesignMatrix = inference::DesignMatrix<f64>;
pub type Matrix = linalg::Matrix<f64>;
