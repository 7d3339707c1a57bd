//! Two-phase dense retriever training and evaluation.
//!
//! The pipeline preprocesses text, retrieves BM25+ candidates, trains a
//! dual encoder with in-batch InfoNCE on BM25+ negatives (phase 1), mines
//! hard negatives with that model and fine-tunes on them one query at a time
//! (phase 2), then searches with the trained encoders, alone or in a weighted
//! ensemble with BM25+, and scores the runs with R@k, MRR@k, MAP@k and nDCG@k.

mod binio;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod mining;
pub mod pipeline;
pub mod retrieval;
pub mod sparse;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
