//! Profiling misinformation posters and active citizens from their post histories.
//!
//! The crate covers the whole pipeline: ingesting and filtering labeled user
//! histories ([`corpus`]), platform-aware text normalization ([`preprocess`]),
//! bag-of-words and lexicon features ([`features`]), the classical and
//! recurrent baselines ([`baselines`]), the chunked hierarchical transformer
//! ([`hiernet`]), the seeded training and evaluation protocol ([`trainer`]),
//! gradient-based token attribution ([`explain`]) and univariate correlation
//! analysis of language use ([`analysis`]).
//!
//! Neural models are built on a small reverse-mode autodiff engine in [`nn`].

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod explain;
pub mod features;
pub mod hiernet;
pub mod nn;
pub mod preprocess;
pub mod trainer;

pub use corpus::{Label, LabeledDataset, Platform, Post, UserRecord};
pub use error::{Error, Result};
