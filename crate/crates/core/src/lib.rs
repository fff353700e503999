//! Cross-encoder re-ranking with input-order perturbation and a
//! position-embedding ablation.
//!
//! The crate bundles everything needed to run the experiments end to end:
//! collection and run-file I/O ([`corpus`]), a WordPiece-style tokenizer
//! ([`tokenizer`]), order perturbations ([`perturb`]), a small BERT-style
//! cross-encoder with hand-written backpropagation ([`model`], [`train`]),
//! a BM25 first stage ([`bm25`]), ranking metrics ([`eval`]) and linear CKA
//! for comparing representations ([`cka`]).

pub mod bm25;
pub mod cka;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod perturb;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
