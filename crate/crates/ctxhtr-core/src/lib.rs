//! Writer-adaptive handwritten text recognition through in-context examples.
//!
//! The pipeline: a synthetic-writer corpus ([`corpus`]), a context-relative
//! tokenizer ([`tokenizer`]), a reverse-mode autodiff engine ([`autodiff`]),
//! a CNN-Transformer in two variants ([`network`]), a curriculum trainer
//! ([`trainer`]), greedy decoding plus confidence-based late fusion
//! ([`decoding`]), evaluation metrics ([`metrics`]), and the experiment
//! drivers behind the CLI ([`experiment`]).

pub mod autodiff;
pub mod corpus;
pub mod decoding;
pub mod experiment;
pub mod metrics;
pub mod network;
pub mod tokenizer;
pub mod trainer;
