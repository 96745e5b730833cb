//! Adapter-with-local-attributes toolkit: a WAP-Transformer backbone trained
//! by masked prediction against an EMA teacher with an online codebook of
//! local attributes, SAP-pooled fine-tuning, and cross-session evaluation,
//! all on precomputed or synthetic frame-level embeddings.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codebook;
pub mod cv;
pub mod error;
pub mod exec;
pub mod features;
pub mod finetune;
pub mod gradsuite;
pub mod metrics;
pub mod nn;
pub mod sap;
pub mod ssl;
pub mod synth;
pub mod wap;

pub use error::{Error, Result};
