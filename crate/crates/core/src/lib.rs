//! Desk-scale speaker embedding laboratory.
//!
//! A self-contained pipeline: a seeded synthetic speaker corpus, a minimal
//! reverse-mode autodiff substrate, TDNN / residual-conv encoders with
//! statistical and learnable-dictionary pooling, softmax / angular-softmax
//! training objectives, an LDA + two-covariance PLDA verification backend,
//! EER / minDCF metrics, and a miniature conditional synthesizer used to
//! probe zero-shot speaker conditioning.

pub mod backend;
pub mod ckpt;
pub mod config;
pub mod embednet;
pub mod error;
pub mod metrics;
pub mod substrate;
pub mod svpipe;
pub mod synthdata;
pub mod ttsablation;

pub use error::{Error, Result};
