//! Unsupervised adaptation of a textual-prototype classifier on frozen
//! dual-encoder embeddings.
//!
//! Given unlabeled target embeddings (one weak view and several strong views
//! per sample) and prompt embeddings per class, the engine learns textual
//! prototypes and a light affine adapter from its own pseudo-labels. Labels
//! come from mixing two classifiers: the textual prototypes, debiased by a
//! running class marginal, and image prototypes kept as class means in a
//! memory bank. Inference uses the textual prototypes alone.
//!
//! Module map:
//!
//! | module | role |
//! |---|---|
//! | [`store`] | dataset model, `DPAE` file format, batching |
//! | [`prototypes`] | textual / image prototypes, memory bank |
//! | [`pseudo_label`] | scoring, distribution alignment, fusion, weights |
//! | [`objectives`] | losses and analytic gradients |
//! | [`optim`] | adapter, AdamW, cosine schedule |
//! | [`trainer`] | the adaptation loop, prediction |
//! | [`checkpoint`] | `DPAC` checkpoint format |
//! | [`eval`] | accuracy, confusion, prototype diagnostics |
//! | [`synth`] | synthetic misaligned datasets |
//! | [`config`], [`cli`] | run configuration and commands |

pub mod checkpoint;
pub mod cli;
mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod objectives;
pub mod optim;
pub mod prototypes;
pub mod pseudo_label;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
