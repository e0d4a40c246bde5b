//! Desk-scale neural machine translation research toolkit.
//!
//! Everything runs on synthetic translation tasks on one CPU core: a small
//! float64 autodiff engine, a genotype-configurable encoder-decoder
//! transformer, dual-learning and masked pre-training objectives,
//! architecture search with weight sharing, soft contextual augmentation,
//! and the corpus pipelines (BPE, filtering, back translation, distillation,
//! reranking) that tie them together.

pub mod error;
pub mod experiment;
pub mod madl;
pub mod mass;
pub mod nao;
pub mod numerics;
pub mod pipeline;
pub mod rerank;
pub mod sca;
pub mod seq2seq;

pub use error::{Error, Result};
