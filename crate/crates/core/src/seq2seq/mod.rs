//! Encoder-decoder sequence models: vocabulary, architecture genotypes,
//! the transformer itself, and beam decoding.

pub mod beam;
pub mod genotype;
pub mod model;
pub mod vocab;

pub use beam::{beam_search, Hypothesis, ModelScorer, StepScorer};
pub use genotype::{
    all_zero_genotype, random_genotype, transformer_genotype, Branch, BranchInput, Genotype,
    LayerGene, NodeGene, OpKind,
};
pub use model::{
    build_model, read_model_container, write_model_container, Mode, ModelConfig, ModelContainer,
    Seq2SeqModel,
};
pub use vocab::{SpecialIds, TokenId, TokenSeq, Vocabulary};
