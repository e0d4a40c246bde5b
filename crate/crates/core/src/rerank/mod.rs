//! Corpus BLEU evaluation and n-best reranking.

pub mod bleu;
pub mod nbest;

pub use bleu::{corpus_bleu, corpus_bleu_with, BleuOptions, MAX_ORDER};
pub use nbest::{
    attach_scores, decode_nbest, default_weight_grid, read_nbest_tsv, rerank, tune_rerank,
    write_nbest_tsv, NBestList, RerankConfig, Scorer,
};
