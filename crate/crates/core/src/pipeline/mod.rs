//! Corpus engineering and multi-stage training pipelines: subword learning,
//! filtering, noised back translation, sequence-level distillation, corpus
//! mixing, and the fine-tuning schedules built from them.

pub mod bpe;
pub mod bt_kd;
pub mod corpus;
pub mod files;

pub use bpe::{learn_bpe, pretokenize, BpeModel, END_OF_WORD};
pub use bt_kd::{
    back_translate, build_speculation_set, dev_bleu, distill, finetune_clean_subset,
    finetune_until_dev_drop, iterate_bt_kd, train_on_corpus, BtKdConfig, DecodeConfig,
    RoundRecord, TrainBudget,
};
pub use corpus::{
    add_noise, filter_corpus, mix_corpora, shard_mono, write_drop_log, Drop, FilterRuleSet,
    MonoCorpus, NoiseConfig, ParallelCorpus, Provenance, Side, TextCorpus, TextPair, TokenPair,
};
