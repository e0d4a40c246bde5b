//! Shared helpers and independent oracles for the integration suites.

#![allow(dead_code)]

use deskmt_core::numerics::{Adam, AdamConfig, CounterRng};
use deskmt_core::seq2seq::{
    build_model, transformer_genotype, ModelConfig, Seq2SeqModel, TokenSeq, Vocabulary,
};

pub mod reference_transformer;

pub fn payload_vocab(n: usize) -> Vocabulary {
    Vocabulary::new((0..n).map(|i| format!("t{i}"))).unwrap()
}

pub fn tiny_config(d: usize, heads: usize, layers: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: heads,
        d_ffn: 2 * d,
        n_layers: layers,
        dropout: 0.0,
        max_len,
        tied_embeddings: true,
        shared_vocab: true,
    }
}

pub fn tiny_model(vocab: &Vocabulary, seed: u64) -> Seq2SeqModel {
    build_model(transformer_genotype(1), tiny_config(8, 2, 1, 12), vocab, seed).unwrap()
}

/// Train `model` on fixed pairs for `steps` optimizer steps.
pub fn train_on(
    model: &mut Seq2SeqModel,
    pairs: &[(TokenSeq, TokenSeq)],
    steps: usize,
    lr: f64,
    seed: u64,
) {
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    let mut rng = CounterRng::new(seed);
    for _ in 0..steps {
        model.train_step(pairs, &mut opt, &mut rng).unwrap();
    }
}

/// Independent decoding oracle: enumerate every reachable output sequence
/// (content tokens never include EOS; sequences either end with EOS before
/// `max_len` or are cut at exactly `max_len`), score each by summed step
/// scores normalized by steps^length_penalty, and return the argmax.
/// Ties prefer the lexicographically smaller token sequence.
pub fn exhaustive_best<F>(
    step: &mut F,
    vocab: usize,
    eos: usize,
    max_len: usize,
    length_penalty: f64,
) -> (Vec<usize>, f64)
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    let mut best_score = f64::NEG_INFINITY;
    let mut best_tokens: Vec<usize> = Vec::new();
    let consider = |score: f64, tokens: Vec<usize>, bs: &mut f64, bt: &mut Vec<usize>| {
        if score > *bs || (score == *bs && tokens < *bt) {
            *bs = score;
            *bt = tokens;
        }
    };
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, cum)) = stack.pop() {
        let scores = step(&prefix);
        let steps_with_eos = prefix.len() + 1;
        let eos_score =
            (cum + scores[eos]) / (steps_with_eos as f64).powf(length_penalty);
        consider(eos_score, prefix.clone(), &mut best_score, &mut best_tokens);
        if prefix.len() + 1 == max_len {
            for (t, s) in scores.iter().enumerate() {
                if t == eos {
                    continue;
                }
                let full = cum + s;
                let norm = full / (max_len as f64).powf(length_penalty);
                let mut toks = prefix.clone();
                toks.push(t);
                consider(norm, toks, &mut best_score, &mut best_tokens);
            }
        } else {
            for (t, s) in scores.iter().enumerate() {
                if t == eos {
                    continue;
                }
                let mut toks = prefix.clone();
                toks.push(t);
                stack.push((toks, cum + s));
            }
        }
        debug_assert!(vocab == scores.len());
    }
    (best_tokens, best_score)
}
