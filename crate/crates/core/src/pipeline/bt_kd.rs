//! Back translation, knowledge distillation and multi-stage fine-tuning.

use std::collections::HashSet;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::madl::AgentEnsemble;
use crate::numerics::{Adam, AdamConfig, CounterRng};
use crate::pipeline::corpus::{
    add_noise, mix_corpora, MonoCorpus, NoiseConfig, ParallelCorpus, Provenance, TokenPair,
};
use crate::rerank::{corpus_bleu_with, BleuOptions};
use crate::seq2seq::{Seq2SeqModel, TokenSeq};

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 5, length_penalty: 1.0, max_len: 24 }
    }
}

/// Translate target-language monolingual text with a reverse-direction
/// model, noise the synthetic sources, and pair them with the originals.
pub fn back_translate(
    reverse_model: &Seq2SeqModel,
    mono: &MonoCorpus,
    decode: &DecodeConfig,
    noise: &NoiseConfig,
    rng: &CounterRng,
) -> Result<ParallelCorpus> {
    noise.validate()?;
    let filler = reverse_model.specials.unk;
    let pairs: Vec<Option<TokenPair>> = mono
        .sentences
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let hyps = match reverse_model.beam_search(
                &y.ids,
                decode.beam,
                decode.length_penalty,
                decode.max_len,
            ) {
                Ok(h) => h,
                Err(e) => {
                    warn!("skipping sentence {i} in back translation: {e}");
                    return None;
                }
            };
            let raw = TokenSeq::new(hyps[0].tokens.clone());
            let mut noise_rng = rng.derive_idx(i as u64);
            let noised = add_noise(&raw, noise, filler, &mut noise_rng).ok()?;
            Some(TokenPair { src: noised, tgt: y.clone(), provenance: Provenance::Bt })
        })
        .collect();
    Ok(ParallelCorpus { pairs: pairs.into_iter().flatten().collect() })
}

/// Sequence-level distillation: sources kept verbatim, targets decoded by
/// the teacher (or a weighted teacher combination).
pub fn distill(
    teachers: &[&Seq2SeqModel],
    weights: Option<&[f64]>,
    sources: &MonoCorpus,
    decode: &DecodeConfig,
) -> Result<ParallelCorpus> {
    if teachers.is_empty() {
        return Err(Error::invalid("need at least one teacher"));
    }
    let weights = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0 / teachers.len() as f64; teachers.len()],
    };
    let ensemble = AgentEnsemble::new(teachers.to_vec(), weights)?;
    let pairs: Vec<Option<TokenPair>> = sources
        .sentences
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            match ensemble.combined_decode(&s.ids, decode.beam, decode.length_penalty, decode.max_len)
            {
                Ok(hyps) => Some(TokenPair {
                    src: s.clone(),
                    tgt: TokenSeq::new(hyps[0].tokens.clone()),
                    provenance: Provenance::Kd,
                }),
                Err(e) => {
                    warn!("skipping sentence {i} in distillation: {e}");
                    None
                }
            }
        })
        .collect();
    Ok(ParallelCorpus { pairs: pairs.into_iter().flatten().collect() })
}

#[derive(Debug, Clone)]
pub struct TrainBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        TrainBudget { steps: 300, batch_size: 8, lr: 1e-3 }
    }
}

/// Train a model on a corpus for a fixed number of random-batch steps.
pub fn train_on_corpus(
    model: &mut Seq2SeqModel,
    corpus: &ParallelCorpus,
    budget: &TrainBudget,
    rng: &mut CounterRng,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot train on an empty corpus"));
    }
    let pairs = corpus.training_pairs();
    let mut opt = Adam::new(AdamConfig::with_lr(budget.lr));
    for _ in 0..budget.steps {
        let batch: Vec<(TokenSeq, TokenSeq)> = (0..budget.batch_size.min(pairs.len()))
            .map(|_| pairs[rng.below(pairs.len())].clone())
            .collect();
        model.train_step(&batch, &mut opt, rng)?;
    }
    Ok(())
}

/// Greedy-decode dev sources and score them against references.
pub fn dev_bleu(
    model: &Seq2SeqModel,
    dev: &[(TokenSeq, TokenSeq)],
    decode: &DecodeConfig,
) -> Result<f64> {
    let hyps: Vec<Vec<usize>> = dev
        .par_iter()
        .map(|(src, _)| {
            model
                .beam_search(&src.ids, decode.beam, decode.length_penalty, decode.max_len)
                .map(|h| h[0].tokens.clone())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<Vec<usize>> = dev.iter().map(|(_, tgt)| tgt.ids.clone()).collect();
    corpus_bleu_with(&hyps, &refs, BleuOptions { add_one_smoothing: true })
}

#[derive(Debug, Clone)]
pub struct BtKdConfig {
    pub rounds: usize,
    pub decode: DecodeConfig,
    pub noise: NoiseConfig,
    pub bitext_upsample: usize,
    pub budget: TrainBudget,
    /// Retrain from scratch each round instead of continuing.
    pub from_scratch: bool,
    /// Seed for fresh per-round models when training from scratch.
    pub scratch_seed: u64,
    /// Allowed dev BLEU drop before a round is flagged.
    pub regression_tolerance: f64,
}

impl Default for BtKdConfig {
    fn default() -> Self {
        BtKdConfig {
            rounds: 2,
            decode: DecodeConfig::default(),
            noise: NoiseConfig::default(),
            bitext_upsample: 1,
            budget: TrainBudget::default(),
            from_scratch: true,
            scratch_seed: 1,
            regression_tolerance: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub dev_bleu: f64,
    /// Set when the round regressed beyond tolerance and the previous best
    /// model was retained.
    pub flagged: bool,
}

/// Iterate back translation and knowledge distillation: each round builds
/// synthetic data with the best models so far, retrains the forward model,
/// and archives the round's dev score. Returns the per-round records and
/// the best forward model.
#[allow(clippy::too_many_arguments)]
pub fn iterate_bt_kd(
    forward: Seq2SeqModel,
    reverse: Seq2SeqModel,
    bitext: &ParallelCorpus,
    mono_src: &MonoCorpus,
    mono_tgt: &MonoCorpus,
    dev: &[(TokenSeq, TokenSeq)],
    cfg: &BtKdConfig,
    rng: &mut CounterRng,
) -> Result<(Vec<RoundRecord>, Seq2SeqModel)> {
    if cfg.rounds < 1 {
        return Err(Error::invalid("need at least one round"));
    }
    let mut best = forward;
    let mut best_bleu = dev_bleu(&best, dev, &cfg.decode)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let bt_rng = rng.derive("bt").derive_idx(round as u64);
        let bt = back_translate(&reverse, mono_tgt, &cfg.decode, &cfg.noise, &bt_rng)?;
        let kd = distill(&[&best], None, mono_src, &cfg.decode)?;
        let mixed = mix_corpora(
            &[(bitext.clone(), cfg.bitext_upsample), (bt, 1), (kd, 1)],
            rng,
        )?;
        let mut candidate = if cfg.from_scratch {
            let fresh = crate::seq2seq::build_model(
                best.genotype.clone(),
                best.config.clone(),
                &vocab_stub(best.vocab_size)?,
                cfg.scratch_seed.wrapping_add(round as u64),
            )?;
            fresh
        } else {
            best.clone()
        };
        train_on_corpus(&mut candidate, &mixed, &cfg.budget, rng)?;
        let bleu = dev_bleu(&candidate, dev, &cfg.decode)?;
        let flagged = bleu + cfg.regression_tolerance < best_bleu;
        if !flagged && bleu >= best_bleu {
            best = candidate;
            best_bleu = bleu;
        }
        records.push(RoundRecord { round, dev_bleu: bleu, flagged });
    }
    Ok((records, best))
}

// Rebuilding a fresh model needs a vocabulary of matching size; models only
// retain the size, so reconstruct a placeholder with the right id space.
fn vocab_stub(size: usize) -> Result<crate::seq2seq::Vocabulary> {
    crate::seq2seq::Vocabulary::new((0..size.saturating_sub(6)).map(|i| format!("t{i}")))
}

/// Exactly one epoch over the clean subset. The subset must be non-empty
/// and contained in the full corpus. Returns the epoch count (always 1).
pub fn finetune_clean_subset(
    model: &mut Seq2SeqModel,
    full: &ParallelCorpus,
    clean: &ParallelCorpus,
    batch_size: usize,
    lr: f64,
    rng: &mut CounterRng,
) -> Result<usize> {
    if clean.is_empty() {
        return Err(Error::invalid("clean subset is empty"));
    }
    let full_set: HashSet<(&TokenSeq, &TokenSeq)> =
        full.pairs.iter().map(|p| (&p.src, &p.tgt)).collect();
    if let Some(missing) = clean.pairs.iter().find(|p| !full_set.contains(&(&p.src, &p.tgt))) {
        return Err(Error::invalid(format!(
            "clean pair not present in full corpus: {:?}",
            missing.src.ids
        )));
    }
    let mut order: Vec<usize> = (0..clean.len()).collect();
    rng.shuffle(&mut order);
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Vec<(TokenSeq, TokenSeq)> = chunk
            .iter()
            .map(|&i| (clean.pairs[i].src.clone(), clean.pairs[i].tgt.clone()))
            .collect();
        model.train_step(&batch, &mut opt, rng)?;
    }
    Ok(1)
}

/// Fine-tune epoch by epoch, stopping at the first dev BLEU decrease and
/// restoring the best parameters. Returns (epochs run, best dev BLEU).
#[allow(clippy::too_many_arguments)]
pub fn finetune_until_dev_drop(
    model: &mut Seq2SeqModel,
    corpus: &ParallelCorpus,
    dev: &[(TokenSeq, TokenSeq)],
    decode: &DecodeConfig,
    max_epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut CounterRng,
) -> Result<(usize, f64)> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot fine-tune on an empty corpus"));
    }
    let mut best_params = model.params.clone();
    let mut best_bleu = dev_bleu(model, dev, decode)?;
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    let mut epochs = 0;
    for _ in 0..max_epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size.max(1)) {
            let batch: Vec<(TokenSeq, TokenSeq)> = chunk
                .iter()
                .map(|&i| (corpus.pairs[i].src.clone(), corpus.pairs[i].tgt.clone()))
                .collect();
            model.train_step(&batch, &mut opt, rng)?;
        }
        epochs += 1;
        let bleu = dev_bleu(model, dev, decode)?;
        if bleu < best_bleu {
            break;
        }
        best_bleu = bleu;
        best_params = model.params.clone();
    }
    model.params = best_params;
    Ok((epochs, best_bleu))
}

/// Build the test-source speculation set: every model translates every test
/// source (`N_T * M` pairs), matched by an equal-size sample of bitext.
/// All pairs are tagged as speculation data.
pub fn build_speculation_set(
    models: &[&Seq2SeqModel],
    test_sources: &[TokenSeq],
    bitext: &ParallelCorpus,
    decode: &DecodeConfig,
    rng: &mut CounterRng,
) -> Result<ParallelCorpus> {
    if models.is_empty() || test_sources.is_empty() {
        return Err(Error::invalid("speculation needs at least one model and one source"));
    }
    if bitext.is_empty() {
        return Err(Error::invalid("speculation needs bitext to sample from"));
    }
    let mut pairs = Vec::new();
    for model in models {
        let decoded: Vec<TokenPair> = test_sources
            .par_iter()
            .map(|s| {
                let hyps =
                    model.beam_search(&s.ids, decode.beam, decode.length_penalty, decode.max_len)?;
                Ok(TokenPair {
                    src: s.clone(),
                    tgt: TokenSeq::new(hyps[0].tokens.clone()),
                    provenance: Provenance::Speculation,
                })
            })
            .collect::<Result<_>>()?;
        pairs.extend(decoded);
    }
    let need = pairs.len();
    if bitext.len() >= need {
        for i in rng.sample_without_replacement(bitext.len(), need) {
            let mut p = bitext.pairs[i].clone();
            p.provenance = Provenance::Speculation;
            pairs.push(p);
        }
    } else {
        for _ in 0..need {
            let mut p = bitext.pairs[rng.below(bitext.len())].clone();
            p.provenance = Provenance::Speculation;
            pairs.push(p);
        }
    }
    Ok(ParallelCorpus { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{build_model, transformer_genotype, ModelConfig, Vocabulary};

    fn vocab() -> Vocabulary {
        Vocabulary::new((0..10).map(|i| format!("t{i}"))).unwrap()
    }

    fn model(seed: u64) -> Seq2SeqModel {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            n_layers: 1,
            dropout: 0.0,
            max_len: 24,
            tied_embeddings: true,
            shared_vocab: true,
        };
        build_model(transformer_genotype(1), cfg, &vocab(), seed).unwrap()
    }

    fn copy_pairs(n: usize, rng: &mut CounterRng) -> Vec<(TokenSeq, TokenSeq)> {
        (0..n)
            .map(|_| {
                let len = 2 + rng.below(4);
                let s = TokenSeq::new((0..len).map(|_| 6 + rng.below(10)).collect());
                (s.clone(), s)
            })
            .collect()
    }

    #[test]
    fn empty_mono_gives_empty_corpus() {
        let m = model(1);
        let mono = MonoCorpus::new(vec![], "y").unwrap();
        let out = back_translate(
            &m,
            &mono,
            &DecodeConfig::default(),
            &NoiseConfig::none(),
            &CounterRng::new(0),
        )
        .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn overfit_copy_model_back_translates_identically() {
        let mut m = model(2);
        let mut rng = CounterRng::new(3);
        let pairs = copy_pairs(6, &mut rng);
        let corpus = ParallelCorpus::from_pairs(pairs.clone(), Provenance::Bitext);
        train_on_corpus(
            &mut m,
            &corpus,
            &TrainBudget { steps: 250, batch_size: 6, lr: 3e-3 },
            &mut rng,
        )
        .unwrap();
        let mono = MonoCorpus::new(pairs.iter().map(|(s, _)| s.clone()).collect(), "y").unwrap();
        let out = back_translate(
            &m,
            &mono,
            &DecodeConfig { beam: 2, ..Default::default() },
            &NoiseConfig::none(),
            &CounterRng::new(5),
        )
        .unwrap();
        assert_eq!(out.len(), mono.len());
        for (pair, y) in out.pairs.iter().zip(&mono.sentences) {
            assert_eq!(pair.src, *y, "copy model should reproduce its input");
            assert_eq!(pair.tgt, *y);
            assert_eq!(pair.provenance, Provenance::Bt);
        }
    }

    #[test]
    fn single_teacher_distillation_is_beam_top1() {
        let m = model(4);
        let mono = MonoCorpus::new(
            vec![TokenSeq::new(vec![6, 7]), TokenSeq::new(vec![8, 9, 10])],
            "x",
        )
        .unwrap();
        let decode = DecodeConfig { beam: 3, ..Default::default() };
        let out = distill(&[&m], None, &mono, &decode).unwrap();
        for (pair, s) in out.pairs.iter().zip(&mono.sentences) {
            let top = m.beam_search(&s.ids, 3, 1.0, 24).unwrap().remove(0);
            assert_eq!(pair.src, *s);
            assert_eq!(pair.tgt.ids, top.tokens);
            assert_eq!(pair.provenance, Provenance::Kd);
        }
    }

    #[test]
    fn duplicate_teachers_equal_single_teacher() {
        let m = model(5);
        let mono = MonoCorpus::new(vec![TokenSeq::new(vec![6, 9, 7])], "x").unwrap();
        let decode = DecodeConfig { beam: 2, ..Default::default() };
        let single = distill(&[&m], None, &mono, &decode).unwrap();
        let double = distill(&[&m, &m], None, &mono, &decode).unwrap();
        assert_eq!(single.pairs[0].tgt, double.pairs[0].tgt);
    }

    #[test]
    fn clean_subset_finetune_is_one_epoch_and_validates_subset() {
        let mut m = model(6);
        let mut rng = CounterRng::new(7);
        let pairs = copy_pairs(6, &mut rng);
        let full = ParallelCorpus::from_pairs(pairs.clone(), Provenance::Bitext);
        let clean = ParallelCorpus::from_pairs(pairs[..3].to_vec(), Provenance::Bitext);
        let epochs = finetune_clean_subset(&mut m, &full, &clean, 2, 1e-3, &mut rng).unwrap();
        assert_eq!(epochs, 1);
        // clean == full works too
        let epochs = finetune_clean_subset(&mut m, &full, &full, 2, 1e-3, &mut rng).unwrap();
        assert_eq!(epochs, 1);
        // non-subset rejected
        let alien = ParallelCorpus::from_pairs(
            vec![(TokenSeq::new(vec![6, 6, 6]), TokenSeq::new(vec![7]))],
            Provenance::Bitext,
        );
        assert!(finetune_clean_subset(&mut m, &full, &alien, 2, 1e-3, &mut rng).is_err());
        // empty subset rejected
        let empty = ParallelCorpus::default();
        assert!(finetune_clean_subset(&mut m, &full, &empty, 2, 1e-3, &mut rng).is_err());
    }

    #[test]
    fn speculation_set_has_exact_size_and_tag() {
        let m1 = model(8);
        let m2 = model(9);
        let sources: Vec<TokenSeq> = (0..3).map(|i| TokenSeq::new(vec![6 + i])).collect();
        let mut rng = CounterRng::new(10);
        let bitext = ParallelCorpus::from_pairs(copy_pairs(10, &mut rng), Provenance::Bitext);
        let decode = DecodeConfig { beam: 1, ..Default::default() };
        let out =
            build_speculation_set(&[&m1, &m2], &sources, &bitext, &decode, &mut rng).unwrap();
        // |E| = N_T * M = 6, |B2| = 6 -> 12 total
        assert_eq!(out.len(), 12);
        assert!(out.pairs.iter().all(|p| p.provenance == Provenance::Speculation));
        // small bitext falls back to sampling with replacement
        let tiny = ParallelCorpus::from_pairs(copy_pairs(2, &mut rng), Provenance::Bitext);
        let out2 =
            build_speculation_set(&[&m1, &m2], &sources, &tiny, &decode, &mut rng).unwrap();
        assert_eq!(out2.len(), 12);
    }

    #[test]
    fn single_round_iteration_produces_one_record() {
        let mut rng = CounterRng::new(11);
        let pairs = copy_pairs(8, &mut rng);
        let bitext = ParallelCorpus::from_pairs(pairs.clone(), Provenance::Bitext);
        let mono_src =
            MonoCorpus::new(pairs.iter().map(|(s, _)| s.clone()).collect(), "x").unwrap();
        let mono_tgt =
            MonoCorpus::new(pairs.iter().map(|(_, t)| t.clone()).collect(), "y").unwrap();
        let dev = pairs[..4].to_vec();
        let cfg = BtKdConfig {
            rounds: 1,
            decode: DecodeConfig { beam: 1, ..Default::default() },
            noise: NoiseConfig::none(),
            budget: TrainBudget { steps: 30, batch_size: 4, lr: 1e-3 },
            ..Default::default()
        };
        let (records, _best) =
            iterate_bt_kd(model(12), model(13), &bitext, &mono_src, &mono_tgt, &dev, &cfg, &mut rng)
                .unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].round, 0);
    }
}
