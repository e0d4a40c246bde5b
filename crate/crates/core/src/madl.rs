//! Multi-agent dual learning.
//!
//! N translation models per direction are combined on a probability simplex.
//! The combined model decodes by summing weighted per-step log-probabilities
//! across agents; only the index-0 agent of each direction is ever trained.
//! The objective adds two bitext NLL terms (one per direction) and two
//! reconstruction terms that run monolingual text through the combined
//! round trip: translations are decoded without gradients, and the
//! reconstruction is scored by the trainable agent alone, scaled by its
//! simplex weight, so frozen agents contribute translations, not gradients.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, CounterRng, GradMap, Tape};
use crate::seq2seq::{beam_search, Hypothesis, Mode, ModelScorer, Seq2SeqModel, StepScorer};
use crate::seq2seq::{SpecialIds, TokenId, TokenSeq};

pub const WEIGHT_TOLERANCE: f64 = 1e-9;

/// Weights must be nonnegative and sum to one.
pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid("ensemble needs at least one weight"));
    }
    if let Some(w) = weights.iter().find(|w| **w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid(format!("weight {w} is not a valid probability")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(Error::WeightSimplex { sum });
    }
    Ok(())
}

/// Simplex-weighted combination of same-direction translation models.
pub struct AgentEnsemble<'a> {
    pub models: Vec<&'a Seq2SeqModel>,
    pub weights: Vec<f64>,
}

impl<'a> AgentEnsemble<'a> {
    pub fn new(models: Vec<&'a Seq2SeqModel>, weights: Vec<f64>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("ensemble needs at least one model"));
        }
        if models.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} models but {} weights",
                models.len(),
                weights.len()
            )));
        }
        validate_weights(&weights)?;
        let v0 = models[0].vocab_size;
        if models.iter().any(|m| m.vocab_size != v0) {
            return Err(Error::Vocab("ensemble members disagree on vocabulary size".into()));
        }
        Ok(AgentEnsemble { models, weights })
    }

    pub fn equal_weights(models: Vec<&'a Seq2SeqModel>) -> Result<Self> {
        let n = models.len();
        AgentEnsemble::new(models, vec![1.0 / n as f64; n])
    }

    /// Per-step combined score over the vocabulary:
    /// `sum_i w_i * log P(token | src, prefix; model_i)`. This is a score,
    /// not a probability; it is never renormalized.
    pub fn combined_logprob(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.models[0].vocab_size];
        for (m, &w) in self.models.iter().zip(&self.weights) {
            let lp = m.logprobs(src, prefix)?;
            for (a, l) in acc.iter_mut().zip(&lp) {
                *a += w * l;
            }
        }
        Ok(acc)
    }

    /// Beam decode under the combined per-step score.
    pub fn combined_decode(
        &self,
        src: &[TokenId],
        beam_size: usize,
        length_penalty: f64,
        max_len: usize,
    ) -> Result<Vec<Hypothesis>> {
        let cap = self
            .models
            .iter()
            .map(|m| m.config.max_len - 1)
            .min()
            .unwrap()
            .min(max_len);
        let mut scorer = EnsembleScorer::new(self, src)?;
        beam_search(&mut scorer, beam_size, length_penalty, cap)
    }
}

/// Step scorer for a weighted model combination.
pub struct EnsembleScorer<'a> {
    members: Vec<ModelScorer<'a>>,
    weights: &'a [f64],
}

impl<'a> EnsembleScorer<'a> {
    pub fn new(ensemble: &'a AgentEnsemble<'a>, src: &[TokenId]) -> Result<Self> {
        let members = ensemble
            .models
            .iter()
            .map(|m| m.scorer(src))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleScorer { members, weights: &ensemble.weights })
    }
}

impl StepScorer for EnsembleScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn specials(&self) -> SpecialIds {
        self.members[0].specials()
    }

    fn step(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.vocab_size()];
        for (member, &w) in self.members.iter_mut().zip(self.weights) {
            let lp = member.step(prefix)?;
            for (a, l) in acc.iter_mut().zip(&lp) {
                *a += w * l;
            }
        }
        Ok(acc)
    }
}

/// Training corpora: bitext plus optional monolingual sets per side.
#[derive(Debug, Clone, Default)]
pub struct MadlCorpora {
    pub bitext: Vec<(TokenSeq, TokenSeq)>,
    pub mono_x: Vec<TokenSeq>,
    pub mono_y: Vec<TokenSeq>,
}

#[derive(Debug, Clone)]
pub struct MadlDecodeConfig {
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for MadlDecodeConfig {
    fn default() -> Self {
        MadlDecodeConfig { beam: 4, length_penalty: 1.0, max_len: 24 }
    }
}

/// Value and gradients of the four-term objective.
pub struct MadlLoss {
    pub loss: f64,
    /// `[bitext_f, bitext_g, reconstruct_x, reconstruct_y]`
    pub terms: [f64; 4],
    pub grads_f0: GradMap,
    pub grads_g0: GradMap,
}

fn mean_nll_node(
    model: &Seq2SeqModel,
    tape: &mut Tape,
    pairs: &[(&[TokenId], &[TokenId])],
    weight: f64,
    trainable: bool,
    mode: &mut Mode,
) -> Result<Option<crate::numerics::NodeId>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut acc = None;
    for (src, tgt) in pairs {
        let nll = model.pair_nll_node(tape, src, tgt, trainable, mode)?;
        acc = Some(match acc {
            None => nll,
            Some(a) => tape.add(a, nll),
        });
    }
    Ok(acc.map(|a| tape.scale(a, weight / pairs.len() as f64)))
}

/// Compute the objective on the given corpora. Translation steps for the
/// reconstruction terms run the combined decode with gradients stopped;
/// only index-0 agents appear in the returned gradient maps.
pub fn madl_loss(
    f_agents: &AgentEnsemble<'_>,
    g_agents: &AgentEnsemble<'_>,
    corpora: &MadlCorpora,
    decode: &MadlDecodeConfig,
) -> Result<MadlLoss> {
    if corpora.bitext.is_empty() {
        return Err(Error::invalid("bitext must be non-empty"));
    }
    let f0 = f_agents.models[0];
    let g0 = g_agents.models[0];
    let alpha0 = f_agents.weights[0];
    let beta0 = g_agents.weights[0];

    // round-trip translations, gradient-stopped
    let x_to_y: Vec<TokenSeq> = corpora
        .mono_x
        .iter()
        .map(|x| {
            let hyps = f_agents.combined_decode(&x.ids, decode.beam, decode.length_penalty, decode.max_len)?;
            Ok(TokenSeq::new(hyps[0].tokens.clone()))
        })
        .collect::<Result<_>>()?;
    let y_to_x: Vec<TokenSeq> = corpora
        .mono_y
        .iter()
        .map(|y| {
            let hyps = g_agents.combined_decode(&y.ids, decode.beam, decode.length_penalty, decode.max_len)?;
            Ok(TokenSeq::new(hyps[0].tokens.clone()))
        })
        .collect::<Result<_>>()?;

    let mut mode = Mode::Eval;

    // f0 tape: bitext x->y plus reconstruction of mono_y from its round trip
    let mut tape_f = Tape::new();
    let bitext_fwd: Vec<(&[TokenId], &[TokenId])> = corpora
        .bitext
        .iter()
        .map(|(x, y)| (x.ids.as_slice(), y.ids.as_slice()))
        .collect();
    let term_a = mean_nll_node(f0, &mut tape_f, &bitext_fwd, 1.0, true, &mut mode)?
        .expect("bitext is non-empty");
    let recon_y_pairs: Vec<(&[TokenId], &[TokenId])> = y_to_x
        .iter()
        .zip(&corpora.mono_y)
        .map(|(xhat, y)| (xhat.ids.as_slice(), y.ids.as_slice()))
        .collect();
    let term_d = mean_nll_node(f0, &mut tape_f, &recon_y_pairs, alpha0, true, &mut mode)?;
    let f_total = match term_d {
        Some(d) => tape_f.add(term_a, d),
        None => term_a,
    };

    // g0 tape: bitext y->x plus reconstruction of mono_x
    let mut tape_g = Tape::new();
    let bitext_rev: Vec<(&[TokenId], &[TokenId])> = corpora
        .bitext
        .iter()
        .map(|(x, y)| (y.ids.as_slice(), x.ids.as_slice()))
        .collect();
    let term_b = mean_nll_node(g0, &mut tape_g, &bitext_rev, 1.0, true, &mut mode)?
        .expect("bitext is non-empty");
    let recon_x_pairs: Vec<(&[TokenId], &[TokenId])> = x_to_y
        .iter()
        .zip(&corpora.mono_x)
        .map(|(yhat, x)| (yhat.ids.as_slice(), x.ids.as_slice()))
        .collect();
    let term_c = mean_nll_node(g0, &mut tape_g, &recon_x_pairs, beta0, true, &mut mode)?;
    let g_total = match term_c {
        Some(c) => tape_g.add(term_b, c),
        None => term_b,
    };

    let grads_f = tape_f.backward(f_total)?;
    let grads_g = tape_g.backward(g_total)?;

    let terms = [
        tape_f.value(term_a),
        tape_g.value(term_b),
        term_c.map(|c| tape_g.value(c)).unwrap_or(0.0),
        term_d.map(|d| tape_f.value(d)).unwrap_or(0.0),
    ];
    Ok(MadlLoss {
        loss: tape_f.value(f_total) + tape_g.value(g_total),
        terms,
        grads_f0: tape_f.param_grads(&grads_f),
        grads_g0: tape_g.param_grads(&grads_g),
    })
}

#[derive(Debug, Clone)]
pub struct MadlTrainConfig {
    pub steps: usize,
    pub bitext_batch: usize,
    pub mono_batch: usize,
    /// Fraction of each monolingual corpus sampled up front.
    pub mono_fraction: f64,
    /// Re-decode the sampled monolingual data every n steps (0 = only once).
    pub refresh_every_n_steps: usize,
    pub decode: MadlDecodeConfig,
    pub lr: f64,
    /// Where to drop checkpoints of the last finite state on divergence.
    pub abort_checkpoint_dir: Option<PathBuf>,
}

impl Default for MadlTrainConfig {
    fn default() -> Self {
        MadlTrainConfig {
            steps: 100,
            bitext_batch: 8,
            mono_batch: 4,
            mono_fraction: 1.0,
            refresh_every_n_steps: 0,
            decode: MadlDecodeConfig::default(),
            lr: 5e-4,
            abort_checkpoint_dir: None,
        }
    }
}

fn subsample(items: &[TokenSeq], fraction: f64, rng: &mut CounterRng) -> Vec<TokenSeq> {
    let n = ((items.len() as f64) * fraction).round() as usize;
    let n = n.min(items.len());
    rng.sample_without_replacement(items.len(), n)
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}

/// Iterate the objective, updating only the index-0 agents. Frozen agents
/// are read-only throughout. Aborts on a non-finite loss, checkpointing the
/// last finite state if a directory is configured.
#[allow(clippy::too_many_arguments)]
pub fn madl_train(
    f0: &mut Seq2SeqModel,
    g0: &mut Seq2SeqModel,
    frozen_f: &[Seq2SeqModel],
    frozen_g: &[Seq2SeqModel],
    alpha: &[f64],
    beta: &[f64],
    corpora: &MadlCorpora,
    cfg: &MadlTrainConfig,
    rng: &mut CounterRng,
) -> Result<Vec<f64>> {
    validate_weights(alpha)?;
    validate_weights(beta)?;
    if corpora.bitext.is_empty() {
        return Err(Error::invalid("bitext must be non-empty"));
    }
    let mono_x = subsample(&corpora.mono_x, cfg.mono_fraction, rng);
    let mono_y = subsample(&corpora.mono_y, cfg.mono_fraction, rng);

    let mut opt_f = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut opt_g = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);

    // translations of the sampled monolingual data, refreshed on schedule
    let mut x_to_y: Vec<TokenSeq> = Vec::new();
    let mut y_to_x: Vec<TokenSeq> = Vec::new();

    for step in 0..cfg.steps {
        let needs_decode = step == 0
            || (cfg.refresh_every_n_steps > 0 && step % cfg.refresh_every_n_steps == 0);
        if needs_decode {
            let f_ens = ensemble_of(f0, frozen_f, alpha)?;
            x_to_y = mono_x
                .iter()
                .map(|x| {
                    let hyps = f_ens.combined_decode(
                        &x.ids,
                        cfg.decode.beam,
                        cfg.decode.length_penalty,
                        cfg.decode.max_len,
                    )?;
                    Ok(TokenSeq::new(hyps[0].tokens.clone()))
                })
                .collect::<Result<_>>()?;
            drop(f_ens);
            let g_ens = ensemble_of(g0, frozen_g, beta)?;
            y_to_x = mono_y
                .iter()
                .map(|y| {
                    let hyps = g_ens.combined_decode(
                        &y.ids,
                        cfg.decode.beam,
                        cfg.decode.length_penalty,
                        cfg.decode.max_len,
                    )?;
                    Ok(TokenSeq::new(hyps[0].tokens.clone()))
                })
                .collect::<Result<_>>()?;
        }

        let pick_pairs = |rng: &mut CounterRng| -> Vec<(TokenSeq, TokenSeq)> {
            (0..cfg.bitext_batch.min(corpora.bitext.len()))
                .map(|_| corpora.bitext[rng.below(corpora.bitext.len())].clone())
                .collect()
        };
        let bitext_batch = pick_pairs(rng);
        let pick_mono = |pool: &[TokenSeq], trans: &[TokenSeq], rng: &mut CounterRng| {
            if pool.is_empty() {
                return Vec::new();
            }
            (0..cfg.mono_batch.min(pool.len()))
                .map(|_| {
                    let i = rng.below(pool.len());
                    (pool[i].clone(), trans[i].clone())
                })
                .collect::<Vec<_>>()
        };
        let xy = pick_mono(&mono_x, &x_to_y, rng); // (x, yhat)
        let yx = pick_mono(&mono_y, &y_to_x, rng); // (y, xhat)

        let step_loss = {
            let alpha0 = alpha[0];
            let beta0 = beta[0];
            let mut mode = Mode::Eval;

            let mut tape_f = Tape::new();
            let fwd: Vec<(&[TokenId], &[TokenId])> =
                bitext_batch.iter().map(|(x, y)| (x.ids.as_slice(), y.ids.as_slice())).collect();
            let a = mean_nll_node(f0, &mut tape_f, &fwd, 1.0, true, &mut mode)?.unwrap();
            let dpairs: Vec<(&[TokenId], &[TokenId])> =
                yx.iter().map(|(y, xhat)| (xhat.ids.as_slice(), y.ids.as_slice())).collect();
            let d = mean_nll_node(f0, &mut tape_f, &dpairs, alpha0, true, &mut mode)?;
            let f_total = match d {
                Some(d) => tape_f.add(a, d),
                None => a,
            };

            let mut tape_g = Tape::new();
            let rev: Vec<(&[TokenId], &[TokenId])> =
                bitext_batch.iter().map(|(x, y)| (y.ids.as_slice(), x.ids.as_slice())).collect();
            let b = mean_nll_node(g0, &mut tape_g, &rev, 1.0, true, &mut mode)?.unwrap();
            let cpairs: Vec<(&[TokenId], &[TokenId])> =
                xy.iter().map(|(x, yhat)| (yhat.ids.as_slice(), x.ids.as_slice())).collect();
            let c = mean_nll_node(g0, &mut tape_g, &cpairs, beta0, true, &mut mode)?;
            let g_total = match c {
                Some(c) => tape_g.add(b, c),
                None => b,
            };

            let loss = tape_f.value(f_total) + tape_g.value(g_total);
            if !loss.is_finite() {
                if let Some(dir) = &cfg.abort_checkpoint_dir {
                    std::fs::create_dir_all(dir)?;
                    f0.save(&dir.join("f0.last-finite.dmt"), "translation")?;
                    g0.save(&dir.join("g0.last-finite.dmt"), "translation")?;
                }
                return Err(Error::Diverged(format!("non-finite loss at step {step}")));
            }
            let gf = tape_f.backward(f_total)?;
            let gg = tape_g.backward(g_total)?;
            opt_f.step(&mut f0.params, &tape_f.param_grads(&gf));
            opt_g.step(&mut g0.params, &tape_g.param_grads(&gg));
            loss
        };
        losses.push(step_loss);
    }
    Ok(losses)
}

fn ensemble_of<'a>(
    trainable: &'a Seq2SeqModel,
    frozen: &'a [Seq2SeqModel],
    weights: &[f64],
) -> Result<AgentEnsemble<'a>> {
    let mut models: Vec<&Seq2SeqModel> = vec![trainable];
    models.extend(frozen.iter());
    AgentEnsemble::new(models, weights.to_vec())
}

// ── Ensemble manifest ───────────────────────────────────────────────────

const MANIFEST_MAGIC: &str = "deskmt-ensemble v1";

/// Write an ordered (weight, checkpoint path) manifest.
pub fn write_manifest(path: &Path, entries: &[(f64, PathBuf)]) -> Result<()> {
    validate_weights(&entries.iter().map(|(w, _)| *w).collect::<Vec<_>>())?;
    let mut out = String::from(MANIFEST_MAGIC);
    out.push('\n');
    for (w, p) in entries {
        out.push_str(&format!("{w}\t{}\n", p.display()));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a manifest, refusing any weight-constraint violation before any
/// model is touched.
pub fn read_manifest(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_MAGIC) {
        return Err(Error::format("bad ensemble manifest magic"));
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (w, p) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("manifest line {} lacks a tab", i + 2)))?;
        let w: f64 = w
            .parse()
            .map_err(|_| Error::format(format!("bad weight on manifest line {}", i + 2)))?;
        entries.push((w, PathBuf::from(p)));
    }
    validate_weights(&entries.iter().map(|(w, _)| *w).collect::<Vec<_>>())?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{build_model, transformer_genotype, ModelConfig, Vocabulary};

    fn vocab() -> Vocabulary {
        Vocabulary::new((0..6).map(|i| format!("t{i}"))).unwrap()
    }

    fn model(seed: u64) -> Seq2SeqModel {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            n_layers: 1,
            dropout: 0.0,
            max_len: 16,
            tied_embeddings: true,
            shared_vocab: true,
        };
        build_model(transformer_genotype(1), cfg, &vocab(), seed).unwrap()
    }

    #[test]
    fn weight_validation() {
        validate_weights(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        validate_weights(&[1.0]).unwrap();
        match validate_weights(&[0.5, 0.4]) {
            Err(Error::WeightSimplex { sum }) => assert!((sum - 0.9).abs() < 1e-12),
            other => panic!("expected simplex violation, got {other:?}"),
        }
        assert!(validate_weights(&[-0.1, 1.1]).is_err());
        assert!(validate_weights(&[]).is_err());
    }

    #[test]
    fn single_model_combination_is_identity() {
        let m = model(1);
        let ens = AgentEnsemble::new(vec![&m], vec![1.0]).unwrap();
        let src = [6usize, 7];
        let a = ens.combined_logprob(&src, &[8]).unwrap();
        let b = m.logprobs(&src, &[8]).unwrap();
        assert_eq!(a, b);
        let da = ens.combined_decode(&src, 3, 1.0, 4).unwrap();
        let db = m.beam_search(&src, 3, 1.0, 4).unwrap();
        assert_eq!(da[0].tokens, db[0].tokens);
        assert_eq!(da[0].logprob.to_bits(), db[0].logprob.to_bits());
    }

    #[test]
    fn equal_weights_average_the_log_vectors() {
        let m1 = model(1);
        let m2 = model(2);
        let ens = AgentEnsemble::equal_weights(vec![&m1, &m2]).unwrap();
        let src = [6usize, 7, 8];
        let got = ens.combined_logprob(&src, &[]).unwrap();
        let a = m1.logprobs(&src, &[]).unwrap();
        let b = m2.logprobs(&src, &[]).unwrap();
        for i in 0..got.len() {
            assert!((got[i] - 0.5 * (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_weight_selects_one_model() {
        let m1 = model(3);
        let m2 = model(4);
        let ens = AgentEnsemble::new(vec![&m1, &m2], vec![1.0, 0.0]).unwrap();
        let src = [6usize, 9];
        let got = ens.combined_logprob(&src, &[7]).unwrap();
        let want = m1.logprobs(&src, &[7]).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_agents_leaves_decode_unchanged() {
        let m1 = model(5);
        let m2 = model(6);
        let src = [6usize, 7, 8];
        let a = AgentEnsemble::new(vec![&m1, &m2], vec![0.3, 0.7])
            .unwrap()
            .combined_decode(&src, 4, 1.0, 4)
            .unwrap();
        let b = AgentEnsemble::new(vec![&m2, &m1], vec![0.7, 0.3])
            .unwrap()
            .combined_decode(&src, 4, 1.0, 4)
            .unwrap();
        assert_eq!(a[0].tokens, b[0].tokens);
        assert!((a[0].score - b[0].score).abs() < 1e-12);
    }

    #[test]
    fn empty_mono_reduces_to_bitext_terms() {
        let f = model(7);
        let g = model(8);
        let corpora = MadlCorpora {
            bitext: vec![
                (TokenSeq::new(vec![6, 7]), TokenSeq::new(vec![7, 6])),
                (TokenSeq::new(vec![8, 9]), TokenSeq::new(vec![9, 8])),
            ],
            ..Default::default()
        };
        let fe = AgentEnsemble::new(vec![&f], vec![1.0]).unwrap();
        let ge = AgentEnsemble::new(vec![&g], vec![1.0]).unwrap();
        let out = madl_loss(&fe, &ge, &corpora, &MadlDecodeConfig::default()).unwrap();
        assert_eq!(out.terms[2], 0.0);
        assert_eq!(out.terms[3], 0.0);
        // bit-level: loss equals the sum of the two baseline NLL means
        let base_f = f.eval_nll(&corpora.bitext).unwrap();
        let rev: Vec<_> =
            corpora.bitext.iter().map(|(x, y)| (y.clone(), x.clone())).collect();
        let base_g = g.eval_nll(&rev).unwrap();
        assert_eq!(out.loss.to_bits(), (base_f + base_g).to_bits());
    }

    #[test]
    fn gradient_keys_are_only_trainable_agents() {
        let f = model(9);
        let g = model(10);
        let f1 = model(11);
        let g1 = model(12);
        let corpora = MadlCorpora {
            bitext: vec![(TokenSeq::new(vec![6, 7]), TokenSeq::new(vec![7, 6]))],
            mono_x: vec![TokenSeq::new(vec![6, 8])],
            mono_y: vec![TokenSeq::new(vec![9, 7])],
        };
        let fe = AgentEnsemble::new(vec![&f, &f1], vec![0.5, 0.5]).unwrap();
        let ge = AgentEnsemble::new(vec![&g, &g1], vec![0.5, 0.5]).unwrap();
        let out = madl_loss(&fe, &ge, &corpora, &MadlDecodeConfig::default()).unwrap();
        // every key resolves inside the trainable stores
        assert!(out.grads_f0.keys().all(|pid| pid.0 < f.params.len()));
        assert!(out.grads_g0.keys().all(|pid| pid.0 < g.params.len()));
        assert!(!out.grads_f0.is_empty());
        assert!(!out.grads_g0.is_empty());
        assert!(out.terms[2] > 0.0);
        assert!(out.terms[3] > 0.0);
    }

    #[test]
    fn perturbing_frozen_agent_changes_loss_not_grad_keys() {
        let f = model(13);
        let g = model(14);
        let mut f1 = model(15);
        let g1 = model(16);
        let corpora = MadlCorpora {
            bitext: vec![(TokenSeq::new(vec![6, 7, 8]), TokenSeq::new(vec![8, 7, 6]))],
            mono_x: vec![TokenSeq::new(vec![6, 9, 10])],
            mono_y: vec![],
        };
        let decode = MadlDecodeConfig::default();
        let run = |f1: &Seq2SeqModel| {
            let fe = AgentEnsemble::new(vec![&f, f1], vec![0.5, 0.5]).unwrap();
            let ge = AgentEnsemble::new(vec![&g, &g1], vec![0.5, 0.5]).unwrap();
            madl_loss(&fe, &ge, &corpora, &decode).unwrap()
        };
        let before = run(&f1);
        let first = f1.params.iter().next().map(|(pid, _)| pid).unwrap();
        for v in &mut f1.params.get_mut(first).data {
            *v += 0.5;
        }
        let after = run(&f1);
        assert_ne!(before.loss.to_bits(), after.loss.to_bits());
        let keys_before: Vec<_> = before.grads_f0.keys().collect();
        let keys_after: Vec<_> = after.grads_f0.keys().collect();
        assert_eq!(keys_before, keys_after);
    }

    #[test]
    fn zero_steps_leaves_models_unchanged() {
        let mut f = model(17);
        let mut g = model(18);
        let (ff, fg) = (f.params.fingerprint(), g.params.fingerprint());
        let corpora = MadlCorpora {
            bitext: vec![(TokenSeq::new(vec![6, 7]), TokenSeq::new(vec![7, 6]))],
            ..Default::default()
        };
        let cfg = MadlTrainConfig { steps: 0, ..Default::default() };
        let mut rng = CounterRng::new(0);
        let losses =
            madl_train(&mut f, &mut g, &[], &[], &[1.0], &[1.0], &corpora, &cfg, &mut rng)
                .unwrap();
        assert!(losses.is_empty());
        assert_eq!(f.params.fingerprint(), ff);
        assert_eq!(g.params.fingerprint(), fg);
    }

    #[test]
    fn frozen_agents_unchanged_by_training() {
        let mut f = model(19);
        let mut g = model(20);
        let frozen_f = vec![model(21)];
        let frozen_g = vec![model(22)];
        let before_f: Vec<u64> = frozen_f.iter().map(|m| m.params.fingerprint()).collect();
        let before_g: Vec<u64> = frozen_g.iter().map(|m| m.params.fingerprint()).collect();
        let corpora = MadlCorpora {
            bitext: vec![(TokenSeq::new(vec![6, 7]), TokenSeq::new(vec![7, 6]))],
            mono_x: vec![TokenSeq::new(vec![6, 8])],
            mono_y: vec![TokenSeq::new(vec![7, 9])],
        };
        let cfg = MadlTrainConfig { steps: 3, ..Default::default() };
        let mut rng = CounterRng::new(1);
        let w = [0.5, 0.5];
        let losses = madl_train(
            &mut f, &mut g, &frozen_f, &frozen_g, &w, &w, &corpora, &cfg, &mut rng,
        )
        .unwrap();
        assert_eq!(losses.len(), 3);
        let after_f: Vec<u64> = frozen_f.iter().map(|m| m.params.fingerprint()).collect();
        let after_g: Vec<u64> = frozen_g.iter().map(|m| m.params.fingerprint()).collect();
        assert_eq!(before_f, after_f);
        assert_eq!(before_g, after_g);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.manifest");
        let entries = vec![
            (0.5, PathBuf::from("a.dmt")),
            (0.25, PathBuf::from("b.dmt")),
            (0.25, PathBuf::from("c.dmt")),
        ];
        write_manifest(&path, &entries).unwrap();
        let loaded = read_manifest(&path).unwrap();
        assert_eq!(loaded, entries);
        // violating manifest refused
        let bad = vec![(0.5, PathBuf::from("a.dmt")), (0.4, PathBuf::from("b.dmt"))];
        assert!(write_manifest(&dir.path().join("bad.manifest"), &bad).is_err());
        std::fs::write(
            dir.path().join("bad2.manifest"),
            format!("{MANIFEST_MAGIC}\n0.5\ta.dmt\n0.4\tb.dmt\n"),
        )
        .unwrap();
        assert!(read_manifest(&dir.path().join("bad2.manifest")).is_err());
    }

    #[test]
    fn mismatched_vocab_rejected() {
        let m1 = model(1);
        let other_vocab = Vocabulary::new((0..9).map(|i| format!("t{i}"))).unwrap();
        let cfg = m1.config.clone();
        let m2 = build_model(transformer_genotype(1), cfg, &other_vocab, 2).unwrap();
        assert!(AgentEnsemble::equal_weights(vec![&m1, &m2]).is_err());
    }
}
