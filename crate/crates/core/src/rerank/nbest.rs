//! N-best lists, heterogeneous scoring and reranking.
//!
//! Beam decoding produces per-source candidate lists; scorers (left-to-right
//! models, right-to-left models, searched architectures) attach one
//! log-probability per hypothesis; reranking picks the argmax of a weighted
//! score sum plus an additive length term. Weight and length-penalty grids
//! are tuned against corpus BLEU on a development set.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rerank::bleu::{corpus_bleu_with, BleuOptions};
use crate::seq2seq::{Hypothesis, Seq2SeqModel, TokenSeq, Vocabulary};

/// Candidate translations for a batch of source sentences.
#[derive(Debug, Clone, Default)]
pub struct NBestList {
    pub sources: Vec<TokenSeq>,
    pub sentences: Vec<Vec<Hypothesis>>,
}

impl NBestList {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Uniform per-hypothesis scorer-vector length, if consistent.
    pub fn scorer_count(&self) -> Result<usize> {
        let mut count: Option<usize> = None;
        for hyps in &self.sentences {
            for h in hyps {
                match count {
                    None => count = Some(h.scorer_scores.len()),
                    Some(c) if c != h.scorer_scores.len() => {
                        return Err(Error::invalid(
                            "hypotheses carry scorer vectors of different lengths",
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(count.unwrap_or(0))
    }
}

/// Decode an n-best list for every source with one model.
pub fn decode_nbest(
    model: &Seq2SeqModel,
    sources: &[TokenSeq],
    beam_size: usize,
    length_penalty: f64,
    max_len: usize,
) -> Result<NBestList> {
    let sentences: Vec<Vec<Hypothesis>> = sources
        .par_iter()
        .map(|src| model.beam_search(&src.ids, beam_size, length_penalty, max_len))
        .collect::<Result<_>>()?;
    Ok(NBestList { sources: sources.to_vec(), sentences })
}

/// A scorer is a model plus a direction flag; reversed scorers were trained
/// on reversed targets and score hypotheses right-to-left.
pub type Scorer<'a> = (&'a Seq2SeqModel, bool);

/// Attach one log-probability per scorer to every hypothesis.
pub fn attach_scores(nbest: &mut NBestList, scorers: &[Scorer<'_>]) -> Result<()> {
    if scorers.is_empty() {
        return Err(Error::invalid("need at least one scorer"));
    }
    let v0 = scorers[0].0.vocab_size;
    if scorers.iter().any(|(m, _)| m.vocab_size != v0) {
        return Err(Error::Vocab("scorers disagree on vocabulary size".into()));
    }
    if nbest.sources.len() != nbest.sentences.len() {
        return Err(Error::invalid("n-best list lacks source sentences for scoring"));
    }
    let scored: Vec<Vec<Vec<f64>>> = nbest
        .sources
        .par_iter()
        .zip(nbest.sentences.par_iter())
        .map(|(src, hyps)| {
            hyps.iter()
                .map(|h| {
                    scorers
                        .iter()
                        .map(|(m, reversed)| m.score_sequence(&src.ids, &h.tokens, *reversed))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    for (hyps, scores) in nbest.sentences.iter_mut().zip(scored) {
        for (h, s) in hyps.iter_mut().zip(scores) {
            h.scorer_scores = s;
        }
    }
    Ok(())
}

/// Reranking weights and additive length reward.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankConfig {
    pub weights: Vec<f64>,
    pub length_penalty: f64,
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("reranker needs at least one nonzero weight"));
        }
        Ok(())
    }
}

fn rerank_score(h: &Hypothesis, cfg: &RerankConfig) -> f64 {
    let weighted: f64 = cfg
        .weights
        .iter()
        .zip(&h.scorer_scores)
        .map(|(w, s)| w * s)
        .sum();
    weighted + cfg.length_penalty * h.tokens.len() as f64
}

/// Pick one hypothesis per source: argmax of the weighted scorer sum plus
/// the length term; ties break toward the earlier hypothesis.
pub fn rerank(nbest: &NBestList, cfg: &RerankConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let k = nbest.scorer_count()?;
    if k != cfg.weights.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} scorers",
            cfg.weights.len(),
            k
        )));
    }
    nbest
        .sentences
        .iter()
        .enumerate()
        .map(|(i, hyps)| {
            if hyps.is_empty() {
                return Err(Error::invalid(format!("sentence {i} has no hypotheses")));
            }
            let mut best = 0usize;
            let mut best_score = rerank_score(&hyps[0], cfg);
            for (j, h) in hyps.iter().enumerate().skip(1) {
                let s = rerank_score(h, cfg);
                if s > best_score {
                    best = j;
                    best_score = s;
                }
            }
            Ok(hyps[best].clone())
        })
        .collect()
}

/// Exhaustive grid search over weights and length penalties, maximizing
/// corpus BLEU of the reranked output. Ties prefer the smaller length
/// penalty, then lexicographically smaller weights.
pub fn tune_rerank(
    nbest: &NBestList,
    references: &[TokenSeq],
    weight_grid: &[Vec<f64>],
    lambda_grid: &[f64],
) -> Result<RerankConfig> {
    if weight_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::invalid("tuning grids must be non-empty"));
    }
    if references.len() != nbest.len() {
        return Err(Error::invalid("one reference per source required"));
    }
    let refs: Vec<Vec<usize>> = references.iter().map(|r| r.ids.clone()).collect();
    let mut best: Option<(f64, RerankConfig)> = None;
    for weights in weight_grid {
        for &lambda in lambda_grid {
            let cfg = RerankConfig { weights: weights.clone(), length_penalty: lambda };
            if cfg.validate().is_err() {
                continue;
            }
            let picked = rerank(nbest, &cfg)?;
            let hyp_tokens: Vec<Vec<usize>> = picked.into_iter().map(|h| h.tokens).collect();
            let bleu = corpus_bleu_with(
                &hyp_tokens,
                &refs,
                BleuOptions { add_one_smoothing: true },
            )?;
            let better = match &best {
                None => true,
                Some((b, c)) => {
                    bleu > *b
                        || (bleu == *b
                            && (lambda < c.length_penalty
                                || (lambda == c.length_penalty && *weights < c.weights)))
                }
            };
            if better {
                best = Some((bleu, cfg));
            }
        }
    }
    best.map(|(_, cfg)| cfg)
        .ok_or_else(|| Error::invalid("no valid grid point (all weights zero?)"))
}

/// Simplex lattice over `k` scorers with the given resolution, always
/// containing the unit vectors, so a tuned configuration can never lose to
/// any single scorer on the tuning set.
pub fn default_weight_grid(k: usize, steps: usize) -> Vec<Vec<f64>> {
    assert!(k >= 1 && steps >= 1);
    let mut out = Vec::new();
    let mut current = vec![0usize; k];
    fn fill(out: &mut Vec<Vec<f64>>, current: &mut Vec<usize>, pos: usize, left: usize, steps: usize) {
        if pos + 1 == current.len() {
            current[pos] = left;
            out.push(current.iter().map(|&c| c as f64 / steps as f64).collect());
            return;
        }
        for take in 0..=left {
            current[pos] = take;
            fill(out, current, pos + 1, left - take, steps);
        }
    }
    fill(&mut out, &mut current, 0, steps, steps);
    out.retain(|w| w.iter().any(|x| *x > 0.0));
    out
}

// ── Interchange format ──────────────────────────────────────────────────

/// Write the TSV interchange format:
/// `sent_id, hyp_rank, tokens, gen_score, scorer scores...`.
pub fn write_nbest_tsv<W: std::io::Write>(
    nbest: &NBestList,
    vocab: &Vocabulary,
    w: &mut W,
) -> Result<()> {
    for (sid, hyps) in nbest.sentences.iter().enumerate() {
        for (rank, h) in hyps.iter().enumerate() {
            let tokens = h
                .tokens
                .iter()
                .map(|&t| vocab.token(t).to_string())
                .collect::<Vec<_>>()
                .join(" ");
            write!(w, "{sid}\t{rank}\t{tokens}\t{}", h.score)?;
            for s in &h.scorer_scores {
                write!(w, "\t{s}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Read the TSV interchange format. Sources are not part of the format;
/// the returned list supports reranking but not re-scoring.
pub fn read_nbest_tsv<R: std::io::BufRead>(vocab: &Vocabulary, r: R) -> Result<NBestList> {
    let mut sentences: Vec<Vec<Hypothesis>> = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(Error::format(format!("n-best line {} has too few fields", ln + 1)));
        }
        let sid: usize = fields[0]
            .parse()
            .map_err(|_| Error::format(format!("bad sent_id on line {}", ln + 1)))?;
        let tokens: Vec<usize> = fields[2]
            .split_whitespace()
            .map(|t| vocab.id_or_unk(t))
            .collect();
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| Error::format(format!("bad gen_score on line {}", ln + 1)))?;
        let scorer_scores: Vec<f64> = fields[4..]
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::format(format!("bad scorer score on line {}", ln + 1)))
            })
            .collect::<Result<_>>()?;
        while sentences.len() <= sid {
            sentences.push(Vec::new());
        }
        sentences[sid].push(Hypothesis {
            tokens,
            logprob: score,
            score,
            eos_ended: true,
            scorer_scores,
        });
    }
    Ok(NBestList { sources: Vec::new(), sentences })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyp(tokens: Vec<usize>, scores: Vec<f64>) -> Hypothesis {
        Hypothesis {
            tokens,
            logprob: 0.0,
            score: 0.0,
            eos_ended: true,
            scorer_scores: scores,
        }
    }

    fn toy_nbest() -> NBestList {
        NBestList {
            sources: vec![TokenSeq::new(vec![6])],
            sentences: vec![vec![
                hyp(vec![6, 7], vec![-1.0, -4.0]),
                hyp(vec![6], vec![-2.0, -1.0]),
                hyp(vec![7, 8, 9], vec![-3.0, -2.0]),
            ]],
        }
    }

    #[test]
    fn rerank_hand_computed_weighted_argmax() {
        let nbest = toy_nbest();
        // weights (1, 0): scores -1, -2, -3 -> hyp 0
        let cfg = RerankConfig { weights: vec![1.0, 0.0], length_penalty: 0.0 };
        assert_eq!(rerank(&nbest, &cfg).unwrap()[0].tokens, vec![6, 7]);
        // weights (0, 1): scores -4, -1, -2 -> hyp 1
        let cfg = RerankConfig { weights: vec![0.0, 1.0], length_penalty: 0.0 };
        assert_eq!(rerank(&nbest, &cfg).unwrap()[0].tokens, vec![6]);
        // equal weights with a length reward of 2 per token:
        // h0: -2.5 + 4 = 1.5, h1: -1.5 + 2 = 0.5, h2: -2.5 + 6 = 3.5 -> hyp 2
        let cfg = RerankConfig { weights: vec![0.5, 0.5], length_penalty: 2.0 };
        assert_eq!(rerank(&nbest, &cfg).unwrap()[0].tokens, vec![7, 8, 9]);
    }

    #[test]
    fn positive_scaling_of_weights_is_argmax_invariant() {
        let nbest = toy_nbest();
        for lambda in [0.0, 0.7] {
            let a = rerank(
                &nbest,
                &RerankConfig { weights: vec![0.3, 0.7], length_penalty: lambda },
            )
            .unwrap();
            let b = rerank(
                &nbest,
                &RerankConfig { weights: vec![0.9, 2.1], length_penalty: lambda * 3.0 },
            )
            .unwrap();
            assert_eq!(a[0].tokens, b[0].tokens);
        }
    }

    #[test]
    fn all_zero_weights_rejected() {
        let cfg = RerankConfig { weights: vec![0.0, 0.0], length_penalty: 1.0 };
        assert!(rerank(&toy_nbest(), &cfg).is_err());
    }

    #[test]
    fn empty_hypothesis_set_rejected() {
        let nbest = NBestList {
            sources: vec![TokenSeq::new(vec![6])],
            sentences: vec![vec![]],
        };
        let cfg = RerankConfig { weights: vec![1.0], length_penalty: 0.0 };
        assert!(rerank(&nbest, &cfg).is_err());
    }

    #[test]
    fn tie_breaks_toward_earlier_hypothesis() {
        let nbest = NBestList {
            sources: vec![TokenSeq::new(vec![6])],
            sentences: vec![vec![hyp(vec![7], vec![-1.0]), hyp(vec![8], vec![-1.0])]],
        };
        let cfg = RerankConfig { weights: vec![1.0], length_penalty: 0.0 };
        assert_eq!(rerank(&nbest, &cfg).unwrap()[0].tokens, vec![7]);
    }

    #[test]
    fn grid_of_one_point_returns_that_point() {
        let nbest = toy_nbest();
        let refs = vec![TokenSeq::new(vec![6, 7])];
        let cfg = tune_rerank(&nbest, &refs, &[vec![0.5, 0.5]], &[0.25]).unwrap();
        assert_eq!(cfg, RerankConfig { weights: vec![0.5, 0.5], length_penalty: 0.25 });
    }

    #[test]
    fn tuned_config_matches_reference_on_tuning_set() {
        let nbest = toy_nbest();
        let refs = vec![TokenSeq::new(vec![6, 7])];
        let grid = default_weight_grid(2, 4);
        let cfg = tune_rerank(&nbest, &refs, &grid, &[0.0, 0.5]).unwrap();
        let picked = rerank(&nbest, &cfg).unwrap();
        assert_eq!(picked[0].tokens, vec![6, 7]);
    }

    #[test]
    fn default_grid_contains_unit_vectors() {
        let grid = default_weight_grid(3, 4);
        for k in 0..3 {
            let mut unit = vec![0.0; 3];
            unit[k] = 1.0;
            assert!(grid.contains(&unit));
        }
        // no all-zero point
        assert!(grid.iter().all(|w| w.iter().any(|x| *x > 0.0)));
    }

    #[test]
    fn unit_weight_reproduces_single_scorer_ranking() {
        let nbest = toy_nbest();
        for k in 0..2 {
            let mut w = vec![0.0; 2];
            w[k] = 1.0;
            let cfg = RerankConfig { weights: w, length_penalty: 0.0 };
            let picked = rerank(&nbest, &cfg).unwrap();
            // argmax over scorer k alone
            let best = nbest.sentences[0]
                .iter()
                .max_by(|a, b| {
                    a.scorer_scores[k].partial_cmp(&b.scorer_scores[k]).unwrap()
                })
                .unwrap();
            assert_eq!(picked[0].tokens, best.tokens);
        }
    }

    #[test]
    fn tsv_round_trip() {
        let vocab = Vocabulary::new((0..8).map(|i| format!("t{i}"))).unwrap();
        let nbest = toy_nbest();
        let mut buf = Vec::new();
        write_nbest_tsv(&nbest, &vocab, &mut buf).unwrap();
        let loaded = read_nbest_tsv(&vocab, buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), nbest.len());
        for (a, b) in loaded.sentences[0].iter().zip(&nbest.sentences[0]) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.scorer_scores, b.scorer_scores);
        }
    }
}
