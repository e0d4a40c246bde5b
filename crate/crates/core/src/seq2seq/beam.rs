//! Beam search over any per-step scorer.
//!
//! The same machinery drives single models and weighted model combinations:
//! anything implementing [`StepScorer`] supplies per-step scores over the
//! vocabulary and the search does the rest. Candidates are pruned by
//! cumulative score; finished hypotheses are ranked by
//! `score = cumulative / steps^length_penalty` where `steps` counts every
//! generated token including the terminating EOS. Ties break by token id,
//! then by insertion order, so results are fully deterministic.

use crate::error::{Error, Result};
use crate::seq2seq::model::Seq2SeqModel;
use crate::seq2seq::vocab::{SpecialIds, TokenId};

/// One scored candidate translation.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Content tokens, without BOS/EOS.
    pub tokens: Vec<TokenId>,
    /// Cumulative per-step score (includes the EOS step when `eos_ended`).
    pub logprob: f64,
    /// Length-normalized ranking score.
    pub score: f64,
    pub eos_ended: bool,
    /// Per-scorer log-probabilities attached during reranking.
    pub scorer_scores: Vec<f64>,
}

/// Per-step scoring interface for beam decoding.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn specials(&self) -> SpecialIds;
    /// Scores over the vocabulary for the next position given `prefix`.
    fn step(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// A single model decoding one source sentence.
pub struct ModelScorer<'m> {
    model: &'m Seq2SeqModel,
    enc: crate::seq2seq::model::EncodedSource,
}

impl Seq2SeqModel {
    pub fn scorer(&self, src: &[TokenId]) -> Result<ModelScorer<'_>> {
        Ok(ModelScorer { model: self, enc: self.encode_source(src)? })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    fn specials(&self) -> SpecialIds {
        self.model.specials
    }

    fn step(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.model.step_logprobs(&mut self.enc, prefix)
    }
}

struct Partial {
    tokens: Vec<TokenId>,
    logprob: f64,
}

/// Length-normalized final score.
fn normalized(logprob: f64, steps: usize, length_penalty: f64) -> f64 {
    logprob / (steps as f64).powf(length_penalty)
}

/// Beam search; returns up to `beam_size` hypotheses sorted best-first.
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    beam_size: usize,
    length_penalty: f64,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_size < 1 {
        return Err(Error::invalid(format!("beam size must be >= 1, got {beam_size}")));
    }
    if max_len < 1 {
        return Err(Error::invalid("max_len must be >= 1"));
    }
    let eos = scorer.specials().eos;
    let vocab = scorer.vocab_size();

    let mut active = vec![Partial { tokens: Vec::new(), logprob: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        if active.is_empty() {
            break;
        }
        // (cumulative, token, beam index)
        let mut candidates: Vec<(f64, TokenId, usize)> =
            Vec::with_capacity(active.len() * vocab);
        for (bi, partial) in active.iter().enumerate() {
            let scores = scorer.step(&partial.tokens)?;
            debug_assert_eq!(scores.len(), vocab);
            for (tok, s) in scores.iter().enumerate() {
                candidates.push((partial.logprob + s, tok, bi));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(beam_size);

        let last_step = step + 1 == max_len;
        let mut next_active = Vec::with_capacity(beam_size);
        for (logprob, tok, bi) in candidates {
            if tok == eos {
                let tokens = active[bi].tokens.clone();
                let steps = tokens.len() + 1;
                finished.push(Hypothesis {
                    score: normalized(logprob, steps, length_penalty),
                    tokens,
                    logprob,
                    eos_ended: true,
                    scorer_scores: Vec::new(),
                });
            } else if last_step {
                let mut tokens = active[bi].tokens.clone();
                tokens.push(tok);
                let steps = tokens.len();
                finished.push(Hypothesis {
                    score: normalized(logprob, steps, length_penalty),
                    tokens,
                    logprob,
                    eos_ended: false,
                    scorer_scores: Vec::new(),
                });
            } else {
                let mut tokens = active[bi].tokens.clone();
                tokens.push(tok);
                next_active.push(Partial { tokens, logprob });
            }
        }
        active = next_active;
    }

    let mut order: Vec<usize> = (0..finished.len()).collect();
    order.sort_by(|&a, &b| {
        finished[b]
            .score
            .partial_cmp(&finished[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(finished[a].tokens.cmp(&finished[b].tokens))
            .then(a.cmp(&b))
    });
    let mut out: Vec<Hypothesis> = order.into_iter().map(|i| finished[i].clone()).collect();
    out.truncate(beam_size);
    Ok(out)
}

impl Seq2SeqModel {
    /// Beam-decode one source sentence. Generation length is additionally
    /// capped by the model's own maximum sequence length.
    pub fn beam_search(
        &self,
        src: &[TokenId],
        beam_size: usize,
        length_penalty: f64,
        max_len: usize,
    ) -> Result<Vec<Hypothesis>> {
        let cap = max_len.min(self.config.max_len - 1);
        let mut scorer = self.scorer(src)?;
        beam_search(&mut scorer, beam_size, length_penalty, cap)
    }

    /// Greedy decode (beam 1).
    pub fn greedy_decode(&self, src: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        Ok(self.beam_search(src, 1, 1.0, max_len)?.remove(0).tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::log_softmax;

    /// Fixed-logit scorer: position t uses logits[min(t, last)].
    struct TableScorer {
        rows: Vec<Vec<f64>>,
    }

    impl StepScorer for TableScorer {
        fn vocab_size(&self) -> usize {
            self.rows[0].len()
        }
        fn specials(&self) -> SpecialIds {
            SpecialIds::standard()
        }
        fn step(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
            let row = &self.rows[prefix.len().min(self.rows.len() - 1)];
            Ok(log_softmax(row))
        }
    }

    #[test]
    fn beam_size_zero_rejected() {
        let mut s = TableScorer { rows: vec![vec![0.0; 8]] };
        assert!(beam_search(&mut s, 0, 1.0, 4).is_err());
    }

    #[test]
    fn picks_argmax_path_on_peaked_scorer() {
        // favor token 6, then token 7, then EOS (id 2)
        let mut rows = vec![vec![0.0; 8]; 3];
        rows[0][6] = 10.0;
        rows[1][7] = 10.0;
        rows[2][2] = 10.0;
        let mut s = TableScorer { rows };
        let hyps = beam_search(&mut s, 3, 1.0, 5).unwrap();
        assert_eq!(hyps[0].tokens, vec![6, 7]);
        assert!(hyps[0].eos_ended);
    }

    #[test]
    fn max_len_forces_termination() {
        // EOS never likely: all hypotheses end by max_len
        let mut rows = vec![vec![0.0; 8]];
        rows[0][2] = -100.0;
        let mut s = TableScorer { rows };
        let hyps = beam_search(&mut s, 4, 1.0, 3).unwrap();
        for h in &hyps {
            assert!(h.eos_ended || h.tokens.len() == 3);
        }
    }

    #[test]
    fn greedy_equals_beam_one() {
        let mut rows = vec![vec![0.0; 8]; 4];
        rows[0][7] = 2.0;
        rows[1][6] = 1.5;
        rows[2][2] = 3.0;
        let mut a = TableScorer { rows: rows.clone() };
        let beam1 = beam_search(&mut a, 1, 1.0, 6).unwrap();
        // manual greedy walk
        let mut b = TableScorer { rows };
        let mut tokens = Vec::new();
        loop {
            let scores = b.step(&tokens).unwrap();
            let best = scores
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap().then(y.0.cmp(&x.0)))
                .unwrap()
                .0;
            if best == 2 || tokens.len() == 6 {
                break;
            }
            tokens.push(best);
        }
        assert_eq!(beam1[0].tokens, tokens);
    }

    #[test]
    fn tie_break_prefers_smaller_token_id() {
        // uniform scorer, beam 1: first step picks token 0, EOS is id 2 so
        // the walk ends as soon as EOS wins a tie... with all-equal scores
        // token 0 (PAD) always wins, hypotheses fill to max_len.
        let mut s = TableScorer { rows: vec![vec![0.5; 4]] };
        let hyps = beam_search(&mut s, 1, 1.0, 2).unwrap();
        assert_eq!(hyps[0].tokens, vec![0, 0]);
    }

    #[test]
    fn hypotheses_sorted_by_normalized_score() {
        let mut rows = vec![vec![0.0; 6]; 3];
        rows[0][3] = 1.0;
        rows[0][4] = 0.9;
        let mut s = TableScorer { rows };
        let hyps = beam_search(&mut s, 4, 1.0, 2).unwrap();
        for w in hyps.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }
}
