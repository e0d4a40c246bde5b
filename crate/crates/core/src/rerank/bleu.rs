//! Corpus-level BLEU.
//!
//! Standard 4-gram BLEU with clipped precisions and the brevity penalty
//! `exp(min(0, 1 - ref_len/hyp_len))`, single reference per hypothesis,
//! over caller-tokenized input. Conventions, fixed here and mirrored by the
//! independent oracle in the test suite:
//!
//! - n-gram orders whose total hypothesis count is zero (corpus shorter
//!   than n) are excluded from the geometric mean;
//! - any included order with zero matches gives 0.0 unless add-one
//!   smoothing is enabled, which adds one to numerator and denominator of
//!   orders above unigram;
//! - an empty hypothesis corpus scores 0.0.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, Default)]
pub struct BleuOptions {
    /// Add-one smoothing on orders 2..=4 for tiny corpora.
    pub add_one_smoothing: bool,
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU in [0, 100] without smoothing.
pub fn corpus_bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    corpus_bleu_with(hyps, refs, BleuOptions::default())
}

pub fn corpus_bleu_with<T: Eq + Hash + Clone>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    opts: BleuOptions,
) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::invalid("references must be non-empty"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses against {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, count) in &hc {
                totals[n - 1] += count;
                if let Some(rcount) = rc.get(gram) {
                    matches[n - 1] += count.min(rcount);
                }
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            continue; // corpus has no n-grams of this order at all
        }
        let (m, t) = if opts.add_one_smoothing && n > 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let precision = (log_sum / orders as f64).exp();
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(100.0 * bp * precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_corpora_score_100() {
        let c = vec![toks("the cat sat on the mat"), toks("a quick brown fox")];
        let b = corpus_bleu(&c, &c).unwrap();
        assert!((b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn identical_short_sentences_score_100() {
        // shorter than 4 tokens: high orders excluded, still a perfect score
        let c = vec![toks("hi there")];
        assert!((corpus_bleu(&c, &c).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_vocabularies_score_zero() {
        let h = vec![toks("a b c d e")];
        let r = vec![toks("v w x y z")];
        assert_eq!(corpus_bleu(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_example() {
        // hyp: "the the the cat", ref: "the cat sat"
        // 1-grams: clipped matches: the->min(3,1)=1, cat->1 => 2/4
        // 2-grams: hyp {the the x2, the cat}; ref {the cat, cat sat}: match 1/3
        // 3-grams: no overlap => 0/2 -> BLEU 0 unsmoothed
        let h = vec![toks("the the the cat")];
        let r = vec![toks("the cat sat")];
        assert_eq!(corpus_bleu(&h, &r).unwrap(), 0.0);
        // with add-one smoothing on orders >= 2:
        // p1 = 2/4, p2 = (1+1)/(3+1), p3 = (0+1)/(2+1), p4 = (0+1)/(1+1)
        // ref_len=3 < hyp_len=4 -> brevity penalty 1
        let b = corpus_bleu_with(&h, &r, BleuOptions { add_one_smoothing: true }).unwrap();
        let expect = 100.0
            * ((0.5f64.ln() + 0.5f64.ln() + (1f64 / 3.0).ln() + 0.5f64.ln()) / 4.0).exp();
        assert!((b - expect).abs() < 1e-9, "{b} vs {expect}");
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        let h = vec![toks("the cat")];
        let r = vec![toks("the cat sat on the mat")];
        // p1 = 2/2, p2 = 1/1, orders 3,4 excluded
        let bp = (1.0f64 - 6.0 / 2.0).exp();
        let b = corpus_bleu(&h, &r).unwrap();
        assert!((b - 100.0 * bp).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariant_over_sentence_order() {
        let h = vec![toks("a b c d"), toks("e f g h"), toks("i j k l")];
        let r = vec![toks("a b c x"), toks("e f y h"), toks("i j k l")];
        let b1 = corpus_bleu_with(&h, &r, BleuOptions { add_one_smoothing: true }).unwrap();
        let hp = vec![h[2].clone(), h[0].clone(), h[1].clone()];
        let rp = vec![r[2].clone(), r[0].clone(), r[1].clone()];
        let b2 = corpus_bleu_with(&hp, &rp, BleuOptions { add_one_smoothing: true }).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn mismatched_counts_rejected() {
        let h = vec![toks("a")];
        let r: Vec<Vec<String>> = vec![];
        assert!(corpus_bleu(&h, &r).is_err());
        let r2 = vec![toks("a"), toks("b")];
        assert!(corpus_bleu(&h, &r2).is_err());
    }

    #[test]
    fn works_over_token_ids() {
        let h = vec![vec![1usize, 2, 3, 4]];
        let r = vec![vec![1usize, 2, 3, 4]];
        assert!((corpus_bleu(&h, &r).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let h = vec![Vec::<usize>::new()];
        let r = vec![vec![1usize, 2]];
        assert_eq!(corpus_bleu(&h, &r).unwrap(), 0.0);
    }
}
