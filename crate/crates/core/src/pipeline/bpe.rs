//! Byte-pair encoding: greedy merge learning and deterministic application.
//!
//! Text is NFKC-normalized and whitespace pre-tokenized; every word becomes
//! its characters plus a standalone end-of-word marker. Learning repeatedly
//! merges the most frequent adjacent symbol pair, breaking count ties by
//! lexicographic pair order, so the merge table is fully determined by the
//! corpus. Application replays merges in learned order (rank order) within
//! each word, then maps symbols to ids with an UNK fallback.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use log::warn;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::seq2seq::{TokenSeq, Vocabulary};

pub const END_OF_WORD: &str = "</w>";

/// Learned merge table plus the vocabulary it induces.
#[derive(Debug, Clone)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
    pub vocab: Vocabulary,
}

/// NFKC normalization plus whitespace pre-tokenization.
pub fn pretokenize(text: &str) -> Vec<String> {
    text.nfkc()
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    syms.push(END_OF_WORD.to_string());
    syms
}

fn merge_word(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == a && symbols[i + 1] == b {
            let fused = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = fused;
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

/// Learn BPE models. With `shared`, all corpora pool into one model (one
/// entry returned); otherwise one model per corpus.
pub fn learn_bpe(corpora: &[&[String]], merges: usize, shared: bool) -> Result<Vec<BpeModel>> {
    if corpora.is_empty() || corpora.iter().all(|c| c.is_empty()) {
        return Err(Error::invalid("cannot learn subwords from an empty corpus"));
    }
    if shared {
        let pooled: Vec<String> = corpora.iter().flat_map(|c| c.iter().cloned()).collect();
        Ok(vec![learn_single(&pooled, merges)?])
    } else {
        corpora.iter().map(|c| learn_single(c, merges)).collect()
    }
}

fn learn_single(corpus: &[String], merges: usize) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot learn subwords from an empty corpus"));
    }
    // word frequency table
    let mut word_freq: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in pretokenize(line) {
            *word_freq.entry(w).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::invalid("corpus contains no tokens"));
    }
    let mut words: Vec<(Vec<String>, usize)> =
        word_freq.iter().map(|(w, &f)| (word_symbols(w), f)).collect();
    // deterministic iteration order for the pair counting below
    words.sort_by(|a, b| a.0.cmp(&b.0));

    let mut initial_symbols: Vec<String> = Vec::new();
    for (syms, _) in &words {
        for s in syms {
            initial_symbols.push(s.clone());
        }
    }

    let mut merge_table: Vec<(String, String)> = Vec::with_capacity(merges);
    for _ in 0..merges {
        let mut pair_counts: HashMap<(String, String), usize> = HashMap::new();
        for (syms, freq) in &words {
            for pair in syms.windows(2) {
                *pair_counts.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += freq;
            }
        }
        // highest count, ties broken lexicographically
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| pb.cmp(pa))
        });
        let Some(((a, b), count)) = best else { break };
        if count == 0 {
            break;
        }
        for (syms, _) in words.iter_mut() {
            merge_word(syms, &a, &b);
        }
        merge_table.push((a, b));
    }

    // vocabulary closure: initial characters, every merge product, and the
    // final segmented symbols, so application never invents an unseen token
    let mut token_set: std::collections::BTreeSet<String> =
        initial_symbols.into_iter().collect();
    for (a, b) in &merge_table {
        token_set.insert(format!("{a}{b}"));
    }
    for (syms, _) in &words {
        for s in syms {
            token_set.insert(s.clone());
        }
    }
    let tokens: Vec<String> = token_set
        .into_iter()
        .filter(|t| {
            let clash = Vocabulary::new([t.clone()]).is_err();
            if clash {
                warn!("dropping learned token {t:?}: collides with a special symbol");
            }
            !clash
        })
        .collect();
    Ok(BpeModel { merges: merge_table, vocab: Vocabulary::new(tokens)? })
}

impl BpeModel {
    /// Segment one word into subword symbols by replaying merges in rank
    /// order.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        for (a, b) in &self.merges {
            merge_word(&mut syms, a, b);
        }
        syms
    }

    /// Deterministic sentence application with UNK fallback.
    pub fn apply(&self, sentence: &str) -> TokenSeq {
        let mut ids = Vec::new();
        for word in pretokenize(sentence) {
            for sym in self.segment_word(&word) {
                ids.push(self.vocab.id_or_unk(&sym));
            }
        }
        TokenSeq::new(ids)
    }

    /// Inverse of [`BpeModel::apply`] up to whitespace normalization.
    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        let mut out = String::new();
        for &id in &seq.ids {
            out.push_str(self.vocab.token(id));
        }
        out.replace(END_OF_WORD, " ").trim().to_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "deskmt-bpe v1")?;
        writeln!(f, "merges {}", self.merges.len())?;
        for (a, b) in &self.merges {
            writeln!(f, "{a}\t{b}")?;
        }
        let payload = self.vocab.payload_tokens();
        writeln!(f, "tokens {}", payload.len())?;
        for t in payload {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(f).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::format("truncated subword model file"))
        };
        if next()? != "deskmt-bpe v1" {
            return Err(Error::format("bad subword model magic"));
        }
        let n_merges: usize = next()?
            .strip_prefix("merges ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("bad merges header"))?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = next()?;
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("merge line lacks a tab"))?;
            merges.push((a.to_string(), b.to_string()));
        }
        let n_tokens: usize = next()?
            .strip_prefix("tokens ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("bad tokens header"))?;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            tokens.push(next()?);
        }
        Ok(BpeModel { merges, vocab: Vocabulary::new(tokens)? })
    }
}
