//! Corpus containers, filtering rules, noising, mixing and sharding.
//!
//! Filtering works on raw text (it inspects casing, prefixes and character
//! classes); everything downstream of subword encoding works on token
//! sequences. Every pair carries a provenance tag that survives all
//! transformations, so any training example traces back to the operation
//! that produced it.

use crate::error::{Error, Result};
use crate::numerics::CounterRng;
use crate::seq2seq::{TokenId, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Bitext,
    Bt,
    Kd,
    Speculation,
}

impl Provenance {
    pub fn code(self) -> &'static str {
        match self {
            Provenance::Bitext => "bitext",
            Provenance::Bt => "bt",
            Provenance::Kd => "kd",
            Provenance::Speculation => "speculation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "bitext" => Provenance::Bitext,
            "bt" => Provenance::Bt,
            "kd" => Provenance::Kd,
            "speculation" => Provenance::Speculation,
            other => return Err(Error::format(format!("unknown provenance {other:?}"))),
        })
    }
}

// ── Text level ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TextPair {
    pub src: String,
    pub tgt: String,
    pub provenance: Provenance,
    /// External alignment score, when an aligner supplied one.
    pub align_score: Option<f64>,
}

impl TextPair {
    pub fn new(src: impl Into<String>, tgt: impl Into<String>) -> Self {
        TextPair {
            src: src.into(),
            tgt: tgt.into(),
            provenance: Provenance::Bitext,
            align_score: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextCorpus {
    pub pairs: Vec<TextPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Cleaning rules. A pair is dropped as soon as any enabled rule fires;
/// the drop records which rule fired first.
#[derive(Debug, Clone)]
pub struct FilterRuleSet {
    /// Drop when max(len)/min(len) exceeds this (token counts).
    pub max_length_ratio: f64,
    /// Drop when either side starts with one of these.
    pub forbidden_prefixes: Vec<String>,
    /// Drop when the designated side contains no lowercase letter.
    pub require_lowercase: Option<Side>,
    /// Drop on non-printable (control) characters.
    pub printable_chars: bool,
    /// Drop exact duplicate pairs after the content rules.
    pub dedupe: bool,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Drop pairs whose external alignment score falls below this.
    /// Disabled by default; pairs without a score always pass.
    pub align_threshold: Option<f64>,
}

impl Default for FilterRuleSet {
    fn default() -> Self {
        FilterRuleSet {
            max_length_ratio: 2.5,
            forbidden_prefixes: vec!["User".to_string(), "NGC".to_string()],
            require_lowercase: Some(Side::Source),
            printable_chars: true,
            dedupe: true,
            min_tokens: 1,
            max_tokens: 250,
            align_threshold: None,
        }
    }
}

impl FilterRuleSet {
    pub fn validate(&self) -> Result<()> {
        if self.max_length_ratio <= 1.0 {
            return Err(Error::invalid(format!(
                "length ratio must exceed 1, got {}",
                self.max_length_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Drop {
    pub index: usize,
    pub rule: &'static str,
    pub text: String,
}

fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

fn first_firing_rule(pair: &TextPair, rules: &FilterRuleSet) -> Option<&'static str> {
    if let Some(threshold) = rules.align_threshold {
        if let Some(score) = pair.align_score {
            if score < threshold {
                return Some("align");
            }
        }
    }
    let (ls, lt) = (token_count(&pair.src), token_count(&pair.tgt));
    let lo = ls.min(lt);
    let hi = ls.max(lt);
    if lo == 0 || (hi as f64) / (lo as f64) > rules.max_length_ratio {
        if lo < rules.min_tokens {
            return Some("min_len");
        }
        return Some("ratio");
    }
    for p in &rules.forbidden_prefixes {
        if pair.src.starts_with(p.as_str()) || pair.tgt.starts_with(p.as_str()) {
            return Some("prefix");
        }
    }
    if let Some(side) = rules.require_lowercase {
        let text = match side {
            Side::Source => &pair.src,
            Side::Target => &pair.tgt,
        };
        if !text.chars().any(|c| c.is_lowercase()) {
            return Some("lowercase");
        }
    }
    if rules.printable_chars
        && (pair.src.chars().any(char::is_control) || pair.tgt.chars().any(char::is_control))
    {
        return Some("printable");
    }
    if ls < rules.min_tokens || lt < rules.min_tokens {
        return Some("min_len");
    }
    if ls > rules.max_tokens || lt > rules.max_tokens {
        return Some("max_len");
    }
    None
}

/// Apply the rule set; kept pairs preserve their order, every dropped pair
/// carries the id of the rule that fired.
pub fn filter_corpus(corpus: &TextCorpus, rules: &FilterRuleSet) -> Result<(TextCorpus, Vec<Drop>)> {
    rules.validate()?;
    let mut kept = Vec::new();
    let mut drops = Vec::new();
    let mut seen: std::collections::HashSet<(String, String)> = std::collections::HashSet::new();
    for (i, pair) in corpus.pairs.iter().enumerate() {
        let mut rule = first_firing_rule(pair, rules);
        if rule.is_none() && rules.dedupe {
            if !seen.insert((pair.src.clone(), pair.tgt.clone())) {
                rule = Some("dedupe");
            }
        }
        match rule {
            Some(rule) => drops.push(Drop {
                index: i,
                rule,
                text: format!("{} ||| {}", pair.src, pair.tgt),
            }),
            None => kept.push(pair.clone()),
        }
    }
    Ok((TextCorpus { pairs: kept }, drops))
}

/// Drop log as TSV lines: `line_no <tab> rule_id <tab> text`.
pub fn write_drop_log<W: std::io::Write>(drops: &[Drop], w: &mut W) -> Result<()> {
    for d in drops {
        writeln!(w, "{}\t{}\t{}", d.index + 1, d.rule, d.text)?;
    }
    Ok(())
}

// ── Token level ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPair {
    pub src: TokenSeq,
    pub tgt: TokenSeq,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<TokenPair>,
}

impl ParallelCorpus {
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (TokenSeq, TokenSeq)>,
        provenance: Provenance,
    ) -> Self {
        ParallelCorpus {
            pairs: pairs
                .into_iter()
                .map(|(src, tgt)| TokenPair { src, tgt, provenance })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn training_pairs(&self) -> Vec<(TokenSeq, TokenSeq)> {
        self.pairs.iter().map(|p| (p.src.clone(), p.tgt.clone())).collect()
    }

    pub fn with_provenance(&self, provenance: Provenance) -> ParallelCorpus {
        ParallelCorpus {
            pairs: self
                .pairs
                .iter()
                .map(|p| TokenPair { provenance, ..p.clone() })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MonoCorpus {
    pub sentences: Vec<TokenSeq>,
    pub lang: String,
}

impl MonoCorpus {
    pub fn new(sentences: Vec<TokenSeq>, lang: impl Into<String>) -> Result<Self> {
        let lang = lang.into();
        if lang.is_empty() {
            return Err(Error::invalid("monolingual corpus needs a language tag"));
        }
        Ok(MonoCorpus { sentences, lang })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Token-level noising for synthetic sources: independent token dropout,
/// filler replacement, and local swaps within a window.
#[derive(Debug, Clone)]
pub struct NoiseConfig {
    pub p_drop: f64,
    pub p_blank: f64,
    pub swap_window: usize,
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig { p_drop: 0.0, p_blank: 0.0, swap_window: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_drop", self.p_drop), ("p_blank", self.p_blank)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.p_drop == 0.0 && self.p_blank == 0.0 && self.swap_window == 0
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { p_drop: 0.1, p_blank: 0.1, swap_window: 3 }
    }
}

/// Apply noise to one sentence. A fully dropped sentence keeps one random
/// original token rather than going empty.
pub fn add_noise(
    sentence: &TokenSeq,
    cfg: &NoiseConfig,
    filler: TokenId,
    rng: &mut CounterRng,
) -> Result<TokenSeq> {
    cfg.validate()?;
    if cfg.is_identity() || sentence.is_empty() {
        return Ok(sentence.clone());
    }
    let mut kept: Vec<TokenId> = if cfg.p_drop > 0.0 {
        sentence.ids.iter().copied().filter(|_| !rng.bernoulli(cfg.p_drop)).collect()
    } else {
        sentence.ids.clone()
    };
    if kept.is_empty() {
        kept.push(sentence.ids[rng.below(sentence.len())]);
    }
    if cfg.p_blank > 0.0 {
        for t in kept.iter_mut() {
            if rng.bernoulli(cfg.p_blank) {
                *t = filler;
            }
        }
    }
    if cfg.swap_window > 0 {
        let w = cfg.swap_window as f64;
        let mut keyed: Vec<(f64, usize, TokenId)> = kept
            .iter()
            .enumerate()
            .map(|(i, &t)| (i as f64 + rng.next_f64() * (w + 1.0), i, t))
            .collect();
        keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        kept = keyed.into_iter().map(|(_, _, t)| t).collect();
    }
    Ok(TokenSeq::new(kept))
}

/// Concatenate each part repeated by its factor, then shuffle.
/// Output size is exactly the factor-weighted sum of part sizes.
pub fn mix_corpora(parts: &[(ParallelCorpus, usize)], rng: &mut CounterRng) -> Result<ParallelCorpus> {
    if let Some((_, f)) = parts.iter().find(|(_, f)| *f < 1) {
        return Err(Error::invalid(format!("upsample factor must be >= 1, got {f}")));
    }
    let mut pairs = Vec::new();
    for (corpus, factor) in parts {
        for _ in 0..*factor {
            pairs.extend(corpus.pairs.iter().cloned());
        }
    }
    rng.shuffle(&mut pairs);
    Ok(ParallelCorpus { pairs })
}

/// Split monolingual data into shards by sampling with replacement, so
/// independently trained models see different data.
pub fn shard_mono(
    mono: &MonoCorpus,
    shards: usize,
    shard_size: usize,
    rng: &mut CounterRng,
) -> Result<Vec<MonoCorpus>> {
    if mono.is_empty() {
        return Err(Error::invalid("cannot shard an empty corpus"));
    }
    (0..shards)
        .map(|s| {
            let mut shard_rng = rng.derive_idx(s as u64);
            let sentences = (0..shard_size)
                .map(|_| mono.sentences[shard_rng.below(mono.len())].clone())
                .collect();
            MonoCorpus::new(sentences, mono.lang.clone())
        })
        .collect()
}
