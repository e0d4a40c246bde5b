//! Built-in synthetic translation tasks.
//!
//! The toolkit is runnable with zero external data: tasks generate aligned
//! corpora over a small vocabulary with a known source-to-target relation.
//! Dev and test sets are disjoint from the training bitext (as source
//! sentences), so held-out scores mean something even at toy scale.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::CounterRng;
use crate::pipeline::{MonoCorpus, ParallelCorpus, Provenance};
use crate::seq2seq::{TokenId, TokenSeq, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Target equals source.
    Copy,
    /// Target is the source reversed.
    Reverse,
    /// Digits translate to number words, position by position.
    NumberWords,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "copy" => TaskKind::Copy,
            "reverse" => TaskKind::Reverse,
            "number-words" => TaskKind::NumberWords,
            other => return Err(Error::invalid(format!("unknown task kind {other:?}"))),
        })
    }

    pub fn code(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::NumberWords => "number-words",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Payload vocabulary size (ignored by number-words, which has its own
    /// twenty-token lexicon).
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub bitext: usize,
    pub mono_src: usize,
    pub mono_tgt: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Reverse,
            vocab: 20,
            min_len: 3,
            max_len: 10,
            bitext: 200,
            mono_src: 500,
            mono_tgt: 500,
            dev: 32,
            test: 32,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub vocab: Vocabulary,
    pub bitext: ParallelCorpus,
    pub mono_src: MonoCorpus,
    pub mono_tgt: MonoCorpus,
    pub dev: Vec<(TokenSeq, TokenSeq)>,
    pub test: Vec<(TokenSeq, TokenSeq)>,
}

const NUMBER_WORDS: [&str; 10] =
    ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

fn task_vocabulary(kind: TaskKind, payload: usize) -> Result<Vocabulary> {
    match kind {
        TaskKind::Copy | TaskKind::Reverse => {
            Vocabulary::new((0..payload).map(|i| format!("w{i}")))
        }
        TaskKind::NumberWords => {
            let digits = (0..10).map(|i| i.to_string());
            let words = NUMBER_WORDS.iter().map(|w| w.to_string());
            Vocabulary::new(digits.chain(words))
        }
    }
}

struct Generator {
    kind: TaskKind,
    first_payload: TokenId,
    source_alphabet: usize,
    min_len: usize,
    max_len: usize,
}

impl Generator {
    /// Sentences are random walks over the payload alphabet: each token
    /// steps +1 or +2 (mod alphabet) from its predecessor. The local
    /// structure is what gives language models and masked pre-training
    /// something to learn; the space still grows as `2^len`, so held-out
    /// sentences stay plentiful.
    fn sample_source(&self, rng: &mut CounterRng) -> TokenSeq {
        let len = self.min_len + rng.below(self.max_len - self.min_len + 1);
        let mut ids = Vec::with_capacity(len);
        let mut current = rng.below(self.source_alphabet);
        ids.push(self.first_payload + current);
        for _ in 1..len {
            current = (current + 1 + rng.below(2)) % self.source_alphabet;
            ids.push(self.first_payload + current);
        }
        TokenSeq::new(ids)
    }

    fn translate(&self, src: &TokenSeq) -> TokenSeq {
        match self.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.reversed(),
            // digit id d maps to word id d + 10 at the same position
            TaskKind::NumberWords => {
                TokenSeq::new(src.ids.iter().map(|&t| t + 10).collect())
            }
        }
    }

    fn target_language_sentence(&self, rng: &mut CounterRng) -> TokenSeq {
        // a sentence that is plausible target-side text
        self.translate(&self.sample_source(rng))
    }
}

/// Generate a full task dataset. Dev and test sources never appear in the
/// bitext.
pub fn generate(cfg: &TaskConfig) -> Result<TaskData> {
    if cfg.min_len < 1 || cfg.min_len > cfg.max_len {
        return Err(Error::invalid("task length bounds are inconsistent"));
    }
    if cfg.kind != TaskKind::NumberWords && cfg.vocab < 2 {
        return Err(Error::invalid("payload vocabulary must have at least two tokens"));
    }
    let vocab = task_vocabulary(cfg.kind, cfg.vocab)?;
    let first_payload = vocab.specials().sep + 1;
    let generator = Generator {
        kind: cfg.kind,
        first_payload,
        source_alphabet: match cfg.kind {
            TaskKind::NumberWords => 10,
            _ => cfg.vocab,
        },
        min_len: cfg.min_len,
        max_len: cfg.max_len,
    };
    let mut rng = CounterRng::new(cfg.seed).derive("task");

    let mut held_out: HashSet<TokenSeq> = HashSet::new();
    let mut sample_pairs = |n: usize,
                            rng: &mut CounterRng,
                            exclude: Option<&HashSet<TokenSeq>>,
                            record: Option<&mut HashSet<TokenSeq>>|
     -> Vec<(TokenSeq, TokenSeq)> {
        let mut out = Vec::with_capacity(n);
        let mut record = record;
        let mut guard = 0;
        while out.len() < n {
            guard += 1;
            let src = generator.sample_source(rng);
            if guard < 50 * n {
                if let Some(ex) = exclude {
                    if ex.contains(&src) {
                        continue;
                    }
                }
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.insert(src.clone());
            }
            let tgt = generator.translate(&src);
            out.push((src, tgt));
        }
        out
    };

    let dev = sample_pairs(cfg.dev, &mut rng, None, Some(&mut held_out));
    let test = sample_pairs(cfg.test, &mut rng, None, Some(&mut held_out));
    let bitext_pairs = sample_pairs(cfg.bitext, &mut rng, Some(&held_out), None);

    let mono_src = MonoCorpus::new(
        (0..cfg.mono_src).map(|_| generator.sample_source(&mut rng)).collect(),
        "src",
    )?;
    let mono_tgt = MonoCorpus::new(
        (0..cfg.mono_tgt).map(|_| generator.target_language_sentence(&mut rng)).collect(),
        "tgt",
    )?;

    Ok(TaskData {
        vocab,
        bitext: ParallelCorpus::from_pairs(bitext_pairs, Provenance::Bitext),
        mono_src,
        mono_tgt,
        dev,
        test,
    })
}
