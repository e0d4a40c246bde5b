//! Soft contextual data augmentation.
//!
//! During training, randomly chosen source positions swap their one-hot
//! embedding lookup for the expectation of embedding rows under a language
//! model's next-token distribution. The language model is trained on
//! monolingual text, then frozen; augmentation only changes how source
//! embeddings are formed, never the target side.

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, CounterRng, RowSel, Tape, Tensor};
use crate::seq2seq::{
    build_model, transformer_genotype, Mode, ModelConfig, Seq2SeqModel, TokenId, TokenSeq,
    Vocabulary,
};
use std::path::Path;

/// A word as a distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftWord(pub Vec<f64>);

impl SoftWord {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.0.iter().find(|p| **p < 0.0 || !p.is_finite()) {
            return Err(Error::invalid(format!("distribution entry {p} is negative")));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("distribution sums to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn one_hot(vocab: usize, id: TokenId) -> Self {
        let mut d = vec![0.0; vocab];
        d[id] = 1.0;
        SoftWord(d)
    }
}

/// Expectation of embedding rows under a distribution:
/// `e = sum_j p_j * E_j`.
pub fn soft_embedding(dist: &SoftWord, emb: &Tensor) -> Result<Vec<f64>> {
    if emb.shape.len() != 2 || emb.shape[0] != dist.0.len() {
        return Err(Error::shape(format!(
            "distribution of length {} against embedding shape {:?}",
            dist.0.len(),
            emb.shape
        )));
    }
    let d = emb.shape[1];
    let mut out = vec![0.0; d];
    for (j, &p) in dist.0.iter().enumerate() {
        if p != 0.0 {
            for (o, e) in out.iter_mut().zip(&emb.data[j * d..(j + 1) * d]) {
                *o += p * e;
            }
        }
    }
    Ok(out)
}

/// Causal language model over one language's vocabulary.
///
/// Implemented as a sequence-to-sequence model conditioned on a constant
/// empty source (one EOS token), so the next-token distribution depends only
/// on the preceding target tokens. Reuses the shared model machinery and
/// checkpoint format; saved with the `lm` role tag.
#[derive(Debug, Clone)]
pub struct CausalLm {
    pub model: Seq2SeqModel,
}

pub const LM_ROLE: &str = "lm";

impl CausalLm {
    pub fn new(config: ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        let genotype = transformer_genotype(config.n_layers);
        Ok(CausalLm { model: build_model(genotype, config, vocab, seed)? })
    }

    pub fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    /// Next-token distribution after `prefix` (empty prefix conditions on
    /// BOS alone).
    pub fn distribution(&self, prefix: &[TokenId]) -> Result<SoftWord> {
        self.distribution_with_temperature(prefix, 1.0)
    }

    /// Temperature-flattened distribution; 1.0 leaves the model untouched.
    pub fn distribution_with_temperature(
        &self,
        prefix: &[TokenId],
        temperature: f64,
    ) -> Result<SoftWord> {
        if temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        let lp = self.model.logprobs(&[], prefix)?;
        if temperature == 1.0 {
            return Ok(SoftWord(lp.iter().map(|l| l.exp()).collect()));
        }
        let scaled: Vec<f64> = lp.iter().map(|l| l / temperature).collect();
        let norm = crate::numerics::log_softmax(&scaled);
        Ok(SoftWord(norm.iter().map(|l| l.exp()).collect()))
    }

    /// Mean per-token NLL of a sentence (EOS step included).
    pub fn nll_per_token(&self, x: &TokenSeq) -> Result<f64> {
        let total = -self.model.score_sequence(&[], &x.ids, false)?;
        Ok(total / (x.len() + 1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path, LM_ROLE)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (model, role) = Seq2SeqModel::load(path)?;
        if role != LM_ROLE {
            return Err(Error::format(format!("expected an lm checkpoint, found role {role:?}")));
        }
        Ok(CausalLm { model })
    }
}

#[derive(Debug, Clone)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig { steps: 300, batch_size: 8, lr: 1e-3 }
    }
}

/// Train a language model on monolingual sentences with next-token NLL.
pub fn train_lm(
    mono: &[TokenSeq],
    model_config: ModelConfig,
    train: &LmTrainConfig,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<CausalLm> {
    if mono.is_empty() {
        return Err(Error::invalid("language model needs a non-empty corpus"));
    }
    let mut lm = CausalLm::new(model_config, vocab, seed)?;
    let mut opt = Adam::new(AdamConfig::with_lr(train.lr));
    let mut rng = CounterRng::new(seed).derive("lm-train");
    let empty = TokenSeq::default();
    for _ in 0..train.steps {
        let batch: Vec<(TokenSeq, TokenSeq)> = (0..train.batch_size)
            .map(|_| (empty.clone(), mono[rng.below(mono.len())].clone()))
            .collect();
        lm.model.train_step(&batch, &mut opt, &mut rng)?;
    }
    Ok(lm)
}

/// One training pair with augmented source embedding rows (EOS row
/// included) and an untouched target.
pub struct AugmentedPair {
    pub src_rows: Vec<RowSel>,
    pub tgt: TokenSeq,
    pub replaced: usize,
}

/// Replace each source position independently with probability `gamma` by
/// the language model's distribution at that position. The distribution is
/// restricted to content tokens (mass on reserved symbols is removed and
/// the rest renormalized) before it becomes an embedding mixture. Per-pair
/// random streams are indexed by batch position, so augmentation is
/// replayable and parallelizable.
pub fn augment_batch(
    batch: &[(TokenSeq, TokenSeq)],
    lm: &CausalLm,
    gamma: f64,
    temperature: f64,
    rng: &CounterRng,
) -> Result<Vec<AugmentedPair>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    let specials = lm.model.specials;
    batch
        .iter()
        .enumerate()
        .map(|(i, (src, tgt))| {
            let mut pair_rng = rng.derive_idx(i as u64);
            let mut rows = Vec::with_capacity(src.len() + 1);
            let mut replaced = 0;
            for (t, &id) in src.ids.iter().enumerate() {
                if gamma > 0.0 && pair_rng.bernoulli(gamma) {
                    let dist =
                        lm.distribution_with_temperature(&src.ids[..t], temperature)?;
                    let mut p = dist.0;
                    for special in
                        [specials.pad, specials.bos, specials.eos, specials.unk, specials.mask, specials.sep]
                    {
                        p[special] = 0.0;
                    }
                    let z: f64 = p.iter().sum();
                    if z > 0.0 {
                        for v in p.iter_mut() {
                            *v /= z;
                        }
                        rows.push(RowSel::Soft(p));
                        replaced += 1;
                        continue;
                    }
                    rows.push(RowSel::Hard(id));
                } else {
                    rows.push(RowSel::Hard(id));
                }
            }
            Ok(AugmentedPair { src_rows: rows, tgt: tgt.clone(), replaced })
        })
        .collect()
}

/// One Adam step on soft-augmented pairs. With `gamma = 0` this is
/// bit-identical to a plain training step.
pub fn sca_train_step(
    model: &mut Seq2SeqModel,
    lm: &CausalLm,
    batch: &[(TokenSeq, TokenSeq)],
    gamma: f64,
    temperature: f64,
    opt: &mut Adam,
    rng: &mut CounterRng,
) -> Result<(f64, usize)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let augment_rng = rng.derive("sca-augment");
    let augmented = augment_batch(batch, lm, gamma, temperature, &augment_rng)?;
    let replaced: usize = augmented.iter().map(|p| p.replaced).sum();

    let mut tape = Tape::new();
    let mut mode = Mode::Train(rng);
    let mut acc = None;
    for pair in &augmented {
        let mut rows = pair.src_rows.clone();
        rows.push(RowSel::Hard(model.specials.eos));
        let nll =
            model.pair_nll_node_with_src_rows(&mut tape, rows, &pair.tgt.ids, true, &mut mode)?;
        acc = Some(match acc {
            None => nll,
            Some(a) => tape.add(a, nll),
        });
    }
    let loss = tape.scale(acc.unwrap(), 1.0 / batch.len() as f64);
    let grads = tape.backward(loss)?;
    let by_param = tape.param_grads(&grads);
    opt.step(&mut model.params, &by_param);
    Ok((tape.value(loss), replaced))
}
