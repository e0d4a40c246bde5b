//! Masked sequence-to-sequence pre-training.
//!
//! A contiguous fragment of a sentence is replaced by MASK symbols; the
//! model reads the masked sentence and predicts the fragment. The
//! unsupervised objective works per language on monolingual text; the
//! supervised objective combines six prediction problems over a bilingual
//! pair, including fragment prediction from the concatenation of both
//! masked sides. One shared model handles all of them.
//!
//! Positions are 1-based. Sampled masks satisfy the strict constraint
//! `2 <= u <= v <= m-1` (first and last tokens are never masked, fragments
//! have at least two tokens), which requires sentences of at least four
//! tokens; shorter sentences are skipped with a warning, never an error.

use log::warn;

use crate::error::{Error, Result};
use crate::numerics::{Adam, CounterRng, NodeId, Tape};
use crate::seq2seq::{Mode, Seq2SeqModel, TokenId, TokenSeq};

/// Contiguous mask span `u..=v` (1-based) of a sentence of length `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub u: usize,
    pub v: usize,
    pub m: usize,
}

impl MaskSpec {
    /// Strictly validated span: boundaries never masked, at least two
    /// tokens masked.
    pub fn new(u: usize, v: usize, m: usize) -> Result<Self> {
        if !(2 <= u && u < v && v <= m.saturating_sub(1)) {
            return Err(Error::invalid(format!(
                "mask span u={u} v={v} m={m} violates 0 < u < v < m"
            )));
        }
        Ok(MaskSpec { u, v, m })
    }

    /// Degenerate all-tokens span. Intentionally bypasses the strict
    /// boundary constraint: masking everything turns fragment prediction
    /// into plain language modeling, which the reduction checks exploit.
    pub fn full(m: usize) -> Self {
        MaskSpec { u: 1, v: m, m }
    }

    /// Number of masked tokens.
    pub fn k(&self) -> usize {
        self.v - self.u + 1
    }

    fn consistent_with(&self, len: usize) -> bool {
        self.m == len && 1 <= self.u && self.u <= self.v && self.v <= self.m
    }
}

/// Sample a mask span: `k = max(2, round(ratio * m))`, clamped so the strict
/// constraint holds, start position uniform over the valid range.
pub fn sample_mask(m: usize, ratio: f64, rng: &mut CounterRng) -> Result<MaskSpec> {
    if m < 4 {
        return Err(Error::invalid(format!(
            "sentence length {m} < 4 admits no valid mask span"
        )));
    }
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let k = ((ratio * m as f64).round() as usize).max(2).min(m - 2);
    let u = 2 + rng.below(m - k - 1); // u in [2, m-k]
    MaskSpec::new(u, u + k - 1, m)
}

/// Replace the span with MASK symbols. Returns the masked sentence (same
/// length) and the original fragment.
pub fn apply_mask(
    x: &TokenSeq,
    spec: &MaskSpec,
    mask_id: TokenId,
) -> Result<(TokenSeq, TokenSeq)> {
    if !spec.consistent_with(x.len()) {
        return Err(Error::invalid(format!(
            "mask spec (u={}, v={}, m={}) inconsistent with sentence length {}",
            spec.u,
            spec.v,
            spec.m,
            x.len()
        )));
    }
    let mut masked = x.ids.clone();
    for slot in masked.iter_mut().take(spec.v).skip(spec.u - 1) {
        *slot = mask_id;
    }
    let fragment = x.ids[spec.u - 1..spec.v].to_vec();
    Ok((TokenSeq::new(masked), TokenSeq::new(fragment)))
}

/// Inverse of [`apply_mask`]: splice the fragment back into the masked
/// sentence.
pub fn reconstruct(masked: &TokenSeq, fragment: &TokenSeq, spec: &MaskSpec) -> Result<TokenSeq> {
    if !spec.consistent_with(masked.len()) || fragment.len() != spec.k() {
        return Err(Error::invalid("fragment/spec inconsistent with masked sentence"));
    }
    let mut out = masked.ids.clone();
    out[spec.u - 1..spec.v].copy_from_slice(&fragment.ids);
    Ok(TokenSeq::new(out))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MassStats {
    pub used: usize,
    pub skipped: usize,
}

/// Pre-sample mask specs for a batch; sentences too short get `None`.
pub fn sample_specs(
    batch: &[TokenSeq],
    ratio: f64,
    rng: &mut CounterRng,
) -> Result<Vec<Option<MaskSpec>>> {
    batch
        .iter()
        .map(|x| {
            if x.len() < 4 {
                warn!("skipping sentence of length {} (< 4) in masked pre-training", x.len());
                Ok(None)
            } else {
                sample_mask(x.len(), ratio, rng).map(Some)
            }
        })
        .collect()
}

/// Fragment-prediction NLL for one (encoder input, fragment) problem:
/// the decoder is teacher-forced on the fragment shifted right with BOS.
fn fragment_nll(
    model: &Seq2SeqModel,
    tape: &mut Tape,
    encoder_ids: &[TokenId],
    fragment: &[TokenId],
    trainable: bool,
    mode: &mut Mode,
) -> Result<NodeId> {
    let mut enc = encoder_ids.to_vec();
    enc.push(model.specials.eos);
    let memory = model.memory_for_ids(tape, &enc, trainable, mode)?;
    let mut dec_input = Vec::with_capacity(fragment.len());
    dec_input.push(model.specials.bos);
    dec_input.extend_from_slice(&fragment[..fragment.len() - 1]);
    model.fragment_nll_node(tape, memory, &dec_input, fragment, trainable, mode)
}

/// Unsupervised masked objective over one monolingual batch: mean over
/// usable sentences of the fragment NLL. Returns `None` when every sentence
/// was skipped.
pub fn unsup_loss_node(
    model: &Seq2SeqModel,
    tape: &mut Tape,
    batch: &[TokenSeq],
    specs: &[Option<MaskSpec>],
    trainable: bool,
    mode: &mut Mode,
) -> Result<(Option<NodeId>, MassStats)> {
    if batch.len() != specs.len() {
        return Err(Error::invalid("one mask spec per sentence required"));
    }
    let mut stats = MassStats::default();
    let mut acc: Option<NodeId> = None;
    for (x, spec) in batch.iter().zip(specs) {
        let Some(spec) = spec else {
            stats.skipped += 1;
            continue;
        };
        let (masked, fragment) = apply_mask(x, spec, model.specials.mask)?;
        let nll = fragment_nll(model, tape, &masked.ids, &fragment.ids, trainable, mode)?;
        acc = Some(match acc {
            None => nll,
            Some(a) => tape.add(a, nll),
        });
        stats.used += 1;
    }
    let loss = acc.map(|a| tape.scale(a, 1.0 / stats.used as f64));
    Ok((loss, stats))
}

/// One Adam step of the unsupervised objective. Returns the loss value.
pub fn unsup_train_step(
    model: &mut Seq2SeqModel,
    batch: &[TokenSeq],
    ratio: f64,
    opt: &mut Adam,
    rng: &mut CounterRng,
) -> Result<(f64, MassStats)> {
    let specs = sample_specs(batch, ratio, rng)?;
    let mut tape = Tape::new();
    let mut mode = Mode::Train(rng);
    let (loss, stats) = unsup_loss_node(model, &mut tape, batch, &specs, true, &mut mode)?;
    let Some(loss) = loss else {
        return Ok((0.0, stats));
    };
    let grads = tape.backward(loss)?;
    let by_param = tape.param_grads(&grads);
    opt.step(&mut model.params, &by_param);
    Ok((tape.value(loss), stats))
}

/// Plain language-model NLL of a sentence under the same model: predict
/// every token left-to-right given an all-MASK encoder input. The masked
/// objective with a full-sentence span must equal this exactly.
pub fn lm_nll(model: &Seq2SeqModel, x: &TokenSeq) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("cannot score an empty sentence"));
    }
    let mut tape = Tape::new();
    let mut mode = Mode::Eval;
    let enc: Vec<TokenId> = {
        let mut e = vec![model.specials.mask; x.len()];
        e.push(model.specials.eos);
        e
    };
    let memory = model.memory_for_ids(&mut tape, &enc, false, &mut mode)?;
    let mut dec_input = Vec::with_capacity(x.len());
    dec_input.push(model.specials.bos);
    dec_input.extend_from_slice(&x.ids[..x.len() - 1]);
    let nll = model.fragment_nll_node(&mut tape, memory, &dec_input, &x.ids, false, &mut mode)?;
    Ok(tape.value(nll))
}

/// Per-pair mask specs for the supervised objective; `None` when either
/// side is too short or the concatenation would not fit the model.
pub fn sample_pair_specs(
    model: &Seq2SeqModel,
    batch: &[(TokenSeq, TokenSeq)],
    ratio: f64,
    rng: &mut CounterRng,
) -> Result<Vec<Option<(MaskSpec, MaskSpec)>>> {
    batch
        .iter()
        .map(|(x, y)| {
            if x.len() < 4 || y.len() < 4 {
                warn!("skipping pair with side shorter than 4 tokens");
                return Ok(None);
            }
            // concatenated encoder input: x, SEP, y, EOS
            if x.len() + y.len() + 2 > model.config.max_len {
                warn!("skipping pair too long for concatenated masking");
                return Ok(None);
            }
            let sx = sample_mask(x.len(), ratio, rng)?;
            let sy = sample_mask(y.len(), ratio, rng)?;
            Ok(Some((sx, sy)))
        })
        .collect()
}

/// The six supervised terms, as batch-mean NLL values.
pub const SUP_TERMS: usize = 6;

pub struct SupLoss {
    /// Mean over pairs of the summed six-term NLL; drives the gradient.
    pub total: NodeId,
    /// Batch-mean value of each term, for decomposition checks:
    /// `[y|mx, x|my, xfrag|both, yfrag|both, yfrag|mx, xfrag|my]`.
    pub term_values: [f64; SUP_TERMS],
}

/// Supervised masked objective over a bilingual batch.
pub fn sup_loss_node(
    model: &Seq2SeqModel,
    tape: &mut Tape,
    batch: &[(TokenSeq, TokenSeq)],
    specs: &[Option<(MaskSpec, MaskSpec)>],
    trainable: bool,
    mode: &mut Mode,
) -> Result<(Option<SupLoss>, MassStats)> {
    if batch.len() != specs.len() {
        return Err(Error::invalid("one spec pair per sentence pair required"));
    }
    let mut stats = MassStats::default();
    let mut acc: Option<NodeId> = None;
    let mut term_sums = [0.0; SUP_TERMS];
    for ((x, y), spec) in batch.iter().zip(specs) {
        let Some((sx, sy)) = spec else {
            stats.skipped += 1;
            continue;
        };
        let mask = model.specials.mask;
        let (mx, fx) = apply_mask(x, sx, mask)?;
        let (my, fy) = apply_mask(y, sy, mask)?;
        let mut both = mx.ids.clone();
        both.push(model.specials.sep);
        both.extend_from_slice(&my.ids);

        let terms = [
            model.pair_nll_node(tape, &mx.ids, &y.ids, trainable, mode)?,
            model.pair_nll_node(tape, &my.ids, &x.ids, trainable, mode)?,
            fragment_nll(model, tape, &both, &fx.ids, trainable, mode)?,
            fragment_nll(model, tape, &both, &fy.ids, trainable, mode)?,
            fragment_nll(model, tape, &mx.ids, &fy.ids, trainable, mode)?,
            fragment_nll(model, tape, &my.ids, &fx.ids, trainable, mode)?,
        ];
        let mut pair_total = terms[0];
        for &t in &terms[1..] {
            pair_total = tape.add(pair_total, t);
        }
        for (sum, &t) in term_sums.iter_mut().zip(&terms) {
            *sum += tape.value(t);
        }
        acc = Some(match acc {
            None => pair_total,
            Some(a) => tape.add(a, pair_total),
        });
        stats.used += 1;
    }
    let out = acc.map(|a| {
        let total = tape.scale(a, 1.0 / stats.used as f64);
        let mut term_values = [0.0; SUP_TERMS];
        for (o, s) in term_values.iter_mut().zip(&term_sums) {
            *o = s / stats.used as f64;
        }
        SupLoss { total, term_values }
    });
    Ok((out, stats))
}

/// One Adam step of the supervised objective.
pub fn sup_train_step(
    model: &mut Seq2SeqModel,
    batch: &[(TokenSeq, TokenSeq)],
    ratio: f64,
    opt: &mut Adam,
    rng: &mut CounterRng,
) -> Result<(f64, MassStats)> {
    let specs = sample_pair_specs(model, batch, ratio, rng)?;
    let mut tape = Tape::new();
    let mut mode = Mode::Train(rng);
    let (loss, stats) = sup_loss_node(model, &mut tape, batch, &specs, true, &mut mode)?;
    let Some(loss) = loss else {
        return Ok((0.0, stats));
    };
    let grads = tape.backward(loss.total)?;
    let by_param = tape.param_grads(&grads);
    opt.step(&mut model.params, &by_param);
    Ok((tape.value(loss.total), stats))
}
