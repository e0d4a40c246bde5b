//! Architecture surrogate: encoder, accuracy predictor, decoder.
//!
//! The encoder reads architecture tokens with a recurrent cell and
//! mean-pools the hidden states into one embedding. The predictor is a
//! small feed-forward map from embedding to predicted dev-set accuracy,
//! differentiable with respect to its input, which makes the gradient
//! ascent refinement step possible. The decoder generates tokens
//! autoregressively from an embedding; its output is constrained to the
//! slot grammar, so decoding always yields a valid genotype.
//!
//! Trained jointly on accuracy regression (squared error) and sequence
//! reconstruction (token NLL).

use crate::error::{Error, Result};
use crate::nao::codec::{
    decode_genotype, seq_len, slot_layout, valid_tokens, ArchTok, N_ARCH_TOKENS,
};
use crate::numerics::{
    Adam, AdamConfig, CounterRng, NodeId, ParamId, ParamStore, Reduction, RowSel, Tape, Tensor,
    MASK_NEG,
};
use crate::seq2seq::Genotype;

#[derive(Debug, Clone)]
pub struct SurrogateConfig {
    pub d_arch: usize,
    pub d_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig { d_arch: 64, d_hidden: 64, epochs: 160, batch_size: 8, lr: 1.5e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct Surrogate {
    pub n_layers: usize,
    pub d_arch: usize,
    d_hidden: usize,
    params: ParamStore,
    ids: Ids,
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    emb: ParamId,
    enc_wx: ParamId,
    enc_wh: ParamId,
    enc_b: ParamId,
    pred_w1: ParamId,
    pred_b1: ParamId,
    pred_w2: ParamId,
    pred_b2: ParamId,
    dec_wx: ParamId,
    dec_wh: ParamId,
    dec_we: ParamId,
    dec_pos: ParamId,
    dec_b: ParamId,
    dec_out_w: ParamId,
    dec_out_b: ParamId,
}

impl Surrogate {
    pub fn new(n_layers: usize, cfg: &SurrogateConfig, seed: u64) -> Result<Self> {
        let d = cfg.d_arch;
        let h = cfg.d_hidden;
        let root = CounterRng::new(seed);
        let mut p = ParamStore::new();
        let mat = |p: &mut ParamStore, name: &str, r: usize, c: usize| -> Result<ParamId> {
            let mut rng = root.derive(name);
            p.add(name, Tensor::fan_in_init(vec![r, c], r, &mut rng))
        };
        let vec0 = |p: &mut ParamStore, name: &str, n: usize| -> Result<ParamId> {
            p.add(name, Tensor::zeros(vec![n]))
        };
        let emb = {
            let mut rng = root.derive("arch.emb");
            p.add("arch.emb", Tensor::uniform_init(vec![N_ARCH_TOKENS, d], 0.08, &mut rng))?
        };
        let ids = Ids {
            emb,
            enc_wx: mat(&mut p, "enc.wx", d, d)?,
            enc_wh: mat(&mut p, "enc.wh", d, d)?,
            enc_b: vec0(&mut p, "enc.b", d)?,
            pred_w1: mat(&mut p, "pred.w1", d, h)?,
            pred_b1: vec0(&mut p, "pred.b1", h)?,
            pred_w2: mat(&mut p, "pred.w2", h, 1)?,
            pred_b2: vec0(&mut p, "pred.b2", 1)?,
            dec_wx: mat(&mut p, "dec.wx", d, d)?,
            dec_wh: mat(&mut p, "dec.wh", d, d)?,
            dec_we: mat(&mut p, "dec.we", d, d)?,
            dec_pos: {
                let mut rng = root.derive("dec.pos");
                p.add("dec.pos", Tensor::uniform_init(vec![seq_len(n_layers), d], 0.08, &mut rng))?
            },
            dec_b: vec0(&mut p, "dec.b", d)?,
            dec_out_w: mat(&mut p, "dec.out.w", d, N_ARCH_TOKENS)?,
            dec_out_b: vec0(&mut p, "dec.out.b", N_ARCH_TOKENS)?,
        };
        Ok(Surrogate { n_layers, d_arch: d, d_hidden: h, params: p, ids })
    }

    #[allow(clippy::too_many_arguments)]
    fn rnn_step(
        &self,
        tape: &mut Tape,
        tok: ArchTok,
        state: NodeId,
        context: Option<(NodeId, usize)>,
        wx: ParamId,
        wh: ParamId,
        b: ParamId,
        trainable: bool,
    ) -> NodeId {
        let emb = tape.param(&self.params, self.ids.emb, trainable);
        let e = tape.embed_rows(emb, vec![RowSel::Hard(tok)]);
        let wx = tape.param(&self.params, wx, trainable);
        let wh = tape.param(&self.params, wh, trainable);
        let b = tape.param(&self.params, b, trainable);
        let xa = tape.matmul(e, wx);
        let ha = tape.matmul(state, wh);
        let mut s = tape.add(xa, ha);
        if let Some((ctx, step)) = context {
            // keep the sequence embedding and the slot position in view
            let we = tape.param(&self.params, self.ids.dec_we, trainable);
            let ca = tape.matmul(ctx, we);
            s = tape.add(s, ca);
            let pos = tape.param(&self.params, self.ids.dec_pos, trainable);
            let prow = tape.embed_rows(pos, vec![RowSel::Hard(step)]);
            s = tape.add(s, prow);
        }
        let s = tape.add_bias(s, b);
        tape.tanh(s)
    }

    /// Recurrent read of the token sequence, mean-pooled: `[1, d_arch]`.
    pub fn encode_node(&self, tape: &mut Tape, tokens: &[ArchTok], trainable: bool) -> Result<NodeId> {
        if tokens.len() != seq_len(self.n_layers) {
            return Err(Error::invalid(format!(
                "expected {} tokens, got {}",
                seq_len(self.n_layers),
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= N_ARCH_TOKENS) {
            return Err(Error::invalid(format!("invalid architecture token {bad}")));
        }
        let mut state = tape.constant(vec![1, self.d_arch], vec![0.0; self.d_arch]);
        let mut pooled: Option<NodeId> = None;
        for &tok in tokens {
            state =
                self.rnn_step(tape, tok, state, None, self.ids.enc_wx, self.ids.enc_wh, self.ids.enc_b, trainable);
            pooled = Some(match pooled {
                None => state,
                Some(acc) => tape.add(acc, state),
            });
        }
        Ok(tape.scale(pooled.unwrap(), 1.0 / tokens.len() as f64))
    }

    /// Deterministic architecture embedding.
    pub fn encode(&self, tokens: &[ArchTok]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let e = self.encode_node(&mut tape, tokens, false)?;
        Ok(tape.data(e).to_vec())
    }

    /// Predicted accuracy head over an embedding node: `[1, 1]`.
    pub fn predict_node(&self, tape: &mut Tape, e: NodeId, trainable: bool) -> NodeId {
        let w1 = tape.param(&self.params, self.ids.pred_w1, trainable);
        let b1 = tape.param(&self.params, self.ids.pred_b1, trainable);
        let w2 = tape.param(&self.params, self.ids.pred_w2, trainable);
        let b2 = tape.param(&self.params, self.ids.pred_b2, trainable);
        let h = tape.matmul(e, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, w2);
        tape.add_bias(o, b2)
    }

    pub fn predict(&self, e: &[f64]) -> Result<f64> {
        if e.len() != self.d_arch {
            return Err(Error::invalid("embedding dimension mismatch"));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        let mut tape = Tape::new();
        let en = tape.constant(vec![1, self.d_arch], e.to_vec());
        let p = self.predict_node(&mut tape, en, false);
        Ok(tape.data(p)[0])
    }

    /// Gradient of the predictor output with respect to the embedding.
    pub fn predictor_gradient(&self, e: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let en = tape.leaf(vec![1, self.d_arch], e.to_vec(), true);
        let p = self.predict_node(&mut tape, en, false);
        let s = tape.sum_to_scalar(p);
        let grads = tape.backward(s)?;
        Ok(grads.get(en).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; self.d_arch]))
    }

    /// One gradient-ascent refinement: `e' = e + eta * df/de`.
    pub fn ascend(&self, e: &[f64], eta: f64) -> Result<Vec<f64>> {
        if eta < 0.0 {
            return Err(Error::invalid(format!("step size must be nonnegative, got {eta}")));
        }
        if eta == 0.0 {
            return Ok(e.to_vec());
        }
        let g = self.predictor_gradient(e)?;
        Ok(e.iter().zip(&g).map(|(x, gx)| x + eta * gx).collect())
    }

    /// Greedy constrained decoding: every emitted token is legal for its
    /// slot, so the result is always a valid genotype.
    pub fn decode(&self, e: &[f64]) -> Result<Genotype> {
        if e.len() != self.d_arch {
            return Err(Error::invalid("embedding dimension mismatch"));
        }
        let slots = slot_layout(self.n_layers);
        let mut tape = Tape::new();
        let ctx = tape.constant(vec![1, self.d_arch], e.to_vec());
        let mut state = ctx;
        let mut tokens = Vec::with_capacity(slots.len());
        for (step, &slot) in slots.iter().enumerate() {
            let w = tape.param(&self.params, self.ids.dec_out_w, false);
            let b = tape.param(&self.params, self.ids.dec_out_b, false);
            let logits = tape.matmul(state, w);
            let logits = tape.add_bias(logits, b);
            let legal = valid_tokens(slot);
            let mut mask = vec![MASK_NEG; N_ARCH_TOKENS];
            for t in &legal {
                mask[*t] = 0.0;
            }
            let masked = tape.add_const(logits, &mask);
            let row = tape.data(masked);
            let mut best = legal[0];
            let mut best_v = f64::NEG_INFINITY;
            for &t in &legal {
                if row[t] > best_v {
                    best_v = row[t];
                    best = t;
                }
            }
            tokens.push(best);
            state = self.rnn_step(
                &mut tape,
                best,
                state,
                Some((ctx, step)),
                self.ids.dec_wx,
                self.ids.dec_wh,
                self.ids.dec_b,
                false,
            );
        }
        decode_genotype(&tokens, self.n_layers)
    }

    /// Teacher-forced reconstruction NLL of a token sequence from its own
    /// embedding, on the caller's tape.
    fn reconstruction_node(
        &self,
        tape: &mut Tape,
        e: NodeId,
        tokens: &[ArchTok],
        trainable: bool,
    ) -> Result<NodeId> {
        let mut state = e;
        let mut acc: Option<NodeId> = None;
        for (step, &tok) in tokens.iter().enumerate() {
            let w = tape.param(&self.params, self.ids.dec_out_w, trainable);
            let b = tape.param(&self.params, self.ids.dec_out_b, trainable);
            let logits = tape.matmul(state, w);
            let logits = tape.add_bias(logits, b);
            let nll = tape.cross_entropy(logits, &[tok], Reduction::Sum)?;
            acc = Some(match acc {
                None => nll,
                Some(a) => tape.add(a, nll),
            });
            state = self.rnn_step(
                tape,
                tok,
                state,
                Some((e, step)),
                self.ids.dec_wx,
                self.ids.dec_wh,
                self.ids.dec_b,
                trainable,
            );
        }
        Ok(acc.unwrap())
    }

    /// Joint fit: squared-error on predicted accuracy plus reconstruction
    /// NLL, minibatch Adam.
    pub fn fit(&mut self, data: &[(Vec<ArchTok>, f64)], cfg: &SurrogateConfig, seed: u64) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("surrogate needs training data"));
        }
        let mut rng = CounterRng::new(seed).derive("surrogate-fit");
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut tape = Tape::new();
                let mut acc: Option<NodeId> = None;
                for &i in chunk {
                    let (tokens, y) = &data[i];
                    let e = self.encode_node(&mut tape, tokens, true)?;
                    let pred = self.predict_node(&mut tape, e, true);
                    let diff = tape.add_const(pred, &[-*y]);
                    let mse = tape.sum_of_squares(diff);
                    let recon = self.reconstruction_node(&mut tape, e, tokens, true)?;
                    let both = tape.add(mse, recon);
                    acc = Some(match acc {
                        None => both,
                        Some(a) => tape.add(a, both),
                    });
                }
                let loss = tape.scale(acc.unwrap(), 1.0 / chunk.len() as f64);
                let grads = tape.backward(loss)?;
                let by_param = tape.param_grads(&grads);
                opt.step(&mut self.params, &by_param);
            }
        }
        Ok(())
    }

    /// Fraction of sequences that decode back to themselves.
    pub fn reconstruction_rate(&self, data: &[(Vec<ArchTok>, f64)]) -> Result<f64> {
        let mut ok = 0usize;
        for (tokens, _) in data {
            let e = self.encode(tokens)?;
            let decoded = crate::nao::codec::encode_genotype(&self.decode(&e)?);
            if decoded == *tokens {
                ok += 1;
            }
        }
        Ok(ok as f64 / data.len() as f64)
    }

    pub fn d_hidden(&self) -> usize {
        self.d_hidden
    }
}
