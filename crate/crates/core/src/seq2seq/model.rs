//! Genotype-configurable encoder-decoder transformer.
//!
//! One model class serves every technique in the toolkit. A [`Genotype`]
//! fixes the wiring of every layer; the baseline transformer is just the
//! genotype produced by [`transformer_genotype`]. Inside a layer, a node's
//! output is the sum of its two branch outputs plus a residual from the
//! node's first input; the layer output is the sum of all nodes no other
//! node consumes, followed by layer normalization.
//!
//! Sequences are processed one at a time as `[T, d]` matrices. Source
//! sequences are canonicalized before encoding: everything from the first
//! EOS or PAD is stripped and a single EOS is appended, so trailing padding
//! can never change any output.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{
    log_softmax, Adam, CounterRng, NodeId, ParamId, ParamStore, Reduction, RowSel, Tape, Tensor,
    MASK_NEG,
};
use crate::seq2seq::genotype::{BranchInput, Genotype, OpKind};
use crate::seq2seq::vocab::{SpecialIds, TokenId, TokenSeq, Vocabulary};

pub const EMB_INIT_BOUND: f64 = 0.08;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub tied_embeddings: bool,
    pub shared_vocab: bool,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            n_layers: 2,
            dropout: 0.1,
            max_len: 64,
            tied_embeddings: true,
            shared_vocab: true,
        }
    }

    /// Reference large configuration (recorded, not exercised here):
    /// six layers per side, dropout 0.2.
    pub fn large() -> Self {
        ModelConfig {
            d_model: 1024,
            n_heads: 16,
            d_ffn: 4096,
            n_layers: 6,
            dropout: 0.2,
            max_len: 256,
            tied_embeddings: true,
            shared_vocab: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 || self.n_layers == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.max_len < 4 {
            return Err(Error::invalid("max_len must be at least 4"));
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        format!(
            "d_model={};n_heads={};d_ffn={};n_layers={};dropout={};max_len={};tied_embeddings={};shared_vocab={}",
            self.d_model,
            self.n_heads,
            self.d_ffn,
            self.n_layers,
            self.dropout,
            self.max_len,
            self.tied_embeddings,
            self.shared_vocab
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let mut cfg = ModelConfig::toy();
        for kv in line.split(';') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad config field {kv:?}")))?;
            let fail = |k: &str| Error::format(format!("bad config value for {k}"));
            match k {
                "d_model" => cfg.d_model = v.parse().map_err(|_| fail(k))?,
                "n_heads" => cfg.n_heads = v.parse().map_err(|_| fail(k))?,
                "d_ffn" => cfg.d_ffn = v.parse().map_err(|_| fail(k))?,
                "n_layers" => cfg.n_layers = v.parse().map_err(|_| fail(k))?,
                "dropout" => cfg.dropout = v.parse().map_err(|_| fail(k))?,
                "max_len" => cfg.max_len = v.parse().map_err(|_| fail(k))?,
                "tied_embeddings" => cfg.tied_embeddings = v.parse().map_err(|_| fail(k))?,
                "shared_vocab" => cfg.shared_vocab = v.parse().map_err(|_| fail(k))?,
                other => return Err(Error::format(format!("unknown config field {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dropout switch for a forward pass. Evaluation is exact; training draws
/// element masks from the supplied stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut CounterRng),
}

// ── Resolved plans ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum OpPlan {
    Identity,
    Zero,
    SelfAttn(AttnIds),
    CrossAttn(AttnIds),
    Conv3(ConvIds),
    Ffn(FfnIds),
}

#[derive(Debug, Clone, Copy)]
struct BranchPlan {
    input: BranchInput,
    op: OpPlan,
}

#[derive(Debug, Clone)]
struct NodePlan {
    branches: [BranchPlan; 2],
}

#[derive(Debug, Clone)]
struct LayerPlan {
    nodes: Vec<NodePlan>,
    loose_ends: Vec<usize>,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

#[derive(Debug, Clone)]
struct ModelPlan {
    enc_layers: Vec<LayerPlan>,
    dec_layers: Vec<LayerPlan>,
    emb_src: ParamId,
    emb_tgt: ParamId,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

/// Encoder-decoder model with deterministic, seed-derived initialization.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub genotype: Genotype,
    pub vocab_size: usize,
    pub specials: SpecialIds,
    pub params: ParamStore,
    plan: ModelPlan,
    pos_enc: Vec<f64>,
}

fn sinusoidal_pos_enc(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = angle.sin();
            if 2 * i + 1 < d {
                pe[pos * d + 2 * i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// Create op parameters under `prefix` in a store, initialized from rngs
/// derived per parameter name so layout order never affects values.
pub(crate) fn add_op_params(
    store: &mut ParamStore,
    root: &CounterRng,
    prefix: &str,
    op: OpKind,
    cfg: &ModelConfig,
) -> Result<()> {
    let d = cfg.d_model;
    let mat = |store: &mut ParamStore, name: String, rows: usize, cols: usize| -> Result<()> {
        let mut rng = root.derive(&name);
        store.add(name, Tensor::fan_in_init(vec![rows, cols], rows, &mut rng))?;
        Ok(())
    };
    let zeros = |store: &mut ParamStore, name: String, n: usize| -> Result<()> {
        store.add(name, Tensor::zeros(vec![n]))?;
        Ok(())
    };
    match op {
        OpKind::Identity | OpKind::Zero => {}
        OpKind::SelfAttention | OpKind::CrossAttention => {
            for part in ["wq", "wk", "wv", "wo"] {
                mat(store, format!("{prefix}.{}.{part}", op.code()), d, d)?;
            }
            for part in ["bq", "bk", "bv", "bo"] {
                zeros(store, format!("{prefix}.{}.{part}", op.code()), d)?;
            }
        }
        OpKind::Conv3 => {
            let name = format!("{prefix}.c3.w");
            let mut rng = root.derive(&name);
            store.add(name, Tensor::fan_in_init(vec![3, d], 3, &mut rng))?;
            zeros(store, format!("{prefix}.c3.b"), d)?;
        }
        OpKind::Ffn => {
            mat(store, format!("{prefix}.ff.w1"), d, cfg.d_ffn)?;
            zeros(store, format!("{prefix}.ff.b1"), cfg.d_ffn)?;
            mat(store, format!("{prefix}.ff.w2"), cfg.d_ffn, d)?;
            zeros(store, format!("{prefix}.ff.b2"), d)?;
        }
    }
    Ok(())
}

fn resolve_op(store: &ParamStore, prefix: &str, op: OpKind) -> Result<OpPlan> {
    let find = |suffix: &str| -> Result<ParamId> {
        let name = format!("{prefix}.{suffix}");
        store
            .id_by_name(&name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    };
    Ok(match op {
        OpKind::Identity => OpPlan::Identity,
        OpKind::Zero => OpPlan::Zero,
        OpKind::SelfAttention | OpKind::CrossAttention => {
            let c = op.code();
            let ids = AttnIds {
                wq: find(&format!("{c}.wq"))?,
                bq: find(&format!("{c}.bq"))?,
                wk: find(&format!("{c}.wk"))?,
                bk: find(&format!("{c}.bk"))?,
                wv: find(&format!("{c}.wv"))?,
                bv: find(&format!("{c}.bv"))?,
                wo: find(&format!("{c}.wo"))?,
                bo: find(&format!("{c}.bo"))?,
            };
            if op == OpKind::SelfAttention {
                OpPlan::SelfAttn(ids)
            } else {
                OpPlan::CrossAttn(ids)
            }
        }
        OpKind::Conv3 => OpPlan::Conv3(ConvIds { w: find("c3.w")?, b: find("c3.b")? }),
        OpKind::Ffn => OpPlan::Ffn(FfnIds {
            w1: find("ff.w1")?,
            b1: find("ff.b1")?,
            w2: find("ff.w2")?,
            b2: find("ff.b2")?,
        }),
    })
}

pub(crate) fn branch_prefix(side: &str, layer: usize, node: usize, branch: usize) -> String {
    format!("{side}.l{layer}.n{node}.b{branch}")
}

/// Build a model: create parameters for exactly the ops the genotype uses,
/// then resolve the evaluation plan. Same seed, same genotype, same config
/// gives bit-identical parameters.
pub fn build_model(
    genotype: Genotype,
    config: ModelConfig,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Seq2SeqModel> {
    config.validate()?;
    genotype.validate()?;
    if genotype.n_layers() != config.n_layers {
        return Err(Error::genotype(format!(
            "genotype has {} layers, config expects {}",
            genotype.n_layers(),
            config.n_layers
        )));
    }
    let root = CounterRng::new(seed);
    let mut store = ParamStore::new();
    let d = config.d_model;
    let v = vocab.size();

    let mut emb_rng = root.derive("emb.src");
    store.add("emb.src", Tensor::uniform_init(vec![v, d], EMB_INIT_BOUND, &mut emb_rng))?;
    if !config.shared_vocab {
        let mut rng = root.derive("emb.tgt");
        store.add("emb.tgt", Tensor::uniform_init(vec![v, d], EMB_INIT_BOUND, &mut rng))?;
    }

    for (side, layers) in
        [("enc", &genotype.encoder_layers), ("dec", &genotype.decoder_layers)]
    {
        for (li, layer) in layers.iter().enumerate() {
            for (ni, node) in layer.nodes.iter().enumerate() {
                for (bi, branch) in node.branches.iter().enumerate() {
                    add_op_params(
                        &mut store,
                        &root,
                        &branch_prefix(side, li, ni, bi),
                        branch.op,
                        &config,
                    )?;
                }
            }
            store.add(format!("{side}.l{li}.ln.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
            store.add(format!("{side}.l{li}.ln.b"), Tensor::zeros(vec![d]))?;
        }
    }

    if !config.tied_embeddings {
        let mut rng = root.derive("out.w");
        store.add("out.w", Tensor::fan_in_init(vec![d, v], d, &mut rng))?;
    }
    store.add("out.b", Tensor::zeros(vec![v]))?;

    let plan = resolve_plan(&store, &genotype, &config)?;
    let pos_enc = sinusoidal_pos_enc(config.max_len, d);
    Ok(Seq2SeqModel {
        vocab_size: v,
        specials: vocab.specials(),
        config,
        genotype,
        params: store,
        plan,
        pos_enc,
    })
}

fn resolve_plan(store: &ParamStore, genotype: &Genotype, config: &ModelConfig) -> Result<ModelPlan> {
    let side_plan = |side: &str, layers: &[crate::seq2seq::genotype::LayerGene]| -> Result<Vec<LayerPlan>> {
        layers
            .iter()
            .enumerate()
            .map(|(li, layer)| {
                let nodes = layer
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(ni, node)| {
                        let b = |bi: usize| -> Result<BranchPlan> {
                            let branch = &node.branches[bi];
                            Ok(BranchPlan {
                                input: branch.input,
                                op: resolve_op(
                                    store,
                                    &branch_prefix(side, li, ni, bi),
                                    branch.op,
                                )?,
                            })
                        };
                        Ok(NodePlan { branches: [b(0)?, b(1)?] })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LayerPlan {
                    nodes,
                    loose_ends: layer.loose_ends(),
                    ln_gamma: store.id_by_name(&format!("{side}.l{li}.ln.g")).unwrap(),
                    ln_beta: store.id_by_name(&format!("{side}.l{li}.ln.b")).unwrap(),
                })
            })
            .collect()
    };
    let emb_src = store.id_by_name("emb.src").unwrap();
    let emb_tgt = if config.shared_vocab {
        emb_src
    } else {
        store.id_by_name("emb.tgt").unwrap()
    };
    Ok(ModelPlan {
        enc_layers: side_plan("enc", &genotype.encoder_layers)?,
        dec_layers: side_plan("dec", &genotype.decoder_layers)?,
        emb_src,
        emb_tgt,
        out_w: store.id_by_name("out.w"),
        out_b: store.id_by_name("out.b").unwrap(),
    })
}

/// A source sentence encoded once; decoder steps append to the same tape.
pub struct EncodedSource {
    tape: Tape,
    memory: NodeId,
}

impl Seq2SeqModel {
    /// Content tokens up to the first EOS/PAD, with one EOS appended.
    pub fn canonical_source(&self, src: &[TokenId]) -> Result<Vec<TokenId>> {
        let cut = src
            .iter()
            .position(|&t| t == self.specials.eos || t == self.specials.pad)
            .unwrap_or(src.len());
        let mut out = src[..cut].to_vec();
        out.push(self.specials.eos);
        if out.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "source length {} exceeds max length {}",
                out.len(),
                self.config.max_len
            )));
        }
        Ok(out)
    }

    fn dropout(&self, tape: &mut Tape, x: NodeId, mode: &mut Mode) -> NodeId {
        let p = self.config.dropout;
        match mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 - p;
                let mask: Vec<f64> = (0..tape.data(x).len())
                    .map(|_| if rng.bernoulli(p) { 0.0 } else { 1.0 / keep })
                    .collect();
                tape.mul_mask(x, mask)
            }
            _ => x,
        }
    }

    fn embed(
        &self,
        tape: &mut Tape,
        table: ParamId,
        rows: Vec<RowSel>,
        trainable: bool,
        mode: &mut Mode,
    ) -> NodeId {
        let t = rows.len();
        let d = self.config.d_model;
        let table_node = tape.param(&self.params, table, trainable);
        let x = tape.embed_rows(table_node, rows);
        let x = tape.scale(x, (d as f64).sqrt());
        let x = tape.add_const(x, &self.pos_enc[..t * d]);
        self.dropout(tape, x, mode)
    }

    fn mha(
        &self,
        tape: &mut Tape,
        q_in: NodeId,
        kv_in: NodeId,
        ids: &AttnIds,
        causal: bool,
        trainable: bool,
    ) -> NodeId {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dk = d / h;
        let t_q = tape.shape(q_in)[0];
        let t_k = tape.shape(kv_in)[0];

        let bind = |tape: &mut Tape, pid: ParamId| tape.param(&self.params, pid, trainable);
        let wq = bind(tape, ids.wq);
        let bq = bind(tape, ids.bq);
        let wk = bind(tape, ids.wk);
        let bk = bind(tape, ids.bk);
        let wv = bind(tape, ids.wv);
        let bv = bind(tape, ids.bv);
        let wo = bind(tape, ids.wo);
        let bo = bind(tape, ids.bo);

        let q = tape.matmul(q_in, wq);
        let q = tape.add_bias(q, bq);
        let k = tape.matmul(kv_in, wk);
        let k = tape.add_bias(k, bk);
        let v = tape.matmul(kv_in, wv);
        let v = tape.add_bias(v, bv);

        let causal_mask: Option<Vec<f64>> = causal.then(|| {
            let mut m = vec![0.0; t_q * t_k];
            for i in 0..t_q {
                for j in 0..t_k {
                    if j > i {
                        m[i * t_k + j] = MASK_NEG;
                    }
                }
            }
            m
        });

        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = tape.slice_cols(q, i * dk, dk);
            let kh = tape.slice_cols(k, i * dk, dk);
            let vh = tape.slice_cols(v, i * dk, dk);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
            let scores = match &causal_mask {
                Some(m) => tape.add_const(scores, m),
                None => scores,
            };
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let ctx = tape.concat_cols(&heads);
        let out = tape.matmul(ctx, wo);
        tape.add_bias(out, bo)
    }

    fn apply_op(
        &self,
        tape: &mut Tape,
        op: &OpPlan,
        input: NodeId,
        memory: Option<NodeId>,
        is_decoder: bool,
        trainable: bool,
        mode: &mut Mode,
    ) -> NodeId {
        match op {
            OpPlan::Identity => input,
            OpPlan::Zero => {
                let shape = tape.shape(input).to_vec();
                let n = shape.iter().product();
                tape.constant(shape, vec![0.0; n])
            }
            OpPlan::SelfAttn(ids) => {
                let out = self.mha(tape, input, input, ids, is_decoder, trainable);
                self.dropout(tape, out, mode)
            }
            OpPlan::CrossAttn(ids) => {
                let mem = memory.expect("cross-attention needs encoder memory");
                let out = self.mha(tape, input, mem, ids, false, trainable);
                self.dropout(tape, out, mode)
            }
            OpPlan::Conv3(ids) => {
                let w = tape.param(&self.params, ids.w, trainable);
                let b = tape.param(&self.params, ids.b, trainable);
                let out = tape.conv3(input, w, b, is_decoder);
                self.dropout(tape, out, mode)
            }
            OpPlan::Ffn(ids) => {
                let w1 = tape.param(&self.params, ids.w1, trainable);
                let b1 = tape.param(&self.params, ids.b1, trainable);
                let w2 = tape.param(&self.params, ids.w2, trainable);
                let b2 = tape.param(&self.params, ids.b2, trainable);
                let h = tape.matmul(input, w1);
                let h = tape.add_bias(h, b1);
                let h = tape.relu(h);
                let h = tape.matmul(h, w2);
                let out = tape.add_bias(h, b2);
                self.dropout(tape, out, mode)
            }
        }
    }

    fn eval_layer(
        &self,
        tape: &mut Tape,
        plan: &LayerPlan,
        x: NodeId,
        memory: Option<NodeId>,
        is_decoder: bool,
        trainable: bool,
        mode: &mut Mode,
    ) -> NodeId {
        let mut node_outs: Vec<NodeId> = Vec::with_capacity(plan.nodes.len());
        for node in &plan.nodes {
            let resolve = |input: BranchInput, outs: &[NodeId]| match input {
                BranchInput::LayerInput => x,
                BranchInput::Node(i) => outs[i],
            };
            let in0 = resolve(node.branches[0].input, &node_outs);
            let in1 = resolve(node.branches[1].input, &node_outs);
            let b0 =
                self.apply_op(tape, &node.branches[0].op, in0, memory, is_decoder, trainable, mode);
            let b1 =
                self.apply_op(tape, &node.branches[1].op, in1, memory, is_decoder, trainable, mode);
            let s = tape.add(b0, b1);
            let out = tape.add(s, in0);
            node_outs.push(out);
        }
        let mut acc = node_outs[plan.loose_ends[0]];
        for &i in &plan.loose_ends[1..] {
            acc = tape.add(acc, node_outs[i]);
        }
        let g = tape.param(&self.params, plan.ln_gamma, trainable);
        let b = tape.param(&self.params, plan.ln_beta, trainable);
        tape.layer_norm_rows(acc, g, b)
    }

    /// Encode pre-built source rows (already canonicalized, EOS included).
    pub(crate) fn encode_rows(
        &self,
        tape: &mut Tape,
        rows: Vec<RowSel>,
        trainable: bool,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        if rows.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "source length {} exceeds max length {}",
                rows.len(),
                self.config.max_len
            )));
        }
        let mut x = self.embed(tape, self.plan.emb_src, rows, trainable, mode);
        for layer in &self.plan.enc_layers {
            x = self.eval_layer(tape, layer, x, None, false, trainable, mode);
        }
        Ok(x)
    }

    fn encode_ids(
        &self,
        tape: &mut Tape,
        src: &[TokenId],
        trainable: bool,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        let canon = self.canonical_source(src)?;
        let rows = canon.into_iter().map(RowSel::Hard).collect();
        self.encode_rows(tape, rows, trainable, mode)
    }

    /// Teacher-forced decoder logits `[len(dec_input), vocab]` where
    /// `dec_input` already starts with BOS.
    fn decode_logits(
        &self,
        tape: &mut Tape,
        memory: NodeId,
        dec_input: &[TokenId],
        trainable: bool,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        if dec_input.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "target length {} exceeds max length {}",
                dec_input.len(),
                self.config.max_len
            )));
        }
        let rows = dec_input.iter().map(|&t| RowSel::Hard(t)).collect();
        let mut x = self.embed(tape, self.plan.emb_tgt, rows, trainable, mode);
        for layer in &self.plan.dec_layers {
            x = self.eval_layer(tape, layer, x, Some(memory), true, trainable, mode);
        }
        match self.plan.out_w {
            Some(w) => {
                let wn = tape.param(&self.params, w, trainable);
                let b = tape.param(&self.params, self.plan.out_b, trainable);
                let logits = tape.matmul(x, wn);
                Ok(tape.add_bias(logits, b))
            }
            None => {
                let e = tape.param(&self.params, self.plan.emb_tgt, trainable);
                let et = tape.transpose(e);
                let b = tape.param(&self.params, self.plan.out_b, trainable);
                let logits = tape.matmul(x, et);
                Ok(tape.add_bias(logits, b))
            }
        }
    }

    /// Full teacher-forced logits for (source, decoder input) in eval mode.
    /// Row `t` depends only on decoder input positions `0..=t`.
    pub fn forward_logits(&self, src: &[TokenId], dec_input: &[TokenId]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut mode = Mode::Eval;
        let memory = self.encode_ids(&mut tape, src, false, &mut mode)?;
        let logits = self.decode_logits(&mut tape, memory, dec_input, false, &mut mode)?;
        Tensor::new(tape.shape(logits).to_vec(), tape.data(logits).to_vec())
    }

    /// Log-probability distribution for the next token after `prefix`.
    pub fn logprobs(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut enc = self.encode_source(src)?;
        self.step_logprobs(&mut enc, prefix)
    }

    /// One-time source encoding for incremental decoding.
    pub fn encode_source(&self, src: &[TokenId]) -> Result<EncodedSource> {
        let mut tape = Tape::new();
        let memory = self.encode_ids(&mut tape, src, false, &mut Mode::Eval)?;
        Ok(EncodedSource { tape, memory })
    }

    /// Next-token log-probs given a prefix, reusing the encoded source.
    pub fn step_logprobs(&self, enc: &mut EncodedSource, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut dec_input = Vec::with_capacity(prefix.len() + 1);
        dec_input.push(self.specials.bos);
        dec_input.extend_from_slice(prefix);
        let logits =
            self.decode_logits(&mut enc.tape, enc.memory, &dec_input, false, &mut Mode::Eval)?;
        let t = dec_input.len();
        let row = enc.tape.slice_rows(logits, t - 1, 1);
        Ok(log_softmax(enc.tape.data(row)))
    }

    /// Sequence NLL node (sum over target tokens and final EOS) for one pair,
    /// built on the caller's tape. The workhorse behind every objective.
    pub fn pair_nll_node(
        &self,
        tape: &mut Tape,
        src: &[TokenId],
        tgt: &[TokenId],
        trainable: bool,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        let memory = self.encode_ids(tape, src, trainable, mode)?;
        self.target_nll_node(tape, memory, tgt, trainable, mode)
    }

    /// Same as [`Self::pair_nll_node`] with caller-supplied source rows
    /// (soft augmentation replaces some hard lookups).
    pub fn pair_nll_node_with_src_rows(
        &self,
        tape: &mut Tape,
        src_rows: Vec<RowSel>,
        tgt: &[TokenId],
        trainable: bool,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        let memory = self.encode_rows(tape, src_rows, trainable, mode)?;
        self.target_nll_node(tape, memory, tgt, trainable, mode)
    }

    fn target_nll_node(
        &self,
        tape: &mut Tape,
        memory: NodeId,
        tgt: &[TokenId],
        trainable: bool,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        let cut = tgt
            .iter()
            .position(|&t| t == self.specials.eos || t == self.specials.pad)
            .unwrap_or(tgt.len());
        let content = &tgt[..cut];
        let mut dec_input = Vec::with_capacity(content.len() + 1);
        dec_input.push(self.specials.bos);
        dec_input.extend_from_slice(content);
        let mut labels = content.to_vec();
        labels.push(self.specials.eos);
        let logits = self.decode_logits(tape, memory, &dec_input, trainable, mode)?;
        tape.cross_entropy(logits, &labels, Reduction::Sum)
    }

    /// Decoder NLL of `labels` given `dec_input` (no EOS bookkeeping): used
    /// by fragment-prediction objectives that score an exact token span.
    pub fn fragment_nll_node(
        &self,
        tape: &mut Tape,
        memory: NodeId,
        dec_input: &[TokenId],
        labels: &[TokenId],
        trainable: bool,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        let logits = self.decode_logits(tape, memory, dec_input, trainable, mode)?;
        tape.cross_entropy(logits, labels, Reduction::Sum)
    }

    /// Encoder memory for arbitrary ids on the caller's tape (objectives
    /// that feed masked or concatenated sources).
    pub fn memory_for_ids(
        &self,
        tape: &mut Tape,
        ids: &[TokenId],
        trainable: bool,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        let rows = ids.iter().map(|&t| RowSel::Hard(t)).collect();
        self.encode_rows(tape, rows, trainable, mode)
    }

    /// Total log-probability of `tgt` given `src`, including the EOS step.
    /// With `reversed`, the target token order is flipped before scoring
    /// (for models trained on reversed targets).
    pub fn score_sequence(&self, src: &[TokenId], tgt: &[TokenId], reversed: bool) -> Result<f64> {
        if tgt.is_empty() {
            return Err(Error::invalid("cannot score an empty target"));
        }
        let tgt_eval: Vec<TokenId> = if reversed {
            tgt.iter().rev().copied().collect()
        } else {
            tgt.to_vec()
        };
        let mut tape = Tape::new();
        let mut mode = Mode::Eval;
        let nll = self.pair_nll_node(&mut tape, src, &tgt_eval, false, &mut mode)?;
        Ok(-tape.value(nll))
    }

    /// One teacher-forced Adam step on a batch. Loss is the mean over pairs
    /// of the per-pair sequence NLL.
    pub fn train_step(
        &mut self,
        batch: &[(TokenSeq, TokenSeq)],
        opt: &mut Adam,
        rng: &mut CounterRng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let mut tape = Tape::new();
        let mut mode = Mode::Train(rng);
        let mut acc: Option<NodeId> = None;
        for (src, tgt) in batch {
            let nll = self.pair_nll_node(&mut tape, &src.ids, &tgt.ids, true, &mut mode)?;
            acc = Some(match acc {
                None => nll,
                Some(a) => tape.add(a, nll),
            });
        }
        let total = acc.unwrap();
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let grads = tape.backward(loss)?;
        let by_param = tape.param_grads(&grads);
        opt.step(&mut self.params, &by_param);
        Ok(tape.value(loss))
    }

    /// Mean per-pair sequence NLL without updating anything.
    pub fn eval_nll(&self, pairs: &[(TokenSeq, TokenSeq)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::invalid("empty evaluation set"));
        }
        let mut total = 0.0;
        for (src, tgt) in pairs {
            let mut tape = Tape::new();
            let nll = self.pair_nll_node(&mut tape, &src.ids, &tgt.ids, false, &mut Mode::Eval)?;
            total += tape.value(nll);
        }
        Ok(total / pairs.len() as f64)
    }
}

// ── Model checkpoint container ──────────────────────────────────────────
//
// Text preamble (role tag, config, optional genotype) followed by the binary
// parameter checkpoint. One file, bit-exact parameter round-trip.

const MODEL_MAGIC: &str = "deskmt-model v1";

pub struct ModelContainer {
    pub role: String,
    pub config: ModelConfig,
    pub genotype: Option<Genotype>,
    pub vocab_size: usize,
    pub params: ParamStore,
}

pub fn write_model_container<W: Write>(c: &ModelContainer, w: &mut W) -> Result<()> {
    let mut blob = Vec::new();
    crate::numerics::checkpoint::write_checkpoint(&c.params, &mut blob)?;
    writeln!(w, "{MODEL_MAGIC}")?;
    writeln!(w, "role {}", c.role)?;
    writeln!(w, "vocab {}", c.vocab_size)?;
    writeln!(w, "config {}", c.config.to_line())?;
    match &c.genotype {
        Some(g) => writeln!(w, "genotype {}", g.to_canonical())?,
        None => writeln!(w, "genotype none")?,
    }
    writeln!(w, "params {}", blob.len())?;
    w.write_all(&blob)?;
    Ok(())
}

pub fn read_model_container<R: Read>(r: &mut R) -> Result<ModelContainer> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut offset = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<String> {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("truncated model container"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::format("non-UTF-8 model header"))?
            .to_string();
        offset += end + 1;
        Ok(line)
    };
    if next_line(&bytes)? != MODEL_MAGIC {
        return Err(Error::format("bad model container magic"));
    }
    let field = |line: String, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|s| s.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| Error::format(format!("expected '{key}' line")))
    };
    let role = field(next_line(&bytes)?, "role")?;
    let vocab_size: usize = field(next_line(&bytes)?, "vocab")?
        .parse()
        .map_err(|_| Error::format("bad vocab size"))?;
    let config = ModelConfig::from_line(&field(next_line(&bytes)?, "config")?)?;
    let geno_text = field(next_line(&bytes)?, "genotype")?;
    let genotype =
        if geno_text == "none" { None } else { Some(Genotype::from_canonical(&geno_text)?) };
    let blob_len: usize = field(next_line(&bytes)?, "params")?
        .parse()
        .map_err(|_| Error::format("bad params length"))?;
    if bytes.len() < offset + blob_len {
        return Err(Error::format("model container shorter than declared"));
    }
    let params =
        crate::numerics::checkpoint::read_checkpoint(&mut &bytes[offset..offset + blob_len])?;
    Ok(ModelContainer { role, config, genotype, vocab_size, params })
}

impl Seq2SeqModel {
    /// Assemble a model over an existing parameter store (weight sharing:
    /// the store may hold parameters for many more operators than this
    /// genotype uses). The store must contain every name the plan resolves.
    pub fn from_parts(
        genotype: Genotype,
        config: ModelConfig,
        vocab_size: usize,
        specials: SpecialIds,
        params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        genotype.validate()?;
        let plan = resolve_plan(&params, &genotype, &config)?;
        let pos_enc = sinusoidal_pos_enc(config.max_len, config.d_model);
        Ok(Seq2SeqModel { config, genotype, vocab_size, specials, params, plan, pos_enc })
    }

    /// Surrender the parameter store (weight sharing hands it back to the
    /// owner after a subpath step).
    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn save(&self, path: &Path, role: &str) -> Result<()> {
        let c = ModelContainer {
            role: role.to_string(),
            config: self.config.clone(),
            genotype: Some(self.genotype.clone()),
            vocab_size: self.vocab_size,
            params: self.params.clone(),
        };
        let mut f = std::fs::File::create(path)?;
        write_model_container(&c, &mut f)
    }

    /// Load a translation model saved with [`Seq2SeqModel::save`].
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut f = std::fs::File::open(path)?;
        let c = read_model_container(&mut f)?;
        let genotype = c
            .genotype
            .ok_or_else(|| Error::format("model container has no genotype"))?;
        let plan = resolve_plan(&c.params, &genotype, &c.config)?;
        let pos_enc = sinusoidal_pos_enc(c.config.max_len, c.config.d_model);
        Ok((
            Seq2SeqModel {
                config: c.config,
                genotype,
                vocab_size: c.vocab_size,
                specials: SpecialIds::standard(),
                params: c.params,
                plan,
                pos_enc,
            },
            c.role,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;
    use crate::seq2seq::genotype::{all_zero_genotype, transformer_genotype};

    fn test_vocab(payload: usize) -> Vocabulary {
        Vocabulary::new((0..payload).map(|i| format!("t{i}"))).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            n_layers: 1,
            dropout: 0.0,
            max_len: 16,
            tied_embeddings: true,
            shared_vocab: true,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy();
        c.validate().unwrap();
        c.n_heads = 3; // 64 % 3 != 0
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn large_config_reference_values() {
        let c = ModelConfig::large();
        assert_eq!(c.n_layers, 6);
        assert_eq!(c.dropout, 0.2);
    }

    #[test]
    fn same_seed_same_parameters() {
        let vocab = test_vocab(5);
        let cfg = small_config();
        let a = build_model(transformer_genotype(1), cfg.clone(), &vocab, 7).unwrap();
        let b = build_model(transformer_genotype(1), cfg, &vocab, 7).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
    }

    #[test]
    fn different_seed_different_parameters() {
        let vocab = test_vocab(5);
        let cfg = small_config();
        let a = build_model(transformer_genotype(1), cfg.clone(), &vocab, 7).unwrap();
        let b = build_model(transformer_genotype(1), cfg, &vocab, 8).unwrap();
        assert_ne!(a.params.fingerprint(), b.params.fingerprint());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let vocab = test_vocab(5);
        let cfg = small_config();
        let v = vocab.size();
        let (d, f, n) = (cfg.d_model, cfg.d_ffn, cfg.n_layers);
        let m = build_model(transformer_genotype(n), cfg, &vocab, 1).unwrap();
        let attn = 4 * d * d + 4 * d;
        let ffn = d * f + f + f * d + d;
        let ln = 2 * d;
        // shared+tied: one embedding, output bias only
        let expect = v * d                        // embedding
            + n * (attn + ffn + ln)               // encoder layers
            + n * (attn + attn + ffn + ln)        // decoder layers (self + cross)
            + v;                                  // output bias
        assert_eq!(m.params.scalar_count(), expect);
    }

    #[test]
    fn genotype_layer_count_must_match_config() {
        let vocab = test_vocab(4);
        let cfg = small_config(); // n_layers = 1
        assert!(build_model(transformer_genotype(2), cfg, &vocab, 1).is_err());
    }

    #[test]
    fn logprobs_normalize_to_one() {
        let vocab = test_vocab(6);
        let m = build_model(transformer_genotype(1), small_config(), &vocab, 3).unwrap();
        let lp = m.logprobs(&[6, 7, 8], &[9]).unwrap();
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zeroed_output_projection_gives_uniform_distribution() {
        let vocab = test_vocab(6);
        let mut cfg = small_config();
        cfg.tied_embeddings = false;
        let mut m = build_model(transformer_genotype(1), cfg, &vocab, 3).unwrap();
        for name in ["out.w", "out.b"] {
            let pid = m.params.id_by_name(name).unwrap();
            for v in &mut m.params.get_mut(pid).data {
                *v = 0.0;
            }
        }
        let lp = m.logprobs(&[6, 7], &[]).unwrap();
        let expect = -(vocab.size() as f64).ln();
        for v in lp {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_genotype_ignores_source() {
        let vocab = test_vocab(6);
        let m = build_model(all_zero_genotype(1), small_config(), &vocab, 3).unwrap();
        let a = m.logprobs(&[6, 7, 8], &[9]).unwrap();
        let b = m.logprobs(&[8, 10, 6, 11], &[9]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trailing_padding_never_changes_logprobs() {
        let vocab = test_vocab(6);
        let m = build_model(transformer_genotype(1), small_config(), &vocab, 3).unwrap();
        let s = m.specials;
        let plain = m.logprobs(&[6, 7], &[8]).unwrap();
        let padded = m.logprobs(&[6, 7, s.eos, s.pad, s.pad], &[8]).unwrap();
        assert_eq!(plain, padded);
    }

    #[test]
    fn overlength_source_rejected() {
        let vocab = test_vocab(4);
        let m = build_model(transformer_genotype(1), small_config(), &vocab, 1).unwrap();
        let long = vec![6usize; m.config.max_len + 1];
        assert!(m.logprobs(&long, &[]).is_err());
    }

    #[test]
    fn decoder_is_causal() {
        let vocab = test_vocab(8);
        let m = build_model(transformer_genotype(2), {
            let mut c = small_config();
            c.n_layers = 2;
            c
        }, &vocab, 11).unwrap();
        let src = [6, 7];
        let a = m.forward_logits(&src, &[1, 8, 9, 10]).unwrap();
        let b = m.forward_logits(&src, &[1, 8, 12, 13]).unwrap();
        let v = m.vocab_size;
        // rows 0 and 1 see only positions <= themselves
        assert_eq!(a.data[..2 * v], b.data[..2 * v]);
        assert_ne!(a.data[2 * v..], b.data[2 * v..]);
    }

    #[test]
    fn training_loss_decreases_on_repeated_pair() {
        let vocab = test_vocab(8);
        let mut m = build_model(transformer_genotype(1), small_config(), &vocab, 5).unwrap();
        let pair = (TokenSeq::new(vec![6, 7, 8]), TokenSeq::new(vec![8, 7, 6]));
        let batch = vec![pair; 2];
        let mut opt = Adam::new(AdamConfig::with_lr(3e-3));
        let mut rng = CounterRng::new(0);
        let first = m.train_step(&batch, &mut opt, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = m.train_step(&batch, &mut opt, &mut rng).unwrap();
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn empty_batch_rejected() {
        let vocab = test_vocab(4);
        let mut m = build_model(transformer_genotype(1), small_config(), &vocab, 5).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let mut rng = CounterRng::new(0);
        assert!(m.train_step(&[], &mut opt, &mut rng).is_err());
    }

    #[test]
    fn score_sequence_sums_stepwise_logprobs() {
        let vocab = test_vocab(6);
        let m = build_model(transformer_genotype(1), small_config(), &vocab, 9).unwrap();
        let src = [6, 7, 8];
        let tgt = [9, 10];
        let total = m.score_sequence(&src, &tgt, false).unwrap();
        let mut expect = 0.0;
        let mut prefix: Vec<TokenId> = Vec::new();
        for &t in &tgt {
            expect += m.logprobs(&src, &prefix).unwrap()[t];
            prefix.push(t);
        }
        expect += m.logprobs(&src, &prefix).unwrap()[m.specials.eos];
        assert!((total - expect).abs() < 1e-9);
    }

    #[test]
    fn reversed_scoring_of_palindrome_matches_forward() {
        let vocab = test_vocab(6);
        let m = build_model(transformer_genotype(1), small_config(), &vocab, 9).unwrap();
        let src = [6, 7];
        let pal = [8, 9, 8];
        let a = m.score_sequence(&src, &pal, false).unwrap();
        let b = m.score_sequence(&src, &pal, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_target_scoring_rejected() {
        let vocab = test_vocab(4);
        let m = build_model(transformer_genotype(1), small_config(), &vocab, 9).unwrap();
        assert!(m.score_sequence(&[6], &[], false).is_err());
    }

    #[test]
    fn container_round_trip_preserves_everything() {
        let vocab = test_vocab(5);
        let m = build_model(transformer_genotype(1), small_config(), &vocab, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dmt");
        m.save(&path, "translation").unwrap();
        let (loaded, role) = Seq2SeqModel::load(&path).unwrap();
        assert_eq!(role, "translation");
        assert_eq!(loaded.params.fingerprint(), m.params.fingerprint());
        assert_eq!(loaded.genotype, m.genotype);
        assert_eq!(loaded.config, m.config);
        // loaded model computes identical outputs
        let a = m.logprobs(&[6, 7], &[8]).unwrap();
        let b = loaded.logprobs(&[6, 7], &[8]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_dropout_is_replayable() {
        let vocab = test_vocab(8);
        let mut cfg = small_config();
        cfg.dropout = 0.2;
        let batch = vec![(TokenSeq::new(vec![6, 7]), TokenSeq::new(vec![7, 6]))];
        let run = |seed| {
            let mut m = build_model(transformer_genotype(1), cfg.clone(), &test_vocab(8), 5).unwrap();
            let mut opt = Adam::new(AdamConfig::default());
            let mut rng = CounterRng::new(seed);
            let mut losses = Vec::new();
            for _ in 0..5 {
                losses.push(m.train_step(&batch, &mut opt, &mut rng).unwrap());
            }
            (losses, m.params.fingerprint())
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3).0, run(4).0);
        let _ = vocab;
    }
}
