//! Flat token encoding of genotypes.
//!
//! Every branch becomes two tokens (input reference, operator); branches
//! are laid out encoder-first, layer by layer, node by node, so a genotype
//! with N layers always encodes to exactly 20N tokens. The grammar of each
//! slot (which tokens are legal at which position) drives constrained
//! decoding: a generator that only ever emits legal tokens can only produce
//! valid genotypes.

use crate::error::{Error, Result};
use crate::seq2seq::genotype::{
    Branch, BranchInput, Genotype, LayerGene, NodeGene, OpKind, BRANCHES, DEC_NODES, ENC_NODES,
};

pub type ArchTok = usize;

pub const TOK_IN: ArchTok = 0;
pub const TOK_N0: ArchTok = 1;
pub const TOK_N1: ArchTok = 2;
pub const TOK_ID: ArchTok = 3;
pub const TOK_SA: ArchTok = 4;
pub const TOK_CA: ArchTok = 5;
pub const TOK_C3: ArchTok = 6;
pub const TOK_FF: ArchTok = 7;
pub const TOK_ZERO: ArchTok = 8;
pub const N_ARCH_TOKENS: usize = 9;

pub fn op_to_token(op: OpKind) -> ArchTok {
    match op {
        OpKind::Identity => TOK_ID,
        OpKind::SelfAttention => TOK_SA,
        OpKind::CrossAttention => TOK_CA,
        OpKind::Conv3 => TOK_C3,
        OpKind::Ffn => TOK_FF,
        OpKind::Zero => TOK_ZERO,
    }
}

pub fn token_to_op(tok: ArchTok) -> Result<OpKind> {
    Ok(match tok {
        TOK_ID => OpKind::Identity,
        TOK_SA => OpKind::SelfAttention,
        TOK_CA => OpKind::CrossAttention,
        TOK_C3 => OpKind::Conv3,
        TOK_FF => OpKind::Ffn,
        TOK_ZERO => OpKind::Zero,
        other => return Err(Error::genotype(format!("token {other} is not an operator"))),
    })
}

fn input_to_token(input: BranchInput) -> ArchTok {
    match input {
        BranchInput::LayerInput => TOK_IN,
        BranchInput::Node(i) => TOK_N0 + i,
    }
}

fn token_to_input(tok: ArchTok) -> Result<BranchInput> {
    match tok {
        TOK_IN => Ok(BranchInput::LayerInput),
        t if t >= TOK_N0 && t <= TOK_N1 => Ok(BranchInput::Node(t - TOK_N0)),
        other => Err(Error::genotype(format!("token {other} is not an input reference"))),
    }
}

/// What kind of token a position expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Input-reference slot of a branch at node `node_idx`.
    Input { node_idx: usize },
    /// Operator slot; encoder slots exclude decoder-only operators.
    Op { encoder: bool },
}

/// Fixed slot layout for a genotype with `n_layers` layers per side.
pub fn slot_layout(n_layers: usize) -> Vec<Slot> {
    let mut slots = Vec::with_capacity(seq_len(n_layers));
    for (encoder, nodes) in [(true, ENC_NODES), (false, DEC_NODES)] {
        for _layer in 0..n_layers {
            for node_idx in 0..nodes {
                for _branch in 0..BRANCHES {
                    slots.push(Slot::Input { node_idx });
                    slots.push(Slot::Op { encoder });
                }
            }
        }
    }
    slots
}

pub fn seq_len(n_layers: usize) -> usize {
    n_layers * (ENC_NODES + DEC_NODES) * BRANCHES * 2
}

/// Tokens legal at a slot.
pub fn valid_tokens(slot: Slot) -> Vec<ArchTok> {
    match slot {
        Slot::Input { node_idx } => (0..=node_idx).map(|i| TOK_IN + i).collect(),
        Slot::Op { encoder: true } => vec![TOK_ID, TOK_SA, TOK_C3, TOK_FF, TOK_ZERO],
        Slot::Op { encoder: false } => vec![TOK_ID, TOK_SA, TOK_CA, TOK_C3, TOK_FF, TOK_ZERO],
    }
}

/// Genotype to token sequence. Always `seq_len(n)` tokens.
pub fn encode_genotype(g: &Genotype) -> Vec<ArchTok> {
    let mut out = Vec::with_capacity(seq_len(g.n_layers()));
    for layers in [&g.encoder_layers, &g.decoder_layers] {
        for layer in layers {
            for node in &layer.nodes {
                for branch in &node.branches {
                    out.push(input_to_token(branch.input));
                    out.push(op_to_token(branch.op));
                }
            }
        }
    }
    out
}

/// Token sequence back to a genotype, validating every slot.
pub fn decode_genotype(tokens: &[ArchTok], n_layers: usize) -> Result<Genotype> {
    if tokens.len() != seq_len(n_layers) {
        return Err(Error::genotype(format!(
            "expected {} architecture tokens, got {}",
            seq_len(n_layers),
            tokens.len()
        )));
    }
    let slots = slot_layout(n_layers);
    for (i, (&tok, &slot)) in tokens.iter().zip(&slots).enumerate() {
        if !valid_tokens(slot).contains(&tok) {
            return Err(Error::genotype(format!("token {tok} illegal at position {i}")));
        }
    }
    let mut cursor = 0usize;
    let mut read_side = |nodes: usize| -> Result<Vec<LayerGene>> {
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let mut layer_nodes = Vec::with_capacity(nodes);
            for _ in 0..nodes {
                let mut branches = Vec::with_capacity(BRANCHES);
                for _ in 0..BRANCHES {
                    let input = token_to_input(tokens[cursor])?;
                    let op = token_to_op(tokens[cursor + 1])?;
                    cursor += 2;
                    branches.push(Branch { input, op });
                }
                layer_nodes.push(NodeGene { branches: [branches[0], branches[1]] });
            }
            layers.push(LayerGene { nodes: layer_nodes });
        }
        Ok(layers)
    };
    let g = Genotype {
        encoder_layers: read_side(ENC_NODES)?,
        decoder_layers: read_side(DEC_NODES)?,
    };
    g.validate()?;
    Ok(g)
}
