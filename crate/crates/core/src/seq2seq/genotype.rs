//! Per-layer architecture descriptions.
//!
//! A genotype fixes, for each encoder and decoder layer, the wiring and
//! operator of every branch. Encoder layers have two nodes, decoder layers
//! three; every node has two branches, and a branch reads either the layer
//! input or an earlier node of the same layer. Layers are independent, so
//! each layer can carry its own architecture.
//!
//! The operator inventory here is a small working set (the usual suspects:
//! identity, attention, convolution, feed-forward, zero); it is a stand-in
//! rather than an exhaustive catalogue.

use crate::error::{Error, Result};
use crate::numerics::CounterRng;

pub const ENC_NODES: usize = 2;
pub const DEC_NODES: usize = 3;
pub const BRANCHES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Identity,
    SelfAttention,
    CrossAttention,
    Conv3,
    Ffn,
    Zero,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::Identity,
        OpKind::SelfAttention,
        OpKind::CrossAttention,
        OpKind::Conv3,
        OpKind::Ffn,
        OpKind::Zero,
    ];

    /// Operators legal in encoder layers (everything but cross-attention).
    pub const ENCODER: [OpKind; 5] = [
        OpKind::Identity,
        OpKind::SelfAttention,
        OpKind::Conv3,
        OpKind::Ffn,
        OpKind::Zero,
    ];

    pub fn code(self) -> &'static str {
        match self {
            OpKind::Identity => "id",
            OpKind::SelfAttention => "sa",
            OpKind::CrossAttention => "ca",
            OpKind::Conv3 => "c3",
            OpKind::Ffn => "ff",
            OpKind::Zero => "zero",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "id" => OpKind::Identity,
            "sa" => OpKind::SelfAttention,
            "ca" => OpKind::CrossAttention,
            "c3" => OpKind::Conv3,
            "ff" => OpKind::Ffn,
            "zero" => OpKind::Zero,
            other => return Err(Error::genotype(format!("unknown op code {other:?}"))),
        })
    }

    pub fn decoder_only(self) -> bool {
        self == OpKind::CrossAttention
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchInput {
    LayerInput,
    Node(usize),
}

impl BranchInput {
    fn code(self) -> String {
        match self {
            BranchInput::LayerInput => "in".to_string(),
            BranchInput::Node(i) => format!("n{i}"),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        if s == "in" {
            return Ok(BranchInput::LayerInput);
        }
        if let Some(num) = s.strip_prefix('n') {
            if let Ok(i) = num.parse::<usize>() {
                return Ok(BranchInput::Node(i));
            }
        }
        Err(Error::genotype(format!("unknown branch input {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Branch {
    pub input: BranchInput,
    pub op: OpKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeGene {
    pub branches: [Branch; BRANCHES],
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerGene {
    pub nodes: Vec<NodeGene>,
}

impl LayerGene {
    /// Node indices whose output no other node consumes. Their sum is the
    /// layer output.
    pub fn loose_ends(&self) -> Vec<usize> {
        let mut consumed = vec![false; self.nodes.len()];
        for node in &self.nodes {
            for b in &node.branches {
                if let BranchInput::Node(i) = b.input {
                    if i < consumed.len() {
                        consumed[i] = true;
                    }
                }
            }
        }
        (0..self.nodes.len()).filter(|&i| !consumed[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub encoder_layers: Vec<LayerGene>,
    pub decoder_layers: Vec<LayerGene>,
}

impl Genotype {
    /// Structural validity: node counts, acyclic branch inputs, and no
    /// decoder-only operator inside an encoder layer.
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers.is_empty() || self.decoder_layers.is_empty() {
            return Err(Error::genotype("need at least one encoder and one decoder layer"));
        }
        if self.encoder_layers.len() != self.decoder_layers.len() {
            return Err(Error::genotype(format!(
                "encoder has {} layers, decoder {}",
                self.encoder_layers.len(),
                self.decoder_layers.len()
            )));
        }
        for (side, layers, want_nodes) in [
            ("encoder", &self.encoder_layers, ENC_NODES),
            ("decoder", &self.decoder_layers, DEC_NODES),
        ] {
            for (li, layer) in layers.iter().enumerate() {
                if layer.nodes.len() != want_nodes {
                    return Err(Error::genotype(format!(
                        "{side} layer {li} has {} nodes, expected {want_nodes}",
                        layer.nodes.len()
                    )));
                }
                for (ni, node) in layer.nodes.iter().enumerate() {
                    for (bi, branch) in node.branches.iter().enumerate() {
                        if let BranchInput::Node(src) = branch.input {
                            if src >= ni {
                                return Err(Error::genotype(format!(
                                    "{side} layer {li} node {ni} branch {bi} reads node {src}, \
                                     which is not strictly earlier"
                                )));
                            }
                        }
                        if side == "encoder" && branch.op.decoder_only() {
                            return Err(Error::genotype(format!(
                                "{side} layer {li} node {ni} branch {bi} uses decoder-only op {}",
                                branch.op.code()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.encoder_layers.len()
    }

    /// Canonical one-line text encoding, stable across runs.
    pub fn to_canonical(&self) -> String {
        let side = |layers: &[LayerGene]| -> String {
            layers
                .iter()
                .map(|l| {
                    let nodes = l
                        .nodes
                        .iter()
                        .map(|n| {
                            n.branches
                                .iter()
                                .map(|b| format!("{}@{}", b.op.code(), b.input.code()))
                                .collect::<Vec<_>>()
                                .join("+")
                        })
                        .collect::<Vec<_>>()
                        .join(";");
                    format!("[{nodes}]")
                })
                .collect::<Vec<_>>()
                .join("|")
        };
        format!("enc={} dec={}", side(&self.encoder_layers), side(&self.decoder_layers))
    }

    pub fn from_canonical(s: &str) -> Result<Self> {
        let s = s.trim();
        let rest = s
            .strip_prefix("enc=")
            .ok_or_else(|| Error::genotype("canonical genotype must start with 'enc='"))?;
        let (enc_part, dec_part) = rest
            .split_once(" dec=")
            .ok_or_else(|| Error::genotype("missing ' dec=' separator"))?;
        let parse_side = |part: &str| -> Result<Vec<LayerGene>> {
            part.split('|')
                .map(|layer_s| {
                    let inner = layer_s
                        .strip_prefix('[')
                        .and_then(|x| x.strip_suffix(']'))
                        .ok_or_else(|| Error::genotype(format!("bad layer text {layer_s:?}")))?;
                    let nodes = inner
                        .split(';')
                        .map(|node_s| {
                            let branches: Vec<Branch> = node_s
                                .split('+')
                                .map(|b| {
                                    let (op, input) = b.split_once('@').ok_or_else(|| {
                                        Error::genotype(format!("bad branch text {b:?}"))
                                    })?;
                                    Ok(Branch {
                                        input: BranchInput::parse(input)?,
                                        op: OpKind::parse(op)?,
                                    })
                                })
                                .collect::<Result<_>>()?;
                            if branches.len() != BRANCHES {
                                return Err(Error::genotype(format!(
                                    "node has {} branches, expected {BRANCHES}",
                                    branches.len()
                                )));
                            }
                            Ok(NodeGene { branches: [branches[0], branches[1]] })
                        })
                        .collect::<Result<_>>()?;
                    Ok(LayerGene { nodes })
                })
                .collect()
        };
        let g = Genotype {
            encoder_layers: parse_side(enc_part)?,
            decoder_layers: parse_side(dec_part)?,
        };
        g.validate()?;
        Ok(g)
    }
}

fn chain_node(prev: usize, op: OpKind) -> NodeGene {
    let input = if prev == 0 { BranchInput::LayerInput } else { BranchInput::Node(prev - 1) };
    NodeGene { branches: [Branch { input, op }, Branch { input, op: OpKind::Zero }] }
}

/// The baseline transformer as one point of the search space: every encoder
/// layer is self-attention then feed-forward, every decoder layer is
/// self-attention, cross-attention, feed-forward, all chained. Each node's
/// second branch is zero; the residual path supplies the identity.
pub fn transformer_genotype(n: usize) -> Genotype {
    assert!(n >= 1, "need at least one layer");
    let enc_layer = LayerGene {
        nodes: vec![chain_node(0, OpKind::SelfAttention), chain_node(1, OpKind::Ffn)],
    };
    let dec_layer = LayerGene {
        nodes: vec![
            chain_node(0, OpKind::SelfAttention),
            chain_node(1, OpKind::CrossAttention),
            chain_node(2, OpKind::Ffn),
        ],
    };
    Genotype {
        encoder_layers: vec![enc_layer; n],
        decoder_layers: vec![dec_layer; n],
    }
}

/// Uniformly random valid genotype (seed pools for architecture search).
pub fn random_genotype(n: usize, rng: &mut CounterRng) -> Genotype {
    let random_layer = |rng: &mut CounterRng, nodes: usize, ops: &[OpKind]| -> LayerGene {
        let mut out = Vec::with_capacity(nodes);
        for ni in 0..nodes {
            let branch = |rng: &mut CounterRng| -> Branch {
                let choice = rng.below(ni + 1);
                let input =
                    if choice == 0 { BranchInput::LayerInput } else { BranchInput::Node(choice - 1) };
                Branch { input, op: ops[rng.below(ops.len())] }
            };
            out.push(NodeGene { branches: [branch(rng), branch(rng)] });
        }
        LayerGene { nodes: out }
    };
    Genotype {
        encoder_layers: (0..n)
            .map(|_| random_layer(rng, ENC_NODES, &OpKind::ENCODER))
            .collect(),
        decoder_layers: (0..n).map(|_| random_layer(rng, DEC_NODES, &OpKind::ALL)).collect(),
    }
}

/// Degenerate genotype where every branch is the zero op.
pub fn all_zero_genotype(n: usize) -> Genotype {
    let zero_branch =
        Branch { input: BranchInput::LayerInput, op: OpKind::Zero };
    let layer = |nodes: usize| LayerGene {
        nodes: (0..nodes)
            .map(|ni| {
                let input =
                    if ni == 0 { BranchInput::LayerInput } else { BranchInput::Node(ni - 1) };
                NodeGene {
                    branches: [Branch { input, op: OpKind::Zero }, zero_branch],
                }
            })
            .collect(),
    };
    Genotype {
        encoder_layers: vec![layer(ENC_NODES); n],
        decoder_layers: vec![layer(DEC_NODES); n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transformer_structure() {
        let g = transformer_genotype(1);
        assert_eq!(g.encoder_layers.len(), 1);
        assert_eq!(g.decoder_layers.len(), 1);
        assert_eq!(g.encoder_layers[0].nodes.len(), ENC_NODES);
        assert_eq!(g.decoder_layers[0].nodes.len(), DEC_NODES);
        g.validate().unwrap();
    }

    #[test]
    fn transformer_layers_are_identical_at_n6() {
        let g = transformer_genotype(6);
        assert!(g.encoder_layers.iter().all(|l| *l == g.encoder_layers[0]));
        assert!(g.decoder_layers.iter().all(|l| *l == g.decoder_layers[0]));
        g.validate().unwrap();
    }

    #[test]
    fn cross_attention_rejected_in_encoder() {
        let mut g = transformer_genotype(1);
        g.encoder_layers[0].nodes[0].branches[0].op = OpKind::CrossAttention;
        assert!(g.validate().is_err());
    }

    #[test]
    fn forward_reference_rejected() {
        let mut g = transformer_genotype(1);
        g.decoder_layers[0].nodes[0].branches[0].input = BranchInput::Node(2);
        assert!(g.validate().is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let g = transformer_genotype(2);
        let text = g.to_canonical();
        let back = Genotype::from_canonical(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn random_genotypes_are_valid_and_round_trip() {
        let mut rng = CounterRng::new(5);
        for _ in 0..200 {
            let g = random_genotype(2, &mut rng);
            g.validate().unwrap();
            assert_eq!(Genotype::from_canonical(&g.to_canonical()).unwrap(), g);
        }
    }

    #[test]
    fn loose_ends_of_chain_is_last_node() {
        let g = transformer_genotype(1);
        assert_eq!(g.encoder_layers[0].loose_ends(), vec![1]);
        assert_eq!(g.decoder_layers[0].loose_ends(), vec![2]);
    }
}
