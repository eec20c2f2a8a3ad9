//! Relation-aware graph attention over the knowledge graph, and the adapter
//! that maps raw semantic vectors into model space.
//!
//! Each layer updates every item with a residual attention-weighted sum of
//! its KG tails:
//!
//! ```text
//! x_i' = x_i + Σ_e a_{e,i} x_e
//! a_{e,i} = softmax_e( LeakyReLU( r_{e,i}ᵀ W [x_e ‖ x_i] ) )
//! ```
//!
//! All attention in a layer reads the layer's input embeddings. Non-item
//! entities only contribute as tails and are never updated.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::corpus::KnowledgeGraph;
use crate::diffkit::{leaky_relu, softmax_row, Tape, Var, LEAKY_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Id,
    Llm,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Id => "id",
            Channel::Llm => "llm",
        }
    }
}

/// Value snapshot of one channel's tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub channel: Channel,
    /// `[num_entities × d]`; for the LLM channel these are adapter outputs.
    pub entity_emb: Array2<f64>,
    pub user_emb: Array2<f64>,
    pub relation_emb: Array2<f64>,
}

/// Uniform `[-1/√d, 1/√d]` table.
pub fn uniform_table(rng: &mut impl Rng, rows: usize, d: usize) -> Array2<f64> {
    let bound = 1.0 / (d as f64).sqrt();
    Array2::from_shape_fn((rows, d), |_| rng.random_range(-bound..=bound))
}

/// Glorot-uniform `[rows × cols]` weight.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Two-layer adapter `W2 · LeakyReLU(W1 · raw + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `[d_mid × d_llm]`
    pub w1: Array2<f64>,
    /// `[1 × d_mid]`
    pub b1: Array2<f64>,
    /// `[d × d_mid]`
    pub w2: Array2<f64>,
    /// `[1 × d]`
    pub b2: Array2<f64>,
}

impl AdapterParams {
    pub fn default_mid(d_llm: usize, d: usize) -> usize {
        (d_llm + d) / 2
    }

    pub fn init(rng: &mut impl Rng, d_llm: usize, d_mid: usize, d: usize) -> Self {
        AdapterParams {
            w1: glorot(rng, d_mid, d_llm),
            b1: Array2::zeros((1, d_mid)),
            w2: glorot(rng, d, d_mid),
            b2: Array2::zeros((1, d)),
        }
    }
}

pub fn adapt_semantic(raw: &[f64], adapter: &AdapterParams) -> Vec<f64> {
    assert_eq!(raw.len(), adapter.w1.ncols(), "adapter input dimension mismatch");
    let raw = ndarray::ArrayView1::from(raw);
    let hidden = (adapter.w1.dot(&raw) + adapter.b1.row(0)).mapv(|x| leaky_relu(x, LEAKY_SLOPE));
    (adapter.w2.dot(&hidden) + adapter.b2.row(0)).to_vec()
}

/// Adapter applied to every row of `raw` (`[n × d_llm]`).
pub fn adapt_rows(tape: &mut Tape, raw: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let h = tape.matmul_t(raw, w1, false, true);
    let h = tape.add_row(h, b1);
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let out = tape.matmul_t(h, w2, false, true);
    tape.add_row(out, b2)
}

/// Attention weights of one item over its neighbors.
pub fn rgat_attention(item_emb: &[f64], neighbor_embs: &[Vec<f64>], rel_embs: &[Vec<f64>], w: &Array2<f64>) -> Vec<f64> {
    assert!(!neighbor_embs.is_empty(), "rgat_attention needs at least one neighbor");
    assert_eq!(neighbor_embs.len(), rel_embs.len());
    let logits: Vec<f64> = neighbor_embs
        .iter()
        .zip(rel_embs)
        .map(|(xe, r)| {
            let joint: Vec<f64> = xe.iter().chain(item_emb).copied().collect();
            let proj = w.dot(&ndarray::ArrayView1::from(&joint));
            let score: f64 = proj.iter().zip(r).map(|(a, b)| a * b).sum();
            leaky_relu(score, LEAKY_SLOPE)
        })
        .collect();
    softmax_row(&logits)
}

/// Item-headed KG edges grouped contiguously by item.
#[derive(Debug, Clone)]
pub struct KgIndex {
    pub num_entities: usize,
    pub num_items: usize,
    pub heads: Rc<Vec<usize>>,
    pub tails: Rc<Vec<usize>>,
    pub relations: Rc<Vec<usize>>,
    pub offsets: Rc<Vec<usize>>,
}

impl KgIndex {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let mut heads = Vec::new();
        let mut tails = Vec::new();
        let mut relations = Vec::new();
        let mut offsets = Vec::with_capacity(kg.num_items + 1);
        offsets.push(0);
        for (i, nbrs) in kg.item_neighbors.iter().enumerate() {
            for &(r, e) in nbrs {
                heads.push(i);
                tails.push(e);
                relations.push(r);
            }
            offsets.push(heads.len());
        }
        KgIndex {
            num_entities: kg.num_entities,
            num_items: kg.num_items,
            heads: Rc::new(heads),
            tails: Rc::new(tails),
            relations: Rc::new(relations),
            offsets: Rc::new(offsets),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.heads.len()
    }
}

/// One attention layer over `entities` (`[num_entities × d]`).
pub fn rgat_layer_tape(tape: &mut Tape, entities: Var, relations: Var, w: Var, index: &KgIndex) -> Var {
    if index.num_edges() == 0 {
        return entities;
    }
    let xe = tape.gather_rows(entities, index.tails.clone());
    let xi = tape.gather_rows(entities, index.heads.clone());
    let rel_w = tape.matmul(relations, w);
    let rg = tape.gather_rows(rel_w, index.relations.clone());
    let joint = tape.concat_cols(&[xe, xi]);
    let logits = tape.row_dot(rg, joint);
    let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
    let attn = tape.segment_softmax(logits, index.offsets.clone());
    let msg = tape.scale_rows(xe, attn);
    let agg = tape.scatter_add_rows(msg, index.heads.clone(), index.num_entities);
    tape.add(entities, agg)
}

/// `layers` stacked attention layers; returns the item rows of the last one.
pub fn rgat_encode_tape(tape: &mut Tape, entities: Var, relations: Var, w: Var, index: &KgIndex, layers: usize) -> Var {
    let mut x = entities;
    for _ in 0..layers {
        x = rgat_layer_tape(tape, x, relations, w, index);
    }
    tape.slice_rows(x, 0, index.num_items)
}

/// Value-level single layer; returns the full entity matrix after the layer.
pub fn rgat_layer(state: &ChannelState, kg: &KnowledgeGraph, w: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let e = tape.leaf(state.entity_emb.clone());
    let r = tape.leaf(state.relation_emb.clone());
    let wv = tape.leaf(w.clone());
    let out = rgat_layer_tape(&mut tape, e, r, wv, &KgIndex::new(kg));
    tape.value(out).clone()
}

/// Value-level encoder; returns `[num_items × d]`.
pub fn rgat_encode(state: &ChannelState, kg: &KnowledgeGraph, w: &Array2<f64>, layers: usize) -> Array2<f64> {
    let mut tape = Tape::new();
    let e = tape.leaf(state.entity_emb.clone());
    let r = tape.leaf(state.relation_emb.clone());
    let wv = tape.leaf(w.clone());
    let out = rgat_encode_tape(&mut tape, e, r, wv, &KgIndex::new(kg), layers);
    tape.value(out).clone()
}
