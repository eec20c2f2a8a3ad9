//! Translation-based KG regularization: `‖h + r − t‖₁` with a pairwise
//! logistic loss against tail-corrupted triplets.

use std::rc::Rc;

use rand::Rng;

use crate::corpus::KnowledgeGraph;
use crate::diffkit::{log_sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::kg_encoder::ChannelState;

/// `(head, relation, tail, corrupted_tail)` quadruples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedBatch {
    pub quads: Vec<(usize, usize, usize, usize)>,
}

impl CorruptedBatch {
    pub fn len(&self) -> usize {
        self.quads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quads.is_empty()
    }
}

pub fn transe_distance(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    assert!(h.len() == r.len() && r.len() == t.len(), "transe_distance dimension mismatch");
    h.iter().zip(r).zip(t).map(|((h, r), t)| (h + r - t).abs()).sum()
}

/// `−ln σ(f(neg) − f(pos))`
pub fn transe_pair_loss(pos_distance: f64, neg_distance: f64) -> f64 {
    -log_sigmoid(neg_distance - pos_distance)
}

/// Uniform triplets, each with a uniformly resampled tail `t' ≠ t`.
pub fn sample_corrupted(kg: &KnowledgeGraph, batch_size: usize, rng: &mut impl Rng) -> Result<CorruptedBatch> {
    if kg.triplets.is_empty() {
        return Err(Error::Sampling("knowledge graph has no triplets".into()));
    }
    if kg.num_entities < 2 {
        return Err(Error::Sampling("corruption needs at least two entities".into()));
    }
    let quads = (0..batch_size)
        .map(|_| {
            let t = kg.triplets[rng.random_range(0..kg.triplets.len())];
            let corrupted = loop {
                let c = rng.random_range(0..kg.num_entities);
                if c != t.tail {
                    break c;
                }
            };
            (t.head, t.relation, t.tail, corrupted)
        })
        .collect();
    Ok(CorruptedBatch { quads })
}

pub fn transe_loss(batch: &CorruptedBatch, state: &ChannelState) -> f64 {
    assert!(!batch.is_empty(), "transe_loss needs a non-empty batch");
    let row = |m: &ndarray::Array2<f64>, k: usize| m.row(k).to_vec();
    batch
        .quads
        .iter()
        .map(|&(h, r, t, c)| {
            let (hv, rv) = (row(&state.entity_emb, h), row(&state.relation_emb, r));
            let pos = transe_distance(&hv, &rv, &row(&state.entity_emb, t));
            let neg = transe_distance(&hv, &rv, &row(&state.entity_emb, c));
            transe_pair_loss(pos, neg)
        })
        .sum()
}

/// Batch loss recorded on a tape; gradients reach `entities` and `relations`.
pub fn transe_loss_tape(tape: &mut Tape, entities: Var, relations: Var, batch: &CorruptedBatch) -> Var {
    let heads = Rc::new(batch.quads.iter().map(|q| q.0).collect::<Vec<_>>());
    let rels = Rc::new(batch.quads.iter().map(|q| q.1).collect::<Vec<_>>());
    let tails = Rc::new(batch.quads.iter().map(|q| q.2).collect::<Vec<_>>());
    let corrupt = Rc::new(batch.quads.iter().map(|q| q.3).collect::<Vec<_>>());
    let h = tape.gather_rows(entities, heads);
    let r = tape.gather_rows(relations, rels);
    let t = tape.gather_rows(entities, tails);
    let c = tape.gather_rows(entities, corrupt);
    let hr = tape.add(h, r);
    let dp = tape.sub(hr, t);
    let dp = tape.abs(dp);
    let pos = tape.row_sum(dp);
    let dn = tape.sub(hr, c);
    let dn = tape.abs(dn);
    let neg = tape.row_sum(dn);
    let margin = tape.sub(neg, pos);
    let ls = tape.log_sigmoid(margin);
    let total = tape.sum(ls);
    tape.scale(total, -1.0)
}
