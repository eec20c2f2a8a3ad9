//! LightGCN-style propagation over the training interaction graph.

use std::rc::Rc;

use ndarray::Array2;

use crate::diffkit::{Csr, Tape, Var};

/// Symmetric-normalized bipartite adjacency, `1/√(|N_u|·|N_i|)` per edge,
/// stored in both directions.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub user_item: Rc<Csr>,
    pub item_user: Rc<Csr>,
}

impl NormalizedAdjacency {
    /// Duplicate edges are expected to be removed by the caller.
    pub fn new(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Self {
        let mut du = vec![0usize; num_users];
        let mut di = vec![0usize; num_items];
        for &(u, i) in edges {
            du[u] += 1;
            di[i] += 1;
        }
        let entries = edges
            .iter()
            .map(|&(u, i)| (u, i, 1.0 / ((du[u] * di[i]) as f64).sqrt()))
            .collect();
        let user_item = Csr::from_triplets(num_users, num_items, entries);
        let item_user = user_item.transpose();
        NormalizedAdjacency {
            user_item: Rc::new(user_item),
            item_user: Rc::new(item_user),
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_item.rows
    }

    pub fn num_items(&self) -> usize {
        self.user_item.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerCombine {
    /// Arithmetic mean of layers `0..=L'`.
    Mean,
    /// Output of layer `L'` only.
    Last,
}

pub fn lightgcn_layer_tape(tape: &mut Tape, users: Var, items: Var, adj: &NormalizedAdjacency) -> (Var, Var) {
    let u = tape.spmm(&adj.user_item, adj.item_user.clone(), items);
    let i = tape.spmm(&adj.item_user, adj.user_item.clone(), users);
    (u, i)
}

pub fn propagate_tape(
    tape: &mut Tape,
    users: Var,
    items: Var,
    adj: &NormalizedAdjacency,
    layers: usize,
    combine: LayerCombine,
) -> (Var, Var) {
    let (mut u, mut i) = (users, items);
    let (mut su, mut si) = (users, items);
    for _ in 0..layers {
        (u, i) = lightgcn_layer_tape(tape, u, i, adj);
        if combine == LayerCombine::Mean {
            su = tape.add(su, u);
            si = tape.add(si, i);
        }
    }
    match combine {
        LayerCombine::Last => (u, i),
        LayerCombine::Mean if layers == 0 => (users, items),
        LayerCombine::Mean => {
            let k = 1.0 / (layers + 1) as f64;
            (tape.scale(su, k), tape.scale(si, k))
        }
    }
}

pub fn lightgcn_layer(user_emb: &Array2<f64>, item_emb: &Array2<f64>, adj: &NormalizedAdjacency) -> (Array2<f64>, Array2<f64>) {
    (adj.user_item.matmul(item_emb.view()), adj.item_user.matmul(user_emb.view()))
}

pub fn propagate(
    user_emb: &Array2<f64>,
    item_emb: &Array2<f64>,
    adj: &NormalizedAdjacency,
    layers: usize,
    combine: LayerCombine,
) -> (Array2<f64>, Array2<f64>) {
    let mut tape = Tape::new();
    let u = tape.leaf(user_emb.clone());
    let i = tape.leaf(item_emb.clone());
    let (u, i) = propagate_tape(&mut tape, u, i, adj, layers, combine);
    (tape.value(u).clone(), tape.value(i).clone())
}
