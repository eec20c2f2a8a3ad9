//! Finite-difference checks for every differentiable piece of the model,
//! from single kernels up to the composite training loss.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cf_propagation::{propagate_tape, LayerCombine, NormalizedAdjacency};
use crate::corpus::{DataBundle, InteractionGraph, KnowledgeGraph, SplitDataset, Triplet};
use crate::diffkit::{builtin_kernels, check_gradient_trials, random_matrix, GradReport, Kernel, Tape, TapeKernel, Var};
use crate::fusion::{gate_regularization_tape, gate_tape, score_tape};
use crate::kg_encoder::{adapt_rows, rgat_encode_tape, KgIndex};
use crate::ssl::{align_loss_tape, info_nce_tape, intra_view_loss_tape, Denominator, ProjectionVars, ViewPair};
use crate::trainer::{Bound, GraphContext, LossCounters, Model, TrainConfig, TrainTriple};
use crate::translate::{sample_corrupted, transe_loss_tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub trials: usize,
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
    pub dim: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { trials: 20, seed: 2024, eps: 1e-6, tol: 1e-4, dim: 8 }
    }
}

const USERS: usize = 5;
const ITEMS: usize = 6;
const ATTRS: usize = 4;
const RELATIONS: usize = 2;
const D_LLM: usize = 6;

/// The fixed toy graphs every structural check runs on.
pub struct Toy {
    pub bundle: DataBundle,
    pub kg_aug: KnowledgeGraph,
    pub ui_aug: InteractionGraph,
}

impl Toy {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for u in 0..USERS {
            for i in 0..ITEMS {
                if (u + i) % 2 == 0 || rng.random_bool(0.2) {
                    edges.push((u, i));
                }
            }
        }
        let graph = InteractionGraph::from_edges(USERS, ITEMS, &edges);
        let mut triplets = Vec::new();
        for i in 0..ITEMS {
            triplets.push(Triplet { head: i, relation: i % RELATIONS, tail: ITEMS + i % ATTRS });
            triplets.push(Triplet { head: i, relation: (i + 1) % RELATIONS, tail: ITEMS + (i + 1) % ATTRS });
        }
        triplets.push(Triplet { head: ITEMS, relation: 0, tail: ITEMS + 1 });
        let entity_tokens = (0..ITEMS + ATTRS).map(|e| format!("e{e}")).collect();
        let relation_tokens = (0..RELATIONS).map(|r| format!("r{r}")).collect();
        let kg = KnowledgeGraph::new(entity_tokens, relation_tokens, ITEMS, triplets.clone());
        let kg_aug = kg.with_triplets(triplets.iter().copied().step_by(2).collect());
        let n = graph.edges.len();
        let split = SplitDataset::from_indices(&graph.edges, USERS, 0, (0..n).collect(), vec![], vec![]).expect("toy split");
        let ui_edges: Vec<(usize, usize)> = graph.edges.iter().copied().enumerate().filter(|(k, _)| k % 3 != 0).map(|(_, e)| e).collect();
        let ui_aug = InteractionGraph::from_edges(USERS, ITEMS, &ui_edges);
        let semantic = random_matrix(&mut rng, ITEMS + ATTRS, D_LLM, 1.0);
        Toy { bundle: DataBundle::new(graph, kg, split, Some(semantic)), kg_aug, ui_aug }
    }

    pub fn context(&self) -> GraphContext {
        GraphContext::new(&self.bundle.kg, &self.bundle.graph)
    }

    pub fn aug_context(&self) -> GraphContext {
        GraphContext {
            kg: KgIndex::new(&self.kg_aug),
            adj: NormalizedAdjacency::new(USERS, ITEMS, &self.ui_aug.edges),
        }
    }

    pub fn triples(&self) -> Vec<TrainTriple> {
        let g = &self.bundle.graph;
        let mut out = Vec::new();
        for u in 0..USERS {
            let pos = g.user_adj[u][0];
            if let Some(neg) = (0..ITEMS).find(|i| g.user_adj[u].binary_search(i).is_err()) {
                out.push(TrainTriple { user: u, pos, neg });
            }
        }
        out
    }
}

fn report(kernel: &dyn Kernel, cfg: &SuiteConfig, salt: u64, draw: impl FnMut(&mut ChaCha8Rng) -> Vec<Array2<f64>>) -> GradReport {
    check_gradient_trials(kernel, cfg.trials, cfg.seed ^ salt, cfg.eps, cfg.tol, draw)
}

/// Fixed mixing weights that reduce a pair of matrices to one scalar.
fn pair_reducer(tape: &mut Tape, a: Var, b: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    let ca = tape.leaf(random_matrix(&mut rng, sa.0, sa.1, 1.0));
    let cb = tape.leaf(random_matrix(&mut rng, sb.0, sb.1, 1.0));
    let x = tape.mul(a, ca);
    let y = tape.mul(b, cb);
    let x = tape.sum(x);
    let y = tape.sum(y);
    tape.add(x, y)
}

fn unit_interval(rng: &mut impl Rng, rows: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, 1), |_| rng.random_range(0.05..0.95))
}

/// Runs every check; one report per operation.
pub fn run_gradient_suite(cfg: &SuiteConfig) -> Vec<GradReport> {
    let d = cfg.dim;
    let toy = Toy::new(cfg.seed);
    let ctx = toy.context();
    let ne = ITEMS + ATTRS;
    let mut out = Vec::new();

    for k in builtin_kernels() {
        let n = k.arity();
        out.push(report(k.as_ref(), cfg, 1, |r| (0..n).map(|_| random_matrix(r, 4, 3, 2.0)).collect()));
    }

    let mid = (D_LLM + d) / 2;
    let adapter = TapeKernel::new("adapter", 5, |t: &mut Tape, x: &[Var]| adapt_rows(t, x[0], x[1], x[2], x[3], x[4]));
    out.push(report(&adapter, cfg, 2, |r| {
        vec![
            random_matrix(r, ne, D_LLM, 1.0),
            random_matrix(r, mid, D_LLM, 0.5),
            random_matrix(r, 1, mid, 0.1),
            random_matrix(r, d, mid, 0.5),
            random_matrix(r, 1, d, 0.1),
        ]
    }));

    let kg = ctx.kg.clone();
    let rgat = TapeKernel::new("rgat_stack", 3, move |t: &mut Tape, x: &[Var]| rgat_encode_tape(t, x[0], x[1], x[2], &kg, 3));
    out.push(report(&rgat, cfg, 3, |r| {
        vec![random_matrix(r, ne, d, 0.5), random_matrix(r, RELATIONS, d, 0.5), random_matrix(r, d, 2 * d, 0.5)]
    }));

    for (name, combine) in [("lightgcn_stack_mean", LayerCombine::Mean), ("lightgcn_stack_last", LayerCombine::Last)] {
        let adj = ctx.adj.clone();
        let k = TapeKernel::new(name, 2, move |t: &mut Tape, x: &[Var]| {
            let (u, i) = propagate_tape(t, x[0], x[1], &adj, 3, combine);
            pair_reducer(t, u, i, 5)
        });
        out.push(report(&k, cfg, 4, |r| vec![random_matrix(r, USERS, d, 1.0), random_matrix(r, ITEMS, d, 1.0)]));
    }

    let batch = {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ 6);
        sample_corrupted(&toy.bundle.kg, 12, &mut r).expect("toy graph has triplets")
    };
    let transe = TapeKernel::new("transe_loss", 2, move |t: &mut Tape, x: &[Var]| transe_loss_tape(t, x[0], x[1], &batch));
    out.push(report(&transe, cfg, 6, |r| vec![random_matrix(r, ne, d, 1.0), random_matrix(r, RELATIONS, d, 1.0)]));

    for (name, den, chunk) in [
        ("info_nce_exclusive", Denominator::Exclusive, 0),
        ("info_nce_inclusive", Denominator::Inclusive, 0),
        ("info_nce_chunked", Denominator::Exclusive, 3),
    ] {
        let k = TapeKernel::new(name, 2, move |t: &mut Tape, x: &[Var]| info_nce_tape(t, x[0], x[1], 0.2, den, chunk));
        out.push(report(&k, cfg, 7, |r| vec![random_matrix(r, 7, d, 1.0), random_matrix(r, 7, d, 1.0)]));
    }

    let intra = TapeKernel::new("intra_view_loss", 4, |t: &mut Tape, x: &[Var]| {
        let o = [ViewPair { users: x[0], items: x[1] }];
        let a = [ViewPair { users: x[2], items: x[3] }];
        intra_view_loss_tape(t, &o, &a, 0.2, Denominator::Exclusive, 0)
    });
    out.push(report(&intra, cfg, 8, |r| {
        vec![random_matrix(r, USERS, d, 1.0), random_matrix(r, ITEMS, d, 1.0), random_matrix(r, USERS, d, 1.0), random_matrix(r, ITEMS, d, 1.0)]
    }));

    let align = TapeKernel::new("align_loss", 6, |t: &mut Tape, x: &[Var]| {
        let p = ProjectionVars { id_w: x[2], id_b: x[3], llm_w: x[4], llm_b: x[5] };
        align_loss_tape(t, x[0], x[1], p, 0.2, Denominator::Exclusive, 0)
    });
    out.push(report(&align, cfg, 9, |r| {
        vec![
            random_matrix(r, USERS, d, 1.0),
            random_matrix(r, USERS, d, 1.0),
            random_matrix(r, d, d, 0.5),
            random_matrix(r, 1, d, 0.1),
            random_matrix(r, d, d, 0.5),
            random_matrix(r, 1, d, 0.1),
        ]
    }));

    let gate = TapeKernel::new("gate", 5, |t: &mut Tape, x: &[Var]| gate_tape(t, x[0], x[1], x[2], x[3], x[4]).gate);
    out.push(report(&gate, cfg, 10, |r| {
        vec![
            random_matrix(r, 6, d, 1.0),
            random_matrix(r, 6, d, 1.0),
            unit_interval(r, 6),
            random_matrix(r, 2 * d + 1, 1, 0.5),
            random_matrix(r, 1, 1, 0.5),
        ]
    }));

    let score = TapeKernel::new("score", 6, |t: &mut Tape, x: &[Var]| score_tape(t, x[0], x[1], x[2], x[3], x[4], x[5]).score);
    out.push(report(&score, cfg, 11, |r| {
        vec![
            random_matrix(r, 6, d, 1.0),
            random_matrix(r, 6, d, 1.0),
            unit_interval(r, 6),
            random_matrix(r, 6, d, 1.0),
            random_matrix(r, 6, d, 1.0),
            unit_interval(r, 6),
        ]
    }));

    let reg = TapeKernel::new("gate_regularizer", 3, |t: &mut Tape, x: &[Var]| gate_regularization_tape(t, x, 6));
    out.push(report(&reg, cfg, 12, |r| (0..3).map(|_| random_matrix(r, 6, 1, 3.0)).collect()));

    out.push(total_loss_report(&toy, cfg));
    out
}

/// Composite loss of the full dual-channel model, differentiated with
/// respect to every parameter tensor at once.
fn total_loss_report(toy: &Toy, cfg: &SuiteConfig) -> GradReport {
    let mut tc = TrainConfig::default();
    tc.dim = cfg.dim;
    tc.lambda_reg = 1e-2;
    tc.lambda_aug = 0.1;
    tc.lambda_align = 0.1;
    tc.lambda_gate = 0.1;
    tc.detach_alpha = false;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(&tc, &toy.bundle, &mut rng).expect("toy model");
    let orig = toy.context();
    let aug = toy.aug_context();
    let triples = toy.triples();
    let shapes: Vec<(usize, usize)> = model.params.values().iter().map(|v| v.dim()).collect();
    let store = model.params.clone();
    let m = model.clone();
    let kernel = TapeKernel::new("total_loss", shapes.len(), move |t: &mut Tape, x: &[Var]| {
        let b = Bound::from_vars(&store, x.to_vec());
        let mut counters = LossCounters::default();
        m.batch_loss(t, &b, &triples, &orig, Some(&aug), &mut counters).0
    });
    report(&kernel, cfg, 13, move |r| shapes.iter().map(|&(a, b)| random_matrix(r, a, b, 0.5)).collect())
}
