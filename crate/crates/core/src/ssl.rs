//! Graph augmentation and contrastive objectives.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::corpus::{InteractionGraph, KnowledgeGraph};
use crate::diffkit::{cosine_sim, Tape, Var, LEAKY_SLOPE};
use crate::kg_encoder::glorot;

/// Which terms enter the InfoNCE denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Denominator {
    /// `Σ_{m≠n}`: the positive pair is left out.
    Exclusive,
    /// `Σ_m`: the conventional form with the positive included.
    Inclusive,
}

impl Denominator {
    pub fn is_exclusive(self) -> bool {
        self == Denominator::Exclusive
    }
}

/// Per-item agreement scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityScores(pub Vec<f64>);

impl StabilityScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn drop_edges_kg(kg: &KnowledgeGraph, rho: f64, rng: &mut impl Rng) -> KnowledgeGraph {
    assert!((0.0..=1.0).contains(&rho), "dropout rate must lie in [0, 1]");
    let kept = kg.triplets.iter().copied().filter(|_| rng.random::<f64>() >= rho).collect();
    kg.with_triplets(kept)
}

fn raw_agreement(orig: &Array2<f64>, aug: &Array2<f64>) -> Vec<f64> {
    assert_eq!(orig.dim(), aug.dim(), "stability inputs must share a shape");
    orig.outer_iter()
        .zip(aug.outer_iter())
        .map(|(a, b)| {
            let (a, b) = (a.to_vec(), b.to_vec());
            (cosine_sim(&a, &b) + 1.0) / 2.0
        })
        .collect()
}

fn min_max(raw: Vec<f64>) -> StabilityScores {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || hi - lo <= 1e-12 {
        return StabilityScores(vec![1.0; raw.len()]);
    }
    StabilityScores(raw.into_iter().map(|s| ((s - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

/// `(cos + 1)/2` per row, min-max rescaled over items.
pub fn stability_scores(orig: &Array2<f64>, aug: &Array2<f64>) -> StabilityScores {
    min_max(raw_agreement(orig, aug))
}

/// Raw agreement averaged over several channel encodings, then rescaled once.
pub fn stability_scores_multi(pairs: &[(&Array2<f64>, &Array2<f64>)]) -> StabilityScores {
    assert!(!pairs.is_empty(), "need at least one encoding pair");
    let mut acc = raw_agreement(pairs[0].0, pairs[0].1);
    for (o, a) in &pairs[1..] {
        for (x, y) in acc.iter_mut().zip(raw_agreement(o, a)) {
            *x += y;
        }
    }
    let k = pairs.len() as f64;
    min_max(acc.into_iter().map(|x| x / k).collect())
}

/// Keeps each edge `(u, i)` independently with probability `μ·S_i`.
pub fn stab_adaptive_drop_edges(
    edges: &[(usize, usize)],
    scores: &StabilityScores,
    mu: f64,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    assert!(mu > 0.0 && mu <= 1.0, "mu must lie in (0, 1]");
    edges
        .iter()
        .copied()
        .filter(|&(_, i)| rng.random::<f64>() < mu * scores.0[i])
        .collect()
}

pub fn stab_adaptive_drop(graph: &InteractionGraph, scores: &StabilityScores, mu: f64, rng: &mut impl Rng) -> InteractionGraph {
    assert_eq!(scores.len(), graph.num_items, "one score per item");
    let kept = stab_adaptive_drop_edges(&graph.edges, scores, mu, rng);
    let mut out = InteractionGraph::from_edges(graph.num_users, graph.num_items, &kept);
    out.user_tokens = graph.user_tokens.clone();
    out.item_tokens = graph.item_tokens.clone();
    out
}

/// Reference evaluation, one row at a time.
pub fn info_nce(z1: &Array2<f64>, z2: &Array2<f64>, tau: f64, denominator: Denominator) -> f64 {
    let n = z1.nrows();
    assert_eq!(z1.dim(), z2.dim(), "views must share a shape");
    assert!(tau > 0.0, "temperature must be positive");
    assert!(n >= 2 || !denominator.is_exclusive(), "exclusive InfoNCE needs at least two rows");
    let rows1: Vec<Vec<f64>> = z1.outer_iter().map(|r| r.to_vec()).collect();
    let rows2: Vec<Vec<f64>> = z2.outer_iter().map(|r| r.to_vec()).collect();
    let mut total = 0.0;
    for a in 0..n {
        let logits: Vec<(usize, f64)> = (0..n)
            .filter(|&b| b != a || !denominator.is_exclusive())
            .map(|b| (b, cosine_sim(&rows1[a], &rows2[b]) / tau))
            .collect();
        let max = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x.1 - max).exp()).sum::<f64>().ln();
        total += lse - cosine_sim(&rows1[a], &rows2[a]) / tau;
    }
    total
}

/// InfoNCE on a tape. With `chunk > 0`, rows are split into consecutive
/// blocks of that size and negatives are drawn only from the same block,
/// so cost stays linear in the row count.
pub fn info_nce_tape(tape: &mut Tape, z1: Var, z2: Var, tau: f64, denominator: Denominator, chunk: usize) -> Var {
    let (n, _) = tape.shape(z1);
    assert_eq!(tape.shape(z1), tape.shape(z2), "views must share a shape");
    assert!(tau > 0.0, "temperature must be positive");
    let a = tape.normalize_rows(z1);
    let b = tape.normalize_rows(z2);
    let size = if chunk == 0 { n } else { chunk };
    let mut start = 0;
    let mut total: Option<Var> = None;
    while start < n {
        let mut len = size.min(n - start);
        // a trailing singleton block has no negatives; fold it into its predecessor
        if start + len < n && n - start - len < 2 && denominator.is_exclusive() {
            len = n - start;
        }
        let (ab, bb) = if start == 0 && len == n {
            (a, b)
        } else {
            (tape.slice_rows(a, start, len), tape.slice_rows(b, start, len))
        };
        let s = tape.matmul_t(ab, bb, false, true);
        let s = tape.scale(s, 1.0 / tau);
        let term = tape.contrastive(s, denominator.is_exclusive());
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
        start += len;
    }
    total.unwrap_or_else(|| tape.constant_scalar(0.0))
}

/// `LeakyReLU(x·W + b)` with `W` of shape `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub id: Projection,
    pub llm: Projection,
}

impl ProjectionParams {
    pub fn init(rng: &mut impl Rng, d: usize) -> Self {
        let id = Projection { w: glorot(rng, d, d), b: Array2::zeros((1, d)) };
        let llm = Projection { w: glorot(rng, d, d), b: Array2::zeros((1, d)) };
        ProjectionParams { id, llm }
    }

    pub fn identity(d: usize) -> Self {
        let p = Projection { w: Array2::eye(d), b: Array2::zeros((1, d)) };
        ProjectionParams { id: p.clone(), llm: p }
    }
}

pub fn project_tape(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let h = tape.matmul(x, w);
    let h = tape.add_row(h, b);
    tape.leaky_relu(h, LEAKY_SLOPE)
}

/// One user and one item view per channel.
#[derive(Debug, Clone, Copy)]
pub struct ViewPair {
    pub users: Var,
    pub items: Var,
}

/// Sum of user and item InfoNCE between augmented and original views, over
/// every channel given.
pub fn intra_view_loss_tape(
    tape: &mut Tape,
    orig: &[ViewPair],
    aug: &[ViewPair],
    tau: f64,
    denominator: Denominator,
    chunk: usize,
) -> Var {
    assert_eq!(orig.len(), aug.len(), "one augmented view per channel");
    let mut total: Option<Var> = None;
    for (o, a) in orig.iter().zip(aug) {
        for (x, y) in [(a.users, o.users), (a.items, o.items)] {
            let t = info_nce_tape(tape, x, y, tau, denominator, chunk);
            total = Some(match total {
                Some(s) => tape.add(s, t),
                None => t,
            });
        }
    }
    total.unwrap_or_else(|| tape.constant_scalar(0.0))
}

/// Parameters for the two projection heads as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub id_w: Var,
    pub id_b: Var,
    pub llm_w: Var,
    pub llm_b: Var,
}

pub fn align_loss_tape(
    tape: &mut Tape,
    users_id: Var,
    users_llm: Var,
    proj: ProjectionVars,
    tau: f64,
    denominator: Denominator,
    chunk: usize,
) -> Var {
    let a = project_tape(tape, users_id, proj.id_w, proj.id_b);
    let b = project_tape(tape, users_llm, proj.llm_w, proj.llm_b);
    info_nce_tape(tape, a, b, tau, denominator, chunk)
}

pub fn align_loss(users_id: &Array2<f64>, users_llm: &Array2<f64>, proj: &ProjectionParams, tau: f64, denominator: Denominator) -> f64 {
    let mut tape = Tape::new();
    let u = tape.leaf(users_id.clone());
    let v = tape.leaf(users_llm.clone());
    let pv = ProjectionVars {
        id_w: tape.leaf(proj.id.w.clone()),
        id_b: tape.leaf(proj.id.b.clone()),
        llm_w: tape.leaf(proj.llm.w.clone()),
        llm_b: tape.leaf(proj.llm.b.clone()),
    };
    let l = align_loss_tape(&mut tape, u, v, pv, tau, denominator, 0);
    tape.scalar(l)
}

/// Value-level intra-view loss; each entry is `(users, items)` for one channel.
pub fn intra_view_loss(
    orig: &[(Array2<f64>, Array2<f64>)],
    aug: &[(Array2<f64>, Array2<f64>)],
    tau: f64,
    denominator: Denominator,
) -> f64 {
    assert_eq!(orig.len(), aug.len(), "one augmented view per channel");
    orig.iter()
        .zip(aug)
        .map(|((ou, oi), (au, ai))| info_nce(au, ou, tau, denominator) + info_nce(ai, oi, tau, denominator))
        .sum()
}

/// Shared index list for row gathers.
pub fn index_list(ids: impl IntoIterator<Item = usize>) -> Rc<Vec<usize>> {
    Rc::new(ids.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Triplet;
    use crate::diffkit::random_matrix;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn big_kg(n: usize) -> KnowledgeGraph {
        let triplets = (0..n).map(|k| Triplet { head: k % 10, relation: 0, tail: 10 + k % 7 }).collect();
        KnowledgeGraph::new((0..17).map(|e| format!("e{e}")).collect(), vec!["r".into()], 10, triplets)
    }

    #[test]
    fn kg_dropout_extremes_and_rate() {
        let kg = big_kg(10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(drop_edges_kg(&kg, 0.0, &mut rng).triplets, kg.triplets);
        assert!(drop_edges_kg(&kg, 1.0, &mut rng).triplets.is_empty());
        let kept = drop_edges_kg(&kg, 0.5, &mut rng).triplets.len() as f64;
        assert!((kept - 5000.0).abs() <= 3.0 * 50.0);
    }

    #[test]
    fn stability_examples() {
        let x = array![[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]];
        assert_eq!(stability_scores(&x, &x).0, vec![1.0; 3]);
        let mut y = x.clone();
        y.row_mut(1).assign(&array![2.0, 0.0]);
        let s = stability_scores(&x, &y);
        for (got, want) in s.0.iter().zip([1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let s2 = stability_scores(&(&x * 3.5), &(&y * 3.5));
        for (a, b) in s.0.iter().zip(&s2.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_drop_examples() {
        let g = InteractionGraph::from_edges(3, 2, &[(0, 0), (1, 0), (2, 0), (0, 1), (1, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = stab_adaptive_drop(&g, &StabilityScores(vec![1.0, 0.0]), 1.0, &mut rng);
        assert_eq!(out.edges, vec![(0, 0), (1, 0), (2, 0)]);
        let p_drop = 1.0 - 0.5 * 0.8;
        assert!((p_drop - 0.6f64).abs() < 1e-15);
    }

    #[test]
    fn adaptive_drop_rate() {
        let edges: Vec<(usize, usize)> = (0..20_000).map(|k| (k, 0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kept = stab_adaptive_drop_edges(&edges, &StabilityScores(vec![0.8]), 0.5, &mut rng).len() as f64;
        let (n, p) = (20_000.0, 0.4);
        assert!((kept - n * p).abs() <= 3.0 * (n * p * (1.0 - p)).sqrt());
    }

    #[test]
    fn info_nce_examples() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        assert!((info_nce(&e, &e, 1.0, Denominator::Exclusive) + 2.0).abs() < 1e-12);
        let swapped = array![[0.0, 1.0], [1.0, 0.0]];
        assert!((info_nce(&e, &swapped, 1.0, Denominator::Exclusive) - 2.0).abs() < 1e-12);
        let scaled = info_nce(&(&e * 7.0), &(&swapped * 0.2), 1.0, Denominator::Exclusive);
        assert!((scaled - 2.0).abs() < 1e-12);
        let inclusive = info_nce(&e, &e, 1.0, Denominator::Inclusive);
        assert!((inclusive - 2.0 * (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 16, 8, 1.0);
            let b = random_matrix(&mut rng, 16, 8, 1.0);
            for den in [Denominator::Exclusive, Denominator::Inclusive] {
                let mut tape = Tape::new();
                let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
                let l = info_nce_tape(&mut tape, x, y, 0.3, den, 0);
                assert!((tape.scalar(l) - info_nce(&a, &b, 0.3, den)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn chunked_matches_blockwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 11, 4, 1.0);
        let b = random_matrix(&mut rng, 11, 4, 1.0);
        let mut tape = Tape::new();
        let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let l = info_nce_tape(&mut tape, x, y, 0.5, Denominator::Exclusive, 5);
        let blocks = [(0, 5), (5, 6)];
        let want: f64 = blocks
            .iter()
            .map(|&(s, n)| {
                let r = s..s + n;
                info_nce(&a.slice(ndarray::s![r.clone(), ..]).to_owned(), &b.slice(ndarray::s![r, ..]).to_owned(), 0.5, Denominator::Exclusive)
            })
            .sum();
        assert!((tape.scalar(l) - want).abs() < 1e-10);
    }

    #[test]
    fn intra_view_oracle() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let views = vec![(e.clone(), e.clone()), (e.clone(), e.clone())];
        assert!((intra_view_loss(&views, &views, 1.0, Denominator::Exclusive) + 8.0).abs() < 1e-12);
        assert!((intra_view_loss(&views[..1], &views[..1], 1.0, Denominator::Exclusive) + 4.0).abs() < 1e-12);
    }

    #[test]
    fn align_oracle_and_permutation() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        assert!((align_loss(&e, &e, &ProjectionParams::identity(2), 1.0, Denominator::Exclusive) + 2.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ProjectionParams::init(&mut rng, 3);
        let a = random_matrix(&mut rng, 5, 3, 1.0);
        let b = random_matrix(&mut rng, 5, 3, 1.0);
        let perm = [3, 0, 4, 1, 2];
        let ap = a.select(ndarray::Axis(0), &perm);
        let bp = b.select(ndarray::Axis(0), &perm);
        let l1 = align_loss(&a, &b, &p, 0.2, Denominator::Exclusive);
        let l2 = align_loss(&ap, &bp, &p, 0.2, Denominator::Exclusive);
        assert!((l1 - l2).abs() < 1e-10);
    }

    #[test]
    fn align_gradient_reaches_both_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ProjectionParams::init(&mut rng, 4);
        let mut tape = Tape::new();
        let u = tape.leaf(random_matrix(&mut rng, 6, 4, 1.0));
        let v = tape.leaf(random_matrix(&mut rng, 6, 4, 1.0));
        let pv = ProjectionVars {
            id_w: tape.leaf(p.id.w.clone()),
            id_b: tape.leaf(p.id.b.clone()),
            llm_w: tape.leaf(p.llm.w.clone()),
            llm_b: tape.leaf(p.llm.b.clone()),
        };
        let l = align_loss_tape(&mut tape, u, v, pv, 0.2, Denominator::Exclusive, 0);
        let g = tape.backward(l);
        for w in [pv.id_w, pv.llm_w] {
            assert!(g.get(w).unwrap().iter().any(|x| x.abs() > 1e-8));
        }
    }

    proptest! {
        #[test]
        fn stability_is_bounded(seed in 0u64..500, rows in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, rows, 3, 1.0);
            let b = random_matrix(&mut rng, rows, 3, 1.0);
            let s = stability_scores(&a, &b);
            prop_assert!(s.0.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
