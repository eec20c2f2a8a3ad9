//! Frequency-aware gating between the ID and LLM channels.

use ndarray::Array2;

use crate::diffkit::{sigmoid, Tape, Var};

/// Separate user and item gates; weights are `[(2d+1) × 1]`, biases `1 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub item_w: Array2<f64>,
    pub item_b: Array2<f64>,
    pub user_w: Array2<f64>,
    pub user_b: Array2<f64>,
}

impl GateParams {
    /// Zero weights, so every gate starts at 0.5.
    pub fn zeros(d: usize) -> Self {
        GateParams {
            item_w: Array2::zeros((2 * d + 1, 1)),
            item_b: Array2::zeros((1, 1)),
            user_w: Array2::zeros((2 * d + 1, 1)),
            user_b: Array2::zeros((1, 1)),
        }
    }
}

/// `σ(W·[x_id ‖ x_llm ‖ φ] + b)`; `w` has length `2d+1`.
pub fn gate_weight(x_id: &[f64], x_llm: &[f64], phi: f64, w: &[f64], b: f64) -> f64 {
    assert_eq!(x_id.len(), x_llm.len());
    assert_eq!(w.len(), 2 * x_id.len() + 1, "gate weight must have 2d+1 entries");
    let d = x_id.len();
    let z = x_id.iter().zip(&w[..d]).map(|(x, w)| x * w).sum::<f64>()
        + x_llm.iter().zip(&w[d..2 * d]).map(|(x, w)| x * w).sum::<f64>()
        + phi * w[2 * d]
        + b;
    sigmoid(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    /// `[g·x_id ‖ (1−g)·x_llm]`
    pub vector: Vec<f64>,
    pub gate: f64,
}

impl FusedRepresentation {
    pub fn id_part(&self) -> &[f64] {
        &self.vector[..self.vector.len() / 2]
    }

    pub fn llm_part(&self) -> &[f64] {
        &self.vector[self.vector.len() / 2..]
    }
}

pub fn fuse(x_id: &[f64], x_llm: &[f64], g: f64) -> FusedRepresentation {
    assert_eq!(x_id.len(), x_llm.len());
    let vector = x_id.iter().map(|x| g * x).chain(x_llm.iter().map(|x| (1.0 - g) * x)).collect();
    FusedRepresentation { vector, gate: g }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParts {
    pub score: f64,
    /// `g_u g_i + (1−g_u)(1−g_i)`
    pub alpha: f64,
    /// ID-channel share `g_u g_i / α`.
    pub weight: f64,
    pub s_id: f64,
    pub s_llm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized convex combination of the per-channel inner products.
pub fn predict_score(user: (&[f64], &[f64], f64), item: (&[f64], &[f64], f64)) -> ScoreParts {
    let (u_id, u_llm, gu) = user;
    let (i_id, i_llm, gi) = item;
    let s_id = dot(u_id, i_id);
    let s_llm = dot(u_llm, i_llm);
    let alpha = gu * gi + (1.0 - gu) * (1.0 - gi);
    let weight = gu * gi / alpha;
    ScoreParts { score: weight * s_id + (1.0 - weight) * s_llm, alpha, weight, s_id, s_llm }
}

/// Score through the fused vectors: `(x_u · x_i)/α`.
pub fn fused_score(user: &FusedRepresentation, item: &FusedRepresentation) -> f64 {
    let alpha = user.gate * item.gate + (1.0 - user.gate) * (1.0 - item.gate);
    dot(&user.vector, &item.vector) / alpha
}

/// Mean over `(g_u, g_i, g_i')` triples of `Σ −ln g − ln(1−g)`.
pub fn gate_regularization(gates: &[(f64, f64, f64)]) -> f64 {
    assert!(!gates.is_empty(), "gate_regularization needs at least one triple");
    let term = |g: f64| -g.ln() - (1.0 - g).ln();
    gates.iter().map(|&(a, b, c)| term(a) + term(b) + term(c)).sum::<f64>() / gates.len() as f64
}

/// Gate logits and probabilities for a block of rows.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub logit: Var,
    pub gate: Var,
}

/// `phi` is an `n × 1` constant; returns `n × 1` logits and gates.
pub fn gate_tape(tape: &mut Tape, x_id: Var, x_llm: Var, phi: Var, w: Var, b: Var) -> GateVars {
    let feats = tape.concat_cols(&[x_id, x_llm, phi]);
    let z = tape.matmul(feats, w);
    let logit = tape.add_row(z, b);
    let gate = tape.sigmoid(logit);
    GateVars { logit, gate }
}

/// `n × 1` scores and normalizers for aligned user/item rows.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub score: Var,
    pub alpha: Var,
}

pub fn score_tape(tape: &mut Tape, u_id: Var, u_llm: Var, gu: Var, i_id: Var, i_llm: Var, gi: Var) -> ScoreVars {
    let s_id = tape.row_dot(u_id, i_id);
    let s_llm = tape.row_dot(u_llm, i_llm);
    let both = tape.mul(gu, gi);
    let ou = tape.one_minus(gu);
    let oi = tape.one_minus(gi);
    let neither = tape.mul(ou, oi);
    let a = tape.mul(both, s_id);
    let c = tape.mul(neither, s_llm);
    let num = tape.add(a, c);
    let alpha = tape.add(both, neither);
    let score = tape.div(num, alpha);
    ScoreVars { score, alpha }
}

/// `Σ −ln σ(z) − ln σ(−z)` over the given logits, divided by `triples`.
pub fn gate_regularization_tape(tape: &mut Tape, logits: &[Var], triples: usize) -> Var {
    assert!(triples > 0, "gate regularization needs at least one triple");
    let mut total: Option<Var> = None;
    for &z in logits {
        let a = tape.log_sigmoid(z);
        let nz = tape.scale(z, -1.0);
        let b = tape.log_sigmoid(nz);
        let ab = tape.add(a, b);
        let s = tape.sum(ab);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant_scalar(0.0));
    tape.scale(total, -1.0 / triples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::random_matrix;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_examples() {
        let x = [0.3, -0.2];
        assert_eq!(gate_weight(&x, &x, 0.4, &[0.0; 5], 0.0), 0.5);
        assert!((gate_weight(&x, &x, 0.4, &[0.0; 5], 3f64.ln()) - 0.75).abs() < 1e-15);
        let w = [0.1, 0.2, -0.3, 0.4, 1.5];
        let mut prev = 0.0;
        for k in 0..=10 {
            let g = gate_weight(&x, &x, k as f64 / 10.0, &w, 0.0);
            assert!(g > prev);
            prev = g;
        }
    }

    #[test]
    fn fuse_examples() {
        let (a, b) = ([1.0, 2.0], [3.0, -4.0]);
        assert_eq!(fuse(&a, &b, 0.5).vector, vec![0.5, 1.0, 1.5, -2.0]);
        let hi = fuse(&a, &b, 1.0 - 1e-12);
        assert!(hi.llm_part().iter().all(|x| x.abs() < 1e-11));
        let lo = fuse(&a, &b, 1e-12);
        assert!(lo.id_part().iter().all(|x| x.abs() < 1e-11));
    }

    #[test]
    fn score_examples() {
        let (ui, ul, ii, il) = ([1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [1.0, 1.0]);
        let half = predict_score((&ui, &ul, 0.5), (&ii, &il, 0.5));
        assert_eq!((half.s_id, half.s_llm), (3.0, 2.0));
        assert!((half.score - 2.5).abs() < 1e-15);
        assert!((half.alpha - 0.5).abs() < 1e-15);
        let hi = predict_score((&ui, &ul, 1.0 - 1e-9), (&ii, &il, 1.0 - 1e-9));
        assert!((hi.score - 3.0).abs() < 1e-6);
        let lo = predict_score((&ui, &ul, 1e-9), (&ii, &il, 1e-9));
        assert!((lo.score - 2.0).abs() < 1e-6);
    }

    #[test]
    fn regularizer_examples() {
        assert!((gate_regularization(&[(0.5, 0.5, 0.5)]) - 6.0 * 2f64.ln()).abs() < 1e-12);
        assert!((gate_regularization(&[(0.5, 0.5, 0.5)]) - 4.1589).abs() < 1e-4);
        let want = 3.0 * (-(0.9f64.ln()) - 0.1f64.ln());
        assert!((gate_regularization(&[(0.9, 0.9, 0.9)]) - want).abs() < 1e-12);
        assert!((want - 7.2237).abs() < 2e-4);
        assert!(gate_regularization(&[(1e-8, 0.5, 0.5)]) > 20.0);
        assert!(gate_regularization(&[(0.5, 1.0 - 1e-8, 0.5)]) > 20.0);
        for g in [0.1, 0.3, 0.49, 0.51, 0.8] {
            assert!(gate_regularization(&[(g, 0.5, 0.5)]) > gate_regularization(&[(0.5, 0.5, 0.5)]));
        }
    }

    #[test]
    fn tape_matches_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let n = 4;
        let xu_id = random_matrix(&mut rng, n, d, 1.0);
        let xu_llm = random_matrix(&mut rng, n, d, 1.0);
        let xi_id = random_matrix(&mut rng, n, d, 1.0);
        let xi_llm = random_matrix(&mut rng, n, d, 1.0);
        let phi = random_matrix(&mut rng, n, 1, 1.0).mapv(f64::abs);
        let w = random_matrix(&mut rng, 2 * d + 1, 1, 1.0);
        let b = array![[0.2]];
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&xu_id, &xu_llm, &xi_id, &xi_llm, &phi, &w, &b].iter().map(|m| tape.leaf((*m).clone())).collect();
        let gu = gate_tape(&mut tape, vars[0], vars[1], vars[4], vars[5], vars[6]);
        let gi = gate_tape(&mut tape, vars[2], vars[3], vars[4], vars[5], vars[6]);
        let sc = score_tape(&mut tape, vars[0], vars[1], gu.gate, vars[2], vars[3], gi.gate);
        let reg = gate_regularization_tape(&mut tape, &[gu.logit, gi.logit], n);
        let wv = w.column(0).to_vec();
        let mut gates = Vec::new();
        for r in 0..n {
            let row = |m: &Array2<f64>| m.row(r).to_vec();
            let g_u = gate_weight(&row(&xu_id), &row(&xu_llm), phi[[r, 0]], &wv, 0.2);
            let g_i = gate_weight(&row(&xi_id), &row(&xi_llm), phi[[r, 0]], &wv, 0.2);
            assert!((tape.value(gu.gate)[[r, 0]] - g_u).abs() < 1e-14);
            let p = predict_score((&row(&xu_id), &row(&xu_llm), g_u), (&row(&xi_id), &row(&xi_llm), g_i));
            assert!((tape.value(sc.score)[[r, 0]] - p.score).abs() < 1e-12);
            assert!((tape.value(sc.alpha)[[r, 0]] - p.alpha).abs() < 1e-14);
            gates.push((g_u, g_i));
        }
        let term = |g: f64| -g.ln() - (1.0 - g).ln();
        let want: f64 = gates.iter().map(|&(a, b)| term(a) + term(b)).sum::<f64>() / n as f64;
        assert!((tape.scalar(reg) - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn score_is_a_convex_combination(
            seed in 0u64..10_000,
            gu in 1e-6f64..(1.0 - 1e-6),
            gi in 1e-6f64..(1.0 - 1e-6),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<Vec<f64>> = (0..4).map(|_| random_matrix(&mut rng, 1, 5, 2.0).row(0).to_vec()).collect();
            let p = predict_score((&v[0], &v[1], gu), (&v[2], &v[3], gi));
            let lo = p.s_id.min(p.s_llm);
            let hi = p.s_id.max(p.s_llm);
            prop_assert!(p.score >= lo - 1e-12 && p.score <= hi + 1e-12);
            let fu = fuse(&v[0], &v[1], gu);
            let fi = fuse(&v[2], &v[3], gi);
            prop_assert!((fused_score(&fu, &fi) - p.score).abs() <= 1e-9 * (1.0 + p.score.abs()));
        }
    }
}
