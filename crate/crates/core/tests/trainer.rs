use dcgl_core::corpus::{gen_synthetic, DataBundle, InteractionGraph, SplitDataset, SynthConfig};
use dcgl_core::evalkit::evaluate;
use dcgl_core::trainer::*;
use dcgl_core::Error;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_bundle(seed: u64) -> DataBundle {
    let syn = gen_synthetic(&SynthConfig {
        num_users: 24,
        num_items: 30,
        num_entities: 8,
        num_relations: 2,
        latent_dim: 4,
        semantic_dim: 8,
        min_user_interactions: 5,
        max_user_interactions: 12,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    DataBundle::from_synthetic(&syn)
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.dim = 8;
    c.kg_layers = 2;
    c.cf_layers = 2;
    c.batch_size = 64;
    c.transe_batch_size = 32;
    c.max_epochs = 3;
    c.early_stop_k = 10;
    c
}

fn one_user_bundle(observed: &[usize], num_items: usize) -> (SplitDataset, InteractionGraph) {
    let edges: Vec<(usize, usize)> = observed.iter().map(|&i| (0, i)).collect();
    let graph = InteractionGraph::from_edges(1, num_items, &edges);
    let split = SplitDataset::from_indices(&graph.edges, 1, 0, (0..edges.len()).collect(), vec![], vec![]).unwrap();
    (split, graph)
}

#[test]
fn negative_is_the_only_unobserved_item() {
    let (split, graph) = one_user_bundle(&[0, 1, 2, 4, 5], 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = sample_bpr_triples(&split, &graph, 200, &mut rng).unwrap();
    assert_eq!(t.len(), 200);
    assert!(t.iter().all(|x| x.neg == 3 && x.user == 0));
}

#[test]
fn user_with_every_item_is_skipped() {
    let (split, graph) = one_user_bundle(&[0, 1, 2], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(sample_bpr_triples(&split, &graph, 10, &mut rng).unwrap().is_empty());
    let empty = SplitDataset::from_indices(&graph.edges, 1, 0, vec![], vec![], (0..3).collect()).unwrap();
    assert!(matches!(sample_bpr_triples(&empty, &graph, 10, &mut rng), Err(Error::Sampling(_))));
}

#[test]
fn sampling_is_seeded() {
    let b = small_bundle(1);
    let draw = |s| sample_bpr_triples(&b.split, &b.graph, 100, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
    for t in draw(7) {
        assert!(b.split.train_by_user[t.user].binary_search(&t.pos).is_ok());
        assert!(b.graph.user_adj[t.user].binary_search(&t.neg).is_err());
    }
}

#[test]
fn negatives_are_uniform_over_unobserved_items() {
    let observed = [1, 4, 7, 8];
    let n_items = 20;
    let (split, graph) = one_user_bundle(&observed, n_items);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    let t = sample_bpr_triples(&split, &graph, draws, &mut rng).unwrap();
    let mut counts = vec![0usize; n_items];
    for x in &t {
        counts[x.neg] += 1;
    }
    let free = n_items - observed.len();
    let p = 1.0 / free as f64;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        if observed.contains(&i) {
            assert_eq!(c, 0);
        } else {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sd, "item {i}: {c}");
        }
    }
}

#[test]
fn bpr_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((bpr_loss(&[(0.3, 0.3, 1.0)]) - ln2).abs() < 1e-15);
    assert!((bpr_loss(&[(1.0, 1.0, 0.5)]) - 0.5 * ln2).abs() < 1e-15);
    assert!((bpr_loss(&[(0.0, 0.0, 1.0), (2.0, 2.0, 1.0)]) - 2.0 * ln2).abs() < 1e-15);
    let mut last = f64::INFINITY;
    for k in 0..40 {
        let l = bpr_loss(&[(k as f64, 0.0, 1.0)]);
        assert!(l < last && l > 0.0);
        last = l;
    }
    assert!(last < 1e-15);
}

fn batch_parts(config: &TrainConfig, bundle: &DataBundle) -> (LossParts, Vec<Option<Array2<f64>>>, TrainState) {
    let data = TrainData::new(bundle);
    let mut st = TrainState::new(config, bundle).unwrap();
    let aug = st.augmented_context(bundle, &data);
    let triples = st.draw_batch(bundle).unwrap();
    let (parts, grads) = st.batch_gradients(&triples, &data.context, aug.as_ref().map(|a| &a.0));
    (parts, grads, st)
}

#[test]
fn total_loss_is_the_weighted_sum() {
    let b = small_bundle(2);
    for ablation in Ablation::ALL {
        let mut c = small_config();
        c.ablation = ablation;
        c.lambda_reg = 0.01;
        let (parts, _, _) = batch_parts(&c, &b);
        let hand = total_loss(&parts, &c);
        assert!((hand - parts.total).abs() <= 1e-12 * parts.total.abs().max(1.0), "{ablation:?}: {hand} vs {}", parts.total);
    }
    let mut c = small_config();
    c.lambda_aug = 0.0;
    c.lambda_align = 0.0;
    c.lambda_gate = 0.0;
    c.lambda_reg = 0.0;
    let (parts, _, _) = batch_parts(&c, &b);
    assert_eq!(parts.total, parts.bpr);
}

#[test]
fn zero_parameters_have_zero_penalty() {
    let b = small_bundle(2);
    let mut c = small_config();
    c.lambda_reg = 1.0;
    let mut st = TrainState::new(&c, &b).unwrap();
    for k in 0..st.model.params.len() {
        st.model.params.value_mut(k).fill(0.0);
    }
    let data = TrainData::new(&b);
    let triples = st.draw_batch(&b).unwrap();
    let (parts, _) = st.batch_gradients(&triples, &data.context, None);
    assert_eq!(parts.reg, 0.0);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let b = small_bundle(3);
    let mut c = small_config();
    c.learning_rate = 0.0;
    let before = TrainState::new(&c, &b).unwrap().model.params;
    let r = fit(&c, &b).unwrap();
    assert_eq!(r.history.epochs.len(), 3);
    assert_eq!(r.best.model.params, before);
}

#[test]
fn one_small_step_does_not_increase_the_loss() {
    let b = small_bundle(4);
    let data = TrainData::new(&b);
    for trial in 0..50u64 {
        let mut c = small_config();
        c.seed = trial;
        c.optimizer = OptimizerKind::Sgd;
        c.learning_rate = 1e-5;
        c.batch_size = 16;
        let mut st = TrainState::new(&c, &b).unwrap();
        let aug = st.augmented_context(&b, &data);
        let triples = st.draw_batch(&b).unwrap();
        let ctx = aug.as_ref().map(|a| &a.0);
        let (before, grads) = st.batch_gradients(&triples, &data.context, ctx);
        st.optimizer.step(&mut st.model.params, &grads);
        let (after, _) = st.batch_gradients(&triples, &data.context, ctx);
        assert!(after.total <= before.total, "trial {trial}: {} -> {}", before.total, after.total);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_the_next_batch() {
    let b = small_bundle(5);
    let c = small_config();
    let data = TrainData::new(&b);
    let mut st = TrainState::new(&c, &b).unwrap();
    st.train_epoch(&b, &data).unwrap();
    st.train_epoch(&b, &data).unwrap();
    let mut buf = Vec::new();
    st.save(&mut buf).unwrap();
    let mut back = TrainState::load(&c, &b, &buf[..]).unwrap();
    assert_eq!(back.model.params, st.model.params);
    assert_eq!(back.optimizer, st.optimizer);
    assert_eq!(back.transe_optimizer, st.transe_optimizer);
    assert_eq!(back.streams, st.streams);
    assert_eq!(back.epoch, 2);

    let mut again = Vec::new();
    back.save(&mut again).unwrap();
    assert_eq!(again, buf);

    let l1 = st.train_epoch(&b, &data).unwrap();
    let l2 = back.train_epoch(&b, &data).unwrap();
    assert_eq!(l1.parts.total.to_bits(), l2.parts.total.to_bits());
    assert_eq!(l1.transe.to_bits(), l2.transe.to_bits());
    assert_eq!(back.model.params, st.model.params);

    let mut other = c.clone();
    other.tau = 0.3;
    assert!(matches!(TrainState::load(&other, &b, &buf[..]), Err(Error::Checkpoint(_))));
    assert!(TrainState::load(&c, &b, &buf[..buf.len() - 3]).is_err());
}

#[test]
fn frozen_gates_get_no_gradient() {
    let b = small_bundle(6);
    let mut c = small_config();
    c.ablation = Ablation::NoFreq;
    let (parts, grads, st) = batch_parts(&c, &b);
    assert!((parts.gate - 6.0 * std::f64::consts::LN_2).abs() < 1e-12);
    for (k, name) in st.model.params.names().iter().enumerate() {
        if name.starts_with("gate.") {
            let zero = grads[k].as_ref().is_none_or(|g| g.iter().all(|&x| x == 0.0));
            assert!(zero, "{name} received a gradient");
        }
    }
    let r = fit(&c, &b).unwrap();
    let w = r.best.model.params.get("gate.item.w").unwrap();
    assert!(w.iter().all(|&x| x == 0.0));
    let snap = r.best.snapshot(&TrainData::new(&b));
    assert!(snap.user_gate.iter().chain(&snap.item_gate).all(|&g| g == 0.5));
}

#[test]
fn disabled_terms_are_never_evaluated() {
    let b = small_bundle(7);
    let mut c = small_config();
    c.ablation = Ablation::NoAug;
    let r = fit(&c, &b).unwrap();
    assert_eq!(r.counters.aug, 0);
    assert!(r.counters.align > 0);
    c.ablation = Ablation::NoAlign;
    let r = fit(&c, &b).unwrap();
    assert_eq!(r.counters.align, 0);
    assert!(r.counters.aug > 0);
    c.ablation = Ablation::None;
    let r = fit(&c, &b).unwrap();
    assert!(r.counters.aug > 0 && r.counters.align > 0 && r.counters.gate > 0);
}

#[test]
fn concatenation_keeps_output_shapes() {
    let b = small_bundle(8);
    let mut c = small_config();
    c.ablation = Ablation::Cat;
    let st = TrainState::new(&c, &b).unwrap();
    assert_eq!(st.model.params.get("cat.w").unwrap().dim(), (2 * c.dim, c.dim));
    let snap = st.snapshot(&TrainData::new(&b));
    assert_eq!(snap.users.len(), 1);
    assert_eq!(snap.users[0].dim(), (b.graph.num_users, c.dim));
    assert_eq!(snap.items[0].dim(), (b.graph.num_items, c.dim));
}

#[test]
fn id_only_ignores_semantic_contents() {
    let b = small_bundle(9);
    let mut c = small_config();
    c.ablation = Ablation::NoLlm;
    let mut other = b.clone();
    other.semantic = other.semantic.map(|s| s.mapv(|x| -3.0 * x + 1.0));
    let r1 = fit(&c, &b).unwrap();
    let r2 = fit(&c, &other).unwrap();
    assert_eq!(r1.history, r2.history);
    let mut none = b.clone();
    none.semantic = None;
    assert_eq!(fit(&c, &none).unwrap().history, r1.history);
    c.ablation = Ablation::None;
    assert!(matches!(fit(&c, &none), Err(Error::Data(_))));
}

#[test]
fn identical_runs_have_identical_histories() {
    let b = small_bundle(10);
    let c = small_config();
    let h = |r: FitResult| {
        let mut buf = Vec::new();
        r.history.write_jsonl(&mut buf).unwrap();
        buf
    };
    let a = h(fit(&c, &b).unwrap());
    assert_eq!(a, h(fit(&c, &b).unwrap()));
    let mut c2 = c.clone();
    c2.seed += 1;
    assert_ne!(a, h(fit(&c2, &b).unwrap()));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut b = small_bundle(11);
    if let Some(s) = b.semantic.as_mut() {
        s[[0, 0]] = f64::NAN;
    }
    match fit(&small_config(), &b) {
        Err(Error::NonFinite { epoch, .. }) => assert_eq!(epoch, 1),
        other => panic!("expected a numeric abort, got {other:?}"),
    }
}

#[test]
fn early_stopping_respects_patience() {
    let b = small_bundle(12);
    let mut c = small_config();
    c.learning_rate = 0.0;
    c.max_epochs = 50;
    c.patience = 4;
    let r = fit(&c, &b).unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.best_epoch, 1);
    assert_eq!(r.history.epochs.len(), 5);
}

#[test]
fn toy_set_is_memorized() {
    let syn = gen_synthetic(&SynthConfig {
        num_users: 20,
        num_items: 30,
        num_entities: 6,
        num_relations: 2,
        latent_dim: 4,
        semantic_dim: 8,
        min_user_interactions: 8,
        max_user_interactions: 12,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap();
    let b = DataBundle::from_synthetic(&syn);
    assert!(b.split.train_by_user.iter().all(|t| t.len() <= 10));
    let mut c = TrainConfig::default();
    c.dim = 16;
    c.batch_size = 0;
    c.transe_batch_size = 0;
    c.learning_rate = 0.02;
    let data = TrainData::new(&b);
    let mut st = TrainState::new(&c, &b).unwrap();
    let mut best = 0.0f64;
    for _ in 0..300 {
        st.train_epoch(&b, &data).unwrap();
        let r = evaluate(&st.snapshot(&data), &b.split.train_by_user, &[], &[10]);
        best = best.max(r.recall[0]);
        if best >= 0.95 {
            break;
        }
    }
    assert!(best >= 0.95, "train Recall@10 {best}");
}
