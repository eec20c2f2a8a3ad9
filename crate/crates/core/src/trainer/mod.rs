//! Composite-loss optimization with alternating translation steps, early
//! stopping and bit-exact checkpoints.

mod checkpoint;
mod config;
mod model;
mod optim;

use std::io::{Read, Write};

use log::{info, warn};
use rand::Rng;
use serde::Serialize;

pub use checkpoint::{CheckpointData, Streams, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, OptimizerKind, TrainConfig, CONFIG_KEYS};
pub use model::{Bound, ChannelKind, Encoded, GraphContext, Layout, LossCounters, LossParts, Model, Snapshot, TrainTriple};
pub use optim::{Optimizer, ParamStore};

use crate::corpus::{DataBundle, InteractionGraph, SplitDataset};
use crate::diffkit::{log_sigmoid, Tape};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_test, evaluate_valid, export_gates, group_report, GateSummary, GateTable, GroupReport, GroupSpec, MetricsReport, Side};
use crate::ssl::{drop_edges_kg, stab_adaptive_drop};
use crate::translate::sample_corrupted;

fn draw_negative(observed: &[usize], num_items: usize, rng: &mut impl Rng) -> Option<usize> {
    if observed.len() >= num_items {
        return None;
    }
    loop {
        let j = rng.random_range(0..num_items);
        if observed.binary_search(&j).is_err() {
            return Some(j);
        }
    }
}

/// Uniform training edges, each with one negative resampled until it is
/// not among the user's observed items. Users who interacted with every
/// item are skipped.
pub fn sample_bpr_triples(split: &SplitDataset, graph: &InteractionGraph, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<TrainTriple>> {
    if split.train.is_empty() {
        return Err(Error::Sampling("training split is empty".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (u, i) = split.train[rng.random_range(0..split.train.len())];
        match draw_negative(&graph.user_adj[u], graph.num_items, rng) {
            Some(j) => out.push(TrainTriple { user: u, pos: i, neg: j }),
            None => warn!("user {u} interacted with every item; skipped"),
        }
    }
    Ok(out)
}

/// `Σ −α ln σ(ŷ_pos − ŷ_neg)` over `(ŷ_pos, ŷ_neg, α)` entries.
pub fn bpr_loss(entries: &[(f64, f64, f64)]) -> f64 {
    entries.iter().map(|&(p, n, a)| -a * log_sigmoid(p - n)).sum()
}

/// Weighted sum of already-computed components.
pub fn total_loss(parts: &LossParts, cfg: &TrainConfig) -> f64 {
    parts.bpr
        + cfg.effective_lambda_aug() * parts.aug
        + cfg.effective_lambda_align() * parts.align
        + cfg.lambda_gate * parts.gate
        + cfg.lambda_reg * parts.reg
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    pub total: f64,
    pub bpr: f64,
    pub aug: f64,
    pub align: f64,
    pub gate: f64,
    pub reg: f64,
    pub transe: f64,
    pub kg_kept: usize,
    pub ui_kept: usize,
    pub valid_recall: f64,
    pub valid_ndcg: f64,
    pub user_gate_mean: f64,
    pub user_gate_std: f64,
    pub item_gate_mean: f64,
    pub item_gate_std: f64,
    pub improved: bool,
}

/// Per-epoch records, written as JSON lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.epochs {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    pub transe_optimizer: Optimizer,
    pub streams: Streams,
    pub epoch: usize,
    pub counters: LossCounters,
}

/// Fixed structures derived from a bundle.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train_graph: InteractionGraph,
    pub context: GraphContext,
}

impl TrainData {
    pub fn new(bundle: &DataBundle) -> Self {
        let train_graph = InteractionGraph::from_edges(bundle.graph.num_users, bundle.graph.num_items, &bundle.split.train);
        let context = GraphContext::new(&bundle.kg, &train_graph);
        TrainData { train_graph, context }
    }
}

/// Summary of one epoch's optimization, before validation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLosses {
    pub batches: usize,
    pub parts: LossParts,
    pub transe: f64,
    pub kg_kept: usize,
    pub ui_kept: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig, bundle: &DataBundle) -> Result<Self> {
        let mut streams = Streams::new(config.seed);
        let model = Model::new(config, bundle, &mut streams.init)?;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model.params);
        let transe_optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model.params);
        Ok(TrainState { model, optimizer, transe_optimizer, streams, epoch: 0, counters: LossCounters::default() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    /// Triples for one batch; batch size 0 means every training edge once.
    pub fn draw_batch(&mut self, bundle: &DataBundle) -> Result<Vec<TrainTriple>> {
        let cfg = &self.model.config;
        let mut triples = if cfg.batch_size == 0 {
            let rng = &mut self.streams.batch;
            let mut out = Vec::with_capacity(bundle.split.train.len());
            for &(u, i) in &bundle.split.train {
                match draw_negative(&bundle.graph.user_adj[u], bundle.graph.num_items, rng) {
                    Some(j) => out.push(TrainTriple { user: u, pos: i, neg: j }),
                    None => warn!("user {u} interacted with every item; skipped"),
                }
            }
            out
        } else {
            sample_bpr_triples(&bundle.split, &bundle.graph, cfg.batch_size, &mut self.streams.batch)?
        };
        for _ in 1..cfg.negatives {
            let extra: Vec<TrainTriple> = triples
                .iter()
                .take(triples.len())
                .filter_map(|t| {
                    draw_negative(&bundle.graph.user_adj[t.user], bundle.graph.num_items, &mut self.streams.batch)
                        .map(|neg| TrainTriple { neg, ..*t })
                })
                .collect();
            triples.extend(extra);
        }
        Ok(triples)
    }

    /// Loss and gradients of one batch without touching parameters.
    pub fn batch_gradients(
        &mut self,
        triples: &[TrainTriple],
        orig: &GraphContext,
        aug: Option<&GraphContext>,
    ) -> (LossParts, Vec<Option<ndarray::Array2<f64>>>) {
        let mut tape = Tape::new();
        let b = self.model.bind(&mut tape);
        let (loss, parts) = self.model.batch_loss(&mut tape, &b, triples, orig, aug, &mut self.counters);
        let grads = tape.backward(loss);
        (parts, b.collect(&grads))
    }

    /// One optimizer step on a batch; returns its loss components.
    pub fn step(&mut self, triples: &[TrainTriple], orig: &GraphContext, aug: Option<&GraphContext>, step_no: usize) -> Result<LossParts> {
        let (parts, grads) = self.batch_gradients(triples, orig, aug);
        if !parts.total.is_finite() {
            return Err(Error::NonFinite {
                epoch: self.epoch,
                step: step_no,
                bpr: parts.bpr,
                aug: parts.aug,
                align: parts.align,
                gate: parts.gate,
                reg: parts.reg,
            });
        }
        self.optimizer.step(&mut self.model.params, &grads);
        Ok(parts)
    }

    /// One pass of translation steps per channel; returns the summed loss.
    pub fn transe_pass(&mut self, bundle: &DataBundle) -> Result<f64> {
        let kg = &bundle.kg;
        if kg.triplets.is_empty() || kg.num_entities < 2 {
            return Ok(0.0);
        }
        let tb = match self.model.config.transe_batch_size {
            0 => kg.triplets.len(),
            n => n,
        };
        let steps = kg.triplets.len().div_ceil(tb);
        let mut total = 0.0;
        for &kind in self.model.layout.channels() {
            for _ in 0..steps {
                let batch = sample_corrupted(kg, tb, &mut self.streams.transe)?;
                let mut tape = Tape::new();
                let b = self.model.bind(&mut tape);
                let loss = self.model.transe_loss(&mut tape, &b, kind, &batch);
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFinite { epoch: self.epoch, step: 0, bpr: f64::NAN, aug: f64::NAN, align: f64::NAN, gate: f64::NAN, reg: value });
                }
                total += value;
                let grads = b.collect(&tape.backward(loss));
                self.transe_optimizer.step(&mut self.model.params, &grads);
            }
        }
        Ok(total)
    }

    /// Perturbed graphs for the contrastive views, or `None` when that term is off.
    pub fn augmented_context(&mut self, bundle: &DataBundle, data: &TrainData) -> Option<(GraphContext, usize, usize)> {
        if self.model.config.effective_lambda_aug() <= 0.0 {
            return None;
        }
        let cfg = self.model.config.clone();
        let kg_aug = drop_edges_kg(&bundle.kg, cfg.rho, &mut self.streams.kg_drop);
        let aug_index = crate::kg_encoder::KgIndex::new(&kg_aug);
        let scores = self.model.stability(&data.context.kg, &aug_index);
        let ui_aug = stab_adaptive_drop(&data.train_graph, &scores, cfg.mu, &mut self.streams.ui_drop);
        let ctx = GraphContext {
            kg: aug_index,
            adj: crate::cf_propagation::NormalizedAdjacency::new(ui_aug.num_users, ui_aug.num_items, &ui_aug.edges),
        };
        Some((ctx, kg_aug.triplets.len(), ui_aug.edges.len()))
    }

    /// Optimization part of one epoch: augmentation, batches, translation pass.
    pub fn train_epoch(&mut self, bundle: &DataBundle, data: &TrainData) -> Result<EpochLosses> {
        self.epoch += 1;
        let aug = self.augmented_context(bundle, data);
        let batches = match self.model.config.batch_size {
            0 => 1,
            b => bundle.split.train.len().div_ceil(b).max(1),
        };
        let mut acc = LossParts::default();
        for s in 0..batches {
            let triples = self.draw_batch(bundle)?;
            if triples.is_empty() {
                continue;
            }
            let p = self.step(&triples, &data.context, aug.as_ref().map(|a| &a.0), s)?;
            acc.total += p.total;
            acc.bpr += p.bpr;
            acc.aug += p.aug;
            acc.align += p.align;
            acc.gate += p.gate;
            acc.reg += p.reg;
        }
        let k = batches as f64;
        let parts = LossParts {
            total: acc.total / k,
            bpr: acc.bpr / k,
            aug: acc.aug / k,
            align: acc.align / k,
            gate: acc.gate / k,
            reg: acc.reg / k,
        };
        let transe = self.transe_pass(bundle)?;
        let (kg_kept, ui_kept) = aug.as_ref().map(|a| (a.1, a.2)).unwrap_or((bundle.kg.triplets.len(), data.train_graph.edges.len()));
        Ok(EpochLosses { batches, parts, transe, kg_kept, ui_kept })
    }

    pub fn snapshot(&self, data: &TrainData) -> Snapshot {
        self.model.snapshot(&data.context)
    }

    /// All parameters, both optimizers' moments and counters.
    pub fn to_checkpoint(&self) -> CheckpointData {
        let p = &self.model.params;
        let mut tensors = Vec::new();
        for (k, name) in p.names().iter().enumerate() {
            tensors.push((format!("param.{name}"), p.value(k).clone()));
        }
        for (tag, opt) in [("adam", &self.optimizer), ("transe", &self.transe_optimizer)] {
            for (k, name) in p.names().iter().enumerate() {
                tensors.push((format!("{tag}.m.{name}"), opt.m[k].clone()));
                tensors.push((format!("{tag}.v.{name}"), opt.v[k].clone()));
            }
            tensors.push((format!("meta.{tag}_t"), ndarray::Array2::from_elem((1, 1), opt.t as f64)));
        }
        tensors.push(("meta.epoch".into(), ndarray::Array2::from_elem((1, 1), self.epoch as f64)));
        CheckpointData { config_hash: self.model.config.hash(), tensors, rng: self.streams.to_bytes() }
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        self.to_checkpoint().write(w)
    }

    /// Rebuilds a state for `config` and `bundle`, then overwrites it from a
    /// checkpoint. The checkpoint must carry the same config hash.
    pub fn from_checkpoint(config: &TrainConfig, bundle: &DataBundle, data: &CheckpointData) -> Result<Self> {
        if data.config_hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs config {}",
                hex::encode(data.config_hash),
                config.hash_hex()
            )));
        }
        let mut state = TrainState::new(config, bundle)?;
        let names = state.model.params.names().to_vec();
        let fetch = |name: &str, like: &ndarray::Array2<f64>| -> Result<ndarray::Array2<f64>> {
            let t = data.tensor(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dim() != like.dim() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {:?}", t.dim(), like.dim())));
            }
            Ok(t.clone())
        };
        let scalar = |name: &str| -> Result<f64> {
            data.tensor(name)
                .map(|t| t[[0, 0]])
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        for (k, name) in names.iter().enumerate() {
            let v = fetch(&format!("param.{name}"), state.model.params.value(k))?;
            *state.model.params.value_mut(k) = v;
            for (tag, opt) in [("adam", &mut state.optimizer), ("transe", &mut state.transe_optimizer)] {
                opt.m[k] = fetch(&format!("{tag}.m.{name}"), &opt.m[k])?;
                opt.v[k] = fetch(&format!("{tag}.v.{name}"), &opt.v[k])?;
            }
        }
        state.optimizer.t = scalar("meta.adam_t")? as u64;
        state.transe_optimizer.t = scalar("meta.transe_t")? as u64;
        state.epoch = scalar("meta.epoch")? as usize;
        state.streams = Streams::from_bytes(&data.rng)?;
        Ok(state)
    }

    pub fn load<R: Read>(config: &TrainConfig, bundle: &DataBundle, r: R) -> Result<Self> {
        Self::from_checkpoint(config, bundle, &CheckpointData::read(r)?)
    }
}

/// Everything reported about a trained model, serialized as the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub ablation: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub valid: MetricsReport,
    pub test: MetricsReport,
    pub groups: Vec<GroupReport>,
    pub gates: GateSummary,
}

impl RunMetrics {
    /// Scores `state` on the validation and test splits.
    pub fn compute(state: &TrainState, bundle: &DataBundle, ks: &[usize], groups: &[GroupSpec], best_epoch: usize, epochs_run: usize) -> (Self, GateTable) {
        let data = TrainData::new(bundle);
        let snap = state.snapshot(&data);
        let valid = evaluate_valid(&snap, &bundle.split, ks);
        let test = evaluate_test(&snap, &bundle.split, ks);
        let groups = groups
            .iter()
            .map(|g| {
                let counts = match g.side {
                    Side::User => &bundle.features.user_counts,
                    Side::Item => &bundle.features.item_counts,
                };
                group_report(&test, counts, g)
            })
            .collect();
        let table = export_gates(&snap.user_gate, &snap.item_gate, &bundle.features);
        let metrics = RunMetrics {
            config_hash: state.config().hash_hex(),
            ablation: state.config().ablation.tag().to_string(),
            best_epoch,
            epochs_run,
            valid,
            test,
            groups,
            gates: table.summary(),
        };
        (metrics, table)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    /// State at the best validation epoch (the initial state if none improved).
    pub best: TrainState,
    pub best_epoch: usize,
    pub best_valid_recall: f64,
    pub history: History,
    pub counters: LossCounters,
    pub stopped_early: bool,
}

/// Per-epoch hook; return `false` to stop training.
pub type EpochHook<'a> = &'a mut dyn FnMut(&TrainState, &EpochRecord) -> bool;

/// Trains until `max_epochs` or until validation Recall@K has not improved
/// for `patience` consecutive evaluations.
pub fn fit(config: &TrainConfig, bundle: &DataBundle) -> Result<FitResult> {
    fit_with(config, bundle, &mut |_, _| true)
}

pub fn fit_with(config: &TrainConfig, bundle: &DataBundle, hook: EpochHook<'_>) -> Result<FitResult> {
    let data = TrainData::new(bundle);
    let mut state = TrainState::new(config, bundle)?;
    let mut best = state.clone();
    let mut best_recall = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since = 0;
    let mut history = History::default();
    let mut stopped_early = false;
    let ks = [config.early_stop_k];
    for _ in 0..config.max_epochs {
        let losses = state.train_epoch(bundle, &data)?;
        let snap = state.snapshot(&data);
        let report: MetricsReport = evaluate_valid(&snap, &bundle.split, &ks);
        let recall = report.recall[0];
        let improved = recall > best_recall;
        if improved {
            best_recall = recall;
            best_epoch = state.epoch;
            best = state.clone();
            since = 0;
        } else {
            since += 1;
        }
        let (ugm, ugs) = mean_std(&snap.user_gate);
        let (igm, igs) = mean_std(&snap.item_gate);
        let rec = EpochRecord {
            epoch: state.epoch,
            batches: losses.batches,
            total: losses.parts.total,
            bpr: losses.parts.bpr,
            aug: losses.parts.aug,
            align: losses.parts.align,
            gate: losses.parts.gate,
            reg: losses.parts.reg,
            transe: losses.transe,
            kg_kept: losses.kg_kept,
            ui_kept: losses.ui_kept,
            valid_recall: recall,
            valid_ndcg: report.ndcg[0],
            user_gate_mean: ugm,
            user_gate_std: ugs,
            item_gate_mean: igm,
            item_gate_std: igs,
            improved,
        };
        info!(
            "epoch {} loss {:.4} bpr {:.4} valid R@{} {:.4}",
            rec.epoch, rec.total, rec.bpr, config.early_stop_k, rec.valid_recall
        );
        let go_on = hook(&state, &rec);
        history.epochs.push(rec);
        if !go_on {
            break;
        }
        if since >= config.patience {
            stopped_early = true;
            break;
        }
    }
    if best_epoch == 0 {
        best_recall = 0.0;
    }
    Ok(FitResult { best, best_epoch, best_valid_recall: best_recall, history, counters: state.counters, stopped_early })
}
