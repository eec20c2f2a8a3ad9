use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::cf_propagation::{propagate_tape, NormalizedAdjacency};
use crate::corpus::{DataBundle, FrequencyFeatures, InteractionGraph, KnowledgeGraph};
use crate::diffkit::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::evalkit::RankingModel;
use crate::fusion::{gate_regularization_tape, gate_tape, score_tape};
use crate::kg_encoder::{adapt_rows, glorot, rgat_encode_tape, uniform_table, AdapterParams, KgIndex};
use crate::ssl::{align_loss_tape, intra_view_loss_tape, stability_scores_multi, ProjectionVars, StabilityScores, ViewPair};
use crate::translate::{transe_loss_tape, CorruptedBatch};

use super::config::{Ablation, TrainConfig};
use super::optim::ParamStore;

/// How the channels are wired for a given ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Dual,
    IdOnly,
    LlmOnly,
    Cat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Id,
    Llm,
    Cat,
}

impl ChannelKind {
    pub fn prefix(self) -> &'static str {
        match self {
            ChannelKind::Id => "id",
            ChannelKind::Llm => "llm",
            ChannelKind::Cat => "cat",
        }
    }
}

impl Layout {
    pub fn for_ablation(a: Ablation) -> Self {
        match a {
            Ablation::NoLlm => Layout::IdOnly,
            Ablation::NoId => Layout::LlmOnly,
            Ablation::Cat => Layout::Cat,
            _ => Layout::Dual,
        }
    }

    pub fn channels(self) -> &'static [ChannelKind] {
        match self {
            Layout::Dual => &[ChannelKind::Id, ChannelKind::Llm],
            Layout::IdOnly => &[ChannelKind::Id],
            Layout::LlmOnly => &[ChannelKind::Llm],
            Layout::Cat => &[ChannelKind::Cat],
        }
    }

    pub fn needs_semantic(self) -> bool {
        self != Layout::IdOnly
    }
}

/// `(user, positive item, negative item)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrainTriple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Graph structures one forward pass runs on.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub kg: KgIndex,
    pub adj: NormalizedAdjacency,
}

impl GraphContext {
    pub fn new(kg: &KnowledgeGraph, train_graph: &InteractionGraph) -> Self {
        GraphContext {
            kg: KgIndex::new(kg),
            adj: NormalizedAdjacency::new(train_graph.num_users, train_graph.num_items, &train_graph.edges),
        }
    }
}

/// Loss components of one batch, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub bpr: f64,
    pub aug: f64,
    pub align: f64,
    pub gate: f64,
    pub reg: f64,
}

/// How often each optional loss term was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossCounters {
    pub aug: usize,
    pub align: usize,
    pub gate: usize,
}

/// Every parameter placed on a tape as a leaf.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    names: Vec<String>,
}

impl Bound {
    /// Binds caller-made variables, one per parameter in store order.
    pub fn from_vars(store: &ParamStore, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), store.len(), "one variable per parameter");
        Bound { vars, names: store.names().to_vec() }
    }

    pub fn var(&self, name: &str) -> Var {
        let k = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("parameter {name} is not bound"));
        self.vars[k]
    }

    /// Per-parameter gradients in store order.
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Array2<f64>>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ChannelInputs {
    entities: Var,
    users: Var,
    relations: Var,
    att: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub users: Var,
    pub items: Var,
}

/// Parameters plus the fixed data they act on.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub layout: Layout,
    pub params: ParamStore,
    pub num_users: usize,
    pub num_items: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    semantic: Option<Array2<f64>>,
    user_phi: Array2<f64>,
    item_phi: Array2<f64>,
}

fn phi_column(phi: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((phi.len(), 1), phi.to_vec()).expect("column shape")
}

impl Model {
    pub fn new(config: &TrainConfig, bundle: &DataBundle, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::for_ablation(config.ablation);
        let d = config.dim;
        let (nu, ni) = (bundle.graph.num_users, bundle.graph.num_items);
        let (ne, nr) = (bundle.kg.num_entities, bundle.kg.num_relations);
        let semantic = if layout.needs_semantic() {
            let s = bundle
                .semantic
                .as_ref()
                .ok_or_else(|| Error::Data("semantic embeddings are required for this ablation".into()))?;
            if s.nrows() != ne {
                return Err(Error::Data(format!("semantic matrix has {} rows for {ne} entities", s.nrows())));
            }
            Some(s.clone())
        } else {
            None
        };
        let mut p = ParamStore::new();
        let uses_id = matches!(layout, Layout::Dual | Layout::IdOnly | Layout::Cat);
        let uses_llm = matches!(layout, Layout::Dual | Layout::LlmOnly | Layout::Cat);
        if uses_id {
            p.insert("id.entity", uniform_table(rng, ne, d));
            p.insert("id.user", uniform_table(rng, nu, d));
        }
        if uses_llm {
            let d_llm = semantic.as_ref().map(|s| s.ncols()).unwrap_or(0);
            let mid = if config.adapter_mid == 0 { AdapterParams::default_mid(d_llm, d) } else { config.adapter_mid };
            let a = AdapterParams::init(rng, d_llm, mid, d);
            p.insert("llm.w1", a.w1);
            p.insert("llm.b1", a.b1);
            p.insert("llm.w2", a.w2);
            p.insert("llm.b2", a.b2);
            p.insert("llm.user", uniform_table(rng, nu, d));
        }
        if layout == Layout::Cat {
            p.insert("cat.w", glorot(rng, 2 * d, d));
        }
        for ch in layout.channels() {
            let pre = ch.prefix();
            p.insert(&format!("{pre}.relation"), uniform_table(rng, nr, d));
            p.insert(&format!("{pre}.att"), glorot(rng, d, 2 * d));
        }
        if layout == Layout::Dual {
            p.insert("proj.id.w", glorot(rng, d, d));
            p.insert("proj.id.b", Array2::zeros((1, d)));
            p.insert("proj.llm.w", glorot(rng, d, d));
            p.insert("proj.llm.b", Array2::zeros((1, d)));
            p.insert("gate.user.w", Array2::zeros((2 * d + 1, 1)));
            p.insert("gate.user.b", Array2::zeros((1, 1)));
            p.insert("gate.item.w", Array2::zeros((2 * d + 1, 1)));
            p.insert("gate.item.b", Array2::zeros((1, 1)));
        }
        Ok(Model {
            config: config.clone(),
            layout,
            params: p,
            num_users: nu,
            num_items: ni,
            num_entities: ne,
            num_relations: nr,
            semantic,
            user_phi: phi_column(&bundle.features.user_phi),
            item_phi: phi_column(&bundle.features.item_phi),
        })
    }

    pub fn update_features(&mut self, features: &FrequencyFeatures) {
        self.user_phi = phi_column(&features.user_phi);
        self.item_phi = phi_column(&features.item_phi);
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.params.values().iter().map(|v| tape.leaf(v.clone())).collect();
        Bound { vars, names: self.params.names().to_vec() }
    }

    fn adapted(&self, tape: &mut Tape, b: &Bound) -> Var {
        let raw = tape.leaf(self.semantic.clone().expect("semantic matrix present for LLM channel"));
        adapt_rows(tape, raw, b.var("llm.w1"), b.var("llm.b1"), b.var("llm.w2"), b.var("llm.b2"))
    }

    fn inputs(&self, tape: &mut Tape, b: &Bound, kind: ChannelKind) -> ChannelInputs {
        let pre = kind.prefix();
        let relations = b.var(&format!("{pre}.relation"));
        let att = b.var(&format!("{pre}.att"));
        let (entities, users) = match kind {
            ChannelKind::Id => (b.var("id.entity"), b.var("id.user")),
            ChannelKind::Llm => (self.adapted(tape, b), b.var("llm.user")),
            ChannelKind::Cat => {
                let llm = self.adapted(tape, b);
                let e = tape.concat_cols(&[b.var("id.entity"), llm]);
                let e = tape.matmul(e, b.var("cat.w"));
                let u = tape.concat_cols(&[b.var("id.user"), b.var("llm.user")]);
                let u = tape.matmul(u, b.var("cat.w"));
                (e, u)
            }
        };
        ChannelInputs { entities, users, relations, att }
    }

    fn encode(&self, tape: &mut Tape, inp: &ChannelInputs, ctx: &GraphContext) -> Encoded {
        let items = rgat_encode_tape(tape, inp.entities, inp.relations, inp.att, &ctx.kg, self.config.kg_layers);
        let (users, items) = propagate_tape(tape, inp.users, items, &ctx.adj, self.config.cf_layers, self.config.layer_combine);
        Encoded { users, items }
    }

    /// Final user and item representations of every channel.
    pub fn encode_all(&self, tape: &mut Tape, b: &Bound, ctx: &GraphContext) -> Vec<Encoded> {
        self.layout
            .channels()
            .iter()
            .map(|&k| {
                let inp = self.inputs(tape, b, k);
                self.encode(tape, &inp, ctx)
            })
            .collect()
    }

    fn frozen_gates(&self) -> bool {
        self.config.ablation == Ablation::NoFreq
    }

    /// Composite loss of one batch recorded on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        triples: &[TrainTriple],
        orig: &GraphContext,
        aug: Option<&GraphContext>,
        counters: &mut LossCounters,
    ) -> (Var, LossParts) {
        assert!(!triples.is_empty(), "empty batch");
        let cfg = &self.config;
        let n = triples.len();
        let users = Rc::new(triples.iter().map(|t| t.user).collect::<Vec<_>>());
        let pos = Rc::new(triples.iter().map(|t| t.pos).collect::<Vec<_>>());
        let neg = Rc::new(triples.iter().map(|t| t.neg).collect::<Vec<_>>());

        let kinds = self.layout.channels();
        let inputs: Vec<ChannelInputs> = kinds.iter().map(|&k| self.inputs(tape, b, k)).collect();
        let enc: Vec<Encoded> = inputs.iter().map(|inp| self.encode(tape, inp, orig)).collect();
        let rows: Vec<(Var, Var, Var)> = enc
            .iter()
            .map(|e| {
                (
                    tape.gather_rows(e.users, users.clone()),
                    tape.gather_rows(e.items, pos.clone()),
                    tape.gather_rows(e.items, neg.clone()),
                )
            })
            .collect();

        let mut gate_value = 0.0;
        let mut gate_term = None;
        let (y_pos, y_neg, weight) = if self.layout == Layout::Dual {
            let (u_id, p_id, n_id) = rows[0];
            let (u_llm, p_llm, n_llm) = rows[1];
            let (gu, gp, gn) = if self.frozen_gates() {
                let half = Array2::from_elem((n, 1), 0.5);
                let g = tape.leaf(half);
                // −2 ln ½ per gate, three gates per triple, and no gradient
                gate_value = 6.0 * std::f64::consts::LN_2;
                (g, g, g)
            } else {
                let phi_u = tape.leaf(self.user_phi.select(ndarray::Axis(0), &users));
                let phi_p = tape.leaf(self.item_phi.select(ndarray::Axis(0), &pos));
                let phi_n = tape.leaf(self.item_phi.select(ndarray::Axis(0), &neg));
                let (uw, ub) = (b.var("gate.user.w"), b.var("gate.user.b"));
                let (iw, ib) = (b.var("gate.item.w"), b.var("gate.item.b"));
                let gu = gate_tape(tape, u_id, u_llm, phi_u, uw, ub);
                let gp = gate_tape(tape, p_id, p_llm, phi_p, iw, ib);
                let gn = gate_tape(tape, n_id, n_llm, phi_n, iw, ib);
                if cfg.lambda_gate > 0.0 {
                    counters.gate += 1;
                    let t = gate_regularization_tape(tape, &[gu.logit, gp.logit, gn.logit], n);
                    gate_value = tape.scalar(t);
                    gate_term = Some(t);
                }
                (gu.gate, gp.gate, gn.gate)
            };
            let sp = score_tape(tape, u_id, u_llm, gu, p_id, p_llm, gp);
            let sn = score_tape(tape, u_id, u_llm, gu, n_id, n_llm, gn);
            let alpha = if cfg.detach_alpha {
                let a = tape.value(sp.alpha).clone();
                tape.leaf(a)
            } else {
                sp.alpha
            };
            (sp.score, sn.score, Some(alpha))
        } else {
            let (u, p, q) = rows[0];
            (tape.row_dot(u, p), tape.row_dot(u, q), None)
        };
        let diff = tape.sub(y_pos, y_neg);
        let mut ls = tape.log_sigmoid(diff);
        if let Some(a) = weight {
            ls = tape.mul(a, ls);
        }
        let s = tape.sum(ls);
        let bpr = tape.scale(s, -1.0);
        let mut parts = LossParts { bpr: tape.scalar(bpr), gate: gate_value, ..LossParts::default() };
        let mut total = bpr;

        let distinct = |v: &[usize]| {
            let mut v = v.to_vec();
            v.sort_unstable();
            v.dedup();
            Rc::new(v)
        };
        let batch_users = distinct(&users);
        let batch_items = {
            let mut all = pos.to_vec();
            all.extend(neg.iter());
            distinct(&all)
        };
        let den = cfg.infonce_denominator;
        let enough = |m: usize| m >= 2 || !den.is_exclusive();

        let l_aug = cfg.effective_lambda_aug();
        if let Some(aug_ctx) = aug.filter(|_| l_aug > 0.0 && enough(batch_users.len()) && enough(batch_items.len())) {
            counters.aug += 1;
            let mut ov = Vec::new();
            let mut av = Vec::new();
            for (inp, e) in inputs.iter().zip(&enc) {
                let a = self.encode(tape, inp, aug_ctx);
                ov.push(ViewPair {
                    users: tape.gather_rows(e.users, batch_users.clone()),
                    items: tape.gather_rows(e.items, batch_items.clone()),
                });
                av.push(ViewPair {
                    users: tape.gather_rows(a.users, batch_users.clone()),
                    items: tape.gather_rows(a.items, batch_items.clone()),
                });
            }
            let t = intra_view_loss_tape(tape, &ov, &av, cfg.tau, den, cfg.ssl_chunk);
            parts.aug = tape.scalar(t);
            let w = tape.scale(t, l_aug);
            total = tape.add(total, w);
        }

        let l_align = cfg.effective_lambda_align();
        if self.layout == Layout::Dual && l_align > 0.0 && enough(batch_users.len()) {
            counters.align += 1;
            let u_id = tape.gather_rows(enc[0].users, batch_users.clone());
            let u_llm = tape.gather_rows(enc[1].users, batch_users.clone());
            let pv = ProjectionVars {
                id_w: b.var("proj.id.w"),
                id_b: b.var("proj.id.b"),
                llm_w: b.var("proj.llm.w"),
                llm_b: b.var("proj.llm.b"),
            };
            let t = align_loss_tape(tape, u_id, u_llm, pv, cfg.tau, den, cfg.ssl_chunk);
            parts.align = tape.scalar(t);
            let w = tape.scale(t, l_align);
            total = tape.add(total, w);
        }

        if let Some(t) = gate_term {
            let w = tape.scale(t, cfg.lambda_gate);
            total = tape.add(total, w);
        } else if gate_value != 0.0 {
            let c = tape.constant_scalar(cfg.lambda_gate * gate_value);
            total = tape.add(total, c);
        }

        if cfg.lambda_reg > 0.0 {
            let mut acc: Option<Var> = None;
            for &v in &b.vars {
                let sq = tape.sum_squares(v);
                acc = Some(match acc {
                    Some(a) => tape.add(a, sq),
                    None => sq,
                });
            }
            if let Some(r) = acc {
                parts.reg = tape.scalar(r);
                let w = tape.scale(r, cfg.lambda_reg);
                total = tape.add(total, w);
            }
        }
        parts.total = tape.scalar(total);
        (total, parts)
    }

    /// Translation loss of one channel's entity and relation tables.
    pub fn transe_loss(&self, tape: &mut Tape, b: &Bound, kind: ChannelKind, batch: &CorruptedBatch) -> Var {
        let inp = self.inputs(tape, b, kind);
        transe_loss_tape(tape, inp.entities, inp.relations, batch)
    }

    /// Stability of every item's KG encoding under a perturbed KG, averaged
    /// over channels.
    pub fn stability(&self, orig: &KgIndex, perturbed: &KgIndex) -> StabilityScores {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let mut encs = Vec::new();
        for &k in self.layout.channels() {
            let inp = self.inputs(&mut tape, &b, k);
            let o = rgat_encode_tape(&mut tape, inp.entities, inp.relations, inp.att, orig, self.config.kg_layers);
            let a = rgat_encode_tape(&mut tape, inp.entities, inp.relations, inp.att, perturbed, self.config.kg_layers);
            encs.push((tape.value(o).clone(), tape.value(a).clone()));
        }
        let pairs: Vec<(&Array2<f64>, &Array2<f64>)> = encs.iter().map(|(a, b)| (a, b)).collect();
        stability_scores_multi(&pairs)
    }

    /// Inference-time representations and gates for every user and item.
    pub fn snapshot(&self, ctx: &GraphContext) -> Snapshot {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let enc = self.encode_all(&mut tape, &b, ctx);
        let users: Vec<Array2<f64>> = enc.iter().map(|e| tape.value(e.users).clone()).collect();
        let items: Vec<Array2<f64>> = enc.iter().map(|e| tape.value(e.items).clone()).collect();
        let (user_gate, item_gate) = match self.layout {
            Layout::Dual if self.frozen_gates() => (vec![0.5; self.num_users], vec![0.5; self.num_items]),
            Layout::Dual => {
                let pu = tape.leaf(self.user_phi.clone());
                let pi = tape.leaf(self.item_phi.clone());
                let gu = gate_tape(&mut tape, enc[0].users, enc[1].users, pu, b.var("gate.user.w"), b.var("gate.user.b"));
                let gi = gate_tape(&mut tape, enc[0].items, enc[1].items, pi, b.var("gate.item.w"), b.var("gate.item.b"));
                (tape.value(gu.gate).column(0).to_vec(), tape.value(gi.gate).column(0).to_vec())
            }
            Layout::IdOnly => (vec![1.0; self.num_users], vec![1.0; self.num_items]),
            Layout::LlmOnly => (vec![0.0; self.num_users], vec![0.0; self.num_items]),
            Layout::Cat => (vec![0.5; self.num_users], vec![0.5; self.num_items]),
        };
        Snapshot { dual: self.layout == Layout::Dual, users, items, user_gate, item_gate }
    }
}

/// Frozen representations used for ranking and gate export.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Gated two-channel scoring; otherwise a single inner product.
    pub dual: bool,
    pub users: Vec<Array2<f64>>,
    pub items: Vec<Array2<f64>>,
    /// ID-channel share per user; constant for single-channel layouts.
    pub user_gate: Vec<f64>,
    pub item_gate: Vec<f64>,
}

impl Snapshot {
    pub fn score(&self, user: usize, item: usize) -> f64 {
        let dot = |c: usize| self.users[c].row(user).dot(&self.items[c].row(item));
        if !self.dual {
            return dot(0);
        }
        let (gu, gi) = (self.user_gate[user], self.item_gate[item]);
        let both = gu * gi;
        let neither = (1.0 - gu) * (1.0 - gi);
        (both * dot(0) + neither * dot(1)) / (both + neither)
    }
}

impl RankingModel for Snapshot {
    fn num_items(&self) -> usize {
        self.items[0].nrows()
    }

    fn score_user(&self, user: usize) -> Vec<f64> {
        let s0 = self.items[0].dot(&self.users[0].row(user));
        if !self.dual {
            return s0.to_vec();
        }
        let s1 = self.items[1].dot(&self.users[1].row(user));
        let gu = self.user_gate[user];
        s0.iter()
            .zip(s1.iter())
            .zip(&self.item_gate)
            .map(|((a, c), &gi)| {
                let both = gu * gi;
                let neither = (1.0 - gu) * (1.0 - gi);
                (both * a + neither * c) / (both + neither)
            })
            .collect()
    }
}
