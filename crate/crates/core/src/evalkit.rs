//! Top-K ranking metrics, frequency-group breakdowns and gate export.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::FrequencyFeatures;
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 2] = [50, 100];
pub const USER_BINS: [usize; 4] = [0, 18, 36, 72];
pub const ITEM_BINS: [usize; 4] = [0, 12, 24, 48];

/// Anything that can score the full catalog for one user.
pub trait RankingModel: Sync {
    fn num_items(&self) -> usize;
    fn score_user(&self, user: usize) -> Vec<f64>;
}

/// Candidates sorted by score descending, ties by ascending id. `exclude`
/// must be sorted.
pub fn rank_items(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len()).filter(|i| exclude.binary_search(i).is_err()).collect();
    items.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    items
}

/// `None` when `relevant` is empty. `relevant` must be sorted.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.binary_search(i).is_ok()).count();
    Some(hits as f64 / relevant.len() as f64)
}

fn discount(position: usize) -> f64 {
    1.0 / ((position + 1) as f64).log2()
}

/// Binary-relevance NDCG with `log₂` discounting; `None` when `relevant` is
/// empty. `relevant` must be sorted.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(p, _)| discount(p + 1))
        .sum();
    let idcg: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Some(dcg / idcg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// `(item, 1-based rank)` for relevant items ranked within the largest K.
    pub hits: Vec<(usize, usize)>,
    pub relevant: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub num_users_evaluated: usize,
    #[serde(skip)]
    pub per_user: Vec<UserMetrics>,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Ranks every item for each user, skipping `exclude[u]`, and scores the
/// ranking against `relevant[u]`. Users with nothing relevant are skipped.
pub fn evaluate(model: &dyn RankingModel, relevant: &[Vec<usize>], exclude: &[Vec<usize>], ks: &[usize]) -> MetricsReport {
    assert!(!ks.is_empty() && ks.iter().all(|&k| k >= 1), "need at least one K >= 1");
    let max_k = *ks.iter().max().unwrap();
    let per_user: Vec<UserMetrics> = (0..relevant.len())
        .into_par_iter()
        .filter(|&u| !relevant[u].is_empty())
        .map(|u| {
            let rel = merge_sorted(&relevant[u], &[]);
            let ex = exclude.get(u).map(|e| merge_sorted(e, &[])).unwrap_or_default();
            let ranked = rank_items(&model.score_user(u), &ex);
            let hits: Vec<(usize, usize)> = ranked
                .iter()
                .take(max_k)
                .enumerate()
                .filter(|(_, i)| rel.binary_search(i).is_ok())
                .map(|(p, &i)| (i, p + 1))
                .collect();
            UserMetrics {
                user: u,
                recall: ks.iter().map(|&k| recall_at_k(&ranked, &rel, k).unwrap()).collect(),
                ndcg: ks.iter().map(|&k| ndcg_at_k(&ranked, &rel, k).unwrap()).collect(),
                hits,
                relevant: rel,
            }
        })
        .collect();
    let n = per_user.len();
    let mean = |f: &dyn Fn(&UserMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_user.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let recall = (0..ks.len()).map(|k| mean(&|m| m.recall[k])).collect();
    let ndcg = (0..ks.len()).map(|k| mean(&|m| m.ndcg[k])).collect();
    MetricsReport { ks: ks.to_vec(), recall, ndcg, num_users_evaluated: n, per_user }
}

/// Test-set protocol: train and validation items are not candidates.
pub fn evaluate_test(model: &dyn RankingModel, split: &crate::corpus::SplitDataset, ks: &[usize]) -> MetricsReport {
    let exclude: Vec<Vec<usize>> = split
        .train_by_user
        .iter()
        .zip(&split.valid_by_user)
        .map(|(a, b)| merge_sorted(a, b))
        .collect();
    evaluate(model, &split.test_by_user, &exclude, ks)
}

/// Validation protocol: train items are not candidates.
pub fn evaluate_valid(model: &dyn RankingModel, split: &crate::corpus::SplitDataset, ks: &[usize]) -> MetricsReport {
    evaluate(model, &split.valid_by_user, &split.train_by_user, ks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

/// Half-open count intervals `[b_k, b_{k+1})`, the last one unbounded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub side: Side,
    pub boundaries: Vec<usize>,
}

impl GroupSpec {
    pub fn new(side: Side, boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.first() != Some(&0) {
            return Err(Error::Config("group boundaries must start at 0".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("group boundaries must be strictly increasing".into()));
        }
        Ok(GroupSpec { side, boundaries })
    }

    pub fn default_user() -> Self {
        GroupSpec { side: Side::User, boundaries: USER_BINS.to_vec() }
    }

    pub fn default_item() -> Self {
        GroupSpec { side: Side::Item, boundaries: ITEM_BINS.to_vec() }
    }

    /// Parses `user:0,18,36,72` or `item:0,12,24,48`.
    pub fn parse(text: &str) -> Result<Self> {
        let (side, rest) = text
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("group spec {text:?} lacks a side")))?;
        let side = match side.trim() {
            "user" => Side::User,
            "item" => Side::Item,
            other => return Err(Error::Config(format!("unknown group side {other:?}"))),
        };
        let boundaries = rest
            .split(',')
            .map(|b| b.trim().parse().map_err(|_| Error::Config(format!("bad group boundary {b:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        Self::new(side, boundaries)
    }

    pub fn bin_of(&self, count: usize) -> usize {
        self.boundaries.partition_point(|&b| b <= count) - 1
    }

    pub fn label(&self, bin: usize) -> String {
        match self.boundaries.get(bin + 1) {
            Some(hi) => format!("[{},{})", self.boundaries[bin], hi),
            None => format!("[{}+)", self.boundaries[bin]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub label: String,
    /// Entities whose count falls in the bin.
    pub population: usize,
    /// Users (user side) or test interactions (item side) averaged over.
    pub evaluated: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub side: Side,
    pub ks: Vec<usize>,
    pub rows: Vec<GroupRow>,
}

/// Per-bin averages. User side averages per-user metrics; item side
/// averages over test interactions, scoring each as a hit (recall) and by
/// its rank discount (NDCG) when it lands within K.
pub fn group_report(report: &MetricsReport, counts: &[usize], spec: &GroupSpec) -> GroupReport {
    let bins = spec.boundaries.len();
    let mut population = vec![0usize; bins];
    for &c in counts {
        population[spec.bin_of(c)] += 1;
    }
    let nk = report.ks.len();
    let mut evaluated = vec![0usize; bins];
    let mut recall = vec![vec![0.0; nk]; bins];
    let mut ndcg = vec![vec![0.0; nk]; bins];
    match spec.side {
        Side::User => {
            for m in &report.per_user {
                let b = spec.bin_of(counts[m.user]);
                evaluated[b] += 1;
                for k in 0..nk {
                    recall[b][k] += m.recall[k];
                    ndcg[b][k] += m.ndcg[k];
                }
            }
        }
        Side::Item => {
            for m in &report.per_user {
                for &item in &m.relevant {
                    evaluated[spec.bin_of(counts[item])] += 1;
                }
                for &(item, rank) in &m.hits {
                    let b = spec.bin_of(counts[item]);
                    for (k, &kk) in report.ks.iter().enumerate() {
                        if rank <= kk {
                            recall[b][k] += 1.0;
                            ndcg[b][k] += discount(rank);
                        }
                    }
                }
            }
        }
    }
    let rows = (0..bins)
        .map(|b| {
            let n = evaluated[b].max(1) as f64;
            GroupRow {
                label: spec.label(b),
                population: population[b],
                evaluated: evaluated[b],
                recall: recall[b].iter().map(|x| x / n).collect(),
                ndcg: ndcg[b].iter().map(|x| x / n).collect(),
            }
        })
        .collect();
    GroupReport { side: spec.side, ks: report.ks.clone(), rows }
}

/// Average ranks, ties sharing the mean of their positions.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let r = (start + end - 1) as f64 / 2.0 + 1.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateRow {
    pub kind: Side,
    pub id: usize,
    pub freq: usize,
    pub phi: f64,
    pub gate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlation {
    pub spearman: f64,
    /// False when the correlation is undefined and reported as 0.
    pub defined: bool,
}

impl Correlation {
    fn from(x: Option<f64>) -> Self {
        Correlation { spearman: x.unwrap_or(0.0), defined: x.is_some() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateTable {
    pub rows: Vec<GateRow>,
    pub user_correlation: Correlation,
    pub item_correlation: Correlation,
}

pub fn export_gates(user_gates: &[f64], item_gates: &[f64], features: &FrequencyFeatures) -> GateTable {
    assert_eq!(user_gates.len(), features.user_counts.len());
    assert_eq!(item_gates.len(), features.item_counts.len());
    let mut rows = Vec::with_capacity(user_gates.len() + item_gates.len());
    for (u, &g) in user_gates.iter().enumerate() {
        rows.push(GateRow { kind: Side::User, id: u, freq: features.user_counts[u], phi: features.user_phi[u], gate: g });
    }
    for (i, &g) in item_gates.iter().enumerate() {
        rows.push(GateRow { kind: Side::Item, id: i, freq: features.item_counts[i], phi: features.item_phi[i], gate: g });
    }
    let as_f = |c: &[usize]| c.iter().map(|&x| x as f64).collect::<Vec<_>>();
    GateTable {
        rows,
        user_correlation: Correlation::from(spearman(&as_f(&features.user_counts), user_gates)),
        item_correlation: Correlation::from(spearman(&as_f(&features.item_counts), item_gates)),
    }
}

/// Location and spread of the gates on each side plus their correlation
/// with frequency.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateSummary {
    pub user_mean: f64,
    pub user_std: f64,
    pub item_mean: f64,
    pub item_std: f64,
    pub user_correlation: Correlation,
    pub item_correlation: Correlation,
}

fn mean_std(x: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = x.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = x.clone().sum::<f64>() / n as f64;
    let v = x.map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64;
    (m, v.sqrt())
}

impl GateTable {
    pub fn summary(&self) -> GateSummary {
        let side = |s: Side| self.rows.iter().filter(move |r| r.kind == s).map(|r| r.gate);
        let (user_mean, user_std) = mean_std(side(Side::User));
        let (item_mean, item_std) = mean_std(side(Side::Item));
        GateSummary {
            user_mean,
            user_std,
            item_mean,
            item_std,
            user_correlation: self.user_correlation.clone(),
            item_correlation: self.item_correlation.clone(),
        }
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "kind\tid\tfreq\tphi\tgate")?;
        for r in &self.rows {
            let kind = match r.kind {
                Side::User => "user",
                Side::Item => "item",
            };
            writeln!(w, "{kind}\t{}\t{}\t{}\t{}", r.id, r.freq, r.phi, r.gate)?;
        }
        Ok(())
    }
}
