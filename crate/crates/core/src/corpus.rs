//! Interaction and knowledge-graph data: parsing, filtering, splitting,
//! frequency statistics, the semantic embedding file, and a seeded synthetic
//! generator for desk-scale experiments.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Bipartite user-item graph with both adjacency directions.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub edges: Vec<(usize, usize)>,
    pub user_adj: Vec<Vec<usize>>,
    pub item_adj: Vec<Vec<usize>>,
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
}

impl InteractionGraph {
    /// Builds a graph from an edge list; duplicate pairs are dropped, first
    /// occurrence wins. Tokens default to `u{id}` / `i{id}`.
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Self {
        let user_tokens = (0..num_users).map(|u| format!("u{u}")).collect();
        let item_tokens = (0..num_items).map(|i| format!("i{i}")).collect();
        Self::with_tokens(user_tokens, item_tokens, edges)
    }

    pub fn with_tokens(user_tokens: Vec<String>, item_tokens: Vec<String>, edges: &[(usize, usize)]) -> Self {
        let num_users = user_tokens.len();
        let num_items = item_tokens.len();
        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        let mut kept = Vec::with_capacity(edges.len());
        for &(u, i) in edges {
            assert!(u < num_users && i < num_items, "edge ({u}, {i}) out of range");
            if seen.insert((u, i)) {
                kept.push((u, i));
                user_adj[u].push(i);
                item_adj[i].push(u);
            }
        }
        user_adj.iter_mut().for_each(|a| a.sort_unstable());
        item_adj.iter_mut().for_each(|a| a.sort_unstable());
        InteractionGraph {
            num_users,
            num_items,
            edges: kept,
            user_adj,
            item_adj,
            user_tokens,
            item_tokens,
        }
    }

    /// Keeps only `edges` (a subset of the current edges) and renumbers users
    /// densely, dropping users left without edges. Items keep their ids.
    pub fn restrict(&self, edges: &[(usize, usize)]) -> Self {
        let mut remap = vec![usize::MAX; self.num_users];
        let mut tokens = Vec::new();
        let mut renumbered = Vec::with_capacity(edges.len());
        for &(u, i) in edges {
            if remap[u] == usize::MAX {
                remap[u] = tokens.len();
                tokens.push(self.user_tokens[u].clone());
            }
            renumbered.push((remap[u], i));
        }
        Self::with_tokens(tokens, self.item_tokens.clone(), &renumbered)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for &(u, i) in &self.edges {
            writeln!(w, "{}\t{}", self.user_tokens[u], self.item_tokens[i])?;
        }
        Ok(())
    }
}

fn content_lines<R: BufRead>(reader: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    reader
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l))
        .filter(|(_, l)| match l {
            Ok(s) => {
                let t = s.trim();
                !t.is_empty() && !t.starts_with('#')
            }
            Err(_) => true,
        })
}

fn intern(table: &mut HashMap<String, usize>, tokens: &mut Vec<String>, tok: &str) -> usize {
    if let Some(&id) = table.get(tok) {
        return id;
    }
    let id = tokens.len();
    table.insert(tok.to_string(), id);
    tokens.push(tok.to_string());
    id
}

/// Parses `user<TAB>item` lines. Tokens get dense ids in first-occurrence
/// order; `#` lines and blank lines are skipped.
pub fn parse_interactions<R: BufRead>(reader: R) -> Result<InteractionGraph> {
    let mut users = HashMap::new();
    let mut items = HashMap::new();
    let mut user_tokens = Vec::new();
    let mut item_tokens = Vec::new();
    let mut edges = Vec::new();
    for (line_no, line) in content_lines(reader) {
        let line = line?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let u = intern(&mut users, &mut user_tokens, fields[0].trim());
        let i = intern(&mut items, &mut item_tokens, fields[1].trim());
        edges.push((u, i));
    }
    Ok(InteractionGraph::with_tokens(user_tokens, item_tokens, &edges))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// Entity/relation store. Item ids are the prefix `[0, num_items)` of the
/// entity ids.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    pub num_items: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub triplets: Vec<Triplet>,
    /// `item_neighbors[i]` lists `(relation, tail)` for triplets headed by item `i`.
    pub item_neighbors: Vec<Vec<(usize, usize)>>,
    pub entity_tokens: Vec<String>,
    pub relation_tokens: Vec<String>,
}

impl KnowledgeGraph {
    pub fn new(
        entity_tokens: Vec<String>,
        relation_tokens: Vec<String>,
        num_items: usize,
        triplets: Vec<Triplet>,
    ) -> Self {
        let num_entities = entity_tokens.len();
        let num_relations = relation_tokens.len();
        assert!(num_items <= num_entities, "items must be a prefix of entities");
        let mut item_neighbors = vec![Vec::new(); num_items];
        for t in &triplets {
            assert!(
                t.head < num_entities && t.tail < num_entities && t.relation < num_relations,
                "triplet {t:?} out of range"
            );
            if t.head < num_items {
                item_neighbors[t.head].push((t.relation, t.tail));
            }
        }
        KnowledgeGraph {
            num_items,
            num_entities,
            num_relations,
            triplets,
            item_neighbors,
            entity_tokens,
            relation_tokens,
        }
    }

    /// Same entities and relations, different triplets.
    pub fn with_triplets(&self, triplets: Vec<Triplet>) -> Self {
        Self::new(
            self.entity_tokens.clone(),
            self.relation_tokens.clone(),
            self.num_items,
            triplets,
        )
    }

    /// A graph with the items of `graph` as its only entities.
    pub fn empty_for(graph: &InteractionGraph) -> Self {
        Self::new(graph.item_tokens.clone(), Vec::new(), graph.num_items, Vec::new())
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.triplets {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entity_tokens[t.head], self.relation_tokens[t.relation], self.entity_tokens[t.tail]
            )?;
        }
        Ok(())
    }
}

/// Parses `head<TAB>relation<TAB>tail` lines against the item table of
/// `graph`. With `strict_linking`, every head must be a known item token.
pub fn parse_kg<R: BufRead>(reader: R, graph: &InteractionGraph, strict_linking: bool) -> Result<KnowledgeGraph> {
    let mut entities: HashMap<String, usize> = HashMap::new();
    let mut entity_tokens = graph.item_tokens.clone();
    for (id, tok) in entity_tokens.iter().enumerate() {
        entities.insert(tok.clone(), id);
    }
    let mut relations = HashMap::new();
    let mut relation_tokens = Vec::new();
    let mut triplets = Vec::new();
    for (line_no, line) in content_lines(reader) {
        let line = line?;
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if strict_linking && entities.get(fields[0]).is_none_or(|&id| id >= graph.num_items) {
            return Err(Error::Link {
                line: line_no,
                token: fields[0].to_string(),
            });
        }
        let head = intern(&mut entities, &mut entity_tokens, fields[0]);
        let relation = intern(&mut relations, &mut relation_tokens, fields[1]);
        let tail = intern(&mut entities, &mut entity_tokens, fields[2]);
        triplets.push(Triplet { head, relation, tail });
    }
    Ok(KnowledgeGraph::new(entity_tokens, relation_tokens, graph.num_items, triplets))
}

/// Drops every user with fewer than `min_interactions` edges. Items are never
/// removed, so one pass reaches the fixed point.
pub fn filter_low_frequency(edges: &[(usize, usize)], min_interactions: usize) -> Vec<(usize, usize)> {
    if min_interactions == 0 {
        return edges.to_vec();
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &(u, _) in edges {
        *counts.entry(u).or_default() += 1;
    }
    edges
        .iter()
        .copied()
        .filter(|(u, _)| counts[u] >= min_interactions)
        .collect()
}

/// Disjoint train/validation/test edge lists plus per-user membership.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub seed: u64,
    pub train: Vec<(usize, usize)>,
    pub valid: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    /// Indices into the edge list the split was drawn from.
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub train_by_user: Vec<Vec<usize>>,
    pub valid_by_user: Vec<Vec<usize>>,
    pub test_by_user: Vec<Vec<usize>>,
}

impl SplitDataset {
    pub fn from_indices(
        edges: &[(usize, usize)],
        num_users: usize,
        seed: u64,
        train_idx: Vec<usize>,
        valid_idx: Vec<usize>,
        test_idx: Vec<usize>,
    ) -> Result<Self> {
        let mut used = vec![false; edges.len()];
        let mut collect = |idx: &[usize]| -> Result<(Vec<(usize, usize)>, Vec<Vec<usize>>)> {
            let mut list = Vec::with_capacity(idx.len());
            let mut by_user = vec![Vec::new(); num_users];
            for &k in idx {
                let &(u, i) = edges
                    .get(k)
                    .ok_or_else(|| Error::Data(format!("split index {k} out of range")))?;
                if std::mem::replace(&mut used[k], true) {
                    return Err(Error::Data(format!("edge {k} appears in two splits")));
                }
                list.push((u, i));
                by_user[u].push(i);
            }
            by_user.iter_mut().for_each(|v| v.sort_unstable());
            Ok((list, by_user))
        };
        let (train, train_by_user) = collect(&train_idx)?;
        let (valid, valid_by_user) = collect(&valid_idx)?;
        let (test, test_by_user) = collect(&test_idx)?;
        Ok(SplitDataset {
            seed,
            train,
            valid,
            test,
            train_idx,
            valid_idx,
            test_idx,
            train_by_user,
            valid_by_user,
            test_by_user,
        })
    }

    pub fn num_users(&self) -> usize {
        self.train_by_user.len()
    }

    /// Text manifest: seed plus edge indices per split.
    pub fn write_manifest<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        writeln!(w, "# dcgl split manifest")?;
        writeln!(w, "seed={}", self.seed)?;
        writeln!(w, "train={}", join(&self.train_idx))?;
        writeln!(w, "valid={}", join(&self.valid_idx))?;
        writeln!(w, "test={}", join(&self.test_idx))?;
        Ok(())
    }

    pub fn read_manifest<R: BufRead>(reader: R, edges: &[(usize, usize)], num_users: usize) -> Result<Self> {
        let mut seed = None;
        let mut parts: [Option<Vec<usize>>; 3] = [None, None, None];
        for (line_no, line) in content_lines(reader) {
            let line = line?;
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "expected key=value".into(),
            })?;
            let parse_list = |s: &str| -> Result<Vec<usize>> {
                s.split(',')
                    .filter(|t| !t.is_empty())
                    .map(|t| {
                        t.trim().parse().map_err(|_| Error::Parse {
                            line: line_no,
                            msg: format!("bad edge index {t:?}"),
                        })
                    })
                    .collect()
            };
            match key.trim() {
                "seed" => {
                    seed = Some(value.trim().parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: "bad seed".into(),
                    })?)
                }
                "train" => parts[0] = Some(parse_list(value)?),
                "valid" => parts[1] = Some(parse_list(value)?),
                "test" => parts[2] = Some(parse_list(value)?),
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unknown manifest key {other:?}"),
                    })
                }
            }
        }
        let [train, valid, test] = parts;
        let missing = || Error::Data("split manifest is missing a section".into());
        Self::from_indices(
            edges,
            num_users,
            seed.ok_or_else(missing)?,
            train.ok_or_else(missing)?,
            valid.ok_or_else(missing)?,
            test.ok_or_else(missing)?,
        )
    }
}

/// Per-user random split. Each split gets `⌊r·n⌋` of a user's `n` edges and
/// the remainder goes to train; users with fewer than 3 edges keep all of
/// them in train.
pub fn split_interactions(edges: &[(usize, usize)], ratios: (u32, u32, u32), seed: u64) -> SplitDataset {
    assert!(ratios.0 > 0 && ratios.1 > 0 && ratios.2 > 0, "split ratios must be positive");
    let num_users = edges.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); num_users];
    for (k, &(u, _)) in edges.iter().enumerate() {
        per_user[u].push(k);
    }
    let total = (ratios.0 + ratios.1 + ratios.2) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for idx in per_user.iter_mut() {
        let n = idx.len();
        if n < 3 {
            train.extend_from_slice(idx);
            continue;
        }
        idx.shuffle(&mut rng);
        let n_valid = n * ratios.1 as usize / total;
        let n_test = n * ratios.2 as usize / total;
        let n_train = n - n_valid - n_test;
        train.extend_from_slice(&idx[..n_train]);
        valid.extend_from_slice(&idx[n_train..n_train + n_valid]);
        test.extend_from_slice(&idx[n_train + n_valid..]);
    }
    SplitDataset::from_indices(edges, num_users, seed, train, valid, test).expect("split indices are disjoint by construction")
}

/// `φ(freq) = ln(1 + freq) / ln(1 + max freq)`; all zeros when the maximum is 0.
pub fn log_normalized(counts: &[usize]) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![0.0; counts.len()];
    }
    let denom = (max as f64).ln_1p();
    counts.iter().map(|&c| (c as f64).ln_1p() / denom).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyFeatures {
    pub user_counts: Vec<usize>,
    pub item_counts: Vec<usize>,
    pub user_phi: Vec<f64>,
    pub item_phi: Vec<f64>,
}

/// Counts interactions on `train_edges` only.
pub fn frequency_features(graph: &InteractionGraph, train_edges: &[(usize, usize)]) -> FrequencyFeatures {
    let mut user_counts = vec![0usize; graph.num_users];
    let mut item_counts = vec![0usize; graph.num_items];
    for &(u, i) in train_edges {
        user_counts[u] += 1;
        item_counts[i] += 1;
    }
    FrequencyFeatures {
        user_phi: log_normalized(&user_counts),
        item_phi: log_normalized(&item_counts),
        user_counts,
        item_counts,
    }
}

pub const EMBEDDING_MAGIC: &[u8; 8] = b"DCGLEMB1";

/// Raw semantic vectors keyed by entity id (ids are those of the sidecar
/// `id_map.tsv`).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbeddingFile {
    pub dim: usize,
    pub entries: Vec<(u32, Vec<f32>)>,
}

impl SemanticEmbeddingFile {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (id, v) in &self.entries {
            assert_eq!(v.len(), self.dim, "embedding dimension drift");
            w.write_all(&id.to_le_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(Error::Data("embedding file has a bad magic header".into()));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let count = next_u32(&mut r)? as usize;
        let dim = next_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut buf = vec![0u8; 4 * dim];
        for _ in 0..count {
            let id = next_u32(&mut r)?;
            r.read_exact(&mut buf)?;
            let v = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((id, v));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Data(format!("{} trailing bytes in embedding file", rest.len())));
        }
        Ok(SemanticEmbeddingFile { dim, entries })
    }

    /// Dense `[num_entities × dim]` matrix aligned to the knowledge graph's
    /// entity table. Entities absent from the file are zero rows; their count
    /// is returned.
    pub fn to_entity_matrix(&self, id_map: &[(String, u32)], kg: &KnowledgeGraph) -> (Array2<f64>, usize) {
        let token_of: HashMap<u32, &str> = id_map.iter().map(|(t, id)| (*id, t.as_str())).collect();
        let entity_of: HashMap<&str, usize> = kg
            .entity_tokens
            .iter()
            .enumerate()
            .map(|(k, t)| (t.as_str(), k))
            .collect();
        let mut out = Array2::zeros((kg.num_entities, self.dim));
        let mut filled = vec![false; kg.num_entities];
        for (id, v) in &self.entries {
            let Some(&e) = token_of.get(id).and_then(|t| entity_of.get(t)) else {
                continue;
            };
            filled[e] = true;
            for (dst, &x) in out.row_mut(e).iter_mut().zip(v) {
                *dst = x as f64;
            }
        }
        let missing = filled.iter().filter(|f| !**f).count();
        if missing > 0 {
            log::warn!("{missing} entities have no semantic embedding; using zero vectors");
        }
        (out, missing)
    }
}

pub fn write_id_map<W: Write>(mut w: W, id_map: &[(String, u32)]) -> Result<()> {
    for (tok, id) in id_map {
        writeln!(w, "{tok}\t{id}")?;
    }
    Ok(())
}

pub fn read_id_map<R: BufRead>(reader: R) -> Result<Vec<(String, u32)>> {
    let mut out = Vec::new();
    for (line_no, line) in content_lines(reader) {
        let line = line?;
        let (tok, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "expected token<TAB>id".into(),
        })?;
        let id = id.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad id {id:?}"),
        })?;
        out.push((tok.to_string(), id));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Attribute (non-item) entities; the knowledge graph holds
    /// `num_items + num_entities` entities in total.
    pub num_entities: usize,
    pub num_relations: usize,
    pub popularity_exponent: f64,
    pub latent_dim: usize,
    pub semantic_dim: usize,
    pub semantic_noise_by_frequency: bool,
    /// Multiplies every semantic vector, noise included.
    pub semantic_scale: f64,
    pub min_user_interactions: usize,
    pub max_user_interactions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 200,
            num_items: 300,
            num_entities: 60,
            num_relations: 4,
            popularity_exponent: 1.2,
            latent_dim: 8,
            semantic_dim: 32,
            semantic_noise_by_frequency: false,
            semantic_scale: 0.2,
            min_user_interactions: 10,
            max_user_interactions: 60,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("num_entities", self.num_entities),
            ("num_relations", self.num_relations),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in counts {
            if v < 2 {
                return Err(Error::Config(format!("{name} must be at least 2")));
            }
        }
        if !(self.popularity_exponent > 0.0) {
            return Err(Error::Config("popularity_exponent must be positive".into()));
        }
        if !(self.semantic_scale > 0.0 && self.semantic_scale.is_finite()) {
            return Err(Error::Config("semantic_scale must be positive".into()));
        }
        if self.semantic_dim < self.latent_dim {
            return Err(Error::Config("semantic_dim must be at least latent_dim".into()));
        }
        if self.min_user_interactions == 0 || self.min_user_interactions > self.max_user_interactions {
            return Err(Error::Config("need 0 < min_user_interactions <= max_user_interactions".into()));
        }
        if self.max_user_interactions > self.num_items {
            return Err(Error::Config("max_user_interactions exceeds num_items".into()));
        }
        Ok(())
    }
}

/// Everything the generator produces.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub graph: InteractionGraph,
    pub kg: KnowledgeGraph,
    pub semantic: SemanticEmbeddingFile,
    pub id_map: Vec<(String, u32)>,
    pub split: SplitDataset,
    /// Latent factor of every entity lifted into semantic space (the noise-free
    /// semantic vector).
    pub clean_semantic: Array2<f64>,
}

fn unit_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal columns (`rows × cols`, `rows ≥ cols`) by Gram-Schmidt.
fn orthonormal_basis(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Affinity sharpness between user and item factors.
const AFFINITY: f64 = 4.0;
const BASE_NOISE: f64 = 0.15;
const POPULAR_NOISE: f64 = 4.0;

/// Seeded synthetic corpus: power-law item popularity, latent-factor user
/// affinity, a knowledge graph linking items to the attribute entities
/// closest to their factors, and semantic vectors equal to the lifted
/// factors plus noise.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_dim;

    let item_factors: Vec<Vec<f64>> = (0..cfg.num_items).map(|_| unit_normal(&mut rng, k)).collect();
    let user_factors: Vec<Vec<f64>> = (0..cfg.num_users).map(|_| unit_normal(&mut rng, k)).collect();
    let attr_factors: Vec<Vec<f64>> = (0..cfg.num_entities).map(|_| unit_normal(&mut rng, k)).collect();

    let mut rank: Vec<usize> = (0..cfg.num_items).collect();
    rank.shuffle(&mut rng);
    let popularity: Vec<f64> = rank
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-cfg.popularity_exponent))
        .collect();

    // Pareto-distributed user activity clipped to the configured range.
    let mut edges = Vec::new();
    for (u, p) in user_factors.iter().enumerate() {
        let x: f64 = rng.random_range(f64::EPSILON..1.0);
        let n = ((cfg.min_user_interactions as f64) * x.powf(-1.0 / 1.2)).floor() as usize;
        let n = n.clamp(cfg.min_user_interactions, cfg.max_user_interactions);
        let weights: Vec<f64> = item_factors
            .iter()
            .zip(&popularity)
            .map(|(v, w)| w * (AFFINITY * dot(p, v)).exp())
            .collect();
        let picked = rand::seq::index::sample_weighted(&mut rng, cfg.num_items, |i| weights[i], n)
            .map_err(|e| Error::Sampling(e.to_string()))?;
        let mut picked: Vec<usize> = picked.into_iter().collect();
        picked.sort_unstable();
        edges.extend(picked.into_iter().map(|i| (u, i)));
    }
    let graph = InteractionGraph::from_edges(cfg.num_users, cfg.num_items, &edges);

    // Each attribute entity belongs to one relation; items link, per relation,
    // to the attribute entity whose factor is most aligned with theirs.
    let mut triplets = Vec::new();
    for (i, v) in item_factors.iter().enumerate() {
        for r in 0..cfg.num_relations {
            let best = (0..cfg.num_entities)
                .filter(|e| e % cfg.num_relations == r)
                .map(|e| (e, dot(v, &attr_factors[e])))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((e, _)) = best {
                triplets.push(Triplet {
                    head: i,
                    relation: r,
                    tail: cfg.num_items + e,
                });
            }
        }
    }
    let entity_tokens: Vec<String> = graph
        .item_tokens
        .iter()
        .cloned()
        .chain((0..cfg.num_entities).map(|e| format!("e{e}")))
        .collect();
    let relation_tokens = (0..cfg.num_relations).map(|r| format!("r{r}")).collect();
    let kg = KnowledgeGraph::new(entity_tokens, relation_tokens, cfg.num_items, triplets);

    let basis = orthonormal_basis(&mut rng, cfg.semantic_dim, k);
    let lift = |f: &[f64]| -> Vec<f64> {
        (0..cfg.semantic_dim)
            .map(|row| basis.iter().zip(f).map(|(col, x)| col[row] * x).sum())
            .collect()
    };
    let item_phi = log_normalized(&graph.item_adj.iter().map(Vec::len).collect::<Vec<_>>());
    let mut clean_semantic = Array2::zeros((kg.num_entities, cfg.semantic_dim));
    let mut entries = Vec::with_capacity(kg.num_entities);
    for e in 0..kg.num_entities {
        let (factor, noise) = if e < cfg.num_items {
            let extra = if cfg.semantic_noise_by_frequency {
                POPULAR_NOISE * item_phi[e]
            } else {
                0.0
            };
            (&item_factors[e], BASE_NOISE + extra)
        } else {
            (&attr_factors[e - cfg.num_items], BASE_NOISE)
        };
        let clean: Vec<f64> = lift(factor).into_iter().map(|x| x * cfg.semantic_scale).collect();
        let scale = cfg.semantic_scale * noise / (cfg.semantic_dim as f64).sqrt();
        let noisy: Vec<f32> = clean
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (x + scale * z) as f32
            })
            .collect();
        clean_semantic.row_mut(e).assign(&ndarray::Array1::from(clean));
        entries.push((e as u32, noisy));
    }
    let semantic = SemanticEmbeddingFile {
        dim: cfg.semantic_dim,
        entries,
    };
    let id_map = kg
        .entity_tokens
        .iter()
        .enumerate()
        .map(|(e, t)| (t.clone(), e as u32))
        .collect();
    let split = split_interactions(&graph.edges, (7, 1, 2), cfg.seed.wrapping_add(1));
    Ok(SyntheticData {
        graph,
        kg,
        semantic,
        id_map,
        split,
        clean_semantic,
    })
}

/// File names inside a dataset directory.
pub struct DataPaths {
    pub interactions: PathBuf,
    pub kg: PathBuf,
    pub embeddings: PathBuf,
    pub id_map: PathBuf,
    pub split: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DataPaths {
            interactions: dir.join("interactions.tsv"),
            kg: dir.join("kg.tsv"),
            embeddings: dir.join("semantic.emb"),
            id_map: dir.join("id_map.tsv"),
            split: dir.join("split.txt"),
        }
    }
}

impl SyntheticData {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let p = DataPaths::in_dir(dir);
        let create = |path: &Path| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(path)?)) };
        self.graph.write_tsv(create(&p.interactions)?)?;
        self.kg.write_tsv(create(&p.kg)?)?;
        self.semantic.write(create(&p.embeddings)?)?;
        write_id_map(create(&p.id_map)?, &self.id_map)?;
        self.split.write_manifest(create(&p.split)?)?;
        Ok(())
    }
}

/// Loaded, filtered, split data ready for training.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub graph: InteractionGraph,
    pub kg: KnowledgeGraph,
    pub split: SplitDataset,
    pub features: FrequencyFeatures,
    /// `[num_entities × d_llm]` raw semantic vectors, if loaded.
    pub semantic: Option<Array2<f64>>,
}

impl DataBundle {
    /// Assembles a bundle; the split must index `graph.edges`.
    pub fn new(graph: InteractionGraph, kg: KnowledgeGraph, split: SplitDataset, semantic: Option<Array2<f64>>) -> Self {
        let features = frequency_features(&graph, &split.train);
        DataBundle {
            graph,
            kg,
            split,
            features,
            semantic,
        }
    }

    pub fn from_synthetic(data: &SyntheticData) -> Self {
        let (semantic, _) = data.semantic.to_entity_matrix(&data.id_map, &data.kg);
        Self::new(data.graph.clone(), data.kg.clone(), data.split.clone(), Some(semantic))
    }

    /// Loads a dataset from explicit paths. Users below `min_interactions`
    /// are filtered before splitting; an existing split manifest is reused.
    pub fn load(paths: &DataPaths, min_interactions: usize, split_seed: u64, need_semantic: bool) -> Result<Self> {
        let open = |path: &Path| -> Result<BufReader<File>> {
            File::open(path)
                .map(BufReader::new)
                .map_err(|_| Error::MissingFile(path.to_path_buf()))
        };
        let raw = parse_interactions(open(&paths.interactions)?)?;
        let graph = raw.restrict(&filter_low_frequency(&raw.edges, min_interactions));
        let kg = if paths.kg.exists() {
            parse_kg(open(&paths.kg)?, &graph, false)?
        } else {
            KnowledgeGraph::empty_for(&graph)
        };
        let split = if paths.split.exists() {
            SplitDataset::read_manifest(open(&paths.split)?, &graph.edges, graph.num_users)?
        } else {
            split_interactions(&graph.edges, (7, 1, 2), split_seed)
        };
        let semantic = if need_semantic {
            let file = SemanticEmbeddingFile::read(open(&paths.embeddings)?)?;
            let id_map = read_id_map(open(&paths.id_map)?)?;
            Some(file.to_entity_matrix(&id_map, &kg).0)
        } else {
            None
        };
        Ok(Self::new(graph, kg, split, semantic))
    }
}
