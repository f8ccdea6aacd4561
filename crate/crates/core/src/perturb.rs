//! Node-category perturbations of scene graphs.
//!
//! Four strategies replace the categories of a degree-weighted sample of
//! nodes while keeping boxes and edges fixed:
//!
//! * `rand`: uniform over all other categories.
//! * `neigh`: uniform over the top-k cosine neighbors in embedding space.
//! * `graphn`: inverse-frequency draw among categories that form known
//!   training triplets with the node's current neighborhood, α-filtered,
//!   then diversified by embedding neighbors. Sequential: each node sees the
//!   categories already written by earlier nodes.
//! * `oracle_zs`: uniform over categories that turn every incident edge into
//!   a known zero-shot triplet.
//!
//! Randomness always comes from an explicit generator. [`perturb_dataset`]
//! derives one generator per image from the image id, so results do not
//! depend on processing order or thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, EmbeddingTable};
use crate::model::{CategoryId, SceneGraph, Triplet, Vocabulary};
use crate::stats::TripletFrequencyTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rand,
    Neigh,
    #[serde(rename = "graphn")]
    GraphN,
    OracleZs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rand => "rand",
            Method::Neigh => "neigh",
            Method::GraphN => "graphn",
            Method::OracleZs => "oracle_zs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "rand" => Ok(Method::Rand),
            "neigh" => Ok(Method::Neigh),
            "graphn" => Ok(Method::GraphN),
            "oracle_zs" | "oracle" => Ok(Method::OracleZs),
            other => Err(Error::InvalidArgument(format!("unknown perturbation method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub method: Method,
    /// Fraction of nodes to perturb, in `[0, 1]`.
    pub intensity: f64,
    pub top_k: usize,
    /// GraphN frequency threshold: candidates with mean count below it are dropped.
    pub alpha: f64,
    pub master_seed: u64,
}

impl PerturbationConfig {
    /// Defaults used for the published experiments: 20% of nodes, top-k 10
    /// for `neigh` and 5 for `graphn`, α = 2.
    pub fn new(method: Method) -> Self {
        Self {
            method,
            intensity: 0.2,
            top_k: if method == Method::Neigh { 10 } else { 5 },
            alpha: 2.0,
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::InvalidArgument(format!(
                "intensity {} outside [0, 1]",
                self.intensity
            )));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::InvalidArgument(format!("alpha {} must be >= 0", self.alpha)));
        }
        if self.method == Method::Neigh && self.top_k == 0 {
            return Err(Error::InvalidArgument("neigh needs top_k >= 1".into()));
        }
        Ok(())
    }
}

/// Known zero-shot compositions, indexed for candidate lookup.
#[derive(Debug, Clone, Default)]
pub struct ZeroShotSet {
    index: TripletFrequencyTable,
}

impl ZeroShotSet {
    pub fn new(triplets: impl IntoIterator<Item = Triplet>) -> Self {
        Self {
            index: TripletFrequencyTable::from_counts(triplets.into_iter().map(|t| (t, 1))),
        }
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.index.contains(t)
    }

    pub fn len(&self) -> usize {
        self.index.distinct_triplets()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Lookup data a strategy may need. Which fields are required depends on
/// the method; see [`Resources::check`].
#[derive(Debug, Clone, Copy)]
pub struct Resources<'a> {
    pub vocab: &'a Vocabulary,
    pub embeddings: Option<&'a EmbeddingTable>,
    pub table: Option<&'a TripletFrequencyTable>,
    pub zero_shot: Option<&'a ZeroShotSet>,
}

impl<'a> Resources<'a> {
    pub fn new(vocab: &'a Vocabulary) -> Self {
        Self {
            vocab,
            embeddings: None,
            table: None,
            zero_shot: None,
        }
    }

    pub fn check(&self, cfg: &PerturbationConfig) -> Result<()> {
        cfg.validate()?;
        let need_emb = matches!(cfg.method, Method::Neigh | Method::GraphN);
        if need_emb {
            let emb = self
                .embeddings
                .ok_or_else(|| Error::InvalidArgument(format!("{} needs word embeddings", cfg.method)))?;
            if emb.len() != self.vocab.num_objects() {
                return Err(Error::InvalidArgument(format!(
                    "embedding table covers {} categories, vocabulary has {}",
                    emb.len(),
                    self.vocab.num_objects()
                )));
            }
            if cfg.top_k >= self.vocab.num_objects() {
                return Err(Error::InvalidArgument(format!(
                    "top_k {} must be below the number of categories ({})",
                    cfg.top_k,
                    self.vocab.num_objects()
                )));
            }
        }
        if cfg.method == Method::GraphN && self.table.is_none() {
            return Err(Error::InvalidArgument("graphn needs a triplet frequency table".into()));
        }
        if cfg.method == Method::OracleZs {
            match self.zero_shot {
                Some(z) if !z.is_empty() => {}
                _ => return Err(Error::InvalidArgument("oracle_zs needs a nonempty zero-shot triplet set".into())),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeChange {
    pub node: usize,
    pub old: CategoryId,
    pub new: CategoryId,
}

/// Which nodes of one graph were recategorized, and which edges that touched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub image_id: String,
    pub changes: Vec<NodeChange>,
    /// Sorted, distinct indices of edges incident to a changed node.
    pub affected_edges: Vec<usize>,
}

impl PerturbationRecord {
    fn from_changes(graph: &SceneGraph, changes: Vec<NodeChange>) -> Self {
        let changed: BTreeSet<usize> = changes.iter().map(|c| c.node).collect();
        let affected_edges = graph
            .edges()
            .iter()
            .enumerate()
            .filter(|(_, e)| changed.contains(&e.subject) || changed.contains(&e.object))
            .map(|(k, _)| k)
            .collect();
        Self {
            image_id: graph.image_id().to_owned(),
            changes,
            affected_edges,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }
}

/// Number of nodes to perturb: `max(1, round(L * n))` for `L > 0`.
pub fn perturbation_count(intensity: f64, n: usize) -> usize {
    if intensity <= 0.0 || n == 0 {
        return 0;
    }
    ((intensity * n as f64).round() as usize).clamp(1, n)
}

/// Index drawn with probability proportional to `weights`. All weights must
/// be non-negative with a positive sum.
fn weighted_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Degree-weighted node sample without replacement.
///
/// Each draw picks among the remaining nodes with probability proportional
/// to degree; once only zero-degree nodes remain, draws are uniform.
pub fn sample_nodes<R: Rng + ?Sized>(graph: &SceneGraph, intensity: f64, rng: &mut R) -> Vec<usize> {
    let count = perturbation_count(intensity, graph.num_nodes());
    let mut remaining: Vec<usize> = (0..graph.num_nodes()).collect();
    let degrees = graph.degrees();
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let weights: Vec<f64> = remaining.iter().map(|&i| degrees[i] as f64).collect();
        let slot = if weights.iter().any(|&w| w > 0.0) {
            weighted_index(&weights, rng)
        } else {
            rng.random_range(0..remaining.len())
        };
        picked.push(remaining.swap_remove(slot));
    }
    picked
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// The `k` categories most cosine-similar to `category`, excluding itself.
/// Ties are broken by ascending id.
pub fn semantic_neighbors(emb: &EmbeddingTable, category: CategoryId, k: usize) -> Result<Vec<CategoryId>> {
    if category >= emb.len() {
        return Err(Error::InvalidArgument(format!("category {category} not in embedding table")));
    }
    if k >= emb.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be below the number of categories ({})",
            emb.len()
        )));
    }
    let query = emb.vector(category);
    if query.iter().all(|x| *x == 0.0) {
        return Err(Error::InvalidArgument(format!("category {category} has a zero vector")));
    }
    let mut scored: Vec<(CategoryId, f64)> = (0..emb.len())
        .filter(|&c| c != category)
        .map(|c| (c, cosine(query, emb.vector(c))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(c, _)| c).collect())
}

pub fn perturb_rand<R: Rng + ?Sized>(
    graph: &SceneGraph,
    cfg: &PerturbationConfig,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<(SceneGraph, PerturbationRecord)> {
    let num = vocab.num_objects();
    if num < 2 {
        return Err(Error::CannotPerturb("need at least 2 object categories".into()));
    }
    let mut out = graph.clone();
    let mut changes = Vec::new();
    for node in sample_nodes(graph, cfg.intensity, rng) {
        let old = graph.category(node);
        // uniform over the other num - 1 categories
        let mut new = rng.random_range(0..num - 1);
        if new >= old {
            new += 1;
        }
        out.set_category(node, new);
        changes.push(NodeChange { node, old, new });
    }
    let record = PerturbationRecord::from_changes(&out, changes);
    Ok((out, record))
}

pub fn perturb_neigh<R: Rng + ?Sized>(
    graph: &SceneGraph,
    cfg: &PerturbationConfig,
    vocab: &Vocabulary,
    emb: &EmbeddingTable,
    rng: &mut R,
) -> Result<(SceneGraph, PerturbationRecord)> {
    if vocab.num_objects() < 2 {
        return Err(Error::CannotPerturb("need at least 2 object categories".into()));
    }
    if cfg.top_k == 0 {
        return Err(Error::InvalidArgument("neigh needs top_k >= 1".into()));
    }
    let mut out = graph.clone();
    let mut changes = Vec::new();
    for node in sample_nodes(graph, cfg.intensity, rng) {
        let old = graph.category(node);
        let neighbors = semantic_neighbors(emb, old, cfg.top_k)?;
        let new = neighbors[rng.random_range(0..neighbors.len())];
        out.set_category(node, new);
        changes.push(NodeChange { node, old, new });
    }
    let record = PerturbationRecord::from_changes(&out, changes);
    Ok((out, record))
}

/// One GraphN replacement option for a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub category: CategoryId,
    /// Mean training count over the triplets supporting this category.
    pub mean_count: f64,
    pub probability: f64,
}

/// Replacement candidates for `node` given the graph's current categories.
///
/// For each incident edge the node keeps its role and every category that
/// completes a triplet present in `table` is collected. A category supported
/// by several triplets gets the mean of their counts. The node's current
/// category is excluded, candidates with mean count below `alpha` are
/// dropped, and the rest get probability proportional to the inverse mean
/// count. Sorted by category id; empty when nothing survives.
pub fn graphn_candidates(
    graph: &SceneGraph,
    node: usize,
    table: &TripletFrequencyTable,
    alpha: f64,
) -> Result<Vec<Candidate>> {
    if node >= graph.num_nodes() {
        return Err(Error::InvalidArgument(format!(
            "node {node} out of range for graph with {} nodes",
            graph.num_nodes()
        )));
    }
    let mut support: BTreeMap<CategoryId, (u64, u64)> = BTreeMap::new();
    for e in graph.edges() {
        let options = if e.subject == node {
            table.subjects_for(e.predicate, graph.category(e.object))
        } else if e.object == node {
            table.objects_for(graph.category(e.subject), e.predicate)
        } else {
            continue;
        };
        for &(c, n) in options {
            let s = support.entry(c).or_insert((0, 0));
            s.0 += n;
            s.1 += 1;
        }
    }
    let current = graph.category(node);
    let mut out: Vec<Candidate> = support
        .into_iter()
        .filter(|&(c, _)| c != current)
        .map(|(category, (sum, cnt))| Candidate {
            category,
            mean_count: sum as f64 / cnt as f64,
            probability: 0.0,
        })
        .filter(|c| c.mean_count >= alpha)
        .collect();
    let norm: f64 = out.iter().map(|c| 1.0 / c.mean_count).sum();
    for c in &mut out {
        c.probability = (1.0 / c.mean_count) / norm;
    }
    Ok(out)
}

pub fn perturb_graphn<R: Rng + ?Sized>(
    graph: &SceneGraph,
    cfg: &PerturbationConfig,
    emb: &EmbeddingTable,
    table: &TripletFrequencyTable,
    rng: &mut R,
) -> Result<(SceneGraph, PerturbationRecord)> {
    let mut out = graph.clone();
    let mut changes = Vec::new();
    for node in sample_nodes(graph, cfg.intensity, rng) {
        let candidates = graphn_candidates(&out, node, table, cfg.alpha)?;
        if candidates.is_empty() {
            continue;
        }
        let weights: Vec<f64> = candidates.iter().map(|c| c.probability).collect();
        let anchor = candidates[weighted_index(&weights, rng)].category;
        let old = out.category(node);
        // the anchor is never the current category, so this set is nonempty
        let mut pool = vec![anchor];
        pool.extend(
            semantic_neighbors(emb, anchor, cfg.top_k)?
                .into_iter()
                .filter(|&c| c != old),
        );
        let new = pool[rng.random_range(0..pool.len())];
        out.set_category(node, new);
        changes.push(NodeChange { node, old, new });
    }
    let record = PerturbationRecord::from_changes(&out, changes);
    Ok((out, record))
}

/// Categories other than the current one that make every edge incident to
/// `node` a zero-shot triplet. Empty for isolated nodes.
pub fn oracle_candidates(graph: &SceneGraph, node: usize, zs: &ZeroShotSet) -> Vec<CategoryId> {
    let mut result: Option<BTreeSet<CategoryId>> = None;
    for e in graph.edges() {
        let options = if e.subject == node {
            zs.index.subjects_for(e.predicate, graph.category(e.object))
        } else if e.object == node {
            zs.index.objects_for(graph.category(e.subject), e.predicate)
        } else {
            continue;
        };
        let here: BTreeSet<CategoryId> = options.iter().map(|&(c, _)| c).collect();
        result = Some(match result {
            None => here,
            Some(prev) => prev.intersection(&here).copied().collect(),
        });
    }
    let current = graph.category(node);
    result
        .unwrap_or_default()
        .into_iter()
        .filter(|&c| c != current)
        .collect()
}

pub fn perturb_oracle_zs<R: Rng + ?Sized>(
    graph: &SceneGraph,
    cfg: &PerturbationConfig,
    zs: &ZeroShotSet,
    rng: &mut R,
) -> Result<(SceneGraph, PerturbationRecord)> {
    if zs.is_empty() {
        return Err(Error::InvalidArgument("zero-shot triplet set is empty".into()));
    }
    let mut out = graph.clone();
    let mut changes = Vec::new();
    for node in sample_nodes(graph, cfg.intensity, rng) {
        let candidates = oracle_candidates(&out, node, zs);
        if candidates.is_empty() {
            continue;
        }
        let old = out.category(node);
        let new = candidates[rng.random_range(0..candidates.len())];
        out.set_category(node, new);
        changes.push(NodeChange { node, old, new });
    }
    let record = PerturbationRecord::from_changes(&out, changes);
    Ok((out, record))
}

/// Applies `cfg.method` to one graph.
pub fn perturb_graph<R: Rng + ?Sized>(
    graph: &SceneGraph,
    cfg: &PerturbationConfig,
    res: &Resources<'_>,
    rng: &mut R,
) -> Result<(SceneGraph, PerturbationRecord)> {
    let missing = |what: &str| Error::InvalidArgument(format!("{} needs {what}", cfg.method));
    match cfg.method {
        Method::Rand => perturb_rand(graph, cfg, res.vocab, rng),
        Method::Neigh => perturb_neigh(
            graph,
            cfg,
            res.vocab,
            res.embeddings.ok_or_else(|| missing("word embeddings"))?,
            rng,
        ),
        Method::GraphN => perturb_graphn(
            graph,
            cfg,
            res.embeddings.ok_or_else(|| missing("word embeddings"))?,
            res.table.ok_or_else(|| missing("a triplet frequency table"))?,
            rng,
        ),
        Method::OracleZs => perturb_oracle_zs(
            graph,
            cfg,
            res.zero_shot.ok_or_else(|| missing("a zero-shot triplet set"))?,
            rng,
        ),
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Seed of the generator used for one image.
pub fn image_seed(image_id: &str, master_seed: u64) -> u64 {
    fnv1a64(image_id.as_bytes()) ^ master_seed
}

pub fn image_rng(image_id: &str, master_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(image_seed(image_id, master_seed))
}

/// Perturbs every graph with its own image-seeded generator. Output order
/// follows input order; one record per graph (possibly empty).
pub fn perturb_dataset(
    dataset: &Dataset,
    cfg: &PerturbationConfig,
    res: &Resources<'_>,
) -> Result<(Dataset, Vec<PerturbationRecord>)> {
    res.check(cfg)?;
    let results: Vec<(SceneGraph, PerturbationRecord)> = dataset
        .graphs
        .par_iter()
        .map(|g| {
            let mut rng = image_rng(g.image_id(), cfg.master_seed);
            perturb_graph(g, cfg, res, &mut rng).map_err(|e| e.for_image(g.image_id()))
        })
        .collect::<Result<_>>()?;
    let (graphs, records) = results.into_iter().unzip();
    Ok((
        Dataset {
            vocab: dataset.vocab.clone(),
            graphs,
        },
        records,
    ))
}
