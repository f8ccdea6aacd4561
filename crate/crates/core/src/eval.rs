//! Triplet recall evaluation.
//!
//! Predictions are ranked into scored `(subject, predicate, object)` triplets
//! and matched greedily against ground truth. Supported settings: with or
//! without the graph constraint, optional restriction of the ground truth to
//! a triplet subset (zero-/few-shot), post-hoc predicate reweighting, and
//! box-IoU node matching for detection-based evaluation.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::model::{BoundingBox, CategoryId, PredicateId, SceneGraph, Triplet};

/// IoU a predicted box needs with its ground-truth box to count as the same node.
pub const IOU_THRESHOLD: f64 = 0.5;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub subject: usize,
    pub object: usize,
    /// One score per predicate id.
    pub scores: Vec<f64>,
}

/// Model output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedGraph {
    image_id: String,
    object_scores: Vec<Vec<f64>>,
    pairs: Vec<PairScores>,
    boxes: Option<Vec<BoundingBox>>,
}

impl PredictedGraph {
    pub fn new(
        image_id: impl Into<String>,
        object_scores: Vec<Vec<f64>>,
        pairs: Vec<PairScores>,
        boxes: Option<Vec<BoundingBox>>,
    ) -> Result<Self> {
        let n = object_scores.len();
        let width = object_scores.first().map_or(0, Vec::len);
        for (i, row) in object_scores.iter().enumerate() {
            if row.len() != width || width == 0 {
                return Err(Error::Validation(format!("object_scores[{i}] has length {}", row.len())));
            }
            if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Validation(format!("object_scores[{i}] has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Validation(format!("object_scores[{i}] sums to {sum}, not 1")));
            }
        }
        let mut seen = BTreeSet::new();
        for (k, p) in pairs.iter().enumerate() {
            if p.subject >= n || p.object >= n {
                return Err(Error::Validation(format!("pairs[{k}] references a node >= {n}")));
            }
            if p.subject == p.object {
                return Err(Error::Validation(format!("pairs[{k}] has subject == object")));
            }
            if !seen.insert((p.subject, p.object)) {
                return Err(Error::Validation(format!(
                    "pairs[{k}] repeats ordered pair ({}, {})",
                    p.subject, p.object
                )));
            }
            if p.scores.iter().any(|x| !x.is_finite() || !(0.0..=1.0).contains(x)) {
                return Err(Error::Validation(format!("pairs[{k}] has a score outside [0, 1]")));
            }
        }
        if let Some(b) = &boxes {
            if b.len() != n {
                return Err(Error::Validation(format!("{} boxes for {n} nodes", b.len())));
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            object_scores,
            pairs,
            boxes,
        })
    }

    /// Ground-truth labels as one-hot rows (PredCls input).
    pub fn one_hot(
        image_id: impl Into<String>,
        labels: &[CategoryId],
        num_classes: usize,
        pairs: Vec<PairScores>,
    ) -> Result<Self> {
        let rows = labels
            .iter()
            .map(|&c| {
                let mut r = vec![0.0; num_classes];
                r[c] = 1.0;
                r
            })
            .collect();
        Self::new(image_id, rows, pairs, None)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn object_scores(&self) -> &[Vec<f64>] {
        &self.object_scores
    }

    pub fn pairs(&self) -> &[PairScores] {
        &self.pairs
    }

    pub fn boxes(&self) -> Option<&[BoundingBox]> {
        self.boxes.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.object_scores.len()
    }

    /// Copy with pair scores replaced.
    pub fn with_pairs(&self, pairs: Vec<PairScores>) -> Self {
        Self {
            pairs,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankedTriplet {
    pub subject: usize,
    pub object: usize,
    pub subject_label: CategoryId,
    pub predicate: PredicateId,
    pub object_label: CategoryId,
    pub score: f64,
}

/// Index and value of the largest entry; the lowest index wins ties.
fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Multiplies every predicate score by `(1 / f_r)^x`. No renormalization.
pub fn reweight_scores(pairs: &[PairScores], freqs: &[f64], x: f64) -> Result<Vec<PairScores>> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::InvalidArgument(format!("reweight exponent {x} must be >= 0")));
    }
    if x == 0.0 {
        return Ok(pairs.to_vec());
    }
    let weights: Vec<f64> = freqs
        .iter()
        .map(|&f| if f > 0.0 { (1.0 / f).powf(x) } else { f64::INFINITY })
        .collect();
    pairs
        .iter()
        .map(|p| {
            if p.scores.len() != weights.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} predicate scores but {} frequencies",
                    p.scores.len(),
                    weights.len()
                )));
            }
            let scores = p
                .scores
                .iter()
                .zip(&weights)
                .enumerate()
                .map(|(r, (&s, &w))| match (s, w.is_finite()) {
                    (0.0, _) => Ok(0.0),
                    (_, false) => Err(Error::InvalidArgument(format!(
                        "predicate {r} has zero training frequency but a positive score"
                    ))),
                    (s, true) => Ok(s * w),
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(PairScores {
                subject: p.subject,
                object: p.object,
                scores,
            })
        })
        .collect()
}

/// Top-`k` triplets of a prediction.
///
/// Node labels are the row argmaxes of the object scores. Each ordered pair
/// contributes its argmax predicate under the graph constraint, or every
/// predicate without it. A triplet scores `subject * object * predicate`.
/// Sorted by descending score, ties by `(subject, object, predicate)`.
pub fn rank_triplets(pred: &PredictedGraph, graph_constraint: bool, k: usize) -> Vec<RankedTriplet> {
    let labels: Vec<(usize, f64)> = pred.object_scores.iter().map(|r| argmax(r)).collect();
    let mut out = Vec::new();
    for p in &pred.pairs {
        if p.scores.is_empty() {
            continue;
        }
        let (sl, ss) = labels[p.subject];
        let (ol, os) = labels[p.object];
        let mut push = |predicate: usize, s: f64| {
            out.push(RankedTriplet {
                subject: p.subject,
                object: p.object,
                subject_label: sl,
                predicate,
                object_label: ol,
                score: ss * os * s,
            })
        };
        if graph_constraint {
            let (r, s) = argmax(&p.scores);
            push(r, s);
        } else {
            for (r, &s) in p.scores.iter().enumerate() {
                push(r, s);
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.subject.cmp(&b.subject))
            .then(a.object.cmp(&b.object))
            .then(a.predicate.cmp(&b.predicate))
    });
    out.truncate(k);
    out
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Percentage of box pairs with IoU at or above [`IOU_THRESHOLD`].
pub fn iou_hit_rate(pairs: &[(BoundingBox, BoundingBox)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|(a, b)| iou(a, b) >= IOU_THRESHOLD).count();
    100.0 * hits as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Labels and predicates from GT boxes.
    SgCls,
    /// Predicates from GT boxes and labels.
    PredCls,
    /// Everything from detected boxes; nodes matched by IoU.
    SgGen,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgcls" => Ok(EvalMode::SgCls),
            "predcls" => Ok(EvalMode::PredCls),
            "sggen" | "sgdet" => Ok(EvalMode::SgGen),
            other => Err(Error::InvalidArgument(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::SgCls => "sgcls",
            EvalMode::PredCls => "predcls",
            EvalMode::SgGen => "sggen",
        })
    }
}

/// How per-image match counts become one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    /// Mean of per-image recalls.
    #[default]
    Image,
    /// Total matches over total ground-truth triplets.
    Triplet,
}

impl FromStr for Aggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Aggregate::Image),
            "triplet" => Ok(Aggregate::Triplet),
            other => Err(Error::InvalidArgument(format!("unknown aggregate {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub k: usize,
    pub mode: EvalMode,
    pub graph_constraint: bool,
    /// Keep only GT triplets whose composition is in this set.
    pub subset_filter: Option<&'a BTreeSet<Triplet>>,
    /// Reweighting exponent and per-predicate training frequencies.
    pub reweight: Option<(f64, &'a [f64])>,
    pub aggregate: Aggregate,
}

impl<'a> EvalOptions<'a> {
    pub fn new(k: usize, mode: EvalMode) -> Self {
        Self {
            k,
            mode,
            graph_constraint: true,
            subset_filter: None,
            reweight: None,
            aggregate: Aggregate::Image,
        }
    }
}

/// Match outcome for the eligible GT triplets of one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMatches {
    pub image_id: String,
    pub gt_predicates: Vec<PredicateId>,
    pub matched: Vec<bool>,
}

impl ImageMatches {
    pub fn recall(&self) -> f64 {
        self.matched.iter().filter(|&&m| m).count() as f64 / self.matched.len() as f64
    }

    fn counts_for(&self, predicate: PredicateId) -> (usize, usize) {
        let mut hit = 0;
        let mut total = 0;
        for (&p, &m) in self.gt_predicates.iter().zip(&self.matched) {
            if p == predicate {
                total += 1;
                hit += usize::from(m);
            }
        }
        (hit, total)
    }
}

fn nodes_match(mode: EvalMode, pred: &PredictedGraph, gt: &SceneGraph, p_node: usize, g_node: usize) -> bool {
    match mode {
        EvalMode::SgCls | EvalMode::PredCls => p_node == g_node,
        EvalMode::SgGen => pred
            .boxes()
            .is_some_and(|b| iou(&b[p_node], &gt.nodes()[g_node].bbox) >= IOU_THRESHOLD),
    }
}

/// Greedy matching of top-K triplets against the eligible GT triplets of one image.
pub fn match_image(pred: &PredictedGraph, gt: &SceneGraph, opts: &EvalOptions<'_>) -> Result<ImageMatches> {
    match opts.mode {
        EvalMode::SgCls | EvalMode::PredCls if pred.num_nodes() != gt.num_nodes() => {
            return Err(Error::Validation(format!(
                "prediction has {} nodes, ground truth has {}",
                pred.num_nodes(),
                gt.num_nodes()
            ))
            .for_image(gt.image_id()));
        }
        EvalMode::SgGen if pred.boxes().is_none() => {
            return Err(Error::Validation("sggen evaluation needs predicted boxes".into()).for_image(gt.image_id()));
        }
        _ => {}
    }

    let reweighted;
    let pred = match opts.reweight {
        Some((x, freqs)) => {
            reweighted = pred.with_pairs(reweight_scores(pred.pairs(), freqs, x).map_err(|e| e.for_image(gt.image_id()))?);
            &reweighted
        }
        None => pred,
    };

    let eligible: Vec<usize> = (0..gt.edges().len())
        .filter(|&k| opts.subset_filter.is_none_or(|s| s.contains(&gt.triplet_of(k))))
        .collect();
    let mut matched = vec![false; eligible.len()];
    if !eligible.is_empty() {
        for r in rank_triplets(pred, opts.graph_constraint, opts.k) {
            let hit = eligible.iter().enumerate().position(|(slot, &k)| {
                let e = &gt.edges()[k];
                !matched[slot]
                    && e.predicate == r.predicate
                    && gt.category(e.subject) == r.subject_label
                    && gt.category(e.object) == r.object_label
                    && nodes_match(opts.mode, pred, gt, r.subject, e.subject)
                    && nodes_match(opts.mode, pred, gt, r.object, e.object)
            });
            if let Some(slot) = hit {
                matched[slot] = true;
            }
        }
    }
    Ok(ImageMatches {
        image_id: gt.image_id().to_owned(),
        gt_predicates: eligible.iter().map(|&k| gt.edges()[k].predicate).collect(),
        matched,
    })
}

/// Matches every GT image that has at least one eligible triplet.
pub fn match_dataset(
    predictions: &[PredictedGraph],
    gt: &Dataset,
    opts: &EvalOptions<'_>,
) -> Result<Vec<ImageMatches>> {
    let mut by_id: HashMap<&str, &PredictedGraph> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.image_id(), p).is_some() {
            return Err(Error::Validation(format!("duplicate prediction for image {}", p.image_id())));
        }
    }
    let eligible: Vec<&SceneGraph> = gt
        .graphs
        .iter()
        .filter(|g| {
            (0..g.edges().len()).any(|k| opts.subset_filter.is_none_or(|s| s.contains(&g.triplet_of(k))))
        })
        .collect();
    let missing: Vec<String> = eligible
        .iter()
        .filter(|g| !by_id.contains_key(g.image_id()))
        .map(|g| g.image_id().to_owned())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    eligible
        .par_iter()
        .map(|g| match_image(by_id[g.image_id()], g, opts))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    /// Percentage.
    pub value: f64,
    pub images: usize,
    pub per_image: Vec<(String, f64)>,
}

fn aggregate(matches: &[ImageMatches], how: Aggregate) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    match how {
        Aggregate::Image => 100.0 * matches.iter().map(ImageMatches::recall).sum::<f64>() / matches.len() as f64,
        Aggregate::Triplet => {
            let hit: usize = matches.iter().map(|m| m.matched.iter().filter(|&&x| x).count()).sum();
            let total: usize = matches.iter().map(|m| m.matched.len()).sum();
            100.0 * hit as f64 / total as f64
        }
    }
}

/// Recall@K over images with at least one eligible GT triplet, as a percentage.
pub fn recall_at_k(predictions: &[PredictedGraph], gt: &Dataset, opts: &EvalOptions<'_>) -> Result<RecallReport> {
    let matches = match_dataset(predictions, gt, opts)?;
    Ok(recall_at_k_from_matches(&matches, opts.aggregate))
}

pub fn recall_at_k_from_matches(matches: &[ImageMatches], how: Aggregate) -> RecallReport {
    RecallReport {
        value: aggregate(matches, how),
        images: matches.len(),
        per_image: matches.iter().map(|m| (m.image_id.clone(), 100.0 * m.recall())).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanRecallReport {
    pub value: f64,
    /// Recall per predicate id; `None` for predicates absent from the GT.
    pub per_predicate: Vec<Option<f64>>,
}

/// Recall computed separately for each predicate class, then averaged
/// uniformly over the classes present in the ground truth.
pub fn mean_recall(
    predictions: &[PredictedGraph],
    gt: &Dataset,
    opts: &EvalOptions<'_>,
) -> Result<MeanRecallReport> {
    let matches = match_dataset(predictions, gt, opts)?;
    Ok(mean_recall_from_matches(&matches, gt.vocab.num_predicates(), opts.aggregate))
}

pub fn mean_recall_from_matches(matches: &[ImageMatches], num_predicates: usize, how: Aggregate) -> MeanRecallReport {
    let per_predicate: Vec<Option<f64>> = (0..num_predicates)
        .map(|r| {
            let counts: Vec<(usize, usize)> = matches
                .iter()
                .map(|m| m.counts_for(r))
                .filter(|&(_, total)| total > 0)
                .collect();
            if counts.is_empty() {
                return None;
            }
            Some(match how {
                Aggregate::Image => {
                    100.0 * counts.iter().map(|&(h, t)| h as f64 / t as f64).sum::<f64>() / counts.len() as f64
                }
                Aggregate::Triplet => {
                    let h: usize = counts.iter().map(|c| c.0).sum();
                    let t: usize = counts.iter().map(|c| c.1).sum();
                    100.0 * h as f64 / t as f64
                }
            })
        })
        .collect();
    let present: Vec<f64> = per_predicate.iter().flatten().copied().collect();
    let value = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MeanRecallReport { value, per_predicate }
}

/// Ground truth rendered as a perfect prediction (one-hot labels, GT
/// predicate scores 1, other predicates 0).
pub fn oracle_prediction(g: &SceneGraph, num_classes: usize, num_predicates: usize) -> PredictedGraph {
    let mut pairs: Vec<PairScores> = Vec::new();
    for e in g.edges() {
        match pairs.iter_mut().find(|p| p.subject == e.subject && p.object == e.object) {
            Some(p) => p.scores[e.predicate] = 1.0,
            None => {
                let mut scores = vec![0.0; num_predicates];
                scores[e.predicate] = 1.0;
                pairs.push(PairScores {
                    subject: e.subject,
                    object: e.object,
                    scores,
                });
            }
        }
    }
    let labels: Vec<CategoryId> = g.nodes().iter().map(|n| n.category).collect();
    PredictedGraph::one_hot(g.image_id(), &labels, num_classes, pairs).expect("GT graphs are valid predictions")
}
