//! Forward values of the training losses: node and edge cross-entropy, the
//! adversarial terms, their weighted total, and the margin-ℓ1 box loss.
//!
//! Inputs are probabilities, not logits. Callers clamp them to `[EPS, 1]`
//! (see [`clamp_probability`]); an exact zero at a target is rejected.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::BoundingBox;

pub const EPS: f64 = 1e-12;
pub const DEFAULT_GAMMA: f64 = 5.0;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(EPS, 1.0)
}

/// Probability rows with one target label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    rows: Vec<Vec<f64>>,
    targets: Vec<usize>,
}

impl ProbTable {
    pub fn new(rows: Vec<Vec<f64>>, targets: Vec<usize>) -> Result<Self> {
        if rows.len() != targets.len() {
            return Err(Error::Validation(format!(
                "{} probability rows but {} targets",
                rows.len(),
                targets.len()
            )));
        }
        for (i, (row, &t)) in rows.iter().zip(&targets).enumerate() {
            if t >= row.len() {
                return Err(Error::Validation(format!("row {i}: target {t} out of range")));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Validation(format!("row {i}: probability outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Validation(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { rows, targets })
    }

    /// `n` identical uniform rows over `classes` labels, all targeting 0.
    pub fn uniform(n: usize, classes: usize) -> Self {
        Self {
            rows: vec![vec![1.0 / classes as f64; classes]; n],
            targets: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Same probabilities, different targets.
    pub fn with_targets(&self, targets: Vec<usize>) -> Result<Self> {
        Self::new(self.rows.clone(), targets)
    }

    fn neg_log_likelihoods(&self) -> Result<impl Iterator<Item = f64> + '_> {
        if let Some(i) = self.rows.iter().zip(&self.targets).position(|(r, &t)| r[t] == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "row {i}: zero probability at the target; clamp inputs first"
            )));
        }
        Ok(self.rows.iter().zip(&self.targets).map(|(r, &t)| -r[t].ln()))
    }

    fn nll_sum(&self) -> Result<f64> {
        Ok(self.neg_log_likelihoods()?.sum())
    }
}

/// Mean negative log-likelihood of the targets.
pub fn node_loss(probs: &ProbTable) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("node loss over zero rows".into()));
    }
    Ok(probs.nll_sum()? / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeLossMode {
    /// Mean over the annotated edges of all graphs.
    MeanAnnotated,
    /// Per graph, the sum over all `n(n-1)` ordered pairs divided by
    /// `n(n-1)`; then the mean over graphs.
    #[default]
    DensityNormalized,
}

impl FromStr for EdgeLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_annotated" => Ok(EdgeLossMode::MeanAnnotated),
            "density_normalized" => Ok(EdgeLossMode::DensityNormalized),
            other => Err(Error::InvalidArgument(format!("unknown edge loss mode {other:?}"))),
        }
    }
}

/// Pair probabilities of one graph with `num_nodes` nodes. Background is
/// label 0; in density-normalized mode every ordered pair must be present.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdges {
    pub pairs: ProbTable,
    pub num_nodes: usize,
}

pub fn edge_loss(graphs: &[GraphEdges], mode: EdgeLossMode) -> Result<f64> {
    if graphs.is_empty() {
        return Err(Error::InvalidArgument("edge loss over zero graphs".into()));
    }
    match mode {
        EdgeLossMode::MeanAnnotated => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for g in graphs {
                for (nll, &t) in g.pairs.neg_log_likelihoods()?.zip(g.pairs.targets()) {
                    if t != 0 {
                        sum += nll;
                        count += 1;
                    }
                }
            }
            if count == 0 {
                return Err(Error::InvalidArgument("no annotated edges".into()));
            }
            Ok(sum / count as f64)
        }
        EdgeLossMode::DensityNormalized => {
            let mut total = 0.0;
            for (k, g) in graphs.iter().enumerate() {
                let pairs = g.num_nodes * g.num_nodes.saturating_sub(1);
                if pairs == 0 || g.pairs.len() != pairs {
                    return Err(Error::Validation(format!(
                        "graph {k}: {} pair rows for {} nodes, expected {pairs}",
                        g.pairs.len(),
                        g.num_nodes
                    )));
                }
                total += g.pairs.nll_sum()? / pairs as f64;
            }
            Ok(total / graphs.len() as f64)
        }
    }
}

/// Classification loss: node plus edge cross-entropy.
pub fn cls_loss(nodes: &ProbTable, edges: &[GraphEdges], mode: EdgeLossMode) -> Result<f64> {
    Ok(node_loss(nodes)? + edge_loss(edges, mode)?)
}

/// Reconstruction loss on perturbed graphs. Same arithmetic as
/// [`cls_loss`], with node targets set to the perturbed categories. In
/// training it updates the classifier only, not the generator.
pub fn rec_loss(nodes_perturbed: &ProbTable, edges: &[GraphEdges], mode: EdgeLossMode) -> Result<f64> {
    cls_loss(nodes_perturbed, edges, mode)
}

fn check_outputs(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument(format!("no {what} discriminator outputs")));
    }
    if xs.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
        return Err(Error::InvalidArgument(format!("{what} outputs must lie in (0, 1)")));
    }
    Ok(())
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

/// `mean(ln real) + mean(ln(1 - fake))`; never positive.
pub fn adv_d_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    check_outputs(real, "real")?;
    check_outputs(fake, "fake")?;
    Ok(mean(real.iter().map(|x| x.ln())) + mean(fake.iter().map(|x| (1.0 - x).ln())))
}

/// `mean(ln fake)`.
pub fn adv_g_loss(fake: &[f64]) -> Result<f64> {
    check_outputs(fake, "fake")?;
    Ok(mean(fake.iter().map(|x| x.ln())))
}

/// Discriminator outputs for one feature level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiscriminatorOutputs {
    pub real: Vec<f64>,
    pub fake: Vec<f64>,
}

/// Discriminator and generator totals summed over node, edge and global levels.
pub fn adv_totals(
    node: &DiscriminatorOutputs,
    edge: &DiscriminatorOutputs,
    global: &DiscriminatorOutputs,
) -> Result<(f64, f64)> {
    let mut d = 0.0;
    let mut g = 0.0;
    for level in [node, edge, global] {
        d += adv_d_loss(&level.real, &level.fake)?;
        g += adv_g_loss(&level.fake)?;
    }
    Ok((d, g))
}

/// `cls + rec - gamma * (adv_d + adv_g)`.
pub fn total_loss(cls: f64, rec: f64, adv_d: f64, adv_g: f64, gamma: f64) -> f64 {
    cls + rec - gamma * (adv_d + adv_g)
}

/// ℓ1 distance between box corners, clamped to `[0.05 S, 0.5 S]`.
pub fn box_margin_l1(pred: &BoundingBox, gt: &BoundingBox, s: f64) -> Result<f64> {
    if s.is_nan() || s <= 0.0 || !s.is_finite() {
        return Err(Error::InvalidArgument(format!("box scale must be positive, got {s}")));
    }
    let l1: f64 = pred
        .to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(l1.max(0.05 * s).min(0.5 * s))
}
