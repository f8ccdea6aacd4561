//! k-NN manifold metrics (precision, recall, density, coverage) and the
//! Fréchet distance between Gaussian fits of two feature sets.
//!
//! Distances are Euclidean on the raw features; normalize beforehand if the
//! columns have different scales.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;

/// Dense N×D matrix of finite reals, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn from_flat(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Validation("feature dimension must be >= 1".into()));
        }
        if data.len() != n * d {
            return Err(Error::Validation(format!("{} values for a {n}x{d} matrix", data.len())));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("non-finite value in row {}", i / d + 1)));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::Validation(format!("row {} has {} columns, expected {d}", i + 1, rows[i].len())));
        }
        Self::from_flat(rows.len(), d, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d)
    }

    /// Applies `f` to every row.
    pub fn map_rows(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = self.rows().map(f).collect();
        Self::from_rows(&rows)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_k(x: &FeatureSet, k: usize, what: &str) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if x.len() <= k {
        return Err(Error::Validation(format!(
            "{what} set has {} rows; k = {k} needs at least {}",
            x.len(),
            k + 1
        )));
    }
    Ok(())
}

/// Distance from each point to its k-th nearest other point.
pub fn knn_radii(x: &FeatureSet, k: usize) -> Result<Vec<f64>> {
    check_k(x, k, "feature")?;
    Ok((0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..x.len())
                .filter(|&j| j != i)
                .map(|j| distance(x.row(i), x.row(j)))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ManifoldMetrics {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

impl ManifoldMetrics {
    pub fn as_array(&self) -> [f64; 4] {
        [self.precision, self.recall, self.density, self.coverage]
    }

    pub fn average(&self) -> f64 {
        self.as_array().iter().sum::<f64>() / 4.0
    }
}

/// Precision, recall, density and coverage of `fake` against `real`.
pub fn precision_recall_density_coverage(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<ManifoldMetrics> {
    check_k(real, k, "real")?;
    check_k(fake, k, "fake")?;
    if real.dim() != fake.dim() {
        return Err(Error::Validation(format!(
            "real features have dimension {}, fake {}",
            real.dim(),
            fake.dim()
        )));
    }
    let real_r = knn_radii(real, k)?;
    let fake_r = knn_radii(fake, k)?;

    // d[j][i] = distance(fake_j, real_i)
    let dist: Vec<Vec<f64>> = fake
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|f| real.rows().map(|r| distance(r, f)).collect())
        .collect();

    let mut precise = 0usize;
    let mut inside = 0usize;
    let mut recalled = vec![false; real.len()];
    let mut covered = vec![false; real.len()];
    for (j, row) in dist.iter().enumerate() {
        let mut any = false;
        for (i, &d) in row.iter().enumerate() {
            if d <= real_r[i] {
                any = true;
                inside += 1;
                covered[i] = true;
            }
            if d <= fake_r[j] {
                recalled[i] = true;
            }
        }
        precise += usize::from(any);
    }
    let nr = real.len() as f64;
    let nf = fake.len() as f64;
    Ok(ManifoldMetrics {
        precision: precise as f64 / nf,
        recall: recalled.iter().filter(|&&b| b).count() as f64 / nr,
        density: inside as f64 / (k as f64 * nf),
        coverage: covered.iter().filter(|&&b| b).count() as f64 / nr,
    })
}

fn gaussian_fit(x: &FeatureSet) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.len() < 2 {
        return Err(Error::Validation(format!("need at least 2 rows to fit a Gaussian, got {}", x.len())));
    }
    let m = DMatrix::from_row_slice(x.len(), x.dim(), &x.data);
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (x.len() as f64 - 1.0);
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to the two sets.
///
/// The trace of `(Σ1 Σ2)^½` is taken as the trace of `(√Σ1 Σ2 √Σ1)^½`,
/// which has the same eigenvalues and stays symmetric.
pub fn frechet_distance(real: &FeatureSet, fake: &FeatureSet) -> Result<f64> {
    if real.dim() != fake.dim() {
        return Err(Error::Validation(format!(
            "real features have dimension {}, fake {}",
            real.dim(),
            fake.dim()
        )));
    }
    let (mu1, s1) = gaussian_fit(real)?;
    let (mu2, s2) = gaussian_fit(fake)?;
    let root1 = psd_sqrt(&s1);
    let inner = &root1 * &s2 * &root1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_covmean: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let fd = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_covmean;
    Ok(fd.max(0.0))
}

fn round2(x: f64) -> f64 {
    (x * 100.0 + 1e-9).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureRow {
    pub label: String,
    pub condition: String,
    pub metrics: ManifoldMetrics,
    /// Mean of the four metrics, rounded to two decimals.
    pub average: f64,
    /// Relative drop of `average` from the reference condition, in whole
    /// percent. `None` on the reference row.
    pub drop_percent: Option<f64>,
}

impl FeatureRow {
    /// A row without a comparison condition.
    pub fn reference(label: &str, condition: &str, metrics: ManifoldMetrics) -> Self {
        Self {
            label: label.to_owned(),
            condition: condition.to_owned(),
            metrics,
            average: round2(metrics.average()),
            drop_percent: None,
        }
    }
}

/// Table of metric rows for two conditions (e.g. `test` and `test-zs`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureReport {
    pub conditions: [String; 2],
    pub rows: Vec<FeatureRow>,
}

/// Builds per-label rows for a reference and a comparison condition.
///
/// Averages are reported to two decimals and the drop is computed from those
/// reported averages, then rounded to a whole percent.
pub fn summarize_feature_report(
    conditions: [&str; 2],
    entries: &[(&str, ManifoldMetrics, ManifoldMetrics)],
) -> FeatureReport {
    let mut rows = Vec::with_capacity(entries.len() * 2);
    for (label, a, b) in entries {
        let avg_a = round2(a.average());
        let avg_b = round2(b.average());
        let drop = if avg_a == 0.0 {
            0.0
        } else {
            (100.0 * (avg_a - avg_b) / avg_a + 1e-9).round()
        };
        rows.push(FeatureRow::reference(label, conditions[0], *a));
        rows.push(FeatureRow {
            label: label.to_string(),
            condition: conditions[1].to_owned(),
            metrics: *b,
            average: avg_b,
            drop_percent: Some(drop),
        });
    }
    FeatureReport {
        conditions: [conditions[0].to_owned(), conditions[1].to_owned()],
        rows,
    }
}
