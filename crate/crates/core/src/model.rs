//! Domain types and dataset validation.
//!
//! A dataset is a set of point-referenced sites with a covariate matrix `X`
//! and `J` mixed-type responses `Y`. Ordinal responses take values in
//! `{1..K}` and are generated by thresholding a latent continuous variable:
//! category `k` corresponds to the interval `(lambda[k-1], lambda[k]]` of a
//! threshold vector with `lambda[0] = -inf`, `lambda[1] = 0`, and
//! `lambda[K] = +inf`. Continuous responses are their own latent value.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a response column maps to its latent continuous variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Ordinal,
    Continuous,
}

/// Declaration of one response metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub kind: MetricKind,
    /// Number of ordered categories; required for ordinal metrics.
    pub categories: Option<usize>,
}

impl MetricSpec {
    pub fn ordinal(name: impl Into<String>, categories: usize) -> Self {
        MetricSpec {
            name: name.into(),
            kind: MetricKind::Ordinal,
            categories: Some(categories),
        }
    }

    pub fn continuous(name: impl Into<String>) -> Self {
        MetricSpec {
            name: name.into(),
            kind: MetricKind::Continuous,
            categories: None,
        }
    }

    pub fn is_ordinal(&self) -> bool {
        self.kind == MetricKind::Ordinal
    }
}

/// Indices of the ordinal metrics, in declaration order.
pub fn ordinal_indices(metrics: &[MetricSpec]) -> Vec<usize> {
    metrics
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_ordinal())
        .map(|(j, _)| j)
        .collect()
}

/// The shared category count `K`. Errors if no ordinal metric exists or the
/// counts differ (shared-threshold mode requires a common `K`).
pub fn shared_categories(metrics: &[MetricSpec]) -> Result<usize> {
    let mut k: Option<usize> = None;
    for m in metrics {
        if !m.is_ordinal() {
            continue;
        }
        let kj = m.categories.ok_or_else(|| {
            Error::InvalidConfig(format!("ordinal metric `{}` is missing `categories`", m.name))
        })?;
        if kj < 2 {
            return Err(Error::InvalidConfig(format!(
                "ordinal metric `{}` needs at least 2 categories",
                m.name
            )));
        }
        match k {
            None => k = Some(kj),
            Some(k0) if k0 != kj => {
                return Err(Error::InvalidConfig(
                    "all ordinal metrics must share the same category count".into(),
                ))
            }
            _ => {}
        }
    }
    k.ok_or_else(|| Error::InvalidConfig("at least one ordinal metric is required".into()))
}

/// Per-covariate means and scales recorded at validation time and reused to
/// standardize prediction-time covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    /// Apply the recorded transform to a covariate matrix.
    pub fn apply(&self, x: &mut DMatrix<f64>) {
        for j in 0..x.ncols() {
            for i in 0..x.nrows() {
                x[(i, j)] = (x[(i, j)] - self.means[j]) / self.sds[j];
            }
        }
    }
}

/// Point-referenced sites with covariates and mixed responses.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub site_ids: Vec<String>,
    /// n x 2 planar coordinates.
    pub coords: DMatrix<f64>,
    /// n x p covariates; standardized after validation.
    pub x: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    /// n x J responses; ordinal cells hold integers in [1, K].
    pub y: DMatrix<f64>,
    /// Set by `validate_dataset`.
    pub standardization: Option<Standardization>,
}

impl ObservationSet {
    pub fn n(&self) -> usize {
        self.site_ids.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_metrics(&self) -> usize {
        self.y.ncols()
    }

    pub fn response_column(&self, j: usize) -> DVector<f64> {
        self.y.column(j).into_owned()
    }
}

/// Prior hyperparameters. Defaults follow the standard vague choices:
/// inverse-gamma(1,1) on the free metric variances and on the covariance
/// sill, gamma(2,2) in the shape/scale parameterization (mean 4) on the
/// decay, variance 100 normals on the regression and loading parameters,
/// and N(0, 100 I) on the threshold reparameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub a_z: f64,
    pub b_z: f64,
    pub sigma2_beta: f64,
    pub sigma2_theta: f64,
    pub sigma2_omega: f64,
    pub a_phi1: f64,
    pub b_phi1: f64,
    pub a_phi2: f64,
    pub b_phi2: f64,
    /// Mean of the threshold-increment parameters (length K-2); zeros if
    /// omitted.
    pub alpha_mean: Option<Vec<f64>>,
    /// Covariance of the threshold-increment parameters; `alpha_cov_scale x
    /// identity` unless a full matrix is given.
    pub alpha_cov: Option<Vec<Vec<f64>>>,
    pub alpha_cov_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            a_z: 1.0,
            b_z: 1.0,
            sigma2_beta: 100.0,
            sigma2_theta: 100.0,
            sigma2_omega: 100.0,
            a_phi1: 1.0,
            b_phi1: 1.0,
            a_phi2: 2.0,
            b_phi2: 2.0,
            alpha_mean: None,
            alpha_cov: None,
            alpha_cov_scale: 100.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let scalars = [
            ("a_z", self.a_z),
            ("b_z", self.b_z),
            ("sigma2_beta", self.sigma2_beta),
            ("sigma2_theta", self.sigma2_theta),
            ("sigma2_omega", self.sigma2_omega),
            ("a_phi1", self.a_phi1),
            ("b_phi1", self.b_phi1),
            ("a_phi2", self.a_phi2),
            ("b_phi2", self.b_phi2),
            ("alpha_cov_scale", self.alpha_cov_scale),
        ];
        for (name, v) in scalars {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "prior hyperparameter `{name}` must be strictly positive, got {v}"
                )));
            }
        }
        let dim = k.saturating_sub(2);
        if let Some(m) = &self.alpha_mean {
            if m.len() != dim {
                return Err(Error::InvalidConfig(format!(
                    "alpha_mean has length {}, expected K-2 = {dim}",
                    m.len()
                )));
            }
        }
        if let Some(a) = &self.alpha_cov {
            if a.len() != dim || a.iter().any(|row| row.len() != dim) {
                return Err(Error::InvalidConfig(format!(
                    "alpha_cov must be a {dim} x {dim} matrix"
                )));
            }
            let mat = self.alpha_cov_matrix(k);
            if (mat.clone() - mat.transpose()).norm() > 1e-10 * mat.norm().max(1.0) {
                return Err(Error::InvalidConfig("alpha_cov must be symmetric".into()));
            }
            if dim > 0 && mat.clone().cholesky().is_none() {
                return Err(Error::InvalidConfig(
                    "alpha_cov must be positive definite".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn alpha_mean_vector(&self, k: usize) -> DVector<f64> {
        let dim = k.saturating_sub(2);
        match &self.alpha_mean {
            Some(m) => DVector::from_vec(m.clone()),
            None => DVector::zeros(dim),
        }
    }

    pub fn alpha_cov_matrix(&self, k: usize) -> DMatrix<f64> {
        let dim = k.saturating_sub(2);
        match &self.alpha_cov {
            Some(rows) => DMatrix::from_fn(dim, dim, |i, j| rows[i][j]),
            None => DMatrix::identity(dim, dim) * self.alpha_cov_scale,
        }
    }
}

/// Threshold handling: one shared vector for all ordinal metrics (default),
/// or one per metric (which forces every ordinal variance to 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Shared,
    PerMetric,
}

/// Identifiability constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    /// Metric whose latent variance is pinned to 1 (shared-threshold mode).
    pub reference_ordinal_metric: usize,
    /// Metric whose factor loading is pinned to 1.
    pub reference_loading_metric: usize,
    /// Pin the covariance sill to 1; required when every metric is ordinal.
    pub fix_phi1: bool,
    pub threshold_mode: ThresholdMode,
}

impl Constraints {
    /// Defaults: first ordinal metric anchors the variance, the first metric
    /// anchors the loading, and the sill is fixed exactly when there are no
    /// continuous metrics.
    pub fn default_for(metrics: &[MetricSpec]) -> Result<Self> {
        let ord = ordinal_indices(metrics);
        if ord.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one ordinal metric is required".into(),
            ));
        }
        let all_ordinal = ord.len() == metrics.len();
        Ok(Constraints {
            reference_ordinal_metric: ord[0],
            reference_loading_metric: 0,
            fix_phi1: all_ordinal,
            threshold_mode: ThresholdMode::Shared,
        })
    }

    pub fn validate(&self, metrics: &[MetricSpec]) -> Result<()> {
        let j = metrics.len();
        if self.reference_ordinal_metric >= j || self.reference_loading_metric >= j {
            return Err(Error::InvalidConfig(
                "constraint reference metric index out of range".into(),
            ));
        }
        if !metrics[self.reference_ordinal_metric].is_ordinal() {
            return Err(Error::InvalidConfig(
                "reference_ordinal_metric must point at an ordinal metric".into(),
            ));
        }
        let all_ordinal = metrics.iter().all(|m| m.is_ordinal());
        if all_ordinal && !self.fix_phi1 {
            return Err(Error::InvalidConfig(
                "phi1 must be fixed when every metric is ordinal".into(),
            ));
        }
        Ok(())
    }

    /// Whether `sigma2[j]` is fixed at 1.
    pub fn sigma2_is_fixed(&self, j: usize, metrics: &[MetricSpec]) -> bool {
        match self.threshold_mode {
            ThresholdMode::Shared => j == self.reference_ordinal_metric,
            ThresholdMode::PerMetric => metrics[j].is_ordinal(),
        }
    }
}

/// Full threshold vector `[-inf, 0, interior.., +inf]` of length `K + 1`,
/// derived from the `K - 2` unconstrained increments `alpha` through
/// `lambda[k] = sum_{i<=k} exp(alpha_i)`.
pub fn lambda_from_alpha(alpha: &[f64]) -> Vec<f64> {
    let k = alpha.len() + 2;
    let mut lambda = Vec::with_capacity(k + 1);
    lambda.push(f64::NEG_INFINITY);
    lambda.push(0.0);
    let mut acc = 0.0;
    for &a in alpha {
        acc += a.exp();
        lambda.push(acc);
    }
    lambda.push(f64::INFINITY);
    lambda
}

/// Inverse of [`lambda_from_alpha`]: takes the full threshold vector and
/// returns the `K - 2` increments on the log scale.
pub fn alpha_from_lambda(lambda: &[f64]) -> Vec<f64> {
    let k = lambda.len() - 1;
    debug_assert!(lambda[0] == f64::NEG_INFINITY && lambda[k] == f64::INFINITY);
    debug_assert!(lambda[1] == 0.0);
    (2..k).map(|i| (lambda[i] - lambda[i - 1]).ln()).collect()
}

/// Category of a latent value: the `k` with `lambda[k-1] < z <= lambda[k]`.
pub fn map_to_ordinal(z: f64, lambda: &[f64]) -> usize {
    let k = lambda.len() - 1;
    for cat in 1..=k {
        if z <= lambda[cat] {
            return cat;
        }
    }
    k
}

/// A validation finding that does not block the fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationWarning(pub String);

impl std::fmt::Display for ValidationWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Validate a raw dataset against the metric declarations and standardize
/// the covariates (sample mean 0, sample standard deviation 1 per column).
/// The standardization is recorded on the returned set so prediction-time
/// covariates can reuse it.
pub fn validate_dataset(
    mut raw: ObservationSet,
    metrics: &[MetricSpec],
) -> Result<(ObservationSet, Vec<ValidationWarning>)> {
    let n = raw.site_ids.len();
    if n < 2 {
        return Err(Error::InvalidDataset(format!(
            "need at least 2 sites, got {n}"
        )));
    }
    if raw.coords.nrows() != n || raw.x.nrows() != n || raw.y.nrows() != n {
        return Err(Error::InvalidDataset(
            "sites, coordinates, covariates and responses disagree on row count".into(),
        ));
    }
    if raw.coords.ncols() != 2 {
        return Err(Error::InvalidDataset("coordinates must be n x 2".into()));
    }
    if raw.covariate_names.len() != raw.x.ncols() {
        return Err(Error::InvalidDataset(
            "covariate names and columns disagree".into(),
        ));
    }
    if raw.y.ncols() != metrics.len() {
        return Err(Error::InvalidDataset(format!(
            "response matrix has {} columns but {} metrics are declared",
            raw.y.ncols(),
            metrics.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for id in &raw.site_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateSiteId(id.clone()));
        }
    }
    for i in 0..n {
        for c in 0..2 {
            if !raw.coords[(i, c)].is_finite() {
                return Err(Error::NonFinite {
                    column: if c == 0 { "x" } else { "y" }.into(),
                    site: raw.site_ids[i].clone(),
                });
            }
        }
        for j in 0..raw.x.ncols() {
            if !raw.x[(i, j)].is_finite() {
                return Err(Error::NonFinite {
                    column: raw.covariate_names[j].clone(),
                    site: raw.site_ids[i].clone(),
                });
            }
        }
    }
    let k = shared_categories(metrics)?;
    for (j, m) in metrics.iter().enumerate() {
        for i in 0..n {
            let v = raw.y[(i, j)];
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    column: m.name.clone(),
                    site: raw.site_ids[i].clone(),
                });
            }
            if m.is_ordinal() && (v.fract() != 0.0 || v < 1.0 || v > k as f64) {
                return Err(Error::CategoryOutOfRange {
                    site: raw.site_ids[i].clone(),
                    metric: m.name.clone(),
                    value: v,
                    k,
                });
            }
        }
    }

    let mut warnings = Vec::new();
    let ord = ordinal_indices(metrics);
    for cat in 1..=k {
        let observed = ord
            .iter()
            .any(|&j| (0..n).any(|i| raw.y[(i, j)] == cat as f64));
        if !observed {
            warnings.push(ValidationWarning(format!(
                "category {cat} is never observed in any ordinal metric; its thresholds are weakly identified"
            )));
        }
    }

    // Standardize covariates (sample sd, n-1 denominator).
    let mut means = Vec::with_capacity(raw.x.ncols());
    let mut sds = Vec::with_capacity(raw.x.ncols());
    for j in 0..raw.x.ncols() {
        let col = raw.x.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sd = var.sqrt();
        if sd <= 0.0 || !sd.is_finite() {
            return Err(Error::ZeroVarianceCovariate(raw.covariate_names[j].clone()));
        }
        means.push(mean);
        sds.push(sd);
    }
    let standardization = Standardization { means, sds };
    standardization.apply(&mut raw.x);
    raw.standardization = Some(standardization);
    Ok((raw, warnings))
}
