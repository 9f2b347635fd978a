//! Posterior post-processing: prediction at new sites, site ranks, and the
//! metric-weighting correlation statistics.
//!
//! Everything here is read-only over the merged chain traces. Per-draw work
//! (kriging draws, response simulation) is embarrassingly parallel and runs
//! through `rayon` when the `parallel` feature is on; results are indexed by
//! draw, so scheduling never changes the output.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{lambda_from_alpha, map_to_ordinal, MetricKind};
use crate::sampler::{FitProblem, TraceMatrix, TraceStore};
use crate::stochastics::{
    chol_factor, cross_distance_matrix, distance_matrix, exp_covariance, COV_RIDGE,
};
use crate::summary::{average_ranks, median_ci95, quantile_sorted};

/// Unobserved locations to predict at. Covariates must already be
/// standardized with the training means and scales.
#[derive(Debug, Clone)]
pub struct NewSites {
    pub site_ids: Vec<String>,
    /// m x 2 planar coordinates.
    pub coords: DMatrix<f64>,
    /// m x p standardized covariates.
    pub x: DMatrix<f64>,
}

/// Position of every retained draw as (chain index, row), taking every
/// `thin`-th row per chain.
pub fn retained_draws(traces: &[TraceStore], thin: usize) -> Vec<(usize, usize)> {
    let thin = thin.max(1);
    let mut out = Vec::new();
    for (c, t) in traces.iter().enumerate() {
        let mut r = 0;
        while r < t.len() {
            out.push((c, r));
            r += thin;
        }
    }
    out
}

fn phi1_at(trace: &TraceStore, row: usize) -> f64 {
    if trace.phi1.is_empty() {
        1.0
    } else {
        trace.phi1[row]
    }
}

/// Draws from the posterior predictive of the mixed response and the latent
/// field at `m` new sites.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub site_ids: Vec<String>,
    /// T x m latent-field draws.
    pub h_draws: TraceMatrix,
    /// Per metric, T x m response draws. Ordinal cells hold the category as
    /// a float; continuous cells hold the latent value itself.
    pub y_draws: Vec<TraceMatrix>,
}

/// New sites closer than this to an observed site are treated as coincident
/// and take the observed site's field draw directly.
const COINCIDENT_DIST: f64 = 1e-9;

/// Conditional (kriging) draws of the latent field at the new sites, one per
/// retained draw (after `thin`ning): mean `X~ beta + S_*o S_oo^-1 (H - X
/// beta)`, covariance `S_** - S_*o S_oo^-1 S_o*`, built from each draw's
/// covariance parameters.
pub fn predict_h(
    traces: &[TraceStore],
    prob: &FitProblem,
    new: &NewSites,
    thin: usize,
    seed: u64,
) -> Result<TraceMatrix> {
    let m = new.site_ids.len();
    let n = prob.n();
    let cross = cross_distance_matrix(&new.coords, &prob.data.coords);
    let dist_new = distance_matrix(&new.coords);
    // exact-coincidence map: new site -> observed site
    let coincident: Vec<Option<usize>> = (0..m)
        .map(|i| (0..n).find(|&l| cross[(i, l)] < COINCIDENT_DIST))
        .collect();

    let draws = retained_draws(traces, thin);
    let rows = compute_rows(&draws, |chunk_rng, _, (c, r)| {
        let t = &traces[*c];
        let phi1 = phi1_at(t, *r);
        let phi2 = t.phi2[*r];
        let beta = DVector::from_column_slice(t.beta.row(*r));
        let h = DVector::from_column_slice(t.h.row(*r));

        let mut sigma_oo = exp_covariance(&prob.dist, phi1, phi2);
        for i in 0..n {
            sigma_oo[(i, i)] += COV_RIDGE * phi1;
        }
        let l_oo = chol_factor(&sigma_oo)?;
        let sigma_star_o = exp_covariance(&cross, phi1, phi2); // m x n
        let mut w = sigma_star_o.transpose(); // n x m
        l_oo.solve_lower_triangular_mut(&mut w);
        let mut u = &h - &prob.data.x * &beta;
        l_oo.solve_lower_triangular_mut(&mut u);

        let mean = &new.x * &beta + w.transpose() * u;
        let mut cond_cov = exp_covariance(&dist_new, phi1, phi2) - w.transpose() * &w;
        for i in 0..m {
            cond_cov[(i, i)] += COV_RIDGE * phi1;
        }
        let l_cond = chol_factor(&cond_cov)?;
        let eta = DVector::from_fn(m, |_, _| chunk_rng.sample::<f64, _>(StandardNormal));
        let mut draw = mean + l_cond * eta;
        for i in 0..m {
            if let Some(l) = coincident[i] {
                draw[i] = h[l];
            }
        }
        Ok(draw.as_slice().to_vec())
    }, seed)?;

    let mut out = TraceMatrix::with_capacity(m, rows.len());
    for row in &rows {
        out.push_row(row);
    }
    Ok(out)
}

/// Posterior predictive draws of every response at the new sites, one row
/// per latent-field draw: `Z~_j ~ N(theta_j + omega_j H~, sigma2_j)`, mapped
/// through that draw's thresholds for ordinal metrics.
pub fn predict_y(
    h_draws: &TraceMatrix,
    traces: &[TraceStore],
    prob: &FitProblem,
    thin: usize,
    seed: u64,
) -> Result<Vec<TraceMatrix>> {
    let m = h_draws.ncols();
    let jm = prob.n_metrics();
    let draws = retained_draws(traces, thin);
    if draws.len() != h_draws.nrows() {
        return Err(Error::InvalidDataset(
            "latent-field draws and trace thinning disagree".into(),
        ));
    }
    let dim = prob.k - 2;
    let rows = compute_rows(&draws, |chunk_rng, idx, &(c, r)| {
        let t = &traces[c];
        let h_row = h_draws.row(idx);
        let mut row = Vec::with_capacity(jm * m);
        let alpha_row = t.alpha.row(r);
        for j in 0..jm {
            let theta = t.theta.get(r, j);
            let omega = t.omega.get(r, j);
            let sigma = t.sigma2.get(r, j).sqrt();
            let lambda = if prob.metrics[j].kind == MetricKind::Ordinal {
                let s = prob.threshold_set(j);
                Some(lambda_from_alpha(&alpha_row[s * dim..(s + 1) * dim]))
            } else {
                None
            };
            for i in 0..m {
                let z = theta + omega * h_row[i] + sigma * chunk_rng.sample::<f64, _>(StandardNormal);
                row.push(match &lambda {
                    Some(lam) => map_to_ordinal(z, lam) as f64,
                    None => z,
                });
            }
        }
        Ok(row)
    }, seed.wrapping_add(0x9E3779B97F4A7C15))?;

    let mut per_metric: Vec<TraceMatrix> = (0..jm)
        .map(|_| TraceMatrix::with_capacity(m, rows.len()))
        .collect();
    for row in &rows {
        for j in 0..jm {
            per_metric[j].push_row(&row[j * m..(j + 1) * m]);
        }
    }
    Ok(per_metric)
}

/// Run `f` over the draw list with a per-draw deterministic RNG, in parallel
/// when enabled. Output order always matches the draw list.
fn compute_rows<F>(
    draws: &[(usize, usize)],
    f: F,
    seed: u64,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut ChaCha8Rng, usize, &(usize, usize)) -> Result<Vec<f64>> + Sync,
{
    let task = |(i, d): (usize, &(usize, usize))| -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        f(&mut rng, i, d)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        draws.par_iter().enumerate().map(task).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        draws.iter().enumerate().map(task).collect()
    }
}

/// Per-location posterior rank summary (ascending: rank 1 = smallest field
/// value, ties get their average rank).
#[derive(Debug, Clone)]
pub struct RankSummary {
    pub median_rank: f64,
    pub lo: f64,
    pub hi: f64,
    /// `median_rank / (count + 1)`, in (0, 1).
    pub percentile: f64,
}

/// Rank the locations within every draw of the field and summarize each
/// location's rank distribution.
pub fn posterior_ranks(h_draws: &TraceMatrix) -> Vec<RankSummary> {
    let t = h_draws.nrows();
    let n = h_draws.ncols();
    assert!(t > 0, "need at least one retained draw");
    let mut per_site: Vec<Vec<f64>> = vec![Vec::with_capacity(t); n];
    for r in 0..t {
        let ranks = average_ranks(h_draws.row(r));
        for (i, rank) in ranks.into_iter().enumerate() {
            per_site[i].push(rank);
        }
    }
    per_site
        .into_iter()
        .map(|draws| {
            let (lo, med, hi) = median_ci95(&draws);
            RankSummary {
                median_rank: med,
                lo,
                hi,
                percentile: med / (n as f64 + 1.0),
            }
        })
        .collect()
}

/// Per-draw correlation statistics between each latent response and the
/// latent field, plus the overall association.
#[derive(Debug, Clone)]
pub struct CorrelationSummary {
    pub metric_names: Vec<String>,
    /// T_z x J per-metric correlations in [0, 1]; NaN marks undefined draws.
    pub r_draws: TraceMatrix,
    /// T_z x J per-metric contributions, each row summing to 1.
    pub contribution_draws: TraceMatrix,
    /// Overall association per draw.
    pub r2m_draws: Vec<f64>,
}

impl CorrelationSummary {
    /// (lo, median, hi) over the defined draws of column `j` of `mat`.
    fn col_summary(mat: &TraceMatrix, j: usize) -> (f64, f64, f64) {
        let vals: Vec<f64> = mat.column(j).into_iter().filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            return (f64::NAN, f64::NAN, f64::NAN);
        }
        median_ci95(&vals)
    }

    pub fn r_summary(&self, j: usize) -> (f64, f64, f64) {
        Self::col_summary(&self.r_draws, j)
    }

    pub fn contribution_summary(&self, j: usize) -> (f64, f64, f64) {
        Self::col_summary(&self.contribution_draws, j)
    }

    pub fn r2m_summary(&self) -> (f64, f64, f64) {
        let vals: Vec<f64> = self.r2m_draws.iter().copied().filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            return (f64::NAN, f64::NAN, f64::NAN);
        }
        median_ci95(&vals)
    }
}

/// For every stored latent-response draw, partition the sample covariance of
/// `[Z, H]` over the sites and compute each metric's correlation with the
/// field (`R_j = sqrt(cov^2 / (var_Z var_H))`), the overall association
/// `R2_M = S_HZ S_ZZ^-1 S_ZH / s_HH`, and the normalized contributions
/// `R_j / sum_l R_l`.
pub fn multiple_correlation(traces: &[TraceStore], prob: &FitProblem) -> Result<CorrelationSummary> {
    let n = prob.n();
    let jm = prob.n_metrics();
    let mut r_draws = TraceMatrix::new(jm);
    let mut contribution_draws = TraceMatrix::new(jm);
    let mut r2m_draws = Vec::new();

    for t in traces {
        for zrow in 0..t.z.nrows() {
            let retained = t.z_iters[zrow] - t.burnin;
            // assemble the n x (J+1) matrix [Z, H] for this draw
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(jm + 1);
            for j in 0..jm {
                if let Some(o) = prob.ordinal.iter().position(|&oj| oj == j) {
                    let z = &t.z.row(zrow)[o * n..(o + 1) * n];
                    cols.push(z.to_vec());
                } else {
                    cols.push(prob.data.y.column(j).iter().copied().collect());
                }
            }
            cols.push(t.h.row(retained).to_vec());

            let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
            let cov = |a: usize, b: usize| -> f64 {
                (0..n)
                    .map(|i| (cols[a][i] - means[a]) * (cols[b][i] - means[b]))
                    .sum::<f64>()
                    / (n as f64 - 1.0)
            };
            let s_hh = cov(jm, jm);
            let mut r_row = vec![f64::NAN; jm];
            for j in 0..jm {
                let v = cov(j, j);
                if v > 0.0 && s_hh > 0.0 {
                    let c = cov(j, jm);
                    r_row[j] = (c * c / (v * s_hh)).sqrt();
                }
            }
            // overall association via the J x J block
            let s_zz = DMatrix::from_fn(jm, jm, |a, b| cov(a, b));
            let s_zh = DVector::from_fn(jm, |a, _| cov(a, jm));
            let r2m = match s_zz.clone().cholesky() {
                Some(ch) if s_hh > 0.0 => {
                    let solved = ch.solve(&s_zh);
                    (s_zh.dot(&solved) / s_hh).clamp(0.0, 1.0)
                }
                _ => f64::NAN,
            };
            let sum_r: f64 = r_row.iter().sum();
            let contrib: Vec<f64> = if sum_r.is_finite() && sum_r > 0.0 {
                r_row.iter().map(|r| r / sum_r).collect()
            } else {
                vec![f64::NAN; jm]
            };
            r_draws.push_row(&r_row);
            contribution_draws.push_row(&contrib);
            r2m_draws.push(r2m);
        }
    }
    if r2m_draws.is_empty() {
        return Err(Error::InvalidDataset(
            "no stored latent-response draws; cannot compute correlations".into(),
        ));
    }
    Ok(CorrelationSummary {
        metric_names: prob.metrics.iter().map(|m| m.name.clone()).collect(),
        r_draws,
        contribution_draws,
        r2m_draws,
    })
}

/// Per-metric contribution weights from a matrix of correlation draws:
/// `w_j = R_j / sum_l R_l` per draw.
pub fn percent_contribution(r_draws: &TraceMatrix) -> TraceMatrix {
    let jm = r_draws.ncols();
    let mut out = TraceMatrix::new(jm);
    for r in 0..r_draws.nrows() {
        let row = r_draws.row(r);
        let sum: f64 = row.iter().sum();
        if sum.is_finite() && sum > 0.0 {
            let w: Vec<f64> = row.iter().map(|v| v / sum).collect();
            out.push_row(&w);
        } else {
            out.push_row(&vec![f64::NAN; jm]);
        }
    }
    out
}

/// Effective-range draws `3 / phi2` (the distance at which the exponential
/// correlation falls to 0.05 of the sill) with their posterior summary.
pub fn effective_range(phi2_draws: &[f64]) -> (Vec<f64>, (f64, f64, f64)) {
    let draws: Vec<f64> = phi2_draws.iter().map(|p| 3.0 / p).collect();
    let summary = median_ci95(&draws);
    (draws, summary)
}

/// Per-site posterior summary (2.5%, median, 97.5%) of the latent field over
/// the merged traces.
pub fn h_site_summaries(traces: &[TraceStore]) -> Vec<(f64, f64, f64)> {
    let n = traces[0].h.ncols();
    (0..n)
        .map(|i| {
            let mut vals: Vec<f64> = Vec::new();
            for t in traces {
                vals.extend(t.h.column(i));
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (
                quantile_sorted(&vals, 0.025),
                quantile_sorted(&vals, 0.5),
                quantile_sorted(&vals, 0.975),
            )
        })
        .collect()
}
