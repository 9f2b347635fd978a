//! Model evaluation: the continuous-scale "true value" for ordinal cells,
//! the standardized squared-error loss used for model comparison, and the
//! Gelman-Rubin convergence diagnostic.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::lambda_from_alpha;
use crate::sampler::{FitProblem, TraceStore};
use crate::stochastics::{norm_cdf, norm_quantile, norm_sf, norm_upper_quantile};
use crate::summary::{mean, median, sample_variance};

/// Median of `N(mu_z, sigma2_z)` restricted to the interval `(lo, hi)`: the
/// value splitting the interval's probability mass in half. Computed on the
/// survival-function scale when the interval sits in a tail. The flag is
/// true when the interval carried less than 1e-300 of mass and the midpoint
/// fallback was used.
pub fn fitted_z_hat(mu_z: f64, sigma2_z: f64, lo: f64, hi: f64) -> (f64, bool) {
    debug_assert!(lo < hi && sigma2_z > 0.0);
    let sigma = sigma2_z.sqrt();
    let a = if lo == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        (lo - mu_z) / sigma
    };
    let b = if hi == f64::INFINITY {
        f64::INFINITY
    } else {
        (hi - mu_z) / sigma
    };

    let fallback = |flag: bool| -> (f64, bool) {
        let v = if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else if lo.is_finite() {
            lo
        } else {
            hi
        };
        (v, flag)
    };

    let x = if a >= 0.0 {
        // upper tail: average the survival probabilities
        let qa = if a == f64::NEG_INFINITY { 1.0 } else { norm_sf(a) };
        let qb = if b == f64::INFINITY { 0.0 } else { norm_sf(b) };
        if qa - qb < 1e-300 {
            return fallback(true);
        }
        norm_upper_quantile(0.5 * (qa + qb))
    } else if b <= 0.0 {
        let pa = if a == f64::NEG_INFINITY { 0.0 } else { norm_cdf(a) };
        let pb = norm_cdf(b);
        if pb - pa < 1e-300 {
            return fallback(true);
        }
        norm_quantile(0.5 * (pa + pb))
    } else {
        let pa = if a == f64::NEG_INFINITY { 0.0 } else { norm_cdf(a) };
        let pb = if b == f64::INFINITY { 1.0 } else { norm_cdf(b) };
        if pb - pa < 1e-300 {
            return fallback(true);
        }
        norm_quantile(0.5 * (pa + pb))
    };
    let z = mu_z + sigma * x;
    if z > lo && z < hi {
        (z, false)
    } else {
        fallback(true)
    }
}

/// Continuous-scale "true values" for every cell, with the plug-in posterior
/// means used to build them.
#[derive(Debug, Clone)]
pub struct ZHatTable {
    /// n x J; ordinal cells hold the within-interval median, continuous
    /// cells hold the observed response.
    pub z_hat: DMatrix<f64>,
    /// n x J posterior means of `theta_j + omega_j H_i`.
    pub mu_z: DMatrix<f64>,
    /// Posterior mean of each metric variance.
    pub sigma2_z: Vec<f64>,
    /// Posterior means of the full threshold vectors, one per threshold set.
    pub lambda_mean: Vec<Vec<f64>>,
    /// Number of cells that hit the midpoint fallback.
    pub fallbacks: usize,
}

/// Build the table of Eq-style "true values": plug in the posterior means of
/// the cell mean, metric variance, and thresholds, then take the median of
/// the implied normal inside each observed category's interval.
pub fn zhat_table(traces: &[TraceStore], prob: &FitProblem) -> Result<ZHatTable> {
    if traces.is_empty() || traces.iter().all(|t| t.is_empty()) {
        return Err(Error::InvalidDataset("empty trace".into()));
    }
    let n = prob.n();
    let jm = prob.n_metrics();
    let total: usize = traces.iter().map(|t| t.len()).sum();

    let mut mu_z = DMatrix::zeros(n, jm);
    let mut sigma2_z = vec![0.0; jm];
    let dim = prob.k - 2;
    let sets = prob.n_threshold_sets();
    let mut lambda_interior_mean = vec![vec![0.0; dim]; sets];
    for t in traces {
        for r in 0..t.len() {
            let h = t.h.row(r);
            for j in 0..jm {
                let theta = t.theta.get(r, j);
                let omega = t.omega.get(r, j);
                for i in 0..n {
                    mu_z[(i, j)] += theta + omega * h[i];
                }
                sigma2_z[j] += t.sigma2.get(r, j);
            }
            let alpha = t.alpha.row(r);
            for (s, acc) in lambda_interior_mean.iter_mut().enumerate() {
                let lam = lambda_from_alpha(&alpha[s * dim..(s + 1) * dim]);
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += lam[k + 2];
                }
            }
        }
    }
    mu_z /= total as f64;
    for v in sigma2_z.iter_mut() {
        *v /= total as f64;
    }
    let lambda_mean: Vec<Vec<f64>> = lambda_interior_mean
        .into_iter()
        .map(|interior| {
            let mut lam = vec![f64::NEG_INFINITY, 0.0];
            lam.extend(interior.into_iter().map(|v| v / total as f64));
            lam.push(f64::INFINITY);
            lam
        })
        .collect();

    let mut z_hat = prob.data.y.clone();
    let mut fallbacks = 0;
    for &j in &prob.ordinal {
        let lam = &lambda_mean[prob.threshold_set(j)];
        for i in 0..n {
            let y = prob.data.y[(i, j)] as usize;
            let (v, fb) = fitted_z_hat(mu_z[(i, j)], sigma2_z[j], lam[y - 1], lam[y]);
            z_hat[(i, j)] = v;
            fallbacks += fb as usize;
        }
    }
    Ok(ZHatTable {
        z_hat,
        mu_z,
        sigma2_z,
        lambda_mean,
        fallbacks,
    })
}

/// Standardized squared-error loss per metric: the median over all stored
/// draws and locations of `(Z_ij - Zhat_ij)^2 / var(Zhat_j)`.
///
/// Ordinal metrics take `Z_ij` from the stored latent-response draws;
/// continuous metrics (whose latent response is the frozen observation) use
/// posterior-predictive draws `theta + omega H + sigma eps` at the same
/// iterations, scaled by the sample variance of the observed column.
pub fn standardized_loss(
    traces: &[TraceStore],
    prob: &FitProblem,
    zhat: &ZHatTable,
    seed: u64,
) -> Vec<f64> {
    let n = prob.n();
    let jm = prob.n_metrics();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..jm)
        .map(|j| {
            let zhat_col: Vec<f64> = (0..n).map(|i| zhat.z_hat[(i, j)]).collect();
            let denom = sample_variance(&zhat_col);
            if !(denom > 0.0) {
                return f64::NAN;
            }
            let mut losses = Vec::new();
            match prob.ordinal.iter().position(|&oj| oj == j) {
                Some(o) => {
                    for t in traces {
                        for r in 0..t.z.nrows() {
                            let zrow = &t.z.row(r)[o * n..(o + 1) * n];
                            for i in 0..n {
                                let d = zrow[i] - zhat_col[i];
                                losses.push(d * d / denom);
                            }
                        }
                    }
                }
                None => {
                    for t in traces {
                        for &iter in &t.z_iters {
                            let r = iter - t.burnin;
                            let theta = t.theta.get(r, j);
                            let omega = t.omega.get(r, j);
                            let sigma = t.sigma2.get(r, j).sqrt();
                            let h = t.h.row(r);
                            for i in 0..n {
                                let z = theta
                                    + omega * h[i]
                                    + sigma * rng.sample::<f64, _>(StandardNormal);
                                let d = z - zhat_col[i];
                                losses.push(d * d / denom);
                            }
                        }
                    }
                }
            }
            median(&losses)
        })
        .collect()
}

/// Gelman-Rubin potential scale reduction factor
/// `sqrt((W (n-1)/n + B/n) / W)` from the within-chain variance `W` and the
/// between-chain variance of means `B/n`. Chains are trimmed to the shortest
/// length. Errors with fewer than two chains.
pub fn psrf(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::NeedTwoChains);
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap();
    if n < 2 {
        return Err(Error::InvalidDataset(
            "chains too short for a scale-reduction factor".into(),
        ));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let within: f64 = mean(
        &chains
            .iter()
            .map(|c| sample_variance(&c[..n]))
            .collect::<Vec<_>>(),
    );
    let between_over_n = sample_variance(&means);
    if within <= 0.0 {
        // degenerate constant chains: identical means give 1, separated
        // means diverge
        return Ok(if between_over_n > 0.0 { f64::INFINITY } else { 1.0 });
    }
    Ok(((within * (nf - 1.0) / nf + between_over_n) / within).sqrt())
}
