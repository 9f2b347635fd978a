//! Full-conditional and Metropolis-Hastings update kernels.
//!
//! The closed forms below come from standard conjugacy algebra on the model
//!
//! ```text
//! H ~ N(X beta, phi1 R(phi2)),   R_il = exp(-d_il phi2)
//! Z_j | H ~ N(theta_j 1 + omega_j H, sigma2_j I)
//! ```
//!
//! and are cross-checked against grid-quadrature and dense-solve oracles in
//! the test suites. Each `*_conditional` helper exposes the exact conditional
//! parameters so those oracles can compare moments without Monte Carlo noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::model::lambda_from_alpha;
use crate::stochastics::{
    chol_factor, chol_inverse, inv_gamma_sample, ln_interval_prob, spatial_chol,
};

use super::{ChainState, FitProblem, SweepCache};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// `ln N(h; xb, phi1 * L L^T)` given the unit-sill factor `L`.
fn ln_h_density(
    h: &DVector<f64>,
    xb: &DVector<f64>,
    r_chol: &DMatrix<f64>,
    phi1: f64,
) -> f64 {
    let n = h.len() as f64;
    let mut r = h - xb;
    r_chol.solve_lower_triangular_mut(&mut r);
    let quad = r.norm_squared() / phi1;
    let ln_det_half: f64 = r_chol.diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * quad - ln_det_half - 0.5 * n * phi1.ln() - n * LN_SQRT_2PI
}

/// Shape and scale of the inverse-gamma full conditional of the sill.
pub fn phi1_conditional(state: &ChainState, prob: &FitProblem, cache: &mut SweepCache) -> (f64, f64) {
    let n = prob.n() as f64;
    let xb = &prob.data.x * &state.beta;
    let mut r = &state.h - &xb;
    cache.r_chol.solve_lower_triangular_mut(&mut r);
    let quad = r.norm_squared();
    (
        prob.priors.a_phi1 + 0.5 * n,
        prob.priors.b_phi1 + 0.5 * quad,
    )
}

/// Gibbs draw of the covariance sill from its inverse-gamma conditional.
/// No-op when the sill is pinned for identifiability.
pub fn update_phi1<R: Rng + ?Sized>(
    state: &mut ChainState,
    prob: &FitProblem,
    cache: &mut SweepCache,
    rng: &mut R,
) {
    if prob.constraints.fix_phi1 {
        return;
    }
    let (shape, scale) = phi1_conditional(state, prob, cache);
    state.phi1 = inv_gamma_sample(shape, scale, rng);
}

/// Unnormalized log conditional of the decay parameter: gamma prior plus the
/// Gaussian density of the latent field. `-inf` when the covariance cannot
/// be factored at that decay.
pub fn ln_phi2_target(state: &ChainState, prob: &FitProblem, phi2: f64) -> f64 {
    if !(phi2 > 0.0) {
        return f64::NEG_INFINITY;
    }
    let r_chol = match spatial_chol(&prob.dist, 1.0, phi2) {
        Ok(c) => c,
        Err(_) => return f64::NEG_INFINITY,
    };
    let xb = &prob.data.x * &state.beta;
    let prior = (prob.priors.a_phi2 - 1.0) * phi2.ln() - phi2 / prob.priors.b_phi2;
    prior + ln_h_density(&state.h, &xb, &r_chol, state.phi1)
}

/// Log-scale Gaussian random-walk Metropolis step on the decay parameter.
/// Returns whether the proposal was accepted.
pub fn update_phi2<R: Rng + ?Sized>(
    state: &mut ChainState,
    prob: &FitProblem,
    cache: &mut SweepCache,
    step: f64,
    rng: &mut R,
) -> Result<bool> {
    cache.sync(prob, state.phi2)?;
    let xb = &prob.data.x * &state.beta;
    let cur = state.phi2;
    let cur_ln = (prob.priors.a_phi2 - 1.0) * cur.ln() - cur / prob.priors.b_phi2
        + ln_h_density(&state.h, &xb, &cache.r_chol, state.phi1);

    let eps: f64 = rng.sample(StandardNormal);
    let prop = (cur.ln() + step * eps).exp();
    if !prop.is_finite() || prop <= 0.0 {
        return Ok(false);
    }
    let prop_chol = match spatial_chol(&prob.dist, 1.0, prop) {
        Ok(c) => c,
        Err(_) => return Ok(false),
    };
    let prop_ln = (prob.priors.a_phi2 - 1.0) * prop.ln() - prop / prob.priors.b_phi2
        + ln_h_density(&state.h, &xb, &prop_chol, state.phi1);

    // log-scale proposal carries a Jacobian factor of phi2 on each side
    let ln_accept = (prop_ln + prop.ln()) - (cur_ln + cur.ln());
    if rng.gen::<f64>().ln() < ln_accept {
        state.phi2 = prop;
        cache.install(prop, prop_chol);
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Mean and covariance of the Gaussian full conditional of `beta`:
/// precision `X' Sigma^-1 X + I / sigma2_beta`.
pub fn beta_conditional(
    state: &ChainState,
    prob: &FitProblem,
    cache: &mut SweepCache,
) -> (DVector<f64>, DMatrix<f64>) {
    let x = &prob.data.x;
    let p = x.ncols();
    let mut a = x.clone();
    cache.r_chol.solve_lower_triangular_mut(&mut a);
    let mut u = state.h.clone();
    cache.r_chol.solve_lower_triangular_mut(&mut u);
    let prec = a.transpose() * &a / state.phi1
        + DMatrix::identity(p, p) / prob.priors.sigma2_beta;
    let rhs = a.transpose() * u / state.phi1;
    let cov = chol_inverse(&chol_factor(&prec).expect("beta precision is SPD"));
    let mean = &cov * rhs;
    (mean, cov)
}

/// Gibbs draw of the regression coefficients.
pub fn update_beta<R: Rng + ?Sized>(
    state: &mut ChainState,
    prob: &FitProblem,
    cache: &mut SweepCache,
    rng: &mut R,
) {
    let x = &prob.data.x;
    let p = x.ncols();
    let mut a = x.clone();
    cache.r_chol.solve_lower_triangular_mut(&mut a);
    let mut u = state.h.clone();
    cache.r_chol.solve_lower_triangular_mut(&mut u);
    let prec = a.transpose() * &a / state.phi1
        + DMatrix::identity(p, p) / prob.priors.sigma2_beta;
    let rhs = a.transpose() * u / state.phi1;
    let lp = chol_factor(&prec).expect("beta precision is SPD");
    let mut mean = rhs;
    lp.solve_lower_triangular_mut(&mut mean);
    lp.tr_solve_lower_triangular_mut(&mut mean);
    let mut eta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    lp.tr_solve_lower_triangular_mut(&mut eta);
    state.beta = mean + eta;
}

/// Mean and covariance of the Gaussian full conditional of the latent field:
/// precision `Sigma^-1 + (sum_j omega_j^2 / sigma2_j) I`.
pub fn h_conditional(
    state: &ChainState,
    prob: &FitProblem,
    cache: &mut SweepCache,
) -> (DVector<f64>, DMatrix<f64>) {
    let (b, prec) = h_canonical(state, prob, cache);
    let cov = chol_inverse(&chol_factor(&prec).expect("H precision is SPD"));
    let mean = &cov * b;
    (mean, cov)
}

/// Canonical parameters (linear term, precision matrix) of the `H`
/// conditional.
fn h_canonical(
    state: &ChainState,
    prob: &FitProblem,
    cache: &mut SweepCache,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = prob.n();
    let xb = &prob.data.x * &state.beta;
    let mut b = xb;
    cache.r_chol.solve_lower_triangular_mut(&mut b);
    cache.r_chol.tr_solve_lower_triangular_mut(&mut b);
    b /= state.phi1;
    let mut c = 0.0;
    for j in 0..prob.n_metrics() {
        let w = state.omega[j];
        let s2 = state.sigma2[j];
        c += w * w / s2;
        let scale = w / s2;
        for i in 0..n {
            b[i] += scale * (state.z[(i, j)] - state.theta[j]);
        }
    }
    let mut prec = cache.r_inverse() / state.phi1;
    for i in 0..n {
        prec[(i, i)] += c;
    }
    (b, prec)
}

/// Gibbs draw of the latent field from its Gaussian full conditional.
pub fn update_h<R: Rng + ?Sized>(
    state: &mut ChainState,
    prob: &FitProblem,
    cache: &mut SweepCache,
    rng: &mut R,
) -> Result<()> {
    let (b, prec) = h_canonical(state, prob, cache);
    let lp = chol_factor(&prec)?;
    let mut mean = b;
    lp.solve_lower_triangular_mut(&mut mean);
    lp.tr_solve_lower_triangular_mut(&mut mean);
    let mut eta = DVector::from_fn(prob.n(), |_, _| rng.sample::<f64, _>(StandardNormal));
    lp.tr_solve_lower_triangular_mut(&mut eta);
    state.h = mean + eta;
    Ok(())
}

/// Mean and covariance of the bivariate normal conditional of
/// `(theta_j, omega_j)` for a non-reference metric: the regression of `Z_j`
/// on `[1, H]` with noise `sigma2_j` and independent normal priors.
pub fn theta_omega_conditional(
    state: &ChainState,
    prob: &FitProblem,
    j: usize,
) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = prob.n() as f64;
    let s2 = state.sigma2[j];
    let h = &state.h;
    let sh: f64 = h.sum();
    let shh: f64 = h.norm_squared();
    let z = state.z.column(j);
    let sz: f64 = z.sum();
    let szh: f64 = z.dot(h);

    let p11 = n / s2 + 1.0 / prob.priors.sigma2_theta;
    let p12 = sh / s2;
    let p22 = shh / s2 + 1.0 / prob.priors.sigma2_omega;
    let r1 = sz / s2;
    let r2 = szh / s2;

    let det = p11 * p22 - p12 * p12;
    let cov = [[p22 / det, -p12 / det], [-p12 / det, p11 / det]];
    let mean = [
        cov[0][0] * r1 + cov[0][1] * r2,
        cov[1][0] * r1 + cov[1][1] * r2,
    ];
    (mean, cov)
}

/// Mean and variance of the scalar `theta_j` conditional when `omega_j` is
/// pinned at 1 (the reference loading metric).
pub fn theta_conditional_reference(
    state: &ChainState,
    prob: &FitProblem,
    j: usize,
) -> (f64, f64) {
    let n = prob.n() as f64;
    let s2 = state.sigma2[j];
    let w = state.omega[j];
    let resid: f64 = (0..prob.n())
        .map(|i| state.z[(i, j)] - w * state.h[i])
        .sum();
    let prec = n / s2 + 1.0 / prob.priors.sigma2_theta;
    (resid / s2 / prec, 1.0 / prec)
}

/// Block Gibbs draw of `(theta_j, omega_j)` per metric; the reference
/// loading metric gets a scalar `theta` draw with `omega` held at 1.
pub fn update_theta_omega<R: Rng + ?Sized>(
    state: &mut ChainState,
    prob: &FitProblem,
    rng: &mut R,
) {
    for j in 0..prob.n_metrics() {
        if j == prob.constraints.reference_loading_metric {
            let (mean, var) = theta_conditional_reference(state, prob, j);
            state.theta[j] = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
            continue;
        }
        let n = prob.n() as f64;
        let s2 = state.sigma2[j];
        let sh: f64 = state.h.sum();
        let shh: f64 = state.h.norm_squared();
        let z = state.z.column(j);
        let sz: f64 = z.sum();
        let szh: f64 = z.dot(&state.h);

        let p11 = n / s2 + 1.0 / prob.priors.sigma2_theta;
        let p12 = sh / s2;
        let p22 = shh / s2 + 1.0 / prob.priors.sigma2_omega;
        // 2x2 Cholesky of the precision
        let l11 = p11.sqrt();
        let l21 = p12 / l11;
        let l22 = (p22 - l21 * l21).sqrt();
        // mean = prec^-1 rhs by forward/back substitution
        let r1 = sz / s2;
        let r2 = szh / s2;
        let y1 = r1 / l11;
        let y2 = (r2 - l21 * y1) / l22;
        let m2 = y2 / l22;
        let m1 = (y1 - l21 * m2) / l11;
        // draw = mean + L^-T eta
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let d2 = e2 / l22;
        let d1 = (e1 - l21 * d2) / l11;
        state.theta[j] = m1 + d1;
        state.omega[j] = m2 + d2;
    }
}

/// Shape and scale of the inverse-gamma conditional of `sigma2_j`.
pub fn sigma2_conditional(state: &ChainState, prob: &FitProblem, j: usize) -> (f64, f64) {
    let n = prob.n() as f64;
    let rss: f64 = (0..prob.n())
        .map(|i| {
            let r = state.z[(i, j)] - state.theta[j] - state.omega[j] * state.h[i];
            r * r
        })
        .sum();
    (prob.priors.a_z + 0.5 * n, prob.priors.b_z + 0.5 * rss)
}

/// Gibbs draw of each free metric variance; pinned metrics are untouched.
pub fn update_sigma2<R: Rng + ?Sized>(state: &mut ChainState, prob: &FitProblem, rng: &mut R) {
    for j in 0..prob.n_metrics() {
        if prob.constraints.sigma2_is_fixed(j, &prob.metrics) {
            continue;
        }
        let (shape, scale) = sigma2_conditional(state, prob, j);
        state.sigma2[j] = inv_gamma_sample(shape, scale, rng);
    }
}

/// Unnormalized log conditional of the threshold increments for set `s`:
/// normal prior on `alpha` plus the ordinal likelihood with the latent
/// responses integrated out (the marginal interval probabilities).
pub fn ln_alpha_target(
    state: &ChainState,
    prob: &FitProblem,
    s: usize,
    alpha: &DVector<f64>,
) -> f64 {
    let mut r = alpha - prob.priors.alpha_mean_vector(prob.k);
    prob.alpha_prior_chol.solve_lower_triangular_mut(&mut r);
    let mut total = -0.5 * r.norm_squared();

    let lambda = lambda_from_alpha(alpha.as_slice());
    for &j in &prob.metrics_of_set(s) {
        let sigma = state.sigma2[j].sqrt();
        let theta = state.theta[j];
        let omega = state.omega[j];
        for i in 0..prob.n() {
            let y = prob.data.y[(i, j)] as usize;
            let mu = theta + omega * state.h[i];
            let lo = (lambda[y - 1] - mu) / sigma;
            let hi = (lambda[y] - mu) / sigma;
            total += ln_interval_prob(lo, hi);
            if total == f64::NEG_INFINITY {
                return total;
            }
        }
    }
    total
}

/// Joint Gaussian random-walk Metropolis step on the threshold increments of
/// set `s`. The exp transform keeps every accepted threshold vector strictly
/// increasing. Returns whether the proposal was accepted.
pub fn update_thresholds<R: Rng + ?Sized>(
    state: &mut ChainState,
    prob: &FitProblem,
    s: usize,
    step: f64,
    rng: &mut R,
) -> bool {
    let cur = state.alpha[s].clone();
    let prop = DVector::from_fn(cur.len(), |i, _| {
        cur[i] + step * rng.sample::<f64, _>(StandardNormal)
    });
    let cur_ln = ln_alpha_target(state, prob, s, &cur);
    let prop_ln = ln_alpha_target(state, prob, s, &prop);
    if rng.gen::<f64>().ln() < prop_ln - cur_ln {
        state.set_alpha(s, prop);
        true
    } else {
        false
    }
}

/// Refresh every latent ordinal response from its truncated normal
/// conditional; continuous columns are the observed data and never change.
pub fn update_z<R: Rng + ?Sized>(state: &mut ChainState, prob: &FitProblem, rng: &mut R) {
    for &j in &prob.ordinal {
        let lambda = state.lambda[prob.threshold_set(j)].clone();
        let sigma2 = state.sigma2[j];
        let theta = state.theta[j];
        let omega = state.omega[j];
        for i in 0..prob.n() {
            let y = prob.data.y[(i, j)] as usize;
            let mu = theta + omega * state.h[i];
            state.z[(i, j)] = crate::stochastics::truncated_normal_sample(
                mu,
                sigma2,
                lambda[y - 1],
                lambda[y],
                rng,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Constraints, MetricSpec, ObservationSet, PriorConfig};
    use crate::sampler::{chain_rng, init_state, tests::tiny_problem};
    use approx::assert_relative_eq;

    /// Problem whose sites are so far apart that R is the identity.
    fn independent_problem(n: usize, priors: PriorConfig) -> FitProblem {
        let metrics = vec![MetricSpec::ordinal("a", 5)];
        let coords = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1e8 * i as f64 } else { 0.0 });
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let y = DMatrix::from_fn(n, 1, |i, _| (i % 5 + 1) as f64);
        let raw = ObservationSet {
            site_ids: (0..n).map(|i| format!("s{i}")).collect(),
            coords,
            x,
            covariate_names: vec!["c1".into()],
            y,
            standardization: None,
        };
        let (data, _) = crate::model::validate_dataset(raw, &metrics).unwrap();
        let constraints = Constraints::default_for(&metrics).unwrap();
        FitProblem::new(data, metrics, priors, constraints).unwrap()
    }

    #[test]
    fn phi1_conditional_zero_residual() {
        let mut prob = independent_problem(4, PriorConfig::default());
        prob.constraints.fix_phi1 = false;
        let mut rng = chain_rng(1, 0);
        let mut state = init_state(&prob, &mut rng);
        state.beta = DVector::from_vec(vec![0.7]);
        state.h = &prob.data.x * &state.beta; // H = X beta exactly
        let mut cache = SweepCache::new(&prob, state.phi2).unwrap();
        let (shape, scale) = phi1_conditional(&state, &prob, &mut cache);
        assert_relative_eq!(shape, 3.0, epsilon = 1e-12);
        assert_relative_eq!(scale, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn phi1_conditional_known_rss() {
        let mut prob = independent_problem(4, PriorConfig::default());
        prob.constraints.fix_phi1 = false;
        let mut rng = chain_rng(1, 0);
        let mut state = init_state(&prob, &mut rng);
        state.beta = DVector::zeros(1);
        // residual sum of squares 2 against R = I
        state.h = DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0]);
        let mut cache = SweepCache::new(&prob, state.phi2).unwrap();
        let (shape, scale) = phi1_conditional(&state, &prob, &mut cache);
        assert_relative_eq!(shape, 3.0, epsilon = 1e-12);
        assert_relative_eq!(scale, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn phi1_draws_match_conditional_mean() {
        let mut prob = independent_problem(4, PriorConfig::default());
        prob.constraints.fix_phi1 = false;
        let mut rng = chain_rng(2, 0);
        let mut state = init_state(&prob, &mut rng);
        state.beta = DVector::zeros(1);
        state.h = DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let mut cache = SweepCache::new(&prob, state.phi2).unwrap();
        let (shape, scale) = phi1_conditional(&state, &prob, &mut cache);
        let expect = scale / (shape - 1.0);
        let mut sum = 0.0;
        let n = 100_000;
        for _ in 0..n {
            update_phi1(&mut state, &prob, &mut cache, &mut rng);
            sum += state.phi1;
        }
        let emp = sum / n as f64;
        assert!(
            (emp - expect).abs() < 0.02 * expect,
            "phi1 mean {emp} vs {expect}"
        );
    }

    #[test]
    fn beta_ols_limit() {
        // Sigma -> I, flat prior: posterior mean approaches the OLS slope.
        let mut priors = PriorConfig::default();
        priors.sigma2_beta = 1e8;
        let prob = independent_problem(12, priors);
        let mut rng = chain_rng(3, 0);
        let mut state = init_state(&prob, &mut rng);
        state.h = DVector::from_fn(12, |i, _| 2.0 * prob.data.x[(i, 0)] + ((i * 7 % 5) as f64) * 0.1);
        let mut cache = SweepCache::new(&prob, state.phi2).unwrap();
        let (mean, _) = beta_conditional(&state, &prob, &mut cache);
        let x = prob.data.x.column(0);
        let ols = x.dot(&state.h) / x.norm_squared();
        assert!((mean[0] - ols).abs() < 1e-3, "{} vs {}", mean[0], ols);
    }

    #[test]
    fn beta_zero_field_zero_mean() {
        let prob = independent_problem(8, PriorConfig::default());
        let mut rng = chain_rng(4, 0);
        let mut state = init_state(&prob, &mut rng);
        state.h = DVector::zeros(8);
        let mut cache = SweepCache::new(&prob, state.phi2).unwrap();
        let (mean, _) = beta_conditional(&state, &prob, &mut cache);
        assert_relative_eq!(mean[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn beta_prior_only_when_no_covariate_signal() {
        // X identically zero: conditional reverts to the N(0, sigma2_beta I) prior.
        let metrics = vec![MetricSpec::ordinal("a", 5)];
        let n = 6;
        let data = ObservationSet {
            site_ids: (0..n).map(|i| format!("s{i}")).collect(),
            coords: DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1e8 * i as f64 } else { 0.0 }),
            x: DMatrix::zeros(n, 1),
            covariate_names: vec!["c1".into()],
            y: DMatrix::from_fn(n, 1, |i, _| (i % 5 + 1) as f64),
            standardization: Some(crate::model::Standardization {
                means: vec![0.0],
                sds: vec![1.0],
            }),
        };
        let constraints = Constraints::default_for(&metrics).unwrap();
        let prob = FitProblem::new(data, metrics, PriorConfig::default(), constraints).unwrap();
        let mut rng = chain_rng(5, 0);
        let state = init_state(&prob, &mut rng);
        let mut cache = SweepCache::new(&prob, state.phi2).unwrap();
        let (mean, cov) = beta_conditional(&state, &prob, &mut cache);
        assert_relative_eq!(mean[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(cov[(0, 0)], prob.priors.sigma2_beta, epsilon = 1e-6);
    }

    #[test]
    fn h_conditional_prior_when_loadings_zero() {
        let prob = tiny_problem(5, 21);
        let mut rng = chain_rng(6, 0);
        let mut state = init_state(&prob, &mut rng);
        state.omega = DVector::zeros(2);
        let mut cache = SweepCache::new(&prob, state.phi2).unwrap();
        let (mean, cov) = h_conditional(&state, &prob, &mut cache);
        let xb = &prob.data.x * &state.beta;
        let mut sigma = crate::stochastics::exp_covariance(&prob.dist, state.phi1, state.phi2);
        for i in 0..5 {
            sigma[(i, i)] += 1e-10 * state.phi1;
        }
        assert_relative_eq!(mean, xb, epsilon = 1e-8);
        assert_relative_eq!(cov, sigma, epsilon = 1e-6);
    }

    #[test]
    fn h_conditional_data_dominant_limit() {
        let prob = independent_problem(5, PriorConfig::default());
        let mut rng = chain_rng(7, 0);
        let mut state = init_state(&prob, &mut rng);
        state.sigma2[0] = 1e-10;
        state.omega[0] = 1.0;
        state.theta[0] = 0.4;
        let mut cache = SweepCache::new(&prob, state.phi2).unwrap();
        let (mean, _) = h_conditional(&state, &prob, &mut cache);
        for i in 0..5 {
            let expect = (state.z[(i, 0)] - state.theta[0]) / state.omega[0];
            assert!((mean[i] - expect).abs() < 1e-4, "{} vs {expect}", mean[i]);
        }
    }

    #[test]
    fn h_conditional_matches_dense_solve_oracle() {
        let prob = tiny_problem(4, 33);
        let mut rng = chain_rng(8, 0);
        let mut state = init_state(&prob, &mut rng);
        state.phi2 = 2.5;
        let mut cache = SweepCache::new(&prob, state.phi2).unwrap();
        let (mean, cov) = h_conditional(&state, &prob, &mut cache);

        // independent dense-solve route: invert Sigma directly with nalgebra
        let mut sigma = crate::stochastics::exp_covariance(&prob.dist, state.phi1, state.phi2);
        for i in 0..4 {
            sigma[(i, i)] += 1e-10 * state.phi1;
        }
        let sigma_inv = sigma.try_inverse().unwrap();
        let mut c = 0.0;
        let mut lin = &sigma_inv * (&prob.data.x * &state.beta);
        for j in 0..2 {
            c += state.omega[j] * state.omega[j] / state.sigma2[j];
            for i in 0..4 {
                lin[i] += state.omega[j] / state.sigma2[j] * (state.z[(i, j)] - state.theta[j]);
            }
        }
        let prec = sigma_inv + DMatrix::identity(4, 4) * c;
        let cov_oracle = prec.try_inverse().unwrap();
        let mean_oracle = &cov_oracle * lin;
        assert_relative_eq!(mean, mean_oracle, epsilon = 1e-10);
        assert_relative_eq!(cov, cov_oracle, epsilon = 1e-10);
    }

    #[test]
    fn theta_omega_zero_field() {
        let prob = tiny_problem(7, 40);
        let mut rng = chain_rng(9, 0);
        let mut state = init_state(&prob, &mut rng);
        state.h = DVector::zeros(7);
        let j = 1; // non-reference metric
        let ([mt, mw], cov) = theta_omega_conditional(&state, &prob, j);
        // omega conditional collapses to its prior
        assert_relative_eq!(mw, 0.0, epsilon = 1e-12);
        assert_relative_eq!(cov[1][1], prob.priors.sigma2_omega, epsilon = 1e-9);
        // theta shrinkage formula
        let n = 7.0;
        let s2 = state.sigma2[j];
        let zbar = state.z.column(j).sum() / n;
        let expect = (n / s2) * zbar / (n / s2 + 1.0 / prob.priors.sigma2_theta);
        assert_relative_eq!(mt, expect, epsilon = 1e-10);
    }

    #[test]
    fn theta_omega_flat_prior_matches_ols() {
        let prob = {
            let mut priors = PriorConfig::default();
            priors.sigma2_theta = 1e10;
            priors.sigma2_omega = 1e10;
            let mut p = tiny_problem(9, 50);
            p.priors = priors;
            p
        };
        let mut rng = chain_rng(10, 0);
        let mut state = init_state(&prob, &mut rng);
        state.h = DVector::from_fn(9, |i, _| (i as f64 * 0.7).sin());
        let j = 1;
        let ([mt, mw], _) = theta_omega_conditional(&state, &prob, j);
        // two-column least squares on [1, H]
        let n = 9.0;
        let sh = state.h.sum();
        let shh = state.h.norm_squared();
        let z = state.z.column(j);
        let sz = z.sum();
        let szh = z.dot(&state.h);
        let det = n * shh - sh * sh;
        let ols_t = (shh * sz - sh * szh) / det;
        let ols_w = (n * szh - sh * sz) / det;
        assert!((mt - ols_t).abs() < 1e-6);
        assert!((mw - ols_w).abs() < 1e-6);
    }

    #[test]
    fn reference_loading_never_moves() {
        let prob = tiny_problem(6, 60);
        let mut rng = chain_rng(11, 0);
        let mut state = init_state(&prob, &mut rng);
        for _ in 0..10_000 {
            update_theta_omega(&mut state, &prob, &mut rng);
        }
        assert_eq!(state.omega[prob.constraints.reference_loading_metric], 1.0);
    }

    #[test]
    fn sigma2_conditional_examples() {
        let prob = tiny_problem(4, 70);
        let mut rng = chain_rng(12, 0);
        let mut state = init_state(&prob, &mut rng);
        let j = 1;
        // zero residuals
        state.theta[j] = 0.0;
        state.omega[j] = 1.0;
        for i in 0..4 {
            state.z[(i, j)] = state.h[i];
        }
        let (shape, scale) = sigma2_conditional(&state, &prob, j);
        assert_relative_eq!(shape, 3.0);
        assert_relative_eq!(scale, 1.0, epsilon = 1e-12);
        // residual sum of squares 2
        state.z[(0, j)] += 1.0;
        state.z[(1, j)] -= 1.0;
        let (_, scale) = sigma2_conditional(&state, &prob, j);
        assert_relative_eq!(scale, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn reference_sigma2_stays_fixed() {
        let prob = tiny_problem(6, 80);
        let mut rng = chain_rng(13, 0);
        let mut state = init_state(&prob, &mut rng);
        for _ in 0..1000 {
            update_sigma2(&mut state, &prob, &mut rng);
        }
        assert_eq!(state.sigma2[prob.constraints.reference_ordinal_metric], 1.0);
        assert_ne!(state.sigma2[1], 1.0);
    }

    #[test]
    fn threshold_proposal_equal_to_current_accepts() {
        let prob = tiny_problem(6, 90);
        let mut rng = chain_rng(14, 0);
        let mut state = init_state(&prob, &mut rng);
        let before = state.alpha[0].clone();
        let accepted = update_thresholds(&mut state, &prob, 0, 0.0, &mut rng);
        assert!(accepted);
        assert_eq!(state.alpha[0], before);
    }

    #[test]
    fn accepted_thresholds_stay_increasing() {
        let prob = tiny_problem(8, 91);
        let mut rng = chain_rng(15, 0);
        let mut state = init_state(&prob, &mut rng);
        for _ in 0..500 {
            update_thresholds(&mut state, &prob, 0, 0.2, &mut rng);
            let lam = &state.lambda[0];
            for w in lam[1..lam.len() - 1].windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    #[test]
    fn z_draws_respect_intervals_and_continuous_untouched() {
        let metrics = vec![
            MetricSpec::ordinal("o1", 5),
            MetricSpec::continuous("c1"),
        ];
        let n = 10;
        let mut rng0 = chain_rng(16, 0);
        use rand::Rng as _;
        let raw = ObservationSet {
            site_ids: (0..n).map(|i| format!("s{i}")).collect(),
            coords: DMatrix::from_fn(n, 2, |_, _| rng0.gen::<f64>() * 2.0),
            x: DMatrix::from_fn(n, 1, |i, _| i as f64),
            covariate_names: vec!["c1".into()],
            y: DMatrix::from_fn(n, 2, |i, j| {
                if j == 0 {
                    (i % 5 + 1) as f64
                } else {
                    (i as f64 * 0.3).cos()
                }
            }),
            standardization: None,
        };
        let (data, _) = crate::model::validate_dataset(raw, &metrics).unwrap();
        let constraints = Constraints::default_for(&metrics).unwrap();
        let prob = FitProblem::new(data, metrics, PriorConfig::default(), constraints).unwrap();
        let mut rng = chain_rng(17, 0);
        let mut state = init_state(&prob, &mut rng);
        let y_before: Vec<f64> = (0..n).map(|i| state.z[(i, 1)]).collect();
        for _ in 0..200 {
            update_z(&mut state, &prob, &mut rng);
            state.check_invariants(&prob).unwrap();
        }
        for i in 0..n {
            assert_eq!(state.z[(i, 1)], y_before[i]); // bitwise frozen
        }
    }

    #[test]
    fn phi2_proposal_noop_keeps_value() {
        let prob = tiny_problem(6, 95);
        let mut rng = chain_rng(18, 0);
        let mut state = init_state(&prob, &mut rng);
        let mut cache = SweepCache::new(&prob, state.phi2).unwrap();
        let before = state.phi2;
        // step 0: proposal equals current value, must always accept
        let accepted = update_phi2(&mut state, &prob, &mut cache, 0.0, &mut rng).unwrap();
        assert!(accepted);
        assert_eq!(state.phi2, before);
    }
}
