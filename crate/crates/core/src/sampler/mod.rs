//! The MCMC engine.
//!
//! One sweep updates, in order: the covariance parameters (`phi1` by a
//! conjugate draw when free, `phi2` by a log-scale random-walk
//! Metropolis-Hastings step), the regression vector `beta` and the latent
//! field `H` from their Gaussian full conditionals, the metric-specific
//! `(theta, omega)` pairs and variances `sigma2` in block form, the
//! thresholds through their unconstrained reparameterization (a joint
//! random-walk step with the latent ordinal responses integrated out), and
//! finally the latent ordinal responses `Z` from truncated normals.
//!
//! Chains are independent: each owns its state and an RNG seeded as
//! `base_seed + chain_index`, so a run is reproducible regardless of how the
//! chains are scheduled.

mod updates;

pub use updates::{
    beta_conditional, h_conditional, ln_alpha_target, ln_phi2_target, phi1_conditional,
    sigma2_conditional, theta_conditional_reference, theta_omega_conditional, update_beta,
    update_h, update_phi1, update_phi2, update_sigma2, update_theta_omega, update_thresholds,
    update_z,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    lambda_from_alpha, ordinal_indices, shared_categories, Constraints, MetricSpec, ObservationSet,
    PriorConfig, ThresholdMode,
};
use crate::stochastics::{chol_factor, chol_inverse, spatial_chol};

/// Chain-run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub chains: usize,
    pub iterations: usize,
    pub burnin: usize,
    /// Latent `Z` draws are stored every `thin_z`-th retained iteration.
    pub thin_z: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            chains: 2,
            iterations: 100_000,
            burnin: 10_000,
            thin_z: 10,
            seed: 1,
        }
    }
}

/// A validated dataset bundled with the model declaration and everything
/// precomputable from it (distances, threshold prior factor).
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub data: ObservationSet,
    pub metrics: Vec<MetricSpec>,
    pub priors: PriorConfig,
    pub constraints: Constraints,
    pub k: usize,
    /// Indices of the ordinal metrics.
    pub ordinal: Vec<usize>,
    /// n x n Euclidean distances.
    pub dist: DMatrix<f64>,
    /// Lower Cholesky factor of the threshold prior covariance `A`.
    pub alpha_prior_chol: DMatrix<f64>,
}

impl FitProblem {
    /// `data` must already have passed [`crate::model::validate_dataset`].
    pub fn new(
        data: ObservationSet,
        metrics: Vec<MetricSpec>,
        priors: PriorConfig,
        constraints: Constraints,
    ) -> Result<Self> {
        let k = shared_categories(&metrics)?;
        priors.validate(k)?;
        constraints.validate(&metrics)?;
        if data.standardization.is_none() {
            return Err(Error::InvalidDataset(
                "dataset must be validated before fitting".into(),
            ));
        }
        let dist = crate::stochastics::distance_matrix(&data.coords);
        let a = priors.alpha_cov_matrix(k);
        let alpha_prior_chol = if k > 2 {
            chol_factor(&a)?
        } else {
            DMatrix::zeros(0, 0)
        };
        Ok(FitProblem {
            ordinal: ordinal_indices(&metrics),
            k,
            dist,
            alpha_prior_chol,
            data,
            metrics,
            priors,
            constraints,
        })
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn n_metrics(&self) -> usize {
        self.metrics.len()
    }

    /// Number of independent threshold vectors.
    pub fn n_threshold_sets(&self) -> usize {
        match self.constraints.threshold_mode {
            ThresholdMode::Shared => 1,
            ThresholdMode::PerMetric => self.ordinal.len(),
        }
    }

    /// Threshold-set index used by ordinal metric `j`.
    pub fn threshold_set(&self, j: usize) -> usize {
        match self.constraints.threshold_mode {
            ThresholdMode::Shared => 0,
            ThresholdMode::PerMetric => self
                .ordinal
                .iter()
                .position(|&o| o == j)
                .expect("metric is ordinal"),
        }
    }

    /// Ordinal metrics sharing threshold set `s`.
    pub fn metrics_of_set(&self, s: usize) -> Vec<usize> {
        match self.constraints.threshold_mode {
            ThresholdMode::Shared => self.ordinal.clone(),
            ThresholdMode::PerMetric => vec![self.ordinal[s]],
        }
    }
}

/// One chain's current values of all unknowns.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// n x J latent responses; continuous columns stay frozen at the data.
    pub z: DMatrix<f64>,
    pub h: DVector<f64>,
    pub theta: DVector<f64>,
    pub omega: DVector<f64>,
    pub sigma2: DVector<f64>,
    pub beta: DVector<f64>,
    pub phi1: f64,
    pub phi2: f64,
    /// Unconstrained threshold increments, one vector per threshold set.
    pub alpha: Vec<DVector<f64>>,
    /// Full threshold vectors (length K+1), always `lambda_from_alpha(alpha)`.
    pub lambda: Vec<Vec<f64>>,
}

impl ChainState {
    pub fn lambda_for_metric(&self, prob: &FitProblem, j: usize) -> &[f64] {
        &self.lambda[prob.threshold_set(j)]
    }

    pub(crate) fn set_alpha(&mut self, s: usize, alpha: DVector<f64>) {
        self.lambda[s] = lambda_from_alpha(alpha.as_slice());
        self.alpha[s] = alpha;
    }

    /// Verify every identifiability constraint and structural invariant.
    /// Intended for per-sweep assertions in tests.
    pub fn check_invariants(&self, prob: &FitProblem) -> std::result::Result<(), String> {
        let c = &prob.constraints;
        if self.omega[c.reference_loading_metric] != 1.0 {
            return Err("reference loading is not 1".into());
        }
        for j in 0..prob.n_metrics() {
            if c.sigma2_is_fixed(j, &prob.metrics) && self.sigma2[j] != 1.0 {
                return Err(format!("sigma2[{j}] should be fixed at 1"));
            }
            if self.sigma2[j] <= 0.0 {
                return Err(format!("sigma2[{j}] not positive"));
            }
        }
        if c.fix_phi1 && self.phi1 != 1.0 {
            return Err("phi1 should be fixed at 1".into());
        }
        for lambda in &self.lambda {
            if lambda[1] != 0.0 {
                return Err("lambda_1 must be 0".into());
            }
            for w in lambda[1..lambda.len() - 1].windows(2) {
                if !(w[0] < w[1]) {
                    return Err("lambda interior not strictly increasing".into());
                }
            }
        }
        for &j in &prob.ordinal {
            let lambda = self.lambda_for_metric(prob, j);
            for i in 0..prob.n() {
                let y = prob.data.y[(i, j)] as usize;
                let z = self.z[(i, j)];
                if !(lambda[y - 1] < z && z <= lambda[y]) {
                    return Err(format!(
                        "z[({i},{j})] = {z} outside its category interval ({}, {}]",
                        lambda[y - 1],
                        lambda[y]
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-chain cache of quantities that depend only on `phi2`: the unit-sill
/// correlation factor and (lazily) its explicit inverse. Callers keep it in
/// step with the state's `phi2`; inside a sweep, `update_phi2` maintains it.
pub struct SweepCache {
    phi2: f64,
    pub(crate) r_chol: DMatrix<f64>,
    r_inv: Option<DMatrix<f64>>,
}

impl SweepCache {
    pub fn new(prob: &FitProblem, phi2: f64) -> Result<Self> {
        Ok(SweepCache {
            phi2,
            r_chol: spatial_chol(&prob.dist, 1.0, phi2)?,
            r_inv: None,
        })
    }

    pub fn sync(&mut self, prob: &FitProblem, phi2: f64) -> Result<()> {
        if phi2 != self.phi2 {
            self.r_chol = spatial_chol(&prob.dist, 1.0, phi2)?;
            self.r_inv = None;
            self.phi2 = phi2;
        }
        Ok(())
    }

    pub(crate) fn install(&mut self, phi2: f64, r_chol: DMatrix<f64>) {
        self.phi2 = phi2;
        self.r_chol = r_chol;
        self.r_inv = None;
    }

    pub(crate) fn r_inverse(&mut self) -> &DMatrix<f64> {
        if self.r_inv.is_none() {
            self.r_inv = Some(chol_inverse(&self.r_chol));
        }
        self.r_inv.as_ref().unwrap()
    }
}

/// Metropolis proposal scales, adapted during burn-in only.
#[derive(Debug, Clone)]
pub struct Tuning {
    pub phi2_step: f64,
    pub alpha_step: Vec<f64>,
    phi2_window: (u32, u32),
    alpha_window: Vec<(u32, u32)>,
}

const ADAPT_WINDOW: u32 = 50;

impl Tuning {
    pub fn new(n_sets: usize) -> Self {
        Tuning {
            phi2_step: 0.3,
            alpha_step: vec![0.05; n_sets],
            phi2_window: (0, 0),
            alpha_window: vec![(0, 0); n_sets],
        }
    }

    fn note_phi2(&mut self, accepted: bool, adapting: bool) {
        if !adapting {
            return;
        }
        self.phi2_window.0 += accepted as u32;
        self.phi2_window.1 += 1;
        if self.phi2_window.1 == ADAPT_WINDOW {
            self.phi2_step = rescale(self.phi2_step, self.phi2_window.0, ADAPT_WINDOW);
            self.phi2_window = (0, 0);
        }
    }

    fn note_alpha(&mut self, s: usize, accepted: bool, adapting: bool) {
        if !adapting {
            return;
        }
        self.alpha_window[s].0 += accepted as u32;
        self.alpha_window[s].1 += 1;
        if self.alpha_window[s].1 == ADAPT_WINDOW {
            self.alpha_step[s] = rescale(self.alpha_step[s], self.alpha_window[s].0, ADAPT_WINDOW);
            self.alpha_window[s] = (0, 0);
        }
    }
}

/// Nudge a proposal scale toward the 20-50% acceptance band.
fn rescale(step: f64, accepted: u32, total: u32) -> f64 {
    let rate = accepted as f64 / total as f64;
    let factor = if rate < 0.20 {
        0.7
    } else if rate > 0.50 {
        1.4
    } else {
        1.0
    };
    (step * factor).clamp(1e-4, 10.0)
}

/// Row-major growable matrix used for trace storage.
#[derive(Debug, Clone, Default)]
pub struct TraceMatrix {
    data: Vec<f64>,
    ncols: usize,
}

impl TraceMatrix {
    pub fn new(ncols: usize) -> Self {
        TraceMatrix {
            data: Vec::new(),
            ncols,
        }
    }

    pub fn with_capacity(ncols: usize, rows: usize) -> Self {
        TraceMatrix {
            data: Vec::with_capacity(ncols * rows),
            ncols,
        }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.ncols);
        self.data.extend_from_slice(row);
    }

    pub fn nrows(&self) -> usize {
        if self.ncols == 0 {
            0
        } else {
            self.data.len() / self.ncols
        }
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.row(i)[j]).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ncols + j]
    }
}

/// Append-only record of one chain's post-burn-in draws.
#[derive(Debug, Clone)]
pub struct TraceStore {
    pub chain_id: usize,
    pub burnin: usize,
    pub thin_z: usize,
    pub beta: TraceMatrix,
    pub theta: TraceMatrix,
    pub omega: TraceMatrix,
    pub sigma2: TraceMatrix,
    /// Present only when the sill is a free parameter.
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    /// Threshold increments, sets concatenated.
    pub alpha: TraceMatrix,
    pub h: TraceMatrix,
    /// Thinned latent ordinal responses, laid out set-by-site:
    /// column `o * n + i` holds metric `ordinal[o]` at site `i`.
    pub z: TraceMatrix,
    /// Absolute iteration index of each stored `z` row.
    pub z_iters: Vec<usize>,
    pub accept_phi2: (u64, u64),
    pub accept_alpha: (u64, u64),
}

impl TraceStore {
    fn new(prob: &FitProblem, config: &FitConfig, chain_id: usize) -> Self {
        let retained = config.iterations.saturating_sub(config.burnin);
        let sets = prob.n_threshold_sets();
        let alpha_cols = sets * (prob.k - 2);
        TraceStore {
            chain_id,
            burnin: config.burnin,
            thin_z: config.thin_z.max(1),
            beta: TraceMatrix::with_capacity(prob.data.p(), retained),
            theta: TraceMatrix::with_capacity(prob.n_metrics(), retained),
            omega: TraceMatrix::with_capacity(prob.n_metrics(), retained),
            sigma2: TraceMatrix::with_capacity(prob.n_metrics(), retained),
            phi1: Vec::new(),
            phi2: Vec::with_capacity(retained),
            alpha: TraceMatrix::with_capacity(alpha_cols, retained),
            h: TraceMatrix::with_capacity(prob.n(), retained),
            z: TraceMatrix::new(prob.ordinal.len() * prob.n()),
            z_iters: Vec::new(),
            accept_phi2: (0, 0),
            accept_alpha: (0, 0),
        }
    }

    fn record(&mut self, prob: &FitProblem, state: &ChainState, iteration: usize) {
        self.beta.push_row(state.beta.as_slice());
        self.theta.push_row(state.theta.as_slice());
        self.omega.push_row(state.omega.as_slice());
        self.sigma2.push_row(state.sigma2.as_slice());
        if !prob.constraints.fix_phi1 {
            self.phi1.push(state.phi1);
        }
        self.phi2.push(state.phi2);
        let alpha_flat: Vec<f64> = state
            .alpha
            .iter()
            .flat_map(|a| a.iter().copied())
            .collect();
        self.alpha.push_row(&alpha_flat);
        self.h.push_row(state.h.as_slice());
        let retained_index = self.phi2.len() - 1;
        if retained_index % self.thin_z == 0 {
            let n = prob.n();
            let mut row = Vec::with_capacity(prob.ordinal.len() * n);
            for &j in &prob.ordinal {
                for i in 0..n {
                    row.push(state.z[(i, j)]);
                }
            }
            self.z.push_row(&row);
            self.z_iters.push(iteration);
        }
    }

    /// Number of retained draws.
    pub fn len(&self) -> usize {
        self.phi2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi2.is_empty()
    }
}

/// Deterministic per-chain RNG: `base_seed + chain_index`.
pub fn chain_rng(base_seed: u64, chain_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(chain_id as u64))
}

/// Reference to one free scalar parameter inside a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Beta(usize),
    Theta(usize),
    Omega(usize),
    Sigma2(usize),
    Phi1,
    Phi2,
    /// Flat index into the concatenated threshold-increment columns.
    Alpha(usize),
}

/// Names and accessors of every free scalar parameter, in the canonical
/// column order: `beta_*`, `theta_*`, free `omega_*`, free `sigma2_*`,
/// `phi2`, `phi1` (when free), threshold increments.
pub fn free_parameters(prob: &FitProblem) -> Vec<(String, ParamRef)> {
    let mut out = Vec::new();
    for i in 0..prob.data.p() {
        out.push((format!("beta_{}", i + 1), ParamRef::Beta(i)));
    }
    for j in 0..prob.n_metrics() {
        out.push((format!("theta_{}", j + 1), ParamRef::Theta(j)));
    }
    for j in 0..prob.n_metrics() {
        if j != prob.constraints.reference_loading_metric {
            out.push((format!("omega_{}", j + 1), ParamRef::Omega(j)));
        }
    }
    for j in 0..prob.n_metrics() {
        if !prob.constraints.sigma2_is_fixed(j, &prob.metrics) {
            out.push((format!("sigma2_{}", j + 1), ParamRef::Sigma2(j)));
        }
    }
    out.push(("phi2".into(), ParamRef::Phi2));
    if !prob.constraints.fix_phi1 {
        out.push(("phi1".into(), ParamRef::Phi1));
    }
    let dim = prob.k - 2;
    for s in 0..prob.n_threshold_sets() {
        for i in 0..dim {
            let name = match prob.constraints.threshold_mode {
                ThresholdMode::Shared => format!("alpha_{}", i + 1),
                ThresholdMode::PerMetric => {
                    format!("alpha_m{}_{}", prob.ordinal[s] + 1, i + 1)
                }
            };
            out.push((name, ParamRef::Alpha(s * dim + i)));
        }
    }
    out
}

/// Extract one free parameter's retained draws from a chain trace.
pub fn param_column(trace: &TraceStore, param: ParamRef) -> Vec<f64> {
    match param {
        ParamRef::Beta(i) => trace.beta.column(i),
        ParamRef::Theta(j) => trace.theta.column(j),
        ParamRef::Omega(j) => trace.omega.column(j),
        ParamRef::Sigma2(j) => trace.sigma2.column(j),
        ParamRef::Phi1 => trace.phi1.clone(),
        ParamRef::Phi2 => trace.phi2.clone(),
        ParamRef::Alpha(i) => trace.alpha.column(i),
    }
}

/// Starting state: fixed centers with a chain-seeded Gaussian perturbation
/// (sd 0.5) on `theta`, `beta`, and `H`, thresholds at unit spacing, and
/// latent ordinal responses at their interval midpoints.
pub fn init_state<R: Rng + ?Sized>(prob: &FitProblem, rng: &mut R) -> ChainState {
    let n = prob.n();
    let jm = prob.n_metrics();
    let p = prob.data.p();
    let perturb = |rng: &mut R| -> f64 { 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal) };

    let mut theta = DVector::zeros(jm);
    for v in theta.iter_mut() {
        *v += perturb(rng);
    }
    let mut beta = DVector::zeros(p);
    for v in beta.iter_mut() {
        *v += perturb(rng);
    }
    let mut h = DVector::zeros(n);
    for v in h.iter_mut() {
        *v += perturb(rng);
    }

    let sets = prob.n_threshold_sets();
    let alpha: Vec<DVector<f64>> = (0..sets).map(|_| DVector::zeros(prob.k - 2)).collect();
    let lambda: Vec<Vec<f64>> = alpha
        .iter()
        .map(|a| lambda_from_alpha(a.as_slice()))
        .collect();

    let mut z = prob.data.y.clone();
    for &j in &prob.ordinal {
        let lam = &lambda[prob.threshold_set(j)];
        for i in 0..n {
            let y = prob.data.y[(i, j)] as usize;
            z[(i, j)] = if y == 1 {
                lam[1] - 0.5
            } else if y == prob.k {
                lam[prob.k - 1] + 0.5
            } else {
                0.5 * (lam[y - 1] + lam[y])
            };
        }
    }

    ChainState {
        z,
        h,
        theta,
        omega: DVector::from_element(jm, 1.0),
        sigma2: DVector::from_element(jm, 1.0),
        beta,
        phi1: 1.0,
        phi2: prob.priors.a_phi2 * prob.priors.b_phi2,
        alpha,
        lambda,
    }
}

fn ensure_finite_slice(
    values: &[f64],
    parameter: &str,
    iteration: usize,
    chain: usize,
) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteParameter {
            parameter: parameter.into(),
            iteration,
            chain,
        })
    }
}

/// Run one full sweep (paper order: covariance, regression + field,
/// metric-specific blocks, thresholds, latent responses).
pub fn sweep<R: Rng + ?Sized>(
    state: &mut ChainState,
    prob: &FitProblem,
    cache: &mut SweepCache,
    tuning: &mut Tuning,
    adapting: bool,
    rng: &mut R,
) -> Result<(bool, u64, u64)> {
    if !prob.constraints.fix_phi1 {
        update_phi1(state, prob, cache, rng);
    }
    let phi2_accepted = update_phi2(state, prob, cache, tuning.phi2_step, rng)?;
    tuning.note_phi2(phi2_accepted, adapting);
    update_beta(state, prob, cache, rng);
    update_h(state, prob, cache, rng)?;
    update_theta_omega(state, prob, rng);
    update_sigma2(state, prob, rng);
    let mut alpha_accepts = 0u64;
    let mut alpha_proposals = 0u64;
    if prob.k > 2 {
        for s in 0..prob.n_threshold_sets() {
            let accepted = update_thresholds(state, prob, s, tuning.alpha_step[s], rng);
            tuning.note_alpha(s, accepted, adapting);
            alpha_accepts += accepted as u64;
            alpha_proposals += 1;
        }
    }
    update_z(state, prob, rng);
    Ok((phi2_accepted, alpha_accepts, alpha_proposals))
}

/// Run a single chain for `config.iterations` sweeps, recording every
/// post-burn-in draw. Proposal adaptation happens during burn-in only.
pub fn run_chain(prob: &FitProblem, config: &FitConfig, chain_id: usize) -> Result<TraceStore> {
    let mut rng = chain_rng(config.seed, chain_id);
    let mut state = init_state(prob, &mut rng);
    let mut cache = SweepCache::new(prob, state.phi2)?;
    let mut tuning = Tuning::new(prob.n_threshold_sets());
    let mut trace = TraceStore::new(prob, config, chain_id);

    for iteration in 0..config.iterations {
        let adapting = iteration < config.burnin;
        let (phi2_acc, alpha_acc, alpha_prop) =
            sweep(&mut state, prob, &mut cache, &mut tuning, adapting, &mut rng)?;

        let check = |vals: &[f64], name: &str| ensure_finite_slice(vals, name, iteration, chain_id);
        check(state.beta.as_slice(), "beta")?;
        check(state.h.as_slice(), "H")?;
        check(state.theta.as_slice(), "theta")?;
        check(state.omega.as_slice(), "omega")?;
        check(state.sigma2.as_slice(), "sigma2")?;
        check(&[state.phi1, state.phi2], "phi")?;
        for a in &state.alpha {
            check(a.as_slice(), "alpha")?;
        }
        check(state.z.as_slice(), "Z")?;
        debug_assert_eq!(state.check_invariants(prob), Ok(()));

        if iteration >= config.burnin {
            trace.accept_phi2.0 += phi2_acc as u64;
            trace.accept_phi2.1 += 1;
            trace.accept_alpha.0 += alpha_acc;
            trace.accept_alpha.1 += alpha_prop;
            trace.record(prob, &state, iteration);
        }
    }
    Ok(trace)
}

/// Run all chains sequentially. Always available; the parallel path in
/// [`run_chains`] dispatches here when the `parallel` feature is off.
pub fn run_chains_sequential(prob: &FitProblem, config: &FitConfig) -> Result<Vec<TraceStore>> {
    (0..config.chains)
        .map(|c| run_chain(prob, config, c))
        .collect()
}

/// Run all chains, in parallel when the `parallel` feature is enabled.
/// Results are ordered by chain id either way.
pub fn run_chains(prob: &FitProblem, config: &FitConfig) -> Result<Vec<TraceStore>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..config.chains)
            .into_par_iter()
            .map(|c| run_chain(prob, config, c))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_chains_sequential(prob, config)
    }
}
