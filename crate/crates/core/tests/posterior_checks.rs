//! Kriging behavior and posterior-predictive sanity checks.

use nalgebra::DMatrix;

use geolatent::model::{validate_dataset, Constraints, MetricSpec, ObservationSet, PriorConfig};
use geolatent::posterior::{predict_h, predict_y, NewSites};
use geolatent::sampler::{run_chains, FitConfig, FitProblem, TraceMatrix, TraceStore};
use geolatent::simulation::{simulate_dataset, SimConfig};
use geolatent::summary::{mean, sample_variance};

/// A hand-built single-chain trace whose every draw carries the same
/// parameter values, so predictive spread reflects only kriging variance.
fn constant_trace(prob: &FitProblem, h: &[f64], phi2: f64, draws: usize) -> TraceStore {
    let jm = prob.n_metrics();
    let mut t = TraceStore {
        chain_id: 0,
        burnin: 0,
        thin_z: 1,
        beta: TraceMatrix::new(prob.data.p()),
        theta: TraceMatrix::new(jm),
        omega: TraceMatrix::new(jm),
        sigma2: TraceMatrix::new(jm),
        phi1: Vec::new(),
        phi2: Vec::new(),
        alpha: TraceMatrix::new(prob.k - 2),
        h: TraceMatrix::new(prob.n()),
        z: TraceMatrix::new(prob.ordinal.len() * prob.n()),
        z_iters: Vec::new(),
        accept_phi2: (0, 0),
        accept_alpha: (0, 0),
    };
    for _ in 0..draws {
        t.beta.push_row(&vec![0.0; prob.data.p()]);
        t.theta.push_row(&vec![0.0; jm]);
        t.omega.push_row(&vec![1.0; jm]);
        t.sigma2.push_row(&vec![1.0; jm]);
        t.phi2.push(phi2);
        t.alpha.push_row(&vec![0.0; prob.k - 2]);
        t.h.push_row(h);
    }
    t
}

fn line_problem() -> FitProblem {
    let metrics = vec![MetricSpec::ordinal("a", 5)];
    let raw = ObservationSet {
        site_ids: vec!["s0".into(), "s1".into(), "s2".into()],
        coords: DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 50.0, 0.0, 100.0, 0.0]),
        x: DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0]),
        covariate_names: vec!["c1".into()],
        y: DMatrix::from_row_slice(3, 1, &[1.0, 3.0, 5.0]),
        standardization: None,
    };
    let (data, _) = validate_dataset(raw, &metrics).unwrap();
    let constraints = Constraints::default_for(&metrics).unwrap();
    FitProblem::new(data, metrics, PriorConfig::default(), constraints).unwrap()
}

#[test]
fn kriging_variance_shrinks_monotonically_toward_an_observed_site() {
    let prob = line_problem();
    let traces = vec![constant_trace(&prob, &[0.7, -0.2, 0.4], 2.0, 4000)];
    // transect approaching site 0 from afar; all far from sites 1 and 2
    let dists = [2.0, 1.0, 0.5, 0.25, 0.1, 0.05, 0.01];
    let m = dists.len();
    let new = NewSites {
        site_ids: (0..m).map(|i| format!("n{i}")).collect(),
        coords: DMatrix::from_fn(m, 2, |i, c| if c == 0 { -dists[i] } else { 0.0 }),
        x: DMatrix::zeros(m, 1),
    };
    let h = predict_h(&traces, &prob, &new, 1, 5).unwrap();
    let vars: Vec<f64> = (0..m).map(|i| sample_variance(&h.column(i))).collect();
    for w in vars.windows(2) {
        assert!(
            w[1] < w[0],
            "kriging variance not monotone along the transect: {vars:?}"
        );
    }
    assert!(vars[m - 1] < 0.1, "variance near the site should approach 0");
}

#[test]
fn far_site_reverts_to_prior_mean_and_sill() {
    let prob = line_problem();
    let traces = vec![constant_trace(&prob, &[0.7, -0.2, 0.4], 2.0, 20000)];
    let new = NewSites {
        site_ids: vec!["far".into()],
        coords: DMatrix::from_row_slice(1, 2, &[1.0e7, 0.0]),
        x: DMatrix::from_row_slice(1, 1, &[2.0]),
    };
    let h = predict_h(&traces, &prob, &new, 1, 6).unwrap();
    let col = h.column(0);
    // beta = 0 in the constant trace, so the mean is X~ beta = 0
    assert!(mean(&col).abs() < 0.05, "far-site mean {}", mean(&col));
    let v = sample_variance(&col);
    assert!((v - 1.0).abs() < 0.05, "far-site variance {v} should be phi1");
}

#[test]
fn coincident_site_returns_the_observed_draw() {
    let prob = line_problem();
    let traces = vec![constant_trace(&prob, &[0.7, -0.2, 0.4], 2.0, 50)];
    let new = NewSites {
        site_ids: vec!["dup".into(), "other".into()],
        coords: DMatrix::from_row_slice(2, 2, &[50.0, 0.0, 30.0, 0.0]),
        x: DMatrix::zeros(2, 1),
    };
    let h = predict_h(&traces, &prob, &new, 1, 7).unwrap();
    for r in 0..h.nrows() {
        assert_eq!(h.get(r, 0), -0.2); // exactly the observed site's draw
    }
}

#[test]
fn zero_loading_with_tiny_noise_pins_the_modal_category() {
    // theta midway between the second and third cut points and no field
    // dependence: every predictive draw lands in category 3
    let metrics = vec![geolatent::model::MetricSpec::ordinal("a", 5)];
    let raw = ObservationSet {
        site_ids: vec!["s0".into(), "s1".into()],
        coords: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 9.0, 0.0]),
        x: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        covariate_names: vec!["c1".into()],
        y: DMatrix::from_row_slice(2, 1, &[1.0, 5.0]),
        standardization: None,
    };
    let (data, _) = validate_dataset(raw, &metrics).unwrap();
    let constraints = Constraints::default_for(&metrics).unwrap();
    let prob = FitProblem::new(data, metrics, PriorConfig::default(), constraints).unwrap();
    // constant trace, then override: omega = 0, sigma2 tiny, theta midway
    // between lambda_2 = 1 and lambda_3 = 2 (unit-spaced thresholds)
    let jm = 1;
    let mut t = constant_trace(&prob, &[0.0, 0.0], 2.0, 200);
    t.theta = TraceMatrix::new(jm);
    t.omega = TraceMatrix::new(jm);
    t.sigma2 = TraceMatrix::new(jm);
    for _ in 0..200 {
        t.theta.push_row(&[1.5]);
        t.omega.push_row(&[0.0]);
        t.sigma2.push_row(&[1e-12]);
    }
    let traces = vec![t];
    let new = NewSites {
        site_ids: vec!["n0".into()],
        coords: DMatrix::from_row_slice(1, 2, &[4.0, 4.0]),
        x: DMatrix::zeros(1, 1),
    };
    let h = predict_h(&traces, &prob, &new, 1, 3).unwrap();
    let y = predict_y(&h, &traces, &prob, 1, 3).unwrap();
    for r in 0..y[0].nrows() {
        assert_eq!(y[0].get(r, 0), 3.0);
    }
}

#[test]
fn independent_noise_metric_has_near_zero_correlation() {
    use geolatent::posterior::multiple_correlation;
    use rand::{Rng, SeedableRng};
    let n = 400;
    let metrics = vec![geolatent::model::MetricSpec::ordinal("a", 5)];
    let raw = ObservationSet {
        site_ids: (0..n).map(|i| format!("s{i}")).collect(),
        coords: DMatrix::from_fn(n, 2, |i, c| ((i * 13 + c * 7) % 101) as f64 / 11.0),
        x: DMatrix::from_fn(n, 1, |i, _| i as f64),
        covariate_names: vec!["c1".into()],
        y: DMatrix::from_fn(n, 1, |i, _| (i % 5 + 1) as f64),
        standardization: None,
    };
    let (data, _) = validate_dataset(raw, &metrics).unwrap();
    let constraints = Constraints::default_for(&metrics).unwrap();
    let prob = FitProblem::new(data, metrics, PriorConfig::default(), constraints).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let h: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let z: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let mut t = constant_trace(&prob, &h, 2.0, 1);
    t.z = TraceMatrix::new(n);
    t.z.push_row(&z);
    t.z_iters = vec![0];
    let corr = multiple_correlation(&[t], &prob).unwrap();
    assert!(corr.r_draws.get(0, 0) < 0.15, "noise correlation {}", corr.r_draws.get(0, 0));
}

#[test]
fn predictive_category_frequencies_track_training_frequencies() {
    // fit simulated data, then sample the posterior predictive at the
    // training sites themselves: category frequencies should agree with the
    // observed ones up to Monte Carlo error
    let cfg = SimConfig {
        n_fit: 80,
        m_pred: 0,
        seed: 21,
        ..SimConfig::default()
    };
    let sim = simulate_dataset(&cfg).unwrap();
    let (data, _) = validate_dataset(sim.fit.clone(), &sim.metrics).unwrap();
    let constraints = Constraints::default_for(&sim.metrics).unwrap();
    let prob = FitProblem::new(data, sim.metrics.clone(), PriorConfig::default(), constraints)
        .unwrap();
    let fc = FitConfig {
        chains: 2,
        iterations: 1500,
        burnin: 500,
        thin_z: 10,
        seed: 8,
    };
    let traces = run_chains(&prob, &fc).unwrap();
    let new = NewSites {
        site_ids: prob.data.site_ids.clone(),
        coords: prob.data.coords.clone(),
        x: prob.data.x.clone(),
    };
    let h = predict_h(&traces, &prob, &new, 5, 11).unwrap();
    let y = predict_y(&h, &traces, &prob, 5, 11).unwrap();
    for j in 0..3 {
        for cat in 1..=5 {
            let observed = (0..prob.n())
                .filter(|&i| prob.data.y[(i, j)] == cat as f64)
                .count() as f64
                / prob.n() as f64;
            let mut predicted = 0.0;
            let total = (y[j].nrows() * prob.n()) as f64;
            for r in 0..y[j].nrows() {
                predicted += y[j]
                    .row(r)
                    .iter()
                    .filter(|v| **v == cat as f64)
                    .count() as f64;
            }
            predicted /= total;
            assert!(
                (predicted - observed).abs() < 0.12,
                "metric {j} category {cat}: predicted {predicted:.3} vs observed {observed:.3}"
            );
        }
    }
}
