//! Fit-directory round trips: determinism, manifest verification, and the
//! error paths of the batch commands.

use std::fs;
use std::path::{Path, PathBuf};

use geolatent::model::map_to_ordinal;
use geolatent::pipeline::{
    cmd_diagnose, cmd_fit, cmd_rank, cmd_simulate, load_fit, FitArgs, FitOverrides,
};
use geolatent::Error;

fn write_sim_config(dir: &Path) -> PathBuf {
    let p = dir.join("sim.toml");
    fs::write(
        &p,
        r#"
[sim]
n_fit = 36
m_pred = 8
seed = 12
"#,
    )
    .unwrap();
    p
}

fn fit_args(sim_dir: &Path, out: &Path, iters: usize, burnin: usize, chains: usize) -> FitArgs {
    FitArgs {
        data_dir: sim_dir.to_path_buf(),
        config_path: sim_dir.join("config.toml"),
        out_dir: out.to_path_buf(),
        overrides: FitOverrides {
            chains: Some(chains),
            iterations: Some(iters),
            burnin: Some(burnin),
            thin_z: Some(5),
            seed: Some(31),
        },
    }
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let simcfg = write_sim_config(tmp.path());
    let sim_dir = tmp.path().join("sim");
    cmd_simulate(Some(&simcfg), None, &sim_dir).unwrap();

    let fit_a = tmp.path().join("fit_a");
    let fit_b = tmp.path().join("fit_b");
    cmd_fit(&fit_args(&sim_dir, &fit_a, 160, 40, 2)).unwrap();
    cmd_fit(&fit_args(&sim_dir, &fit_b, 160, 40, 2)).unwrap();
    for name in [
        "manifest.toml",
        "chain_0.csv",
        "chain_1.csv",
        "chain_0_z.csv",
        "param_summary.csv",
        "H_summary.csv",
        "response_frequencies.csv",
    ] {
        let a = fs::read(fit_a.join(name)).unwrap();
        let b = fs::read(fit_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical reruns");
    }
}

#[test]
fn traces_round_trip_through_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let simcfg = write_sim_config(tmp.path());
    let sim_dir = tmp.path().join("sim");
    cmd_simulate(Some(&simcfg), None, &sim_dir).unwrap();
    let fit_dir = tmp.path().join("fit");
    cmd_fit(&fit_args(&sim_dir, &fit_dir, 120, 30, 2)).unwrap();

    let lf = load_fit(&fit_dir).unwrap();
    assert_eq!(lf.traces.len(), 2);
    assert_eq!(lf.traces[0].len(), 90);
    assert_eq!(lf.traces[0].h.ncols(), 36);
    assert_eq!(lf.traces[0].z_iters.first(), Some(&30));
    // reloaded values are bit-exact thanks to the 17-digit format
    assert!(lf.traces[0].phi2.iter().all(|v| v.is_finite()));
    assert_eq!(lf.manifest.chains, 2);
    assert_eq!(lf.manifest.burnin, 30);
}

#[test]
fn tampered_fit_directory_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let simcfg = write_sim_config(tmp.path());
    let sim_dir = tmp.path().join("sim");
    cmd_simulate(Some(&simcfg), None, &sim_dir).unwrap();
    let fit_dir = tmp.path().join("fit");
    cmd_fit(&fit_args(&sim_dir, &fit_dir, 80, 20, 1)).unwrap();

    // corrupt one trace value
    let path = fit_dir.join("chain_0.csv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("\n");
    fs::write(&path, text).unwrap();
    match load_fit(&fit_dir) {
        Err(Error::ManifestMismatch(msg)) => assert!(msg.contains("chain_0.csv"), "{msg}"),
        Err(other) => panic!("expected a manifest mismatch, got {other}"),
        Ok(_) => panic!("tampered directory loaded successfully"),
    }
}

#[test]
fn zero_iterations_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let simcfg = write_sim_config(tmp.path());
    let sim_dir = tmp.path().join("sim");
    cmd_simulate(Some(&simcfg), None, &sim_dir).unwrap();
    let out = tmp.path().join("fit");
    let err = cmd_fit(&fit_args(&sim_dir, &out, 0, 0, 2)).unwrap_err();
    assert!(matches!(err, Error::NothingToSample));

    // all-burn-in runs are rejected too: nothing would be retained
    let err = cmd_fit(&fit_args(&sim_dir, &out, 50, 50, 2)).unwrap_err();
    assert!(err.to_string().contains("post-burn-in"), "{err}");
}

#[test]
fn diagnose_requires_two_chains() {
    let tmp = tempfile::tempdir().unwrap();
    let simcfg = write_sim_config(tmp.path());
    let sim_dir = tmp.path().join("sim");
    cmd_simulate(Some(&simcfg), None, &sim_dir).unwrap();
    let fit_dir = tmp.path().join("fit");
    cmd_fit(&fit_args(&sim_dir, &fit_dir, 80, 20, 1)).unwrap();
    let err = cmd_diagnose(&fit_dir, &fit_dir).unwrap_err();
    assert!(matches!(err, Error::NeedTwoChains));
}

#[test]
fn rank_percentiles_are_proper_fractions() {
    let tmp = tempfile::tempdir().unwrap();
    let simcfg = write_sim_config(tmp.path());
    let sim_dir = tmp.path().join("sim");
    cmd_simulate(Some(&simcfg), None, &sim_dir).unwrap();
    let fit_dir = tmp.path().join("fit");
    cmd_fit(&fit_args(&sim_dir, &fit_dir, 120, 40, 2)).unwrap();
    cmd_rank(&fit_dir, &fit_dir).unwrap();

    let mut rdr = csv::Reader::from_path(fit_dir.join("ranks.csv")).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let pct: f64 = rec[4].parse().unwrap();
        assert!(pct > 0.0 && pct < 1.0, "percentile {pct}");
        rows += 1;
    }
    assert_eq!(rows, 36);
}

#[test]
fn default_simulation_emits_the_reference_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    cmd_simulate(None, None, &out).unwrap();
    let count = |p: &Path| csv::Reader::from_path(p).unwrap().records().count();
    assert_eq!(count(&out.join("sites.csv")), 200);
    assert_eq!(count(&out.join("holdout/sites.csv")), 100);
    let mut rdr = csv::Reader::from_path(out.join("responses.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 4); // site_id + 3 ordinal metrics
}

#[test]
fn simulated_truth_round_trips_through_the_threshold_map() {
    let tmp = tempfile::tempdir().unwrap();
    let simcfg = write_sim_config(tmp.path());
    let sim_dir = tmp.path().join("sim");
    cmd_simulate(Some(&simcfg), Some(99), &sim_dir).unwrap();

    // collect the stored thresholds and latent responses
    let mut lambda = vec![f64::NEG_INFINITY, 0.0];
    let mut z: std::collections::HashMap<String, f64> = std::collections::HashMap::new();
    let mut rdr = csv::Reader::from_path(sim_dir.join("truth.csv")).unwrap();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        match (&rec[0], &rec[1]) {
            ("param", name) if name.starts_with("lambda_") && name != "lambda_1" => {
                lambda.push(rec[2].parse().unwrap());
            }
            ("z", name) => {
                z.insert(name.to_string(), rec[2].parse().unwrap());
            }
            _ => {}
        }
    }
    lambda.push(f64::INFINITY);
    assert_eq!(lambda.len(), 6);

    // observed categories from both dataset halves must equal the remapped z
    for part in ["", "holdout"] {
        let dir = if part.is_empty() {
            sim_dir.clone()
        } else {
            sim_dir.join(part)
        };
        let mut rdr = csv::Reader::from_path(dir.join("responses.csv")).unwrap();
        let headers = rdr.headers().unwrap().clone();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            let site = rec[0].to_string();
            for (j, name) in headers.iter().enumerate().skip(1) {
                let y: f64 = rec[j].parse().unwrap();
                let zval = z[&format!("{site}:{name}")];
                assert_eq!(map_to_ordinal(zval, &lambda) as f64, y, "cell {site}:{name}");
            }
        }
    }
}
