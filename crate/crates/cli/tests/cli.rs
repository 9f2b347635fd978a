//! End-to-end tests of the installed binary.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geolatent"))
}

fn simulate_into(dir: &Path) {
    let cfg = dir.join("sim.toml");
    fs::write(
        &cfg,
        "[sim]\nn_fit = 30\nm_pred = 6\nseed = 5\n",
    )
    .unwrap();
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("sim"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into(tmp.path());
    let sim = tmp.path().join("sim");
    let fit = tmp.path().join("fit");

    let out = bin()
        .args(["fit", "--data"])
        .arg(&sim)
        .arg("--config")
        .arg(sim.join("config.toml"))
        .args(["--iters", "150", "--burnin", "50", "--chains", "2", "--seed", "2", "--out"])
        .arg(&fit)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    for (cmd, extra) in [
        ("predict", vec!["--newdata", sim.join("holdout").to_str().unwrap(), "--out", tmp.path().join("pred").to_str().unwrap()]),
        ("rank", vec![]),
        ("correlate", vec![]),
        ("evaluate", vec![]),
        ("diagnose", vec![]),
    ] {
        let mut c = bin();
        c.arg(cmd).arg("--fit").arg(&fit);
        for e in extra {
            c.arg(e);
        }
        let out = c.output().unwrap();
        assert!(
            out.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in ["ranks.csv", "weights.csv", "loss.csv", "diagnostics.csv"] {
        assert!(fit.join(f).exists(), "missing {f}");
    }
    assert!(tmp.path().join("pred/predictions.csv").exists());
}

#[test]
fn zero_iterations_fails_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into(tmp.path());
    let sim = tmp.path().join("sim");
    let out = bin()
        .args(["fit", "--data"])
        .arg(&sim)
        .arg("--config")
        .arg(sim.join("config.toml"))
        .args(["--iters", "0", "--out"])
        .arg(tmp.path().join("fit"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nothing to sample"), "{stderr}");
}

#[test]
fn diagnose_single_chain_fails_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into(tmp.path());
    let sim = tmp.path().join("sim");
    let fit = tmp.path().join("fit");
    let out = bin()
        .args(["fit", "--data"])
        .arg(&sim)
        .arg("--config")
        .arg(sim.join("config.toml"))
        .args(["--iters", "80", "--burnin", "20", "--chains", "1", "--out"])
        .arg(&fit)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = bin().arg("diagnose").arg("--fit").arg(&fit).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(">=2 chains"), "{stderr}");
}

#[test]
fn worker_count_override_changes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into(tmp.path());
    let sim = tmp.path().join("sim");
    for (name, threads) in [("free", None), ("capped", Some("1"))] {
        let mut c = bin();
        c.args(["fit", "--data"])
            .arg(&sim)
            .arg("--config")
            .arg(sim.join("config.toml"))
            .args(["--iters", "100", "--burnin", "20", "--seed", "4", "--out"])
            .arg(tmp.path().join(name));
        if let Some(t) = threads {
            c.env("GEOLATENT_THREADS", t);
        }
        let out = c.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(tmp.path().join("free/chain_0.csv")).unwrap();
    let b = fs::read(tmp.path().join("capped/chain_0.csv")).unwrap();
    assert_eq!(a, b, "worker-count override changed the results");
}

#[test]
fn identical_invocations_reproduce_identical_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into(tmp.path());
    let sim = tmp.path().join("sim");
    for name in ["a", "b"] {
        let out = bin()
            .args(["fit", "--data"])
            .arg(&sim)
            .arg("--config")
            .arg(sim.join("config.toml"))
            .args(["--iters", "120", "--burnin", "40", "--seed", "6", "--out"])
            .arg(tmp.path().join(name))
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    for f in ["param_summary.csv", "manifest.toml", "chain_1.csv"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}
