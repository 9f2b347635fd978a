//! The operations behind the CLI subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{psrf, standardized_loss, zhat_table};
use crate::model::{validate_dataset, MetricSpec, ObservationSet};
use crate::posterior::{
    effective_range, h_site_summaries, multiple_correlation, posterior_ranks, predict_h,
    predict_y, NewSites, PredictionResult,
};
use crate::sampler::{
    free_parameters, param_column, run_chains, FitProblem, ParamRef, TraceMatrix, TraceStore,
};
use crate::summary::{median_ci95, quantile_sorted};

use super::config::{FitOverrides, RunConfig};
use super::io::{
    assemble_observations, file_digest, fmt_f64, read_responses, read_sites, read_trace,
    write_dataset, write_table, write_trace, write_trace_z,
};
use super::{with_worker_pool, ManifestStandardization, RunManifest};

/// Salt mixed into the fit seed for posterior-predictive draws.
const PREDICT_SALT: u64 = 0x7072656463617374;
/// Salt for the predictive draws used by the loss evaluation.
const LOSS_SALT: u64 = 0x6c6f7373;

pub struct FitArgs {
    pub data_dir: PathBuf,
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub overrides: FitOverrides,
}

#[derive(Debug)]
pub struct FitReport {
    pub warnings: Vec<String>,
    pub out_dir: PathBuf,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn copy_file(src: &Path, dst: &Path) -> Result<()> {
    fs::copy(src, dst)
        .map(|_| ())
        .map_err(|e| Error::io(format!("{} -> {}", src.display(), dst.display()), e))
}

fn read_dataset(
    data_dir: &Path,
    metrics: &[MetricSpec],
) -> Result<(ObservationSet, Vec<String>)> {
    let sites = read_sites(&data_dir.join("sites.csv"))?;
    let (ids, y) = read_responses(&data_dir.join("responses.csv"), metrics)?;
    let raw = assemble_observations(sites, ids, y)?;
    let (data, warnings) = validate_dataset(raw, metrics)?;
    Ok((data, warnings.into_iter().map(|w| w.to_string()).collect()))
}

fn merged_param_draws(traces: &[TraceStore], param: ParamRef) -> Vec<f64> {
    let mut out = Vec::new();
    for t in traces {
        out.extend(param_column(t, param));
    }
    out
}

/// Fit the model: run the chains, persist traces and posterior summaries,
/// and seal the directory with a manifest.
pub fn cmd_fit(args: &FitArgs) -> Result<FitReport> {
    let config_text = fs::read_to_string(&args.config_path)
        .map_err(|e| Error::io(args.config_path.display().to_string(), e))?;
    let config = RunConfig::parse(&config_text)?;
    let metrics = config.metric_specs()?;
    let constraints = config.constraints(&metrics)?;
    let fit_config = config.fit_config(&args.overrides);
    if fit_config.iterations == 0 || fit_config.chains == 0 {
        return Err(Error::NothingToSample);
    }
    if fit_config.iterations <= fit_config.burnin {
        return Err(Error::InvalidConfig(format!(
            "iterations ({}) must exceed burn-in ({}); no post-burn-in draws would remain",
            fit_config.iterations, fit_config.burnin
        )));
    }

    let (data, warnings) = read_dataset(&args.data_dir, &metrics)?;
    let standardization = data.standardization.clone().expect("validated");
    let covariate_names = data.covariate_names.clone();
    let prob = FitProblem::new(data, metrics, config.priors.clone(), constraints)?;

    let traces = with_worker_pool(|| run_chains(&prob, &fit_config))?;

    ensure_dir(&args.out_dir)?;
    let inputs_dir = args.out_dir.join("inputs");
    ensure_dir(&inputs_dir)?;
    copy_file(&args.data_dir.join("sites.csv"), &inputs_dir.join("sites.csv"))?;
    copy_file(
        &args.data_dir.join("responses.csv"),
        &inputs_dir.join("responses.csv"),
    )?;
    copy_file(&args.config_path, &inputs_dir.join("config.toml"))?;

    let mut outputs = BTreeMap::new();
    let mut acceptance = BTreeMap::new();
    for t in &traces {
        let trace_name = format!("chain_{}.csv", t.chain_id);
        let z_name = format!("chain_{}_z.csv", t.chain_id);
        write_trace(&args.out_dir.join(&trace_name), &prob, t)?;
        write_trace_z(&args.out_dir.join(&z_name), &prob, t)?;
        outputs.insert(trace_name.clone(), file_digest(&args.out_dir.join(&trace_name))?);
        outputs.insert(z_name.clone(), file_digest(&args.out_dir.join(&z_name))?);
        if t.accept_phi2.1 > 0 {
            acceptance.insert(
                format!("chain_{}_phi2", t.chain_id),
                t.accept_phi2.0 as f64 / t.accept_phi2.1 as f64,
            );
        }
        if t.accept_alpha.1 > 0 {
            acceptance.insert(
                format!("chain_{}_alpha", t.chain_id),
                t.accept_alpha.0 as f64 / t.accept_alpha.1 as f64,
            );
        }
    }

    write_fit_summaries(&args.out_dir, &prob, &traces)?;

    let mut inputs = BTreeMap::new();
    for name in ["sites.csv", "responses.csv", "config.toml"] {
        inputs.insert(
            format!("inputs/{name}"),
            file_digest(&inputs_dir.join(name))?,
        );
    }
    let manifest = RunManifest {
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: fit_config.seed,
        chains: fit_config.chains,
        iterations: fit_config.iterations,
        burnin: fit_config.burnin,
        thin_z: fit_config.thin_z,
        config_hash: inputs["inputs/config.toml"].clone(),
        inputs,
        outputs,
        acceptance,
        standardization: ManifestStandardization {
            covariates: covariate_names,
            means: standardization.means,
            sds: standardization.sds,
        },
    };
    manifest.write(&args.out_dir)?;

    Ok(FitReport {
        warnings,
        out_dir: args.out_dir.clone(),
    })
}

fn write_fit_summaries(dir: &Path, prob: &FitProblem, traces: &[TraceStore]) -> Result<()> {
    // parameter summary table
    let mut rows = Vec::new();
    for (name, param) in free_parameters(prob) {
        let draws = merged_param_draws(traces, param);
        let (lo, med, hi) = median_ci95(&draws);
        rows.push(vec![name, fmt_f64(med), fmt_f64(lo), fmt_f64(hi)]);
    }
    {
        let phi2 = merged_param_draws(traces, ParamRef::Phi2);
        let (_, (lo, med, hi)) = effective_range(&phi2);
        rows.push(vec![
            "effective_range".into(),
            fmt_f64(med),
            fmt_f64(lo),
            fmt_f64(hi),
        ]);
    }
    write_table(
        &dir.join("param_summary.csv"),
        &["parameter", "median", "lo", "hi"],
        &rows,
    )?;

    // per-site latent-field summary
    let h = h_site_summaries(traces);
    let rows: Vec<Vec<String>> = prob
        .data
        .site_ids
        .iter()
        .zip(&h)
        .map(|(id, (lo, med, hi))| vec![id.clone(), fmt_f64(*med), fmt_f64(*lo), fmt_f64(*hi)])
        .collect();
    write_table(
        &dir.join("H_summary.csv"),
        &["site_id", "median", "lo", "hi"],
        &rows,
    )?;

    // observed response frequency table (raw-data convenience summary)
    let mut rows = Vec::new();
    for &j in &prob.ordinal {
        for cat in 1..=prob.k {
            let count = (0..prob.n())
                .filter(|&i| prob.data.y[(i, j)] == cat as f64)
                .count();
            rows.push(vec![
                prob.metrics[j].name.clone(),
                cat.to_string(),
                count.to_string(),
            ]);
        }
    }
    write_table(
        &dir.join("response_frequencies.csv"),
        &["metric", "category", "count"],
        &rows,
    )
}

/// A fit directory loaded back into memory, manifest verified.
pub struct LoadedFit {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub config: RunConfig,
    pub prob: FitProblem,
    pub traces: Vec<TraceStore>,
}

/// Read a fit directory, verifying every digest recorded in its manifest
/// before trusting the contents.
pub fn load_fit(dir: &Path) -> Result<LoadedFit> {
    let manifest = RunManifest::read(dir)?;
    manifest.verify(dir)?;

    let config_text = fs::read_to_string(dir.join("inputs/config.toml"))
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    let config = RunConfig::parse(&config_text)?;
    let metrics = config.metric_specs()?;
    let constraints = config.constraints(&metrics)?;
    let (data, _) = read_dataset(&dir.join("inputs"), &metrics)?;
    let prob = FitProblem::new(data, metrics, config.priors.clone(), constraints)?;

    let mut traces = Vec::with_capacity(manifest.chains);
    for c in 0..manifest.chains {
        traces.push(read_trace(
            &dir.join(format!("chain_{c}.csv")),
            &dir.join(format!("chain_{c}_z.csv")),
            &prob,
            c,
            manifest.burnin,
            manifest.thin_z,
        )?);
    }
    Ok(LoadedFit {
        dir: dir.to_path_buf(),
        manifest,
        config,
        prob,
        traces,
    })
}

/// Kriging prediction at new sites; writes `predictions.csv` and an
/// `H_summary.csv` for the new locations.
pub fn cmd_predict(fit_dir: &Path, newdata_dir: &Path, out_dir: &Path, thin: usize) -> Result<()> {
    let lf = load_fit(fit_dir)?;
    let sites = read_sites(&newdata_dir.join("sites.csv"))?;
    if sites.covariate_names != lf.prob.data.covariate_names {
        return Err(Error::InvalidDataset(format!(
            "newdata covariates {:?} do not match the fit's {:?}",
            sites.covariate_names, lf.prob.data.covariate_names
        )));
    }
    let mut x = sites.x.clone();
    lf.prob
        .data
        .standardization
        .as_ref()
        .expect("validated")
        .apply(&mut x);
    let new = NewSites {
        site_ids: sites.site_ids,
        coords: sites.coords,
        x,
    };
    let seed = lf.manifest.seed ^ PREDICT_SALT;
    let (h_draws, y_draws) = with_worker_pool(|| -> Result<_> {
        let h = predict_h(&lf.traces, &lf.prob, &new, thin, seed)?;
        let y = predict_y(&h, &lf.traces, &lf.prob, thin, seed)?;
        Ok((h, y))
    })?;
    let pred = PredictionResult {
        site_ids: new.site_ids.clone(),
        h_draws,
        y_draws,
    };

    ensure_dir(out_dir)?;
    let mut rows = Vec::new();
    for (j, metric) in lf.prob.metrics.iter().enumerate() {
        let draws = &pred.y_draws[j];
        for (i, id) in pred.site_ids.iter().enumerate() {
            let mut col = draws.column(i);
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lo = quantile_sorted(&col, 0.025);
            let hi = quantile_sorted(&col, 0.975);
            let point = if metric.is_ordinal() {
                // posterior-mode category
                let k = lf.prob.k;
                let mut counts = vec![0usize; k];
                for r in 0..draws.nrows() {
                    counts[draws.get(r, i) as usize - 1] += 1;
                }
                let mode = counts
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(c, _)| c + 1)
                    .unwrap();
                mode.to_string()
            } else {
                fmt_f64(quantile_sorted(&col, 0.5))
            };
            rows.push(vec![
                id.clone(),
                metric.name.clone(),
                point,
                fmt_f64(lo),
                fmt_f64(hi),
            ]);
        }
    }
    write_table(
        &out_dir.join("predictions.csv"),
        &["site_id", "metric", "point", "lo", "hi"],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = pred
        .site_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let (lo, med, hi) = median_ci95(&pred.h_draws.column(i));
            vec![id.clone(), fmt_f64(med), fmt_f64(lo), fmt_f64(hi)]
        })
        .collect();
    write_table(
        &out_dir.join("H_summary.csv"),
        &["site_id", "median", "lo", "hi"],
        &rows,
    )
}

/// Posterior ranks of the observed sites; writes `ranks.csv`.
pub fn cmd_rank(fit_dir: &Path, out_dir: &Path) -> Result<()> {
    let lf = load_fit(fit_dir)?;
    let n = lf.prob.n();
    let mut h = TraceMatrix::new(n);
    for t in &lf.traces {
        for r in 0..t.h.nrows() {
            h.push_row(t.h.row(r));
        }
    }
    let ranks = posterior_ranks(&h);
    ensure_dir(out_dir)?;
    let rows: Vec<Vec<String>> = lf
        .prob
        .data
        .site_ids
        .iter()
        .zip(&ranks)
        .map(|(id, r)| {
            vec![
                id.clone(),
                fmt_f64(r.median_rank),
                fmt_f64(r.lo),
                fmt_f64(r.hi),
                fmt_f64(r.percentile),
            ]
        })
        .collect();
    write_table(
        &out_dir.join("ranks.csv"),
        &["site_id", "median_rank", "lo", "hi", "percentile"],
        &rows,
    )
}

/// Metric-field correlations and contribution weights; writes `weights.csv`
/// and `association.csv`.
pub fn cmd_correlate(fit_dir: &Path, out_dir: &Path) -> Result<()> {
    let lf = load_fit(fit_dir)?;
    let summary = multiple_correlation(&lf.traces, &lf.prob)?;
    ensure_dir(out_dir)?;
    let mut rows = Vec::new();
    for (j, name) in summary.metric_names.iter().enumerate() {
        let (r_lo, r_med, r_hi) = summary.r_summary(j);
        let (c_lo, c_med, c_hi) = summary.contribution_summary(j);
        rows.push(vec![
            name.clone(),
            fmt_f64(r_med),
            fmt_f64(r_lo),
            fmt_f64(r_hi),
            fmt_f64(c_med),
            fmt_f64(c_lo),
            fmt_f64(c_hi),
        ]);
    }
    write_table(
        &out_dir.join("weights.csv"),
        &[
            "metric",
            "R_median",
            "R_lo",
            "R_hi",
            "contribution_median",
            "contribution_lo",
            "contribution_hi",
        ],
        &rows,
    )?;
    let (lo, med, hi) = summary.r2m_summary();
    write_table(
        &out_dir.join("association.csv"),
        &["r2m_median", "r2m_lo", "r2m_hi"],
        &[vec![fmt_f64(med), fmt_f64(lo), fmt_f64(hi)]],
    )
}

/// Model-evaluation loss table; writes `loss.csv` and `z_hat.csv`.
pub fn cmd_evaluate(fit_dir: &Path, out_dir: &Path) -> Result<()> {
    let lf = load_fit(fit_dir)?;
    let table = zhat_table(&lf.traces, &lf.prob)?;
    let losses = standardized_loss(
        &lf.traces,
        &lf.prob,
        &table,
        lf.manifest.seed ^ LOSS_SALT,
    );
    ensure_dir(out_dir)?;
    let rows: Vec<Vec<String>> = lf
        .prob
        .metrics
        .iter()
        .zip(&losses)
        .map(|(m, l)| vec![m.name.clone(), fmt_f64(*l)])
        .collect();
    write_table(
        &out_dir.join("loss.csv"),
        &["metric", "median_standardized_loss"],
        &rows,
    )?;

    let mut header = vec!["site_id".to_string()];
    header.extend(lf.prob.ordinal.iter().map(|&j| lf.prob.metrics[j].name.clone()));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = (0..lf.prob.n())
        .map(|i| {
            let mut row = vec![lf.prob.data.site_ids[i].clone()];
            for &j in &lf.prob.ordinal {
                row.push(fmt_f64(table.z_hat[(i, j)]));
            }
            row
        })
        .collect();
    write_table(&out_dir.join("z_hat.csv"), &header_refs, &rows)
}

#[derive(Debug)]
pub struct DiagnoseReport {
    /// (parameter, PSRF) rows.
    pub rows: Vec<(String, f64)>,
    /// True when any parameter sits at or above the 1.2 convergence bar.
    pub flagged: bool,
}

/// Gelman-Rubin diagnostics per free parameter; writes `diagnostics.csv`.
pub fn cmd_diagnose(fit_dir: &Path, out_dir: &Path) -> Result<DiagnoseReport> {
    let lf = load_fit(fit_dir)?;
    if lf.traces.len() < 2 {
        return Err(Error::NeedTwoChains);
    }
    let mut rows = Vec::new();
    let mut flagged = false;
    for (name, param) in free_parameters(&lf.prob) {
        let chains: Vec<Vec<f64>> = lf.traces.iter().map(|t| param_column(t, param)).collect();
        let r = psrf(&chains)?;
        flagged |= r >= 1.2;
        rows.push((name, r));
    }
    ensure_dir(out_dir)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|(n, r)| vec![n.clone(), fmt_f64(*r)])
        .collect();
    write_table(&out_dir.join("diagnostics.csv"), &["parameter", "psrf"], &table)?;
    Ok(DiagnoseReport { rows, flagged })
}

/// Generate a synthetic dataset; writes the fit pair, a holdout pair, the
/// truth record, and a ready-to-fit configuration.
pub fn cmd_simulate(
    config_path: Option<&Path>,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<Vec<String>> {
    let mut config = match config_path {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let mut sim = config.sim.clone().unwrap_or_default();
    if let Some(seed) = seed_override {
        sim.seed = seed;
    }
    let out = crate::simulation::simulate_dataset(&sim)?;

    ensure_dir(out_dir)?;
    write_dataset(out_dir, &out.fit, &out.metrics)?;
    write_dataset(&out_dir.join("holdout"), &out.holdout, &out.metrics)?;

    // truth record: parameters, field values, latent responses
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut param = |name: String, v: f64| {
        rows.push(vec!["param".into(), name, fmt_f64(v)]);
    };
    for (i, b) in sim.beta.iter().enumerate() {
        param(format!("beta_{}", i + 1), *b);
    }
    for (j, v) in sim.theta.iter().enumerate() {
        param(format!("theta_{}", j + 1), *v);
    }
    for (j, v) in sim.omega.iter().enumerate() {
        param(format!("omega_{}", j + 1), *v);
    }
    for (j, v) in sim.sigma2.iter().enumerate() {
        param(format!("sigma2_{}", j + 1), *v);
    }
    param("phi1".into(), sim.phi1);
    param("phi2".into(), sim.phi2);
    param("effective_range".into(), 3.0 / sim.phi2);
    for (k, v) in sim.lambda_interior.iter().enumerate() {
        param(format!("lambda_{}", k + 1), *v);
    }
    for (i, id) in out.truth.site_ids.iter().enumerate() {
        rows.push(vec!["h".into(), id.clone(), fmt_f64(out.truth.h[i])]);
    }
    for (j, m) in out.metrics.iter().enumerate() {
        for (i, id) in out.truth.site_ids.iter().enumerate() {
            rows.push(vec![
                "z".into(),
                format!("{id}:{}", m.name),
                fmt_f64(out.truth.z[(i, j)]),
            ]);
        }
    }
    write_table(&out_dir.join("truth.csv"), &["kind", "name", "value"], &rows)?;

    // ready-to-fit configuration echoing the generated metrics
    config.metrics = out
        .metrics
        .iter()
        .map(|m| super::config::MetricDecl {
            name: m.name.clone(),
            kind: m.kind,
            categories: None,
        })
        .collect();
    config.model.categories = Some(sim.categories);
    config.sim = Some(sim);
    fs::write(out_dir.join("config.toml"), config.to_toml())
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    Ok(out.warnings)
}
