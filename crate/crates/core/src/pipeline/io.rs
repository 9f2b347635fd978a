//! CSV and digest plumbing for the batch pipeline.
//!
//! All floating-point output is written with 17 significant digits so that
//! rereading a file reproduces the exact bits and reruns are comparable
//! byte-for-byte.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{MetricSpec, ObservationSet};
use crate::sampler::{free_parameters, param_column, FitProblem, TraceMatrix, TraceStore};

/// 17-significant-digit rendering; `NA` for undefined values.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.16e}")
    }
}

pub fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    if s == "NA" {
        return Ok(f64::NAN);
    }
    s.parse::<f64>()
        .map_err(|_| Error::InvalidDataset(format!("bad number `{s}` in {}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path.display().to_string(), e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))
}

/// Parsed `sites.csv`: site ids, coordinates, covariate names and values.
pub struct SitesFile {
    pub site_ids: Vec<String>,
    pub coords: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub x: DMatrix<f64>,
}

/// Read `sites.csv` (`site_id,x,y,<covariate columns...>`).
pub fn read_sites(path: &Path) -> Result<SitesFile> {
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::csv(path.display().to_string(), e))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[0] != "site_id" || cols[1] != "x" || cols[2] != "y" {
        return Err(Error::InvalidDataset(format!(
            "{}: expected header `site_id,x,y,<covariates...>` with at least one covariate",
            path.display()
        )));
    }
    let covariate_names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    let mut site_ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        site_ids.push(rec[0].to_string());
        let mut row = Vec::with_capacity(cols.len() - 1);
        for v in rec.iter().skip(1) {
            row.push(parse_f64(v, path)?);
        }
        if row.len() != cols.len() - 1 {
            return Err(Error::InvalidDataset(format!(
                "{}: ragged row for site `{}`",
                path.display(),
                site_ids.last().unwrap()
            )));
        }
        rows.push(row);
    }
    let n = site_ids.len();
    let p = covariate_names.len();
    Ok(SitesFile {
        site_ids,
        coords: DMatrix::from_fn(n, 2, |i, c| rows[i][c]),
        covariate_names,
        x: DMatrix::from_fn(n, p, |i, j| rows[i][j + 2]),
    })
}

/// Read `responses.csv` (`site_id,<metric columns>`); metric columns are
/// located by name and may appear in any order.
pub fn read_responses(path: &Path, metrics: &[MetricSpec]) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::csv(path.display().to_string(), e))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.is_empty() || cols[0] != "site_id" {
        return Err(Error::InvalidDataset(format!(
            "{}: first column must be `site_id`",
            path.display()
        )));
    }
    let mut positions = Vec::with_capacity(metrics.len());
    for m in metrics {
        let pos = cols
            .iter()
            .position(|c| *c == m.name)
            .ok_or_else(|| {
                Error::InvalidDataset(format!(
                    "{}: missing response column `{}`",
                    path.display(),
                    m.name
                ))
            })?;
        positions.push(pos);
    }
    let mut site_ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        site_ids.push(rec[0].to_string());
        let mut row = Vec::with_capacity(metrics.len());
        for &pos in &positions {
            let field = rec.get(pos).ok_or_else(|| {
                Error::InvalidDataset(format!("{}: ragged row", path.display()))
            })?;
            row.push(parse_f64(field, path)?);
        }
        rows.push(row);
    }
    let n = site_ids.len();
    Ok((
        site_ids,
        DMatrix::from_fn(n, metrics.len(), |i, j| rows[i][j]),
    ))
}

/// Join sites and responses by site id (site order follows `sites.csv`).
pub fn assemble_observations(
    sites: SitesFile,
    response_ids: Vec<String>,
    y: DMatrix<f64>,
) -> Result<ObservationSet> {
    if sites.site_ids.len() != response_ids.len() {
        return Err(Error::InvalidDataset(format!(
            "sites.csv has {} rows but responses.csv has {}",
            sites.site_ids.len(),
            response_ids.len()
        )));
    }
    let mut index = std::collections::HashMap::new();
    for (i, id) in response_ids.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(Error::DuplicateSiteId(id.clone()));
        }
    }
    let n = sites.site_ids.len();
    let mut ordered = DMatrix::zeros(n, y.ncols());
    for (i, id) in sites.site_ids.iter().enumerate() {
        let &r = index.get(id.as_str()).ok_or_else(|| {
            Error::InvalidDataset(format!("site `{id}` missing from responses.csv"))
        })?;
        for j in 0..y.ncols() {
            ordered[(i, j)] = y[(r, j)];
        }
    }
    Ok(ObservationSet {
        site_ids: sites.site_ids,
        coords: sites.coords,
        x: sites.x,
        covariate_names: sites.covariate_names,
        y: ordered,
        standardization: None,
    })
}

/// Write a dataset back out as the `sites.csv` / `responses.csv` pair.
pub fn write_dataset(dir: &Path, data: &ObservationSet, metrics: &[MetricSpec]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let sites_path = dir.join("sites.csv");
    let mut w = csv_writer(&sites_path)?;
    let mut header = vec!["site_id".to_string(), "x".into(), "y".into()];
    header.extend(data.covariate_names.iter().cloned());
    w.write_record(&header)
        .map_err(|e| Error::csv(sites_path.display().to_string(), e))?;
    for i in 0..data.n() {
        let mut rec = vec![
            data.site_ids[i].clone(),
            fmt_f64(data.coords[(i, 0)]),
            fmt_f64(data.coords[(i, 1)]),
        ];
        for j in 0..data.p() {
            rec.push(fmt_f64(data.x[(i, j)]));
        }
        w.write_record(&rec)
            .map_err(|e| Error::csv(sites_path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(sites_path.display().to_string(), e))?;

    let resp_path = dir.join("responses.csv");
    let mut w = csv_writer(&resp_path)?;
    let mut header = vec!["site_id".to_string()];
    header.extend(metrics.iter().map(|m| m.name.clone()));
    w.write_record(&header)
        .map_err(|e| Error::csv(resp_path.display().to_string(), e))?;
    for i in 0..data.n() {
        let mut rec = vec![data.site_ids[i].clone()];
        for (j, m) in metrics.iter().enumerate() {
            let v = data.y[(i, j)];
            rec.push(if m.is_ordinal() {
                format!("{}", v as i64)
            } else {
                fmt_f64(v)
            });
        }
        w.write_record(&rec)
            .map_err(|e| Error::csv(resp_path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(resp_path.display().to_string(), e))?;
    Ok(())
}

/// Trace CSV header for a problem: the free scalar parameters followed by
/// the field values `H_1..H_n`.
pub fn trace_header(prob: &FitProblem) -> Vec<String> {
    let mut cols: Vec<String> = free_parameters(prob).into_iter().map(|(n, _)| n).collect();
    for i in 0..prob.n() {
        cols.push(format!("H_{}", i + 1));
    }
    cols
}

/// Write one chain's parameter trace (one row per stored iteration).
pub fn write_trace(path: &Path, prob: &FitProblem, trace: &TraceStore) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header = trace_header(prob);
    w.write_record(&header)
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    let params = free_parameters(prob);
    let cols: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| param_column(trace, *p))
        .collect();
    for r in 0..trace.len() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for col in &cols {
            rec.push(fmt_f64(col[r]));
        }
        for v in trace.h.row(r) {
            rec.push(fmt_f64(*v));
        }
        w.write_record(&rec)
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Write one chain's thinned latent-response draws
/// (`iter,z_<site>_<metric>...`).
pub fn write_trace_z(path: &Path, prob: &FitProblem, trace: &TraceStore) -> Result<()> {
    let mut w = csv_writer(path)?;
    let n = prob.n();
    let mut header = vec!["iter".to_string()];
    for &j in &prob.ordinal {
        for i in 0..n {
            header.push(format!("z_{}_{}", i + 1, j + 1));
        }
    }
    w.write_record(&header)
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for r in 0..trace.z.nrows() {
        let mut rec = vec![trace.z_iters[r].to_string()];
        rec.extend(trace.z.row(r).iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reload a chain trace pair written by [`write_trace`] / [`write_trace_z`].
pub fn read_trace(
    trace_path: &Path,
    z_path: &Path,
    prob: &FitProblem,
    chain_id: usize,
    burnin: usize,
    thin_z: usize,
) -> Result<TraceStore> {
    let mut rdr = open_reader(trace_path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::csv(trace_path.display().to_string(), e))?
        .clone();
    let expected = trace_header(prob);
    let got: Vec<&str> = headers.iter().collect();
    if got != expected.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
        return Err(Error::ManifestMismatch(format!(
            "{}: trace columns do not match the fitted model",
            trace_path.display()
        )));
    }
    let params = free_parameters(prob);
    let n = prob.n();
    let jm = prob.n_metrics();
    let dim = prob.k - 2;
    let sets = prob.n_threshold_sets();

    let mut beta = TraceMatrix::new(prob.data.p());
    let mut theta = TraceMatrix::new(jm);
    let mut omega = TraceMatrix::new(jm);
    let mut sigma2 = TraceMatrix::new(jm);
    let mut phi1 = Vec::new();
    let mut phi2 = Vec::new();
    let mut alpha = TraceMatrix::new(sets * dim);
    let mut h = TraceMatrix::new(n);

    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(trace_path.display().to_string(), e))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| parse_f64(s, trace_path))
            .collect::<Result<_>>()?;
        if vals.len() != expected.len() {
            return Err(Error::InvalidDataset(format!(
                "{}: ragged trace row",
                trace_path.display()
            )));
        }
        let mut beta_row = vec![0.0; prob.data.p()];
        let mut theta_row = vec![0.0; jm];
        let mut omega_row = vec![1.0; jm];
        let mut sigma2_row = vec![1.0; jm];
        let mut alpha_row = vec![0.0; sets * dim];
        for ((_, p), v) in params.iter().zip(vals.iter()) {
            match *p {
                crate::sampler::ParamRef::Beta(i) => beta_row[i] = *v,
                crate::sampler::ParamRef::Theta(j) => theta_row[j] = *v,
                crate::sampler::ParamRef::Omega(j) => omega_row[j] = *v,
                crate::sampler::ParamRef::Sigma2(j) => sigma2_row[j] = *v,
                crate::sampler::ParamRef::Phi1 => phi1.push(*v),
                crate::sampler::ParamRef::Phi2 => phi2.push(*v),
                crate::sampler::ParamRef::Alpha(i) => alpha_row[i] = *v,
            }
        }
        beta.push_row(&beta_row);
        theta.push_row(&theta_row);
        omega.push_row(&omega_row);
        sigma2.push_row(&sigma2_row);
        alpha.push_row(&alpha_row);
        h.push_row(&vals[params.len()..]);
    }

    let mut z = TraceMatrix::new(prob.ordinal.len() * n);
    let mut z_iters = Vec::new();
    let mut zr = open_reader(z_path)?;
    for rec in zr.records() {
        let rec = rec.map_err(|e| Error::csv(z_path.display().to_string(), e))?;
        let iter: usize = rec[0]
            .parse()
            .map_err(|_| Error::InvalidDataset(format!("{}: bad iter", z_path.display())))?;
        z_iters.push(iter);
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| parse_f64(s, z_path))
            .collect::<Result<_>>()?;
        z.push_row(&vals);
    }

    Ok(TraceStore {
        chain_id,
        burnin,
        thin_z,
        beta,
        theta,
        omega,
        sigma2,
        phi1,
        phi2,
        alpha,
        h,
        z,
        z_iters,
        accept_phi2: (0, 0),
        accept_alpha: (0, 0),
    })
}

/// Write a simple table: header plus string rows.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for row in rows {
        w.write_record(row)
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
