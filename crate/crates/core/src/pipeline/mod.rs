//! Batch pipeline: configuration files, fit-directory layout, and the
//! orchestration behind each CLI command.
//!
//! A fit directory is self-contained: it carries a copy of its inputs, one
//! parameter-trace CSV and one latent-response CSV per chain, posterior
//! summary tables, and a `manifest.toml` recording the seed, settings, and
//! SHA-256 digests of everything. Consuming commands verify the digests
//! before trusting the directory, and a rerun with the same manifest
//! reproduces every output byte for byte.

pub mod commands;
pub mod config;
pub mod io;

pub use commands::{
    cmd_correlate, cmd_diagnose, cmd_evaluate, cmd_fit, cmd_predict, cmd_rank, cmd_simulate,
    load_fit, DiagnoseReport, FitArgs, FitReport, LoadedFit,
};
pub use config::{FitOverrides, RunConfig};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Worker-count override honored by every parallel section.
pub const THREADS_ENV: &str = "GEOLATENT_THREADS";

/// Run `f` inside a rayon pool sized by the `GEOLATENT_THREADS` environment
/// variable when set (no-op without the `parallel` feature).
pub fn with_worker_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        if let Some(k) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&k| k >= 1)
        {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(k).build() {
                return pool.install(f);
            }
        }
    }
    f()
}

/// Covariate standardization recorded for prediction-time reuse.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestStandardization {
    pub covariates: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

/// Contents of `manifest.toml`: run settings plus digests of every file the
/// fit consumed or produced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub engine_version: String,
    pub seed: u64,
    pub chains: usize,
    pub iterations: usize,
    pub burnin: usize,
    pub thin_z: usize,
    /// SHA-256 of the copied configuration file.
    pub config_hash: String,
    /// Digests of the copied input files (relative paths).
    pub inputs: BTreeMap<String, String>,
    /// Digests of the trace files (relative paths).
    pub outputs: BTreeMap<String, String>,
    /// Post-burn-in Metropolis acceptance rates per chain.
    pub acceptance: BTreeMap<String, f64>,
    pub standardization: ManifestStandardization,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("manifest serialization: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::ManifestMismatch(format!("unreadable manifest: {e}")))
    }

    /// Recompute and compare every recorded digest under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (rel, want) in self.inputs.iter().chain(self.outputs.iter()) {
            let path = dir.join(rel);
            let got = io::file_digest(&path)?;
            if got != *want {
                return Err(Error::ManifestMismatch(format!(
                    "digest mismatch for `{rel}`: manifest {want}, file {got}"
                )));
            }
        }
        Ok(())
    }
}
