//! Run-configuration file: a TOML document with sections for the metric
//! declarations, model constraints, priors, chain settings, and simulation
//! truth. Unknown keys anywhere are hard errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Constraints, MetricKind, MetricSpec, PriorConfig, ThresholdMode};
use crate::sampler::FitConfig;
use crate::simulation::SimConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricDecl {
    pub name: String,
    pub kind: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Category count applied to every ordinal metric that does not declare
    /// its own.
    pub categories: Option<usize>,
    pub threshold_mode: Option<ThresholdMode>,
    /// Metric (by name) whose latent variance is pinned to 1.
    pub reference_ordinal_metric: Option<String>,
    /// Metric (by name) whose loading is pinned to 1.
    pub reference_loading_metric: Option<String>,
    pub fix_phi1: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub count: usize,
    pub iterations: usize,
    pub burnin: usize,
    pub thin_z: usize,
    pub seed: u64,
}

impl Default for ChainSection {
    fn default() -> Self {
        let d = FitConfig::default();
        ChainSection {
            count: d.chains,
            iterations: d.iterations,
            burnin: d.burnin,
            thin_z: d.thin_z,
            seed: d.seed,
        }
    }
}

/// The whole configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "metric", skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<MetricDecl>,
    pub model: ModelSection,
    pub priors: PriorConfig,
    pub chains: ChainSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Metric declarations as typed definitions, with the section-level category
    /// count filled in.
    pub fn metric_specs(&self) -> Result<Vec<MetricSpec>> {
        if self.metrics.is_empty() {
            return Err(Error::InvalidConfig(
                "no [[metric]] declarations in config".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.metrics.len());
        let mut seen = std::collections::HashSet::new();
        for m in &self.metrics {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "metric `{}` declared twice",
                    m.name
                )));
            }
            let categories = match m.kind {
                MetricKind::Ordinal => match m.categories.or(self.model.categories) {
                    Some(k) => Some(k),
                    None => {
                        return Err(Error::InvalidConfig(format!(
                            "ordinal metric `{}` needs `categories` (inline or in [model])",
                            m.name
                        )))
                    }
                },
                MetricKind::Continuous => None,
            };
            out.push(MetricSpec {
                name: m.name.clone(),
                kind: m.kind,
                categories,
            });
        }
        Ok(out)
    }

    /// Constraints resolved against the metric declarations.
    pub fn constraints(&self, metrics: &[MetricSpec]) -> Result<Constraints> {
        let mut c = Constraints::default_for(metrics)?;
        let index_of = |name: &str| -> Result<usize> {
            metrics
                .iter()
                .position(|m| m.name == name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown metric `{name}`")))
        };
        if let Some(name) = &self.model.reference_ordinal_metric {
            c.reference_ordinal_metric = index_of(name)?;
        }
        if let Some(name) = &self.model.reference_loading_metric {
            c.reference_loading_metric = index_of(name)?;
        }
        if let Some(mode) = self.model.threshold_mode {
            c.threshold_mode = mode;
        }
        if let Some(fix) = self.model.fix_phi1 {
            c.fix_phi1 = fix;
        }
        c.validate(metrics)?;
        Ok(c)
    }

    /// Chain settings with optional command-line overrides applied.
    pub fn fit_config(&self, overrides: &FitOverrides) -> FitConfig {
        FitConfig {
            chains: overrides.chains.unwrap_or(self.chains.count),
            iterations: overrides.iterations.unwrap_or(self.chains.iterations),
            burnin: overrides.burnin.unwrap_or(self.chains.burnin),
            thin_z: overrides.thin_z.unwrap_or(self.chains.thin_z).max(1),
            seed: overrides.seed.unwrap_or(self.chains.seed),
        }
    }
}

/// Command-line overrides of the `[chains]` section.
#[derive(Debug, Clone, Default)]
pub struct FitOverrides {
    pub chains: Option<usize>,
    pub iterations: Option<usize>,
    pub burnin: Option<usize>,
    pub thin_z: Option<usize>,
    pub seed: Option<u64>,
}
