//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate site id `{0}`")]
    DuplicateSiteId(String),

    #[error("category out of range: site `{site}`, metric `{metric}` has value {value}, expected an integer in [1, {k}]")]
    CategoryOutOfRange {
        site: String,
        metric: String,
        value: f64,
        k: usize,
    },

    #[error("non-finite value in column `{column}` at site `{site}`")]
    NonFinite { column: String, site: String },

    #[error("covariate column `{0}` has zero variance; cannot standardize")]
    ZeroVarianceCovariate(String),

    #[error("covariance not PD")]
    CovarianceNotPd,

    #[error("need >=2 chains")]
    NeedTwoChains,

    #[error("nothing to sample")]
    NothingToSample,

    #[error("non-finite value for `{parameter}` at iteration {iteration} (chain {chain})")]
    NonFiniteParameter {
        parameter: String,
        iteration: usize,
        chain: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on `{path}`: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
