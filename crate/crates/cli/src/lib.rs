//! Experiment runner and command-line front end: config parsing, seed
//! sweeps, overhead reports, the handshake demo and the attack suite.

use thiserror::Error;

pub mod compare;
pub mod config;
pub mod demo;
pub mod experiment;

pub use config::{ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// A handshake was rejected or an attack script succeeded.
    #[error("security check failed: {0}")]
    Security(String),
    #[error("incomplete results: {0}")]
    IncompleteResults(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Process exit status: 1 security, 2 config, 3 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Security(_) => 1,
            CliError::Config(_) => 2,
            CliError::IncompleteResults(_) | CliError::Runtime(_) => 3,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    std::io::Error,
    csv::Error,
    ztdim_sim::metrics::MetricsError,
    ztdim_sim::mobility::MobilityError,
    ztdim_sim::radio::RadioError,
    ztdim_core::ledger::LedgerError,
    ztdim_core::identity::IdentityError
);
