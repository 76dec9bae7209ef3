use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ztdim_cli::compare::compare_overhead;
use ztdim_cli::config::{parse_config, preset};
use ztdim_cli::demo::{attack_cli, handshake_demo, DemoOptions};
use ztdim_cli::experiment::{run_experiment, worker_count};
use ztdim_cli::{CliError, ConfigError, ExperimentConfig};
use ztdim_core::adversary::SUITE_INSTANCES;
use ztdim_core::handshake::{Guard, HandshakeStatus, DEFAULT_FRESHNESS_WINDOW_MS};
use ztdim_sim::mobility::{build_scenario, write_traces_csv, DensitySpec};

/// Zero-trust identity management over simulated V2X links.
#[derive(Parser)]
#[command(name = "ztdim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: paper-highway, paper-urban, desk-highway, desk-urban.
    #[arg(long)]
    preset: Option<String>,
    /// Override the number of seeds.
    #[arg(long)]
    seeds: Option<u32>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => parse_config(path)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => return Err(ConfigError::MissingKey("--config or --preset")),
        };
        if let Some(n) = self.seeds {
            if n == 0 {
                return Err(ConfigError::BadValue { key: "--seeds", message: "must be at least 1".into() });
            }
            cfg.seeds = n;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sweep every combination and seed and write the results tree.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Results directory, overriding the config's output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline versus D-IM overhead from a results directory.
    Compare {
        #[arg(long)]
        out: PathBuf,
    },
    /// Register two vehicles, authenticate and exchange one payload.
    HandshakeDemo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        revoke_peer: bool,
        /// Index of the verifier node to crash, 0 to 3.
        #[arg(long)]
        crash_node: Option<usize>,
        /// Take the freshness window from this config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Scripted attacks; exits 1 if any succeeds.
    AttackSuite {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = SUITE_INSTANCES)]
        instances: usize,
        /// Switch one guard off: freshness, key-match, commitment-echo,
        /// challenge-binding or revocation.
        #[arg(long)]
        disable_guard: Option<String>,
    },
    /// Write the mobility trace of one density and seed as CSV.
    ExportTraces {
        #[command(flatten)]
        config: ConfigArgs,
        /// Density to export; defaults to the config's first.
        #[arg(long)]
        density: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = config.load()?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            let result = run_experiment(&cfg, &dir, worker_count()?)?;
            println!("{} runs written to {}", result.runs.len(), dir.display());
            println!("scenario,mac,beacon_bytes,density,prr150,cbr,data_age_s,neighbors");
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            for r in &result.summary {
                println!(
                    "{},{},{},{},{},{},{},{:.2}",
                    r.scenario,
                    r.mac,
                    r.beacon_bytes,
                    r.density,
                    opt(r.prr150),
                    opt(r.cbr),
                    opt(r.data_age_s),
                    r.neighbors
                );
            }
        }
        Command::Compare { out } => {
            let rows = compare_overhead(&out)?;
            println!("metric,scenario,mac,density,baseline,dim,delta");
            for r in rows {
                let metric = match r.metric {
                    ztdim_cli::compare::OverheadMetric::Prr150 => "prr150",
                    ztdim_cli::compare::OverheadMetric::Cbr => "cbr",
                    ztdim_cli::compare::OverheadMetric::DataAge => "data_age",
                };
                println!("{metric},{},{},{},{:.4},{:.4},{:.4}", r.scenario, r.mac, r.density, r.baseline, r.dim, r.delta);
            }
        }
        Command::HandshakeDemo { seed, revoke_peer, crash_node, config } => {
            let freshness_window_ms = match config {
                Some(path) => parse_config(&path)?.freshness_window_ms,
                None => DEFAULT_FRESHNESS_WINDOW_MS,
            };
            let opts = DemoOptions { seed, revoke_peer, crash_node, freshness_window_ms, ..DemoOptions::default() };
            let report = handshake_demo(&opts)?;
            println!("{report}");
            if let HandshakeStatus::Rejected(e) = report.status {
                return Err(CliError::Security(format!("handshake rejected: {}", e.code())));
            }
        }
        Command::AttackSuite { seed, instances, disable_guard } => {
            let guard = disable_guard
                .map(|g| g.parse::<Guard>())
                .transpose()
                .map_err(|e| ConfigError::BadValue { key: "--disable-guard", message: e.to_string() })?;
            let report = attack_cli(seed, instances, guard);
            println!("{report}");
            if report.total_successes() > 0 {
                return Err(CliError::Security(format!("{} attacker successes", report.total_successes())));
            }
        }
        Command::ExportTraces { config, density, seed, out } => {
            let cfg = config.load()?;
            let spec = DensitySpec {
                vehicles_per_km: density.unwrap_or(cfg.densities[0]),
                duration_s: cfg.warmup_s + cfg.duration_s,
                seed: seed.unwrap_or(cfg.first_seed),
            };
            let traces = build_scenario(&cfg.geometry(), &spec)?;
            match out {
                Some(path) => write_traces_csv(&traces, io::BufWriter::new(fs::File::create(path)?))?,
                None => write_traces_csv(&traces, io::stdout().lock())?,
            }
        }
    }
    io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
