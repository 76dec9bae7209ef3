//! Seed sweeps over every (density, MAC, beacon size) combination.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ztdim_sim::metrics::{
    self, default_edges, mean_over_seeds, neighbors, to_samples, MetricAccumulator, MetricSample, RunKey, RunMetrics,
    HEADLINE_RANGE_M,
};
use ztdim_sim::mobility::{build_scenario, DensitySpec, SAMPLE_INTERVAL_S};
use ztdim_sim::radio::{self, Mac, RunConfig};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Worker-count override for the run pool.
pub const WORKERS_ENV: &str = "ZTDIM_WORKERS";

#[derive(Debug, Clone)]
pub struct RunResult {
    pub key: RunKey,
    pub metrics: RunMetrics,
    pub neighbors: f64,
    /// Wall-clock time of the radio simulation; never written to disk.
    pub elapsed_s: f64,
}

impl RunResult {
    pub fn samples(&self) -> Vec<MetricSample> {
        to_samples(&self.key, &self.metrics, Some(self.neighbors))
    }

    pub fn file_name(&self) -> String {
        let k = &self.key;
        format!("{}-{}-{}B-d{}-s{}.csv", k.scenario, k.mac.name(), k.beacon_bytes, k.density, k.seed)
    }
}

/// Seed-mean of one combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub mac: String,
    pub beacon_bytes: u32,
    pub density: u32,
    pub seeds: u32,
    pub prr150: Option<f64>,
    pub cbr: Option<f64>,
    pub data_age_s: Option<f64>,
    pub neighbors: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
    /// Seed-mean PRR per distance bin.
    pub prr_curves: Vec<MetricSample>,
}

/// Radio settings for one run of the experiment.
pub fn run_config(cfg: &ExperimentConfig, mac: Mac, beacon_bytes: u32, seed: u64) -> RunConfig {
    let mut rc = RunConfig::new(mac, beacon_bytes, cfg.duration_s, seed);
    rc.warmup_s = cfg.warmup_s;
    rc.phy.shadowing = cfg.shadowing;
    rc.sps.keep_probability = cfg.p_keep;
    let max_edge = default_edges(cfg.scenario).last().copied().unwrap_or(HEADLINE_RANGE_M);
    rc.max_rx_distance_m = 2.0 * max_edge;
    rc
}

/// Every run for one density and seed. The traces are shared by all MAC
/// and beacon combinations so that profiles are compared on equal ground.
pub fn run_group(cfg: &ExperimentConfig, density: u32, seed: u64) -> Result<Vec<RunResult>, CliError> {
    let geometry = cfg.geometry();
    let spec = DensitySpec { vehicles_per_km: density, duration_s: cfg.warmup_s + cfg.duration_s, seed };
    let traces = build_scenario(&geometry, &spec)?;
    let measured_from = (cfg.warmup_s / SAMPLE_INTERVAL_S).round() as usize;
    let steps = (cfg.duration_s / SAMPLE_INTERVAL_S).round() as usize;
    let neigh = neighbours_in_window(&geometry, &traces, measured_from, steps)?;
    let mut out = Vec::new();
    for &mac in &cfg.macs {
        for &bytes in &cfg.beacon_bytes {
            let rc = run_config(cfg, mac, bytes, seed);
            let mut acc = MetricAccumulator::new(mac, default_edges(cfg.scenario));
            let started = Instant::now();
            radio::run(&geometry, &traces, &rc, &mut acc)?;
            let elapsed_s = started.elapsed().as_secs_f64();
            out.push(RunResult {
                key: RunKey { scenario: cfg.scenario_label().into(), mac, beacon_bytes: bytes, density, seed },
                metrics: acc.finish(),
                neighbors: neigh,
                elapsed_s,
            });
        }
    }
    Ok(out)
}

fn neighbours_in_window(
    geometry: &ztdim_sim::mobility::ScenarioGeometry,
    traces: &[ztdim_sim::mobility::VehicleTrace],
    from: usize,
    steps: usize,
) -> Result<f64, CliError> {
    let window: Vec<_> = traces
        .iter()
        .map(|t| ztdim_sim::mobility::VehicleTrace { positions: t.positions[from..].to_vec(), ..t.clone() })
        .collect();
    Ok(neighbors(geometry, &window, HEADLINE_RANGE_M, steps)?)
}

pub fn worker_count() -> Result<Option<usize>, CliError> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(crate::config::ConfigError::BadValue {
                key: "ZTDIM_WORKERS",
                message: format!("{v:?} is not a positive integer"),
            })),
        },
    }
}

/// Runs every combination and seed and writes the results tree into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, workers: Option<usize>) -> Result<ExperimentOutput, CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    let groups: Vec<(u32, u64)> =
        cfg.densities.iter().flat_map(|&d| cfg.seed_list().into_iter().map(move |s| (d, s))).collect();
    let results: Vec<Vec<RunResult>> =
        pool.install(|| groups.par_iter().map(|&(d, s)| run_group(cfg, d, s)).collect::<Result<_, _>>())?;
    let mut runs: Vec<RunResult> = results.into_iter().flatten().collect();
    runs.sort_by(|a, b| {
        let ka = (&a.key.scenario, a.key.mac, a.key.beacon_bytes, a.key.density, a.key.seed);
        ka.cmp(&(&b.key.scenario, b.key.mac, b.key.beacon_bytes, b.key.density, b.key.seed))
    });
    write_results(cfg, out, runs)
}

fn summarise(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, Mac, u32, u32), Vec<&RunResult>> = BTreeMap::new();
    for r in runs {
        let k = &r.key;
        groups.entry((k.scenario.clone(), k.mac, k.beacon_bytes, k.density)).or_default().push(r);
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    groups
        .into_iter()
        .map(|((scenario, mac, beacon_bytes, density), rs)| SummaryRow {
            scenario,
            mac: mac.name().into(),
            beacon_bytes,
            density,
            seeds: rs.len() as u32,
            prr150: mean(rs.iter().filter_map(|r| r.metrics.prr_headline).collect()),
            cbr: mean(rs.iter().filter_map(|r| r.metrics.cbr).collect()),
            data_age_s: mean(rs.iter().filter_map(|r| r.metrics.data_age_s).collect()),
            neighbors: mean(rs.iter().map(|r| r.neighbors).collect()).unwrap_or(0.0),
        })
        .collect()
}

fn write_results(cfg: &ExperimentConfig, out: &Path, runs: Vec<RunResult>) -> Result<ExperimentOutput, CliError> {
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir)?;
    let mut files: Vec<PathBuf> = Vec::new();
    for r in &runs {
        let path = runs_dir.join(r.file_name());
        metrics::write_csv_file(&r.samples(), &path)?;
        files.push(path);
    }

    let summary = summarise(&runs);
    let path = out.join("summary.csv");
    write_summary(&summary, fs::File::create(&path)?)?;
    files.push(path);

    let prr: Vec<MetricSample> = runs.iter().flat_map(|r| r.samples()).filter(|s| s.metric == "prr").collect();
    let prr_curves = mean_over_seeds(&prr);
    let path = out.join("prr_vs_distance.csv");
    metrics::write_csv_file(&prr_curves, &path)?;
    files.push(path);

    let config_text = cfg.to_toml();
    let path = out.join("config.toml");
    fs::write(&path, &config_text)?;
    files.push(path);

    write_manifest(out, &config_text, &files)?;
    Ok(ExperimentOutput { dir: out.to_path_buf(), runs, summary, prr_curves })
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `manifest.txt`: config hash, tool version and the hash of every file.
fn write_manifest(out: &Path, config_text: &str, files: &[PathBuf]) -> Result<(), CliError> {
    let mut lines = vec![
        format!("config_sha256 {}", sha256_hex(config_text.as_bytes())),
        format!("ztdim {}", env!("CARGO_PKG_VERSION")),
    ];
    let mut entries: Vec<(String, String)> = Vec::new();
    for f in files {
        let rel = f.strip_prefix(out).unwrap_or(f).to_string_lossy().replace('\\', "/");
        entries.push((rel, sha256_hex(&fs::read(f)?)));
    }
    entries.sort();
    lines.extend(entries.into_iter().map(|(rel, h)| format!("file {rel} {h}")));
    fs::write(out.join("manifest.txt"), lines.join("\n") + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn tiny(seeds: u32) -> ExperimentConfig {
        parse_config_str(&format!(
            "[scenario]\nkind = \"highway\"\nlength_m = 400\ndensities = [20]\n\
             [radio]\nmacs = [\"dsrc\"]\nbeacon_bytes = [90, 1670]\nwarmup_s = 0.5\n\
             [run]\nduration_s = 1\nseeds = {seeds}\n"
        ))
        .unwrap()
    }

    #[test]
    fn counts_files_and_summary_rows() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&tiny(2), dir.path(), Some(1)).unwrap();
        assert_eq!(out.runs.len(), 4);
        assert_eq!(fs::read_dir(dir.path().join("runs")).unwrap().count(), 4);
        assert_eq!(out.summary.len(), 2);
        assert_eq!(read_summary(&dir.path().join("summary.csv")).unwrap(), out.summary);
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().filter(|l| l.starts_with("file ")).count(), 4 + 3);
        assert!(manifest.contains("file runs/highway-dsrc-90B-d20-s1.csv "));
    }

    #[test]
    fn reruns_are_byte_identical_across_worker_counts() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_experiment(&tiny(2), a.path(), Some(1)).unwrap();
        run_experiment(&tiny(2), b.path(), Some(3)).unwrap();
        let read = |p: &Path| fs::read(p).unwrap();
        assert_eq!(read(&a.path().join("manifest.txt")), read(&b.path().join("manifest.txt")));
        for entry in fs::read_dir(a.path().join("runs")).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(read(&a.path().join("runs").join(&name)), read(&b.path().join("runs").join(&name)));
        }
    }
}
