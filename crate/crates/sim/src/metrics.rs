//! Evaluation metrics over event logs: PRR by distance, PRR within the
//! headline range, channel busy ratio, data age and neighbour counts.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mobility::{ScenarioGeometry, ScenarioKind, VehicleTrace};
use crate::radio::{EventLog, EventSink, Mac, OccupancyRecord, RxOutcome, TxEvent, WINDOW_NS};

/// Evaluation distance of the headline PRR and of the neighbour count.
pub const HEADLINE_RANGE_M: f64 = 150.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid metric input: {0}")]
    Invalid(String),
}

/// Distance bin edges `0, w, 2w, …, max`.
pub fn bin_edges(width_m: f64, max_m: f64) -> Vec<f64> {
    let n = (max_m / width_m).round() as usize;
    (0..=n).map(|i| i as f64 * width_m).collect()
}

/// Default bins: 20 m to 500 m on the highway, 10 m to 300 m in town.
pub fn default_edges(kind: ScenarioKind) -> Vec<f64> {
    match kind {
        ScenarioKind::Highway => bin_edges(20.0, 500.0),
        ScenarioKind::UrbanGrid => bin_edges(10.0, 300.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrrBin {
    /// Bin covers `(lo, hi]`.
    pub lo: f64,
    pub hi: f64,
    pub attempts: u64,
    pub decoded: u64,
}

impl PrrBin {
    pub fn prr(&self) -> f64 {
        self.decoded as f64 / self.attempts as f64
    }
}

fn bin_index(edges: &[f64], d: f64) -> Option<usize> {
    // first edge strictly below d, bins are closed on the right
    let i = edges.partition_point(|&e| e < d);
    (i >= 1 && i < edges.len()).then(|| i - 1)
}

fn bins_from_counts(edges: &[f64], counts: &[(u64, u64)]) -> Vec<PrrBin> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.0 > 0)
        .map(|(i, &(attempts, decoded))| PrrBin { lo: edges[i], hi: edges[i + 1], attempts, decoded })
        .collect()
}

/// PRR per distance bin; bins without receptions are left out.
pub fn prr(log: &EventLog, edges: &[f64]) -> Vec<PrrBin> {
    let mut counts = vec![(0u64, 0u64); edges.len().saturating_sub(1)];
    for o in log.outcomes() {
        if let Some(i) = bin_index(edges, o.distance_m) {
            counts[i].0 += 1;
            counts[i].1 += o.decoded as u64;
        }
    }
    bins_from_counts(edges, &counts)
}

/// PRR over all receptions within `range_m`.
pub fn prr_within(log: &EventLog, range_m: f64) -> Option<f64> {
    let (mut n, mut ok) = (0u64, 0u64);
    for o in log.outcomes().filter(|o| o.distance_m <= range_m) {
        n += 1;
        ok += o.decoded as u64;
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

fn occupancy_parts(mac: Mac, o: &OccupancyRecord) -> (u64, u64) {
    match mac {
        Mac::Dsrc => (o.busy_ns, WINDOW_NS),
        Mac::Cv2x => (o.busy_subchannels as u64, o.capacity_subchannels as u64),
    }
}

/// Mean busy fraction over every node and window.
pub fn cbr(log: &EventLog) -> Option<f64> {
    let (mut busy, mut capacity) = (0u128, 0u128);
    for o in &log.occupancy {
        let (b, c) = occupancy_parts(log.mac, o);
        busy += b as u128;
        capacity += c as u128;
    }
    (capacity > 0).then(|| busy as f64 / capacity as f64)
}

/// Mean delay from generation to start of air, in seconds.
pub fn data_age(log: &EventLog) -> Option<f64> {
    let total: u128 = log.txs.iter().map(|r| (r.tx.t_air_ns - r.tx.t_generated_ns) as u128).sum();
    let n = log.txs.len();
    (n > 0).then(|| total as f64 / n as f64 * 1e-9)
}

/// Time-averaged number of other vehicles within `range_m`, sampled at the
/// start of each of the first `samples` trace steps.
pub fn neighbors(geometry: &ScenarioGeometry, traces: &[VehicleTrace], range_m: f64, samples: usize) -> Result<f64, MetricsError> {
    if !(range_m > 0.0) {
        return Err(MetricsError::Invalid(format!("neighbour range {range_m} must be positive")));
    }
    if traces.is_empty() || samples == 0 {
        return Ok(0.0);
    }
    if traces.iter().any(|t| t.positions.len() < samples) {
        return Err(MetricsError::Invalid("traces shorter than the sampling horizon".into()));
    }
    let mut grid = Grid::new(geometry, range_m);
    let mut total = 0u64;
    for s in 0..samples {
        grid.fill(traces.iter().map(|t| t.positions[s]));
        total += grid.count_pairs_within(geometry, range_m);
    }
    // each pair counts once for each of its two vehicles
    Ok(2.0 * total as f64 / (samples as f64 * traces.len() as f64))
}

/// Uniform bucket grid with cells at least `range` wide; on the highway ring
/// the x axis wraps.
struct Grid {
    x0: f64,
    y0: f64,
    cell_x: f64,
    cell_y: f64,
    nx: usize,
    ny: usize,
    wrap_x: bool,
    cells: Vec<Vec<crate::mobility::Point>>,
}

impl Grid {
    fn new(geometry: &ScenarioGeometry, range: f64) -> Self {
        let b = geometry.bounds();
        let (w, h) = (b.x1 - b.x0, b.y1 - b.y0);
        let mut nx = ((w / range).floor() as usize).max(1);
        let ny = ((h / range).floor() as usize).max(1);
        let mut wrap_x = geometry.kind == ScenarioKind::Highway;
        if nx < 3 {
            // too few columns to wrap without visiting a pair twice
            nx = 1;
            wrap_x = false;
        }
        // cells are at least `range` wide because of the floor above
        Grid {
            x0: b.x0,
            y0: b.y0,
            cell_x: w / nx as f64,
            cell_y: h / ny as f64,
            nx,
            ny,
            wrap_x,
            cells: vec![Vec::new(); nx * ny],
        }
    }

    fn fill(&mut self, points: impl Iterator<Item = crate::mobility::Point>) {
        self.cells.iter_mut().for_each(Vec::clear);
        for p in points {
            let (cx, cy) = self.cell_of(p);
            self.cells[cy * self.nx + cx].push(p);
        }
    }

    fn cell_of(&self, p: crate::mobility::Point) -> (usize, usize) {
        let cx = (((p.x - self.x0) / self.cell_x).floor().max(0.0) as usize).min(self.nx - 1);
        let cy = (((p.y - self.y0) / self.cell_y).floor().max(0.0) as usize).min(self.ny - 1);
        (cx, cy)
    }

    fn count_pairs_within(&self, geometry: &ScenarioGeometry, range: f64) -> u64 {
        let mut count = 0u64;
        for cy in 0..self.ny {
            for cx in 0..self.nx {
                let here = &self.cells[cy * self.nx + cx];
                for (i, &a) in here.iter().enumerate() {
                    count += here[i + 1..].iter().filter(|&&b| geometry.distance(a, b) <= range).count() as u64;
                }
                for other in self.forward_neighbours(cx, cy) {
                    let there = &self.cells[other];
                    for &a in here {
                        count += there.iter().filter(|&&b| geometry.distance(a, b) <= range).count() as u64;
                    }
                }
            }
        }
        count
    }

    /// Half of the surrounding cells, so every adjacent pair is visited once.
    fn forward_neighbours(&self, cx: usize, cy: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(4);
        for (dx, dy) in [(1i64, 0i64), (-1, 1), (0, 1), (1, 1)] {
            let y = cy as i64 + dy;
            if y < 0 || y >= self.ny as i64 {
                continue;
            }
            let mut x = cx as i64 + dx;
            if self.wrap_x {
                x = x.rem_euclid(self.nx as i64);
            } else if x < 0 || x >= self.nx as i64 {
                continue;
            }
            out.push(y as usize * self.nx + x as usize);
        }
        out
    }
}

/// Per-run summary shared by the log-based and the streaming paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub prr_bins: Vec<PrrBin>,
    pub prr_headline: Option<f64>,
    pub cbr: Option<f64>,
    pub data_age_s: Option<f64>,
}

impl RunMetrics {
    pub fn from_log(log: &EventLog, edges: &[f64]) -> Self {
        RunMetrics {
            prr_bins: prr(log, edges),
            prr_headline: prr_within(log, HEADLINE_RANGE_M),
            cbr: cbr(log),
            data_age_s: data_age(log),
        }
    }
}

/// Event sink that keeps only the counters needed for [`RunMetrics`].
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    mac: Mac,
    edges: Vec<f64>,
    bins: Vec<(u64, u64)>,
    headline: (u64, u64),
    busy: u128,
    capacity: u128,
    age_ns: u128,
    txs: u64,
}

impl MetricAccumulator {
    pub fn new(mac: Mac, edges: Vec<f64>) -> Self {
        let bins = vec![(0, 0); edges.len().saturating_sub(1)];
        MetricAccumulator { mac, edges, bins, headline: (0, 0), busy: 0, capacity: 0, age_ns: 0, txs: 0 }
    }

    pub fn finish(&self) -> RunMetrics {
        let (n, ok) = self.headline;
        RunMetrics {
            prr_bins: bins_from_counts(&self.edges, &self.bins),
            prr_headline: (n > 0).then(|| ok as f64 / n as f64),
            cbr: (self.capacity > 0).then(|| self.busy as f64 / self.capacity as f64),
            data_age_s: (self.txs > 0).then(|| self.age_ns as f64 / self.txs as f64 * 1e-9),
        }
    }
}

impl EventSink for MetricAccumulator {
    fn record_tx(&mut self, tx: &TxEvent, outcomes: &[RxOutcome]) {
        self.txs += 1;
        self.age_ns += (tx.t_air_ns - tx.t_generated_ns) as u128;
        for o in outcomes {
            if let Some(i) = bin_index(&self.edges, o.distance_m) {
                self.bins[i].0 += 1;
                self.bins[i].1 += o.decoded as u64;
            }
            if o.distance_m <= HEADLINE_RANGE_M {
                self.headline.0 += 1;
                self.headline.1 += o.decoded as u64;
            }
        }
    }

    fn record_occupancy(&mut self, record: &OccupancyRecord) {
        let (b, c) = occupancy_parts(self.mac, record);
        self.busy += b as u128;
        self.capacity += c as u128;
    }
}

pub const CSV_HEADER: &str = "scenario,mac,beacon_bytes,density,seed,metric,bin,value";

/// One row of the metrics CSV. Distance-binned metrics use the bin's upper
/// edge as `bin`; scalar metrics use the density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub scenario: String,
    pub mac: String,
    pub beacon_bytes: u32,
    pub density: u32,
    pub seed: u64,
    pub metric: String,
    pub bin: f64,
    pub value: f64,
}

/// Identifies the run a group of samples came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RunKey {
    pub scenario: String,
    pub mac: Mac,
    pub beacon_bytes: u32,
    pub density: u32,
    pub seed: u64,
}

impl RunKey {
    fn sample(&self, metric: &str, bin: f64, value: f64) -> MetricSample {
        MetricSample {
            scenario: self.scenario.clone(),
            mac: self.mac.name().to_string(),
            beacon_bytes: self.beacon_bytes,
            density: self.density,
            seed: self.seed,
            metric: metric.to_string(),
            bin,
            value,
        }
    }
}

/// Flattens run metrics (and an optional neighbour count) into samples.
pub fn to_samples(key: &RunKey, m: &RunMetrics, neighbors: Option<f64>) -> Vec<MetricSample> {
    let d = key.density as f64;
    let mut out: Vec<MetricSample> = m.prr_bins.iter().map(|b| key.sample("prr", b.hi, b.prr())).collect();
    if let Some(v) = m.prr_headline {
        out.push(key.sample("prr150", d, v));
    }
    if let Some(v) = m.cbr {
        out.push(key.sample("cbr", d, v));
    }
    if let Some(v) = m.data_age_s {
        out.push(key.sample("data_age", d, v));
    }
    if let Some(v) = neighbors {
        out.push(key.sample("neighbors", d, v));
    }
    out
}

fn sample_order(a: &MetricSample, b: &MetricSample) -> std::cmp::Ordering {
    a.metric
        .cmp(&b.metric)
        .then(a.bin.total_cmp(&b.bin))
        .then(a.seed.cmp(&b.seed))
        .then_with(|| a.scenario.cmp(&b.scenario))
        .then_with(|| a.mac.cmp(&b.mac))
        .then(a.beacon_bytes.cmp(&b.beacon_bytes))
        .then(a.density.cmp(&b.density))
        .then(a.value.total_cmp(&b.value))
}

pub fn sort_samples(samples: &mut [MetricSample]) {
    samples.sort_by(sample_order);
}

/// Writes samples sorted by metric, bin and seed.
pub fn write_csv<W: io::Write>(samples: &[MetricSample], out: W) -> Result<(), MetricsError> {
    let mut sorted = samples.to_vec();
    sort_samples(&mut sorted);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for s in &sorted {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(samples: &[MetricSample], path: &Path) -> Result<(), MetricsError> {
    write_csv(samples, std::fs::File::create(path)?)
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<MetricSample>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(MetricsError::Invalid(format!("unexpected header {:?}", header.join(","))));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn read_csv_file(path: &Path) -> Result<Vec<MetricSample>, MetricsError> {
    read_csv(std::fs::File::open(path)?)
}

/// Arithmetic mean over seeds of every (scenario, mac, bytes, density,
/// metric, bin) group; the result carries `seed = 0`.
pub fn mean_over_seeds(samples: &[MetricSample]) -> Vec<MetricSample> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String, u32, u32, String, u64), (f64, f64, usize)> = BTreeMap::new();
    for s in samples {
        let key = (s.scenario.clone(), s.mac.clone(), s.beacon_bytes, s.density, s.metric.clone(), s.bin.to_bits());
        let e = groups.entry(key).or_insert((s.bin, 0.0, 0));
        e.1 += s.value;
        e.2 += 1;
    }
    let mut out: Vec<MetricSample> = groups
        .into_iter()
        .map(|((scenario, mac, beacon_bytes, density, metric, _), (bin, sum, n))| MetricSample {
            scenario,
            mac,
            beacon_bytes,
            density,
            seed: 0,
            metric,
            bin,
            value: sum / n as f64,
        })
        .collect();
    sort_samples(&mut out);
    out
}
