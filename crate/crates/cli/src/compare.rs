//! Baseline (90 B) versus D-IM (1670 B) overhead per combination.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::experiment::{read_summary, SummaryRow};
use crate::CliError;

pub const BASELINE_BYTES: u32 = 90;
pub const DIM_BYTES: u32 = 1670;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverheadMetric {
    /// Relative PRR reduction at 150 m, (baseline − dim) / baseline.
    Prr150,
    /// Relative CBR increase, (dim − baseline) / baseline.
    Cbr,
    /// Absolute data-age increase in seconds.
    DataAge,
}

impl OverheadMetric {
    pub const ALL: [OverheadMetric; 3] = [OverheadMetric::Prr150, OverheadMetric::Cbr, OverheadMetric::DataAge];

    pub fn delta(self, baseline: f64, dim: f64) -> f64 {
        match self {
            OverheadMetric::Prr150 => (baseline - dim) / baseline,
            OverheadMetric::Cbr => (dim - baseline) / baseline,
            OverheadMetric::DataAge => dim - baseline,
        }
    }

    fn value(self, row: &SummaryRow) -> Option<f64> {
        match self {
            OverheadMetric::Prr150 => row.prr150,
            OverheadMetric::Cbr => row.cbr,
            OverheadMetric::DataAge => row.data_age_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub metric: OverheadMetric,
    pub scenario: String,
    pub mac: String,
    pub density: u32,
    pub baseline: f64,
    pub dim: f64,
    pub delta: f64,
}

/// Pairs every baseline row with its D-IM counterpart.
pub fn compare_rows(rows: &[SummaryRow]) -> Result<Vec<OverheadRow>, CliError> {
    let mut pairs: BTreeMap<(String, String, u32), (Option<&SummaryRow>, Option<&SummaryRow>)> = BTreeMap::new();
    for r in rows {
        let slot = pairs.entry((r.scenario.clone(), r.mac.clone(), r.density)).or_default();
        match r.beacon_bytes {
            BASELINE_BYTES => slot.0 = Some(r),
            DIM_BYTES => slot.1 = Some(r),
            _ => {}
        }
    }
    let mut out = Vec::new();
    for ((scenario, mac, density), pair) in &pairs {
        let (b, d) = match pair {
            (Some(b), Some(d)) => (b, d),
            (Some(_), None) | (None, Some(_)) => {
                let missing = if pair.0.is_none() { BASELINE_BYTES } else { DIM_BYTES };
                return Err(CliError::IncompleteResults(format!(
                    "{scenario} {mac} density {density} has no {missing} B counterpart"
                )));
            }
            (None, None) => continue,
        };
        for metric in OverheadMetric::ALL {
            if let (Some(bv), Some(dv)) = (metric.value(b), metric.value(d)) {
                out.push(OverheadRow {
                    metric,
                    scenario: scenario.clone(),
                    mac: mac.clone(),
                    density: *density,
                    baseline: bv,
                    dim: dv,
                    delta: metric.delta(bv, dv),
                });
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::IncompleteResults(format!("no {BASELINE_BYTES} B / {DIM_BYTES} B pairs found")));
    }
    out.sort_by(|a, b| (a.metric, &a.scenario, &a.mac, a.density).cmp(&(b.metric, &b.scenario, &b.mac, b.density)));
    Ok(out)
}

pub fn write_overhead<W: Write>(rows: &[OverheadRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `summary.csv` from a results directory and writes `overhead.csv`
/// next to it.
pub fn compare_overhead(results: &Path) -> Result<Vec<OverheadRow>, CliError> {
    let rows = compare_rows(&read_summary(&results.join("summary.csv"))?)?;
    write_overhead(&rows, fs::File::create(results.join("overhead.csv"))?)?;
    Ok(rows)
}
