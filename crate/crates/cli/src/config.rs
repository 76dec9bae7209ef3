//! Experiment configuration: TOML with `[scenario]`, `[radio]`, `[run]` and
//! `[handshake]` sections. Unknown keys are rejected.
//!
//! ```toml
//! [scenario]
//! kind = "highway"        # required: highway | urban
//! densities = [50, 100]   # required: vehicles per km of road
//! length_m = 5000         # highway ring length
//! layout = "grid"         # urban: grid | interior
//!
//! [radio]
//! macs = ["dsrc", "cv2x"]
//! beacon_bytes = [90, 1670]
//! p_keep = 0.8
//! shadowing = true
//! warmup_s = 5
//!
//! [run]
//! duration_s = 60
//! seeds = 10
//! first_seed = 1
//! output = "results"
//!
//! [handshake]
//! freshness_window_ms = 5000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use ztdim_sim::mobility::{ScenarioGeometry, ScenarioKind};
use ztdim_sim::radio::Mac;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: &'static str, message: String },
    #[error("unknown preset {0:?}, expected one of paper-highway, paper-urban, desk-highway, desk-urban")]
    UnknownPreset(String),
}

pub const PRESETS: [(&str, &str); 4] = [
    ("paper-highway", include_str!("../configs/paper-highway.toml")),
    ("paper-urban", include_str!("../configs/paper-urban.toml")),
    ("desk-highway", include_str!("../configs/desk-highway.toml")),
    ("desk-urban", include_str!("../configs/desk-urban.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UrbanLayout {
    Grid,
    Interior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    pub length_m: f64,
    pub layout: UrbanLayout,
    pub densities: Vec<u32>,
    pub macs: Vec<Mac>,
    pub beacon_bytes: Vec<u32>,
    pub p_keep: f64,
    pub shadowing: bool,
    pub warmup_s: f64,
    pub duration_s: f64,
    pub seeds: u32,
    pub first_seed: u64,
    pub output: PathBuf,
    pub freshness_window_ms: u64,
}

impl ExperimentConfig {
    pub fn scenario_label(&self) -> &'static str {
        match self.scenario {
            ScenarioKind::Highway => "highway",
            ScenarioKind::UrbanGrid => "urban",
        }
    }

    pub fn geometry(&self) -> ScenarioGeometry {
        match (self.scenario, self.layout) {
            (ScenarioKind::Highway, _) => ScenarioGeometry::highway(self.length_m),
            (ScenarioKind::UrbanGrid, UrbanLayout::Grid) => ScenarioGeometry::urban_grid(),
            (ScenarioKind::UrbanGrid, UrbanLayout::Interior) => ScenarioGeometry::urban_interior(),
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.first_seed + i).collect()
    }

    /// Fully resolved config in the input schema; hashing this identifies a
    /// results directory.
    pub fn to_toml(&self) -> String {
        let raw = RawConfig {
            scenario: Some(RawScenario {
                kind: Some(self.scenario_label().into()),
                densities: Some(self.densities.clone()),
                length_m: (self.scenario == ScenarioKind::Highway).then_some(self.length_m),
                layout: (self.scenario == ScenarioKind::UrbanGrid).then(|| {
                    match self.layout {
                        UrbanLayout::Grid => "grid",
                        UrbanLayout::Interior => "interior",
                    }
                    .into()
                }),
            }),
            radio: Some(RawRadio {
                macs: Some(self.macs.iter().map(|m| m.name().to_string()).collect()),
                beacon_bytes: Some(self.beacon_bytes.clone()),
                p_keep: Some(self.p_keep),
                shadowing: Some(self.shadowing),
                warmup_s: Some(self.warmup_s),
            }),
            run: Some(RawRun {
                duration_s: Some(self.duration_s),
                seeds: Some(self.seeds),
                first_seed: Some(self.first_seed),
                output: Some(self.output.to_string_lossy().into_owned()),
            }),
            handshake: Some(RawHandshake { freshness_window_ms: Some(self.freshness_window_ms) }),
        };
        toml::to_string(&raw).expect("config serialises")
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: Option<RawScenario>,
    radio: Option<RawRadio>,
    run: Option<RawRun>,
    handshake: Option<RawHandshake>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    kind: Option<String>,
    densities: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    length_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layout: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRadio {
    macs: Option<Vec<String>>,
    beacon_bytes: Option<Vec<u32>>,
    p_keep: Option<f64>,
    shadowing: Option<bool>,
    warmup_s: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    duration_s: Option<f64>,
    seeds: Option<u32>,
    first_seed: Option<u64>,
    output: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHandshake {
    freshness_window_ms: Option<u64>,
}

fn bad(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key, message: message.into() }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.message().to_string()))?;
    let scenario = raw.scenario.ok_or(ConfigError::MissingKey("scenario.kind"))?;
    let radio = raw.radio.unwrap_or_default();
    let run = raw.run.unwrap_or_default();
    let handshake = raw.handshake.unwrap_or_default();

    let kind = match scenario.kind.as_deref().ok_or(ConfigError::MissingKey("scenario.kind"))? {
        "highway" => ScenarioKind::Highway,
        "urban" => ScenarioKind::UrbanGrid,
        other => return Err(bad("scenario.kind", format!("{other:?} is not highway or urban"))),
    };
    let densities = scenario.densities.ok_or(ConfigError::MissingKey("scenario.densities"))?;
    if densities.is_empty() || densities.contains(&0) {
        return Err(bad("scenario.densities", "must be a non-empty list of positive values"));
    }
    let length_m = match (kind, scenario.length_m) {
        (ScenarioKind::Highway, l) => l.unwrap_or(5000.0),
        (ScenarioKind::UrbanGrid, None) => 500.0,
        (ScenarioKind::UrbanGrid, Some(_)) => return Err(bad("scenario.length_m", "only applies to the highway")),
    };
    if !(length_m > 0.0 && length_m.is_finite()) {
        return Err(bad("scenario.length_m", "must be positive"));
    }
    let layout = match (kind, scenario.layout.as_deref()) {
        (ScenarioKind::UrbanGrid, None | Some("grid")) => UrbanLayout::Grid,
        (ScenarioKind::UrbanGrid, Some("interior")) => UrbanLayout::Interior,
        (ScenarioKind::UrbanGrid, Some(other)) => return Err(bad("scenario.layout", format!("{other:?} is not grid or interior"))),
        (ScenarioKind::Highway, None) => UrbanLayout::Grid,
        (ScenarioKind::Highway, Some(_)) => return Err(bad("scenario.layout", "only applies to urban scenarios")),
    };

    let macs = match radio.macs {
        None => vec![Mac::Dsrc, Mac::Cv2x],
        Some(list) => list.iter().map(|s| s.parse::<Mac>().map_err(|e| bad("radio.macs", e))).collect::<Result<Vec<_>, _>>()?,
    };
    if macs.is_empty() {
        return Err(bad("radio.macs", "must not be empty"));
    }
    let beacon_bytes = radio.beacon_bytes.unwrap_or_else(|| vec![90, 1670]);
    if beacon_bytes.is_empty() || beacon_bytes.contains(&0) {
        return Err(bad("radio.beacon_bytes", "must be a non-empty list of positive sizes"));
    }
    let p_keep = radio.p_keep.unwrap_or(0.8);
    if !(0.0..1.0).contains(&p_keep) {
        return Err(bad("radio.p_keep", "must lie in [0, 1)"));
    }
    let warmup_s = radio.warmup_s.unwrap_or(5.0);
    if !(warmup_s >= 0.0 && warmup_s.is_finite()) {
        return Err(bad("radio.warmup_s", "must be non-negative"));
    }

    let duration_s = run.duration_s.unwrap_or(60.0);
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(bad("run.duration_s", "must be positive"));
    }
    let seeds = run.seeds.unwrap_or(10);
    if seeds == 0 {
        return Err(bad("run.seeds", "must be at least 1"));
    }

    let cfg = ExperimentConfig {
        scenario: kind,
        length_m,
        layout,
        densities,
        macs,
        beacon_bytes,
        p_keep,
        shadowing: radio.shadowing.unwrap_or(true),
        warmup_s,
        duration_s,
        seeds,
        first_seed: run.first_seed.unwrap_or(1),
        output: PathBuf::from(run.output.unwrap_or_else(|| "results".into())),
        freshness_window_ms: handshake.freshness_window_ms.unwrap_or(5000),
    };
    cfg.geometry().validate().map_err(|e| bad("scenario", e.to_string()))?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Unreadable { path: path.display().to_string(), message: e.to_string() })?;
    parse_config_str(&text)
}

pub fn preset(name: &str) -> Result<ExperimentConfig, ConfigError> {
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| ConfigError::UnknownPreset(name.into()))?;
    parse_config_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_urban_preset() {
        let c = preset("paper-urban").unwrap();
        assert_eq!(c.scenario, ScenarioKind::UrbanGrid);
        assert_eq!(c.densities, vec![300, 400, 500]);
        assert_eq!(c.macs, vec![Mac::Dsrc, Mac::Cv2x]);
        assert_eq!(c.beacon_bytes, vec![90, 1670]);
        assert_eq!(c.layout, UrbanLayout::Grid);
    }

    #[test]
    fn every_preset_parses() {
        for (name, _) in PRESETS {
            let c = preset(name).unwrap();
            assert_eq!(parse_config_str(&c.to_toml()).unwrap(), c, "{name}");
        }
        assert_eq!(preset("desk-highway").unwrap().length_m, 1000.0);
        assert_eq!(preset("desk-urban").unwrap().layout, UrbanLayout::Interior);
        assert!(matches!(preset("nope"), Err(ConfigError::UnknownPreset(_))));
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse_config_str("[scenario]\nkind = \"highway\"\ndensities = [100]\n").unwrap();
        assert_eq!(c.duration_s, 60.0);
        assert_eq!(c.seeds, 10);
        assert_eq!(c.seed_list(), (1..=10).collect::<Vec<_>>());
        assert_eq!(c.length_m, 5000.0);
        assert_eq!(c.freshness_window_ms, 5000);
    }

    #[test]
    fn errors_name_the_key() {
        let base = "[scenario]\nkind = \"highway\"\ndensities = [100]\n";
        let e = parse_config_str(&format!("{base}[radio]\nmacs = [\"carrier-pigeon\"]\n")).unwrap_err();
        assert!(matches!(e, ConfigError::BadValue { key: "radio.macs", .. }), "{e}");
        assert_eq!(parse_config_str("[scenario]\nkind = \"urban\"\n"), Err(ConfigError::MissingKey("scenario.densities")));
        assert_eq!(parse_config_str("[run]\nseeds = 2\n"), Err(ConfigError::MissingKey("scenario.kind")));
        assert!(matches!(parse_config_str(&format!("{base}[run]\nspeed = 3\n")), Err(ConfigError::Syntax(_))));
        assert!(matches!(parse_config_str(&format!("{base}[run]\nseeds = 0\n")), Err(ConfigError::BadValue { key: "run.seeds", .. })));
        assert!(matches!(parse_config_str("[scenario]\nkind = \"rural\"\ndensities = [1]\n"), Err(ConfigError::BadValue { key: "scenario.kind", .. })));
        assert!(matches!(parse_config_str("kind = ="), Err(ConfigError::Syntax(_))));
    }
}
