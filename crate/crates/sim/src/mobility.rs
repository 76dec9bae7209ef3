//! Synthetic vehicle traces for a highway strip and a Manhattan grid.
//!
//! Vehicles keep their lane and their speed for the whole run and wrap
//! around the map edge, so on-map density never changes. Urban vehicles go
//! straight through intersections.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const SAMPLE_INTERVAL_S: f64 = 0.1;
pub const LANE_WIDTH_M: f64 = 4.0;
pub const LANES_PER_DIRECTION: usize = 4;
pub const BLOCK_SIZE_M: f64 = 250.0;
/// Half the width of a bidirectional road: both directions' lanes.
pub const ROAD_HALF_WIDTH_M: f64 = LANE_WIDTH_M * LANES_PER_DIRECTION as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MobilityError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("time {0} s is outside the trace")]
    OutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    Highway,
    UrbanGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LosClass {
    Los,
    Nlos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// A single lane: a line at `offset` on the cross axis, traversed along
/// `axis` in `direction` (+1 or -1), of length `length` starting at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lane {
    pub axis: Axis,
    pub offset: f64,
    pub direction: f64,
    pub length: f64,
}

impl Lane {
    pub fn point(&self, s: f64) -> Point {
        match self.axis {
            Axis::X => Point::new(s, self.offset),
            Axis::Y => Point::new(self.offset, s),
        }
    }

    pub fn along(&self, p: Point) -> f64 {
        match self.axis {
            Axis::X => p.x,
            Axis::Y => p.y,
        }
    }
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioGeometry {
    pub kind: ScenarioKind,
    /// Highway length, or the side of the urban map.
    pub length_m: f64,
    /// Cross-axis coordinates of the urban corridors; each corridor exists
    /// along both axes.
    pub corridors: Vec<f64>,
    pub lanes_per_direction: usize,
    pub lane_width_m: f64,
    pub mean_speed_kmh: f64,
    pub sd_speed_kmh: f64,
}

impl ScenarioGeometry {
    pub fn highway(length_m: f64) -> Self {
        ScenarioGeometry {
            kind: ScenarioKind::Highway,
            length_m,
            corridors: vec![0.0],
            lanes_per_direction: LANES_PER_DIRECTION,
            lane_width_m: LANE_WIDTH_M,
            mean_speed_kmh: 120.0,
            sd_speed_kmh: 20.0,
        }
    }

    /// The 2×2-block grid with corridors on every block edge.
    pub fn urban_grid() -> Self {
        Self::urban(vec![0.0, BLOCK_SIZE_M, 2.0 * BLOCK_SIZE_M])
    }

    /// Only the interior corridor of the 2×2-block grid, one per axis.
    pub fn urban_interior() -> Self {
        Self::urban(vec![BLOCK_SIZE_M])
    }

    fn urban(corridors: Vec<f64>) -> Self {
        ScenarioGeometry {
            kind: ScenarioKind::UrbanGrid,
            length_m: 2.0 * BLOCK_SIZE_M,
            corridors,
            lanes_per_direction: LANES_PER_DIRECTION,
            lane_width_m: LANE_WIDTH_M,
            mean_speed_kmh: 60.0,
            sd_speed_kmh: 15.0,
        }
    }

    pub fn validate(&self) -> Result<(), MobilityError> {
        let bad = |m: &str| Err(MobilityError::InvalidScenario(m.to_owned()));
        if !(self.length_m.is_finite() && self.length_m > 0.0) {
            return bad("map length must be positive");
        }
        if self.corridors.is_empty() || self.lanes_per_direction == 0 || !(self.lane_width_m > 0.0) {
            return bad("no lanes");
        }
        if !(self.mean_speed_kmh > 0.0 && self.sd_speed_kmh >= 0.0 && self.mean_speed_kmh - 3.0 * self.sd_speed_kmh >= 0.0) {
            return bad("speed distribution admits negative speeds");
        }
        Ok(())
    }

    /// Every lane on the map. Lanes of one direction sit on one side of the
    /// corridor centre line.
    pub fn lanes(&self) -> Vec<Lane> {
        let axes: &[Axis] = match self.kind {
            ScenarioKind::Highway => &[Axis::X],
            ScenarioKind::UrbanGrid => &[Axis::X, Axis::Y],
        };
        let mut lanes = Vec::new();
        for &axis in axes {
            for &c in &self.corridors {
                for direction in [1.0, -1.0] {
                    for k in 0..self.lanes_per_direction {
                        let centre = (k as f64 + 0.5) * self.lane_width_m;
                        // right-hand traffic
                        let side = match axis {
                            Axis::X => -direction,
                            Axis::Y => direction,
                        };
                        lanes.push(Lane { axis, offset: c + side * centre, direction, length: self.length_m });
                    }
                }
            }
        }
        lanes
    }

    /// Total road length counting both directions on urban corridors, the
    /// quantity vehicle density is measured against.
    pub fn road_km(&self) -> f64 {
        match self.kind {
            ScenarioKind::Highway => self.length_m / 1000.0,
            ScenarioKind::UrbanGrid => self.corridors.len() as f64 * 2.0 * self.length_m / 1000.0 * 2.0,
        }
    }

    /// Map extent including road margins.
    pub fn bounds(&self) -> Rect {
        let half = self.lane_width_m * self.lanes_per_direction as f64;
        match self.kind {
            ScenarioKind::Highway => Rect { x0: 0.0, y0: -half, x1: self.length_m, y1: half },
            ScenarioKind::UrbanGrid => Rect { x0: -half, y0: -half, x1: self.length_m + half, y1: self.length_m + half },
        }
    }

    /// Building footprints: the grid blocks inset by the road half-width.
    pub fn buildings(&self) -> Vec<Rect> {
        if self.kind == ScenarioKind::Highway {
            return Vec::new();
        }
        let half = self.lane_width_m * self.lanes_per_direction as f64;
        let n = (self.length_m / BLOCK_SIZE_M).round() as usize;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (i as f64 * BLOCK_SIZE_M, j as f64 * BLOCK_SIZE_M);
                out.push(Rect { x0: x + half, y0: y + half, x1: x + BLOCK_SIZE_M - half, y1: y + BLOCK_SIZE_M - half });
            }
        }
        out
    }

    /// Distance used by the radio model. The highway is a ring, so the
    /// shorter way round counts.
    pub fn distance(&self, a: Point, b: Point) -> f64 {
        let mut dx = (a.x - b.x).abs();
        if self.kind == ScenarioKind::Highway {
            dx = dx.min(self.length_m - dx);
        }
        dx.hypot(a.y - b.y)
    }

    pub fn los_between(&self, a: Point, b: Point) -> LosClass {
        los_with(&self.buildings(), a, b)
    }
}

/// LOS test against a prepared building list.
pub fn los_with(buildings: &[Rect], a: Point, b: Point) -> LosClass {
    if buildings.iter().any(|r| segment_crosses_interior(a, b, r)) {
        LosClass::Nlos
    } else {
        LosClass::Los
    }
}

/// Liang–Barsky clip of segment a–b against the open rectangle.
fn segment_crosses_interior(a: Point, b: Point, r: &Rect) -> bool {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [(-dx, a.x - r.x0), (dx, r.x1 - a.x), (-dy, a.y - r.y0), (dy, r.y1 - a.y)] {
        if p == 0.0 {
            if q <= 0.0 {
                return false;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    t1 - t0 > 1e-12
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensitySpec {
    pub vehicles_per_km: u32,
    pub duration_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTrace {
    pub vehicle_id: u32,
    pub lane: Lane,
    pub speed_mps: f64,
    /// Positions every [`SAMPLE_INTERVAL_S`], starting at t = 0.
    pub positions: Vec<Point>,
}

impl VehicleTrace {
    pub fn duration_s(&self) -> f64 {
        (self.positions.len() - 1) as f64 * SAMPLE_INTERVAL_S
    }

    pub fn position_at(&self, t: f64) -> Result<Point, MobilityError> {
        let last = self.positions.len() - 1;
        let f = t / SAMPLE_INTERVAL_S;
        if !(t >= 0.0) || f > last as f64 + 1e-9 {
            return Err(MobilityError::OutOfRange(t));
        }
        let i = (f.floor() as usize).min(last);
        let frac = f - i as f64;
        if i == last || frac <= 0.0 {
            return Ok(self.positions[i]);
        }
        let lane = &self.lane;
        let s0 = lane.along(self.positions[i]);
        let mut delta = lane.along(self.positions[i + 1]) - s0;
        if delta.abs() > lane.length / 2.0 {
            delta -= delta.signum() * lane.length;
        }
        Ok(lane.point((s0 + frac * delta).rem_euclid(lane.length)))
    }
}

fn sample_count(duration_s: f64) -> usize {
    (duration_s / SAMPLE_INTERVAL_S).round() as usize + 1
}

pub fn vehicle_count(geometry: &ScenarioGeometry, vehicles_per_km: u32) -> usize {
    (vehicles_per_km as f64 * geometry.road_km()).round() as usize
}

pub fn build_scenario(geometry: &ScenarioGeometry, density: &DensitySpec) -> Result<Vec<VehicleTrace>, MobilityError> {
    geometry.validate()?;
    if density.vehicles_per_km == 0 {
        return Err(MobilityError::InvalidScenario("density must be positive".into()));
    }
    if !(density.duration_s.is_finite() && density.duration_s >= SAMPLE_INTERVAL_S) {
        return Err(MobilityError::InvalidScenario("duration must be at least one sample interval".into()));
    }
    let lanes = geometry.lanes();
    let mut rng = ChaCha20Rng::seed_from_u64(density.seed);
    let mean = geometry.mean_speed_kmh / 3.6;
    let sd = geometry.sd_speed_kmh / 3.6;
    let speed = Normal::new(mean, sd).map_err(|e| MobilityError::InvalidScenario(e.to_string()))?;
    let samples = sample_count(density.duration_s);
    let traces = (0..vehicle_count(geometry, density.vehicles_per_km))
        .map(|id| {
            let lane = lanes[rng.gen_range(0..lanes.len())];
            let s0 = rng.gen_range(0.0..lane.length);
            let v = speed.sample(&mut rng).clamp(mean - 3.0 * sd, mean + 3.0 * sd);
            let positions = (0..samples)
                .map(|k| lane.point((s0 + lane.direction * v * k as f64 * SAMPLE_INTERVAL_S).rem_euclid(lane.length)))
                .collect();
            VehicleTrace { vehicle_id: id as u32, lane, speed_mps: v, positions }
        })
        .collect();
    Ok(traces)
}

pub fn positions_at(traces: &[VehicleTrace], t: f64) -> Result<Vec<(u32, Point)>, MobilityError> {
    traces.iter().map(|tr| tr.position_at(t).map(|p| (tr.vehicle_id, p))).collect()
}

/// CSV projection `t,vehicle_id,x,y`, one row per sample, time-major.
pub fn write_traces_csv<W: Write>(traces: &[VehicleTrace], mut out: W) -> io::Result<()> {
    writeln!(out, "t,vehicle_id,x,y")?;
    let samples = traces.iter().map(|t| t.positions.len()).max().unwrap_or(0);
    for k in 0..samples {
        let t = k as f64 * SAMPLE_INTERVAL_S;
        for tr in traces {
            if let Some(p) = tr.positions.get(k) {
                writeln!(out, "{t:.1},{},{:.3},{:.3}", tr.vehicle_id, p.x, p.y)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(density: u32, duration_s: f64, seed: u64) -> DensitySpec {
        DensitySpec { vehicles_per_km: density, duration_s, seed }
    }

    #[test]
    fn vehicle_counts() {
        let hw = ScenarioGeometry::highway(5000.0);
        assert_eq!(build_scenario(&hw, &spec(100, 1.0, 1)).unwrap().len(), 500);
        // 3 corridors × 2 axes × 0.5 km × 2 directions = 6 km
        let urban = ScenarioGeometry::urban_grid();
        assert_eq!(urban.road_km(), 6.0);
        assert_eq!(vehicle_count(&urban, 300), 1800);
        let interior = ScenarioGeometry::urban_interior();
        assert_eq!(interior.road_km(), 2.0);
        assert_eq!(vehicle_count(&interior, 150), 300);
        assert_eq!(vehicle_count(&ScenarioGeometry::highway(1000.0), 50), 50);
    }

    #[test]
    fn invalid_inputs() {
        let hw = ScenarioGeometry::highway(1000.0);
        assert!(matches!(build_scenario(&hw, &spec(10, 0.0, 1)), Err(MobilityError::InvalidScenario(_))));
        assert!(matches!(build_scenario(&hw, &spec(0, 1.0, 1)), Err(MobilityError::InvalidScenario(_))));
        let tr = build_scenario(&hw, &spec(10, 1.0, 1)).unwrap();
        assert_eq!(tr[0].positions.len(), 11);
        assert!(matches!(positions_at(&tr, 1.5), Err(MobilityError::OutOfRange(_))));
        assert!(matches!(positions_at(&tr, -0.1), Err(MobilityError::OutOfRange(_))));
    }

    #[test]
    fn lanes_inside_bounds() {
        for g in [ScenarioGeometry::highway(5000.0), ScenarioGeometry::urban_grid(), ScenarioGeometry::urban_interior()] {
            let b = g.bounds();
            let lanes = g.lanes();
            let per_corridor = if g.kind == ScenarioKind::Highway { 8 } else { 16 };
            assert_eq!(lanes.len(), g.corridors.len() * per_corridor);
            for l in lanes {
                for s in [0.0, l.length / 2.0, l.length - 1e-6] {
                    let p = l.point(s);
                    assert!(p.x >= b.x0 && p.x <= b.x1 && p.y >= b.y0 && p.y <= b.y1, "{p:?}");
                }
            }
        }
    }

    #[test]
    fn kinematics_and_wrap() {
        let lane = Lane { axis: Axis::X, offset: -2.0, direction: 1.0, length: 5000.0 };
        let positions = (0..=10).map(|k| lane.point((4990.0 + 30.0 * 0.1 * k as f64).rem_euclid(5000.0))).collect();
        let tr = VehicleTrace { vehicle_id: 0, lane, speed_mps: 30.0, positions };
        assert_eq!(tr.position_at(0.0).unwrap().x, 4990.0);
        assert!((tr.position_at(1.0).unwrap().x - 20.0).abs() < 1e-9);
        // mid-sample across the wrap point
        assert!((tr.position_at(0.35).unwrap().x - 0.5).abs() < 1e-9);
        assert!((tr.position_at(0.3).unwrap().x - 4999.0).abs() < 1e-9);
    }

    #[test]
    fn displacement_matches_speed() {
        let g = ScenarioGeometry::highway(1000.0);
        for tr in build_scenario(&g, &spec(30, 2.0, 4)).unwrap() {
            assert!(tr.speed_mps >= (120.0 - 60.0) / 3.6 && tr.speed_mps <= (120.0 + 60.0) / 3.6);
            for w in tr.positions.windows(2) {
                let d = g.distance(w[0], w[1]);
                assert!((d - tr.speed_mps * 0.1).abs() < 1e-6);
                assert_eq!(w[0].y, w[1].y);
                let step = w[1].x - w[0].x;
                assert!(step * tr.lane.direction > 0.0 || step.abs() > 500.0);
            }
        }
    }

    #[test]
    fn los_rules() {
        let hw = ScenarioGeometry::highway(1000.0);
        assert_eq!(hw.los_between(Point::new(0.0, -14.0), Point::new(700.0, 14.0)), LosClass::Los);
        let u = ScenarioGeometry::urban_interior();
        assert_eq!(u.los_between(Point::new(10.0, 248.0), Point::new(480.0, 246.0)), LosClass::Los);
        // perpendicular streets, both 50 m from the intersection
        let a = Point::new(200.0, 248.0);
        let b = Point::new(252.0, 300.0);
        assert_eq!(u.los_between(a, b), LosClass::Nlos);
        // sampled oracle: some point of the segment lies inside a building
        let inside = |p: Point| u.buildings().iter().any(|r| p.x > r.x0 && p.x < r.x1 && p.y > r.y0 && p.y < r.y1);
        assert!((0..=1000).any(|k| {
            let t = k as f64 / 1000.0;
            inside(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)))
        }));
        // across the intersection centre stays LOS
        assert_eq!(u.los_between(Point::new(240.0, 240.0), Point::new(260.0, 260.0)), LosClass::Los);
    }

    #[test]
    fn highway_distance_wraps() {
        let g = ScenarioGeometry::highway(1000.0);
        assert!((g.distance(Point::new(990.0, 0.0), Point::new(10.0, 0.0)) - 20.0).abs() < 1e-9);
        let u = ScenarioGeometry::urban_grid();
        assert_eq!(u.distance(Point::new(490.0, 0.0), Point::new(10.0, 0.0)), 480.0);
    }

    #[test]
    fn deterministic_traces_and_csv() {
        let g = ScenarioGeometry::urban_interior();
        let a = build_scenario(&g, &spec(20, 1.0, 9)).unwrap();
        let b = build_scenario(&g, &spec(20, 1.0, 9)).unwrap();
        assert_eq!(a, b);
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_traces_csv(&a, &mut ca).unwrap();
        write_traces_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert_eq!(text.lines().count(), 1 + 11 * a.len());
        assert!(text.starts_with("t,vehicle_id,x,y\n0.0,0,"));
        assert_ne!(a, build_scenario(&g, &spec(20, 1.0, 10)).unwrap());
    }

    proptest! {
        #[test]
        fn los_symmetric(ax in -16.0f64..516.0, ay in -16.0f64..516.0, bx in -16.0f64..516.0, by in -16.0f64..516.0) {
            let u = ScenarioGeometry::urban_grid();
            let (a, b) = (Point::new(ax, ay), Point::new(bx, by));
            prop_assert_eq!(u.los_between(a, b), u.los_between(b, a));
        }

        #[test]
        fn density_conserved(seed in any::<u64>(), t in 0.0f64..3.0) {
            let g = ScenarioGeometry::urban_grid();
            let traces = build_scenario(&g, &spec(10, 3.0, seed)).unwrap();
            let b = g.bounds();
            let pos = positions_at(&traces, t).unwrap();
            prop_assert_eq!(pos.len(), traces.len());
            for (_, p) in pos {
                prop_assert!(p.x >= b.x0 && p.x <= b.x1 && p.y >= b.y0 && p.y <= b.y1);
            }
        }
    }
}
