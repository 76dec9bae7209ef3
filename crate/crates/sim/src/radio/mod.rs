//! Discrete-event broadcast simulation of periodic beaconing.
//!
//! Time is kept in integer nanoseconds. Link budgets are evaluated from the
//! trace snapshot at the start of each 100 ms window, with one static
//! shadowing draw per ordered link for the whole run. A transmission keeps
//! the link state of the window it started in.

mod cv2x;
mod dsrc;
pub mod phy;

use std::io::{self, Read, Write};
use std::rc::Rc;

use thiserror::Error;

pub use cv2x::{sps_select, subchannels_for, SpsCandidate, SpsConfig};
pub use dsrc::{dsrc_airtime_ns, DsrcConfig};
pub use phy::{decode, noise_floor_dbm, path_loss, rx_power_dbm, Decode, FailReason, PhyConfig};

use crate::mobility::{LosClass, Rect, ScenarioGeometry, ScenarioKind, VehicleTrace, SAMPLE_INTERVAL_S};

pub const WINDOW_NS: u64 = 100_000_000;
/// Links shorter than this are evaluated at this distance.
const MIN_LINK_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadioError {
    #[error("distance {0} m is not positive")]
    InvalidDistance(f64),
    #[error("invalid radio configuration: {0}")]
    InvalidConfig(String),
    #[error("beacon of {0} bytes does not fit one subframe")]
    PayloadTooLarge(u32),
    #[error("traces cover {have} s, run needs {need} s")]
    TraceTooShort { have: f64, need: f64 },
    #[error("malformed event log dump: {0}")]
    BadDump(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mac {
    Dsrc,
    Cv2x,
}

impl Mac {
    pub fn name(self) -> &'static str {
        match self {
            Mac::Dsrc => "dsrc",
            Mac::Cv2x => "cv2x",
        }
    }
}

impl std::str::FromStr for Mac {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dsrc" => Ok(Mac::Dsrc),
            "cv2x" => Ok(Mac::Cv2x),
            other => Err(format!("unknown mac {other:?}, expected dsrc or cv2x")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resource {
    /// Contention-based access on the whole channel.
    Channel,
    Subchannels { subframe: u64, first: u8, count: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxEvent {
    pub id: u32,
    pub sender: u32,
    pub t_generated_ns: u64,
    pub t_air_ns: u64,
    pub airtime_ns: u64,
    pub size_bytes: u32,
    pub resource: Resource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RxOutcome {
    pub tx: u32,
    pub receiver: u32,
    pub distance_m: f64,
    pub rx_power_dbm: f64,
    pub sinr_db: f64,
    pub decoded: bool,
    pub fail_reason: Option<FailReason>,
}

/// Channel occupancy seen by one node during one 100 ms window. For DSRC
/// `busy_ns` is the time sensed busy; for C-V2X `busy_subchannels` counts
/// busy subchannel-subframes out of `capacity_subchannels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OccupancyRecord {
    pub window: u32,
    pub node: u32,
    pub busy_ns: u64,
    pub busy_subchannels: u32,
    pub capacity_subchannels: u32,
}

impl OccupancyRecord {
    pub fn busy_fraction(&self, mac: Mac) -> f64 {
        match mac {
            Mac::Dsrc => self.busy_ns as f64 / WINDOW_NS as f64,
            Mac::Cv2x => self.busy_subchannels as f64 / self.capacity_subchannels as f64,
        }
    }
}

/// Receives simulation output as it is produced. Transmissions arrive with
/// all their reception outcomes, not necessarily in air-time order.
pub trait EventSink {
    fn record_tx(&mut self, tx: &TxEvent, outcomes: &[RxOutcome]);
    fn record_occupancy(&mut self, record: &OccupancyRecord);
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxRecord {
    pub tx: TxEvent,
    pub outcomes: Vec<RxOutcome>,
}

/// Complete in-memory record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub mac: Mac,
    pub txs: Vec<TxRecord>,
    pub occupancy: Vec<OccupancyRecord>,
}

impl EventLog {
    pub fn new(mac: Mac) -> Self {
        EventLog { mac, txs: Vec::new(), occupancy: Vec::new() }
    }

    /// Puts transmissions in air-time order.
    pub fn sort(&mut self) {
        self.txs.sort_by_key(|r| (r.tx.t_air_ns, r.tx.id));
        self.occupancy.sort_by_key(|o| (o.window, o.node));
    }

    pub fn outcomes(&self) -> impl Iterator<Item = &RxOutcome> {
        self.txs.iter().flat_map(|r| &r.outcomes)
    }

    /// CSV projection `t,sender,receiver,distance,sinr,decoded,reason`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,sender,receiver,distance,sinr,decoded,reason")?;
        for r in &self.txs {
            let t = r.tx.t_air_ns as f64 * 1e-9;
            for o in &r.outcomes {
                let reason = o.fail_reason.map_or("", FailReason::name);
                writeln!(
                    out,
                    "{t:.9},{},{},{:.3},{:.3},{},{reason}",
                    r.tx.sender, o.receiver, o.distance_m, o.sinr_db, o.decoded as u8
                )?;
            }
        }
        Ok(())
    }

    /// Occupancy CSV `t_window,node,busy_fraction`.
    pub fn write_occupancy_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t_window,node,busy_fraction")?;
        for o in &self.occupancy {
            writeln!(out, "{:.1},{},{}", o.window as f64 * 0.1, o.node, o.busy_fraction(self.mac))?;
        }
        Ok(())
    }

    /// Little-endian binary dump, readable with [`EventLog::read_binary`].
    pub fn write_binary<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&[self.mac as u8])?;
        out.write_all(&(self.txs.len() as u64).to_le_bytes())?;
        for r in &self.txs {
            let t = &r.tx;
            for v in [t.id, t.sender, t.size_bytes] {
                out.write_all(&v.to_le_bytes())?;
            }
            for v in [t.t_generated_ns, t.t_air_ns, t.airtime_ns] {
                out.write_all(&v.to_le_bytes())?;
            }
            match t.resource {
                Resource::Channel => out.write_all(&[0])?,
                Resource::Subchannels { subframe, first, count } => {
                    out.write_all(&[1])?;
                    out.write_all(&subframe.to_le_bytes())?;
                    out.write_all(&[first, count])?;
                }
            }
            out.write_all(&(r.outcomes.len() as u32).to_le_bytes())?;
            for o in &r.outcomes {
                out.write_all(&o.tx.to_le_bytes())?;
                out.write_all(&o.receiver.to_le_bytes())?;
                for v in [o.distance_m, o.rx_power_dbm, o.sinr_db] {
                    out.write_all(&v.to_bits().to_le_bytes())?;
                }
                let reason = match o.fail_reason {
                    None => 0u8,
                    Some(FailReason::HalfDuplex) => 1,
                    Some(FailReason::BelowSense) => 2,
                    Some(FailReason::LowSinr) => 3,
                    Some(FailReason::Collision) => 4,
                };
                out.write_all(&[o.decoded as u8, reason])?;
            }
        }
        out.write_all(&(self.occupancy.len() as u64).to_le_bytes())?;
        for o in &self.occupancy {
            for v in [o.window, o.node] {
                out.write_all(&v.to_le_bytes())?;
            }
            out.write_all(&o.busy_ns.to_le_bytes())?;
            for v in [o.busy_subchannels, o.capacity_subchannels] {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self, RadioError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|_| RadioError::BadDump("read failed"))?;
        let mut r = DumpReader(&bytes);
        if r.take(DUMP_MAGIC.len())? != DUMP_MAGIC {
            return Err(RadioError::BadDump("magic"));
        }
        let mac = match r.u8()? {
            0 => Mac::Dsrc,
            1 => Mac::Cv2x,
            _ => return Err(RadioError::BadDump("mac")),
        };
        let mut log = EventLog::new(mac);
        for _ in 0..r.u64()? {
            let (id, sender, size_bytes) = (r.u32()?, r.u32()?, r.u32()?);
            let (t_generated_ns, t_air_ns, airtime_ns) = (r.u64()?, r.u64()?, r.u64()?);
            let resource = match r.u8()? {
                0 => Resource::Channel,
                1 => Resource::Subchannels { subframe: r.u64()?, first: r.u8()?, count: r.u8()? },
                _ => return Err(RadioError::BadDump("resource")),
            };
            let tx = TxEvent { id, sender, t_generated_ns, t_air_ns, airtime_ns, size_bytes, resource };
            let n = r.u32()?;
            let mut outcomes = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let (tx, receiver) = (r.u32()?, r.u32()?);
                let (distance_m, rx_power_dbm, sinr_db) = (r.f64()?, r.f64()?, r.f64()?);
                let decoded = r.u8()? != 0;
                let fail_reason = match r.u8()? {
                    0 => None,
                    1 => Some(FailReason::HalfDuplex),
                    2 => Some(FailReason::BelowSense),
                    3 => Some(FailReason::LowSinr),
                    4 => Some(FailReason::Collision),
                    _ => return Err(RadioError::BadDump("reason")),
                };
                outcomes.push(RxOutcome { tx, receiver, distance_m, rx_power_dbm, sinr_db, decoded, fail_reason });
            }
            log.txs.push(TxRecord { tx, outcomes });
        }
        for _ in 0..r.u64()? {
            log.occupancy.push(OccupancyRecord {
                window: r.u32()?,
                node: r.u32()?,
                busy_ns: r.u64()?,
                busy_subchannels: r.u32()?,
                capacity_subchannels: r.u32()?,
            });
        }
        if !r.0.is_empty() {
            return Err(RadioError::BadDump("trailing bytes"));
        }
        Ok(log)
    }
}

const DUMP_MAGIC: &[u8; 6] = b"ZTEVL1";

struct DumpReader<'a>(&'a [u8]);

impl<'a> DumpReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RadioError> {
        if self.0.len() < n {
            return Err(RadioError::BadDump("truncated"));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }
    fn u8(&mut self) -> Result<u8, RadioError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, RadioError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, RadioError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, RadioError> {
        Ok(f64::from_bits(self.u64()?))
    }
}

impl EventSink for EventLog {
    fn record_tx(&mut self, tx: &TxEvent, outcomes: &[RxOutcome]) {
        self.txs.push(TxRecord { tx: *tx, outcomes: outcomes.to_vec() });
    }

    fn record_occupancy(&mut self, record: &OccupancyRecord) {
        self.occupancy.push(*record);
    }
}

/// Forwards every event to two sinks.
pub struct Tee<'a, A, B>(pub &'a mut A, pub &'a mut B);

impl<A: EventSink, B: EventSink> EventSink for Tee<'_, A, B> {
    fn record_tx(&mut self, tx: &TxEvent, outcomes: &[RxOutcome]) {
        self.0.record_tx(tx, outcomes);
        self.1.record_tx(tx, outcomes);
    }

    fn record_occupancy(&mut self, record: &OccupancyRecord) {
        self.0.record_occupancy(record);
        self.1.record_occupancy(record);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mac: Mac,
    pub beacon_bytes: u32,
    /// Measured period, after the warm-up.
    pub duration_s: f64,
    /// Traffic runs for this long before anything is recorded, so that
    /// sensing histories and reservations reach a steady state.
    pub warmup_s: f64,
    pub seed: u64,
    /// Receivers farther than this get no reception outcome.
    pub max_rx_distance_m: f64,
    pub phy: PhyConfig,
    pub dsrc: DsrcConfig,
    pub sps: SpsConfig,
}

impl RunConfig {
    pub fn new(mac: Mac, beacon_bytes: u32, duration_s: f64, seed: u64) -> Self {
        RunConfig {
            mac,
            beacon_bytes,
            duration_s,
            warmup_s: 0.0,
            seed,
            max_rx_distance_m: 1000.0,
            phy: PhyConfig::default(),
            dsrc: DsrcConfig::default(),
            sps: SpsConfig::default(),
        }
    }

    /// Simulated time including the warm-up.
    pub fn total_s(&self) -> f64 {
        self.warmup_s + self.duration_s
    }

    fn total_ns(&self) -> u64 {
        (self.total_s() * 1e9).round() as u64
    }

    fn warmup_windows(&self) -> u32 {
        (self.warmup_s / SAMPLE_INTERVAL_S).round() as u32
    }

    fn windows(&self) -> u32 {
        self.warmup_windows() + (self.duration_s / SAMPLE_INTERVAL_S).round() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub generated: u64,
    pub transmitted: u64,
    /// Beacons replaced by a newer one before reaching the air.
    pub superseded: u64,
    pub outcomes: u64,
}

/// Received power, in both units, and distance for every ordered pair of
/// nodes, frozen at the start of one window.
pub(crate) struct LinkMatrix {
    n: usize,
    rx_dbm: Vec<f32>,
    rx_mw: Vec<f32>,
    dist: Vec<f32>,
}

impl LinkMatrix {
    #[inline]
    pub(crate) fn mw(&self, tx: usize, rx: usize) -> f64 {
        self.rx_mw[tx * self.n + rx] as f64
    }
    #[inline]
    pub(crate) fn dbm(&self, tx: usize, rx: usize) -> f64 {
        self.rx_dbm[tx * self.n + rx] as f64
    }
    #[inline]
    pub(crate) fn dist(&self, tx: usize, rx: usize) -> f64 {
        self.dist[tx * self.n + rx] as f64
    }
}

/// Builds and caches the per-window link matrices of one run.
pub(crate) struct Links<'a> {
    geometry: &'a ScenarioGeometry,
    buildings: Vec<Rect>,
    traces: &'a [VehicleTrace],
    phy: &'a PhyConfig,
    shadow_db: Vec<f32>,
    cache: Vec<(u32, Rc<LinkMatrix>)>,
}

impl<'a> Links<'a> {
    fn new(geometry: &'a ScenarioGeometry, traces: &'a [VehicleTrace], phy: &'a PhyConfig, seed: u64) -> Self {
        let n = traces.len();
        let mut shadow_db = vec![0f32; n * n];
        if phy.shadowing {
            for tx in 0..n {
                for rx in 0..n {
                    if tx != rx {
                        shadow_db[tx * n + rx] = phy::link_shadow_z(phy::link_seed(seed, tx as u32, rx as u32)) as f32;
                    }
                }
            }
        }
        Links { geometry, buildings: geometry.buildings(), traces, phy, shadow_db, cache: Vec::new() }
    }

    pub(crate) fn n(&self) -> usize {
        self.traces.len()
    }

    pub(crate) fn matrix(&mut self, window: u32) -> Rc<LinkMatrix> {
        if let Some((_, m)) = self.cache.iter().find(|(w, _)| *w == window) {
            return m.clone();
        }
        let m = Rc::new(self.build(window));
        if self.cache.len() >= 2 {
            self.cache.remove(0);
        }
        self.cache.push((window, m.clone()));
        m
    }

    fn build(&self, window: u32) -> LinkMatrix {
        let n = self.n();
        let pos: Vec<_> = self
            .traces
            .iter()
            .map(|t| t.positions[(window as usize).min(t.positions.len() - 1)])
            .collect();
        let mut m = LinkMatrix { n, rx_dbm: vec![0.0; n * n], rx_mw: vec![0.0; n * n], dist: vec![0.0; n * n] };
        let budget = self.phy.eirp_plus_rx_gain_dbm();
        let urban = self.geometry.kind == ScenarioKind::UrbanGrid;
        for a in 0..n {
            for b in a + 1..n {
                let d = self.geometry.distance(pos[a], pos[b]).max(MIN_LINK_DISTANCE_M);
                let los = if urban { crate::mobility::los_with(&self.buildings, pos[a], pos[b]) } else { LosClass::Los };
                let mean = phy::mean_path_loss(d, los, self.phy).expect("distance clamped positive");
                let sd = if self.phy.shadowing { self.phy.shadowing_sd_db(los) } else { 0.0 };
                for (tx, rx) in [(a, b), (b, a)] {
                    let k = tx * n + rx;
                    let p = budget - mean - sd * self.shadow_db[k] as f64;
                    m.rx_dbm[k] = p as f32;
                    m.rx_mw[k] = phy::dbm_to_mw(p) as f32;
                    m.dist[k] = d as f32;
                }
            }
        }
        m
    }
}

/// Simulates beaconing over the whole trace set and streams the results
/// into `sink`.
pub fn run<S: EventSink>(
    geometry: &ScenarioGeometry,
    traces: &[VehicleTrace],
    config: &RunConfig,
    sink: &mut S,
) -> Result<RunStats, RadioError> {
    config.phy.validate()?;
    if !(config.duration_s > 0.0) {
        return Err(RadioError::InvalidConfig("duration must be positive".into()));
    }
    let whole_windows = |s: f64| ((s / SAMPLE_INTERVAL_S).round() - s / SAMPLE_INTERVAL_S).abs() < 1e-9;
    if !(config.warmup_s >= 0.0) || !whole_windows(config.warmup_s) || !whole_windows(config.duration_s) {
        return Err(RadioError::InvalidConfig("duration and warm-up must be non-negative multiples of 100 ms".into()));
    }
    if !(config.max_rx_distance_m > 0.0) {
        return Err(RadioError::InvalidConfig("max_rx_distance_m must be positive".into()));
    }
    if let Some(t) = traces.first() {
        let have = t.duration_s();
        if have + 1e-9 < config.total_s() {
            return Err(RadioError::TraceTooShort { have, need: config.total_s() });
        }
    }
    let mut links = Links::new(geometry, traces, &config.phy, config.seed);
    let mut measured = Measured {
        inner: sink,
        from_ns: (config.warmup_s * 1e9).round() as u64,
        from_window: config.warmup_windows(),
    };
    match config.mac {
        Mac::Dsrc => {
            config.dsrc.validate()?;
            Ok(dsrc::simulate(&mut links, config, &mut measured))
        }
        Mac::Cv2x => {
            config.sps.validate()?;
            subchannels_for(config.beacon_bytes, &config.sps)?;
            Ok(cv2x::simulate(&mut links, config, &mut measured))
        }
    }
}

/// Drops everything from the warm-up: beacons generated before it ends and
/// its occupancy windows.
struct Measured<'s, S> {
    inner: &'s mut S,
    from_ns: u64,
    from_window: u32,
}

impl<S: EventSink> EventSink for Measured<'_, S> {
    fn record_tx(&mut self, tx: &TxEvent, outcomes: &[RxOutcome]) {
        if tx.t_generated_ns >= self.from_ns {
            self.inner.record_tx(tx, outcomes);
        }
    }

    fn record_occupancy(&mut self, record: &OccupancyRecord) {
        if record.window >= self.from_window {
            self.inner.record_occupancy(record);
        }
    }
}

/// Convenience wrapper collecting everything into an [`EventLog`].
pub fn run_to_log(geometry: &ScenarioGeometry, traces: &[VehicleTrace], config: &RunConfig) -> Result<EventLog, RadioError> {
    let mut log = EventLog::new(config.mac);
    run(geometry, traces, config, &mut log)?;
    log.sort();
    Ok(log)
}
