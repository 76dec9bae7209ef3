//! CSMA/CA broadcast: carrier sensing, frozen backoff, no retransmission.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::phy::{decode, dbm_to_mw};
use super::{EventSink, LinkMatrix, Links, RadioError, Resource, RunConfig, RunStats, RxOutcome, TxEvent, WINDOW_NS};
use super::OccupancyRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct DsrcConfig {
    pub data_rate_bps: f64,
    pub preamble_ns: u64,
    pub slot_ns: u64,
    pub aifs_ns: u64,
    pub cw_min: u32,
    /// Aggregate sensed power at or above which the medium is busy.
    pub cca_threshold_dbm: f64,
    pub beacon_interval_ns: u64,
}

impl Default for DsrcConfig {
    fn default() -> Self {
        DsrcConfig {
            data_rate_bps: 6e6,
            preamble_ns: 40_000,
            slot_ns: 13_000,
            aifs_ns: 58_000,
            cw_min: 15,
            cca_threshold_dbm: -85.0,
            beacon_interval_ns: WINDOW_NS,
        }
    }
}

impl DsrcConfig {
    pub fn validate(&self) -> Result<(), RadioError> {
        if !(self.data_rate_bps > 0.0) || self.slot_ns == 0 || self.beacon_interval_ns == 0 || !self.cca_threshold_dbm.is_finite() {
            return Err(RadioError::InvalidConfig("DSRC timing parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Frame duration: preamble plus payload at the configured rate.
pub fn dsrc_airtime_ns(bytes: u32, cfg: &DsrcConfig) -> u64 {
    cfg.preamble_ns + (bytes as f64 * 8.0 / cfg.data_rate_bps * 1e9).round() as u64
}

// Same-instant ordering: window boundaries, then frame ends, then beacon
// generation, then frame starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Window(u32),
    TxEnd(u32),
    Generate(u32),
    TxStart { node: u32, token: u64 },
}

struct Active {
    tx: TxEvent,
    end_ns: u64,
    matrix: Rc<LinkMatrix>,
}

#[derive(Default)]
struct Node {
    queued: Option<u64>,
    backoff: u32,
    counting_since: Option<u64>,
    fires_at: Option<u64>,
    token: u64,
    transmitting: bool,
    carrier: bool,
    occupied: bool,
    occupied_since: u64,
    busy_ns: u64,
}

struct Engine<'l, 'a, S> {
    links: &'l mut Links<'a>,
    cfg: &'l RunConfig,
    sink: &'l mut S,
    nodes: Vec<Node>,
    sensed_mw: Vec<f64>,
    cca_mw: f64,
    active: Vec<Active>,
    ended: VecDeque<Active>,
    queue: BinaryHeap<Reverse<(u64, Event)>>,
    rng: ChaCha20Rng,
    stats: RunStats,
    next_id: u32,
    airtime_ns: u64,
    duration_ns: u64,
    outcomes: Vec<RxOutcome>,
}

pub(super) fn simulate<S: EventSink>(links: &mut Links<'_>, cfg: &RunConfig, sink: &mut S) -> RunStats {
    let n = links.n();
    let duration_ns = cfg.total_ns();
    let mut e = Engine {
        links,
        cfg,
        sink,
        nodes: (0..n).map(|_| Node::default()).collect(),
        sensed_mw: vec![0.0; n],
        cca_mw: dbm_to_mw(cfg.dsrc.cca_threshold_dbm),
        active: Vec::new(),
        ended: VecDeque::new(),
        queue: BinaryHeap::new(),
        rng: ChaCha20Rng::seed_from_u64(cfg.seed),
        stats: RunStats::default(),
        next_id: 0,
        airtime_ns: dsrc_airtime_ns(cfg.beacon_bytes, &cfg.dsrc),
        duration_ns,
        outcomes: Vec::new(),
    };
    for node in 0..n as u32 {
        let phase = e.rng.gen_range(0..cfg.dsrc.beacon_interval_ns);
        if phase < duration_ns {
            e.push(phase, Event::Generate(node));
        }
    }
    for w in 0..=cfg.windows() {
        e.push(w as u64 * WINDOW_NS, Event::Window(w));
    }
    while let Some(Reverse((now, ev))) = e.queue.pop() {
        match ev {
            Event::Window(w) => e.window(now, w),
            Event::TxEnd(id) => e.tx_end(now, id),
            Event::Generate(node) => e.generate(now, node as usize),
            Event::TxStart { node, token } => e.tx_start(now, node as usize, token),
        }
    }
    e.stats
}

impl<S: EventSink> Engine<'_, '_, S> {
    fn push(&mut self, t: u64, ev: Event) {
        self.queue.push(Reverse((t, ev)));
    }

    fn window(&mut self, now: u64, w: u32) {
        if w == 0 {
            return;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.occupied {
                node.busy_ns += now - node.occupied_since;
                node.occupied_since = now;
            }
            let busy_ns = std::mem::take(&mut node.busy_ns);
            self.sink.record_occupancy(&OccupancyRecord {
                window: w - 1,
                node: i as u32,
                busy_ns,
                busy_subchannels: 0,
                capacity_subchannels: 0,
            });
        }
    }

    fn generate(&mut self, now: u64, i: usize) {
        self.stats.generated += 1;
        let next = now + self.cfg.dsrc.beacon_interval_ns;
        if next < self.duration_ns {
            self.push(next, Event::Generate(i as u32));
        }
        if self.nodes[i].queued.is_some() {
            // the older beacon is stale; keep its contention state
            self.stats.superseded += 1;
            self.nodes[i].queued = Some(now);
            return;
        }
        let backoff = self.rng.gen_range(0..=self.cfg.dsrc.cw_min);
        let node = &mut self.nodes[i];
        node.queued = Some(now);
        node.backoff = backoff;
        if !node.transmitting && !node.carrier {
            self.resume(now, i);
        }
    }

    fn resume(&mut self, now: u64, i: usize) {
        let d = &self.cfg.dsrc;
        let node = &mut self.nodes[i];
        node.token += 1;
        let at = now + d.aifs_ns + node.backoff as u64 * d.slot_ns;
        node.counting_since = Some(now);
        node.fires_at = Some(at);
        let token = node.token;
        self.push(at, Event::TxStart { node: i as u32, token });
    }

    fn freeze(&mut self, now: u64, i: usize) {
        let d = &self.cfg.dsrc;
        let node = &mut self.nodes[i];
        let Some(since) = node.counting_since else { return };
        if node.fires_at == Some(now) {
            // already committed to this slot
            return;
        }
        let elapsed = now - since;
        if elapsed > d.aifs_ns {
            let consumed = ((elapsed - d.aifs_ns) / d.slot_ns) as u32;
            node.backoff -= consumed.min(node.backoff);
        }
        node.counting_since = None;
        node.fires_at = None;
        node.token += 1;
    }

    fn tx_start(&mut self, now: u64, i: usize, token: u64) {
        if self.nodes[i].token != token || self.nodes[i].queued.is_none() {
            return;
        }
        let window = (now / WINDOW_NS) as u32;
        let matrix = self.links.matrix(window);
        let node = &mut self.nodes[i];
        let t_generated_ns = node.queued.take().unwrap();
        node.transmitting = true;
        node.counting_since = None;
        node.fires_at = None;
        let tx = TxEvent {
            id: self.next_id,
            sender: i as u32,
            t_generated_ns,
            t_air_ns: now,
            airtime_ns: self.airtime_ns,
            size_bytes: self.cfg.beacon_bytes,
            resource: Resource::Channel,
        };
        self.next_id += 1;
        self.stats.transmitted += 1;
        for (rx, s) in self.sensed_mw.iter_mut().enumerate() {
            if rx != i {
                *s += matrix.mw(i, rx);
            }
        }
        self.push(now + self.airtime_ns, Event::TxEnd(tx.id));
        self.active.push(Active { tx, end_ns: now + self.airtime_ns, matrix });
        self.update_channel(now);
    }

    fn tx_end(&mut self, now: u64, id: u32) {
        let pos = self.active.iter().position(|a| a.tx.id == id).expect("active transmission");
        let done = self.active.swap_remove(pos);
        let sender = done.tx.sender as usize;
        if self.active.is_empty() {
            // drop accumulated rounding
            self.sensed_mw.iter_mut().for_each(|s| *s = 0.0);
        } else {
            for (rx, s) in self.sensed_mw.iter_mut().enumerate() {
                if rx != sender {
                    *s -= done.matrix.mw(sender, rx);
                }
            }
        }
        self.nodes[sender].transmitting = false;
        let horizon = now.saturating_sub(self.airtime_ns);
        while self.ended.front().is_some_and(|a| a.end_ns <= horizon) {
            self.ended.pop_front();
        }
        self.receptions(&done);
        self.ended.push_back(done);
        self.update_channel(now);
        let node = &self.nodes[sender];
        if node.queued.is_some() && !node.carrier && node.counting_since.is_none() {
            self.resume(now, sender);
        }
    }

    fn receptions(&mut self, j: &Active) {
        let s = j.tx.t_air_ns;
        let e = j.end_ns;
        let sender = j.tx.sender as usize;
        let overlapping: Vec<&Active> = self
            .active
            .iter()
            .chain(self.ended.iter())
            .filter(|k| k.tx.id != j.tx.id && k.tx.t_air_ns < e && k.end_ns > s)
            .collect();
        self.outcomes.clear();
        for rx in 0..self.nodes.len() {
            if rx == sender {
                continue;
            }
            let d = j.matrix.dist(sender, rx);
            if d > self.cfg.max_rx_distance_m {
                continue;
            }
            let mut half_duplex = false;
            let mut interference = 0.0;
            for k in &overlapping {
                let ks = k.tx.sender as usize;
                if ks == rx {
                    half_duplex = true;
                } else {
                    interference += k.matrix.mw(ks, rx);
                }
            }
            let p = j.matrix.dbm(sender, rx);
            let r = decode(p, interference, half_duplex, &self.cfg.phy);
            self.outcomes.push(RxOutcome {
                tx: j.tx.id,
                receiver: rx as u32,
                distance_m: d,
                rx_power_dbm: p,
                sinr_db: r.sinr_db,
                decoded: r.decoded,
                fail_reason: r.fail_reason,
            });
        }
        self.stats.outcomes += self.outcomes.len() as u64;
        self.sink.record_tx(&j.tx, &self.outcomes);
    }

    fn update_channel(&mut self, now: u64) {
        for i in 0..self.nodes.len() {
            let carrier = self.sensed_mw[i] >= self.cca_mw;
            let node = &mut self.nodes[i];
            let occupied = carrier || node.transmitting;
            if occupied != node.occupied {
                if node.occupied {
                    node.busy_ns += now - node.occupied_since;
                } else {
                    node.occupied_since = now;
                }
                node.occupied = occupied;
            }
            if carrier != node.carrier {
                node.carrier = carrier;
                if node.queued.is_some() && !node.transmitting {
                    if carrier {
                        self.freeze(now, i);
                    } else {
                        self.resume(now, i);
                    }
                }
            }
        }
    }
}
