//! Mode-4 sidelink with sensing-based semi-persistent scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::phy::{decode, dbm_to_mw};
use super::{EventSink, Links, OccupancyRecord, RadioError, Resource, RunConfig, RunStats, RxOutcome, TxEvent, WINDOW_NS};

#[derive(Debug, Clone, PartialEq)]
pub struct SpsConfig {
    pub keep_probability: f64,
    /// Resources measured above this are excluded from selection.
    pub sensing_threshold_dbm: f64,
    pub subframe_ns: u64,
    pub subchannels: u8,
    pub bytes_per_subchannel: u32,
    pub counter_min: u32,
    pub counter_max: u32,
    /// Selection window `[start, end)` after generation, in subframes.
    pub selection_start_sf: u64,
    pub selection_end_sf: u64,
    pub sensing_window_sf: u64,
    /// Reservation period in subframes.
    pub period_sf: u64,
    pub min_candidate_fraction: f64,
    pub threshold_step_db: f64,
    /// Per-subchannel sensed power counted busy for CBR.
    pub cbr_threshold_dbm: f64,
}

impl Default for SpsConfig {
    fn default() -> Self {
        SpsConfig {
            keep_probability: 0.8,
            sensing_threshold_dbm: -110.0,
            subframe_ns: 1_000_000,
            subchannels: 4,
            bytes_per_subchannel: 420,
            counter_min: 5,
            counter_max: 15,
            selection_start_sf: 4,
            selection_end_sf: 100,
            sensing_window_sf: 1000,
            period_sf: 100,
            min_candidate_fraction: 0.2,
            threshold_step_db: 3.0,
            cbr_threshold_dbm: -94.0,
        }
    }
}

impl SpsConfig {
    pub fn validate(&self) -> Result<(), RadioError> {
        let bad = |m: &str| Err(RadioError::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.keep_probability) {
            return bad("keep probability must lie in [0, 1)");
        }
        if self.subchannels == 0 || self.bytes_per_subchannel == 0 || self.subframe_ns == 0 {
            return bad("subframe grid must be non-empty");
        }
        if self.counter_min == 0 || self.counter_min > self.counter_max {
            return bad("reselection counter range is empty");
        }
        if self.selection_start_sf >= self.selection_end_sf || self.selection_end_sf > self.period_sf {
            return bad("selection window must be non-empty and within one period");
        }
        if self.period_sf * self.subframe_ns != WINDOW_NS {
            return bad("reservation period must equal the beacon interval");
        }
        if self.sensing_window_sf < self.period_sf || self.sensing_window_sf % self.period_sf != 0 {
            return bad("sensing window must be a whole number of periods");
        }
        if !(self.min_candidate_fraction > 0.0 && self.min_candidate_fraction <= 1.0) || !(self.threshold_step_db > 0.0) {
            return bad("threshold relaxation parameters out of range");
        }
        Ok(())
    }
}

/// Subchannels needed for a beacon.
pub fn subchannels_for(bytes: u32, cfg: &SpsConfig) -> Result<u8, RadioError> {
    let k = bytes.div_ceil(cfg.bytes_per_subchannel).max(1);
    if k > cfg.subchannels as u32 {
        return Err(RadioError::PayloadTooLarge(bytes));
    }
    Ok(k as u8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpsCandidate {
    pub subframe: u64,
    pub first: u8,
    pub count: u8,
    /// Projected power from the sensing history.
    pub measured_mw: f64,
    /// Lines up with a past subframe the node spent transmitting, so it
    /// could not be sensed.
    pub unmonitored: bool,
}

/// Chooses a candidate index: drop unmonitored ones and those measured above
/// the sensing threshold, relaxing the threshold while too few survive, then
/// pick uniformly.
pub fn sps_select<R: Rng>(candidates: &[SpsCandidate], cfg: &SpsConfig, rng: &mut R) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    let mut pool: Vec<usize> = (0..candidates.len()).filter(|&i| !candidates[i].unmonitored).collect();
    if pool.is_empty() {
        pool = (0..candidates.len()).collect();
    }
    let need = (cfg.min_candidate_fraction * pool.len() as f64).ceil() as usize;
    let mut threshold_dbm = cfg.sensing_threshold_dbm;
    let mut kept: Vec<usize>;
    loop {
        let limit = dbm_to_mw(threshold_dbm);
        kept = pool.iter().copied().filter(|&i| candidates[i].measured_mw <= limit).collect();
        if kept.len() >= need {
            break;
        }
        threshold_dbm += cfg.threshold_step_db;
    }
    Some(kept[rng.gen_range(0..kept.len())])
}

#[derive(Debug, Clone, Copy)]
struct Reservation {
    next_sf: u64,
    first: u8,
}

#[derive(Debug, Default)]
struct Ue {
    pending: Option<u64>,
    reservation: Option<Reservation>,
    counter: u32,
    reselect: bool,
    next_gen_ns: u64,
    busy: u32,
}

struct Air {
    tx: TxEvent,
    first: u8,
}

pub(super) fn simulate<S: EventSink>(links: &mut Links<'_>, cfg: &RunConfig, sink: &mut S) -> RunStats {
    let sps = &cfg.sps;
    let n = links.n();
    let k = subchannels_for(cfg.beacon_bytes, sps).expect("validated by caller");
    let m = sps.subchannels as usize;
    let ring = sps.sensing_window_sf as usize;
    let duration_ns = cfg.total_ns();
    let windows = cfg.windows() as u64;
    let last_sf = duration_ns.div_ceil(sps.subframe_ns) + sps.period_sf + 1;
    let cbr_mw = dbm_to_mw(sps.cbr_threshold_dbm);

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut ues: Vec<Ue> = (0..n).map(|_| Ue { next_gen_ns: rng.gen_range(0..WINDOW_NS), ..Ue::default() }).collect();
    // per node, per subframe slot, per subchannel: sensed signal power
    let mut sensed = vec![0f32; n * ring * m];
    let mut own_tx = vec![false; n * ring];
    let mut stats = RunStats::default();
    let mut next_id = 0u32;
    let mut air: Vec<Air> = Vec::new();
    let mut txing = vec![false; n];
    let mut outcomes = Vec::new();
    let mut candidates = Vec::new();
    let mut matrix = links.matrix(0);

    for sf in 0..last_sf {
        let t_ns = sf * sps.subframe_ns;
        if sf % sps.period_sf == 0 {
            let w = sf / sps.period_sf;
            if w >= 1 && w - 1 < windows {
                for (i, ue) in ues.iter_mut().enumerate() {
                    sink.record_occupancy(&OccupancyRecord {
                        window: (w - 1) as u32,
                        node: i as u32,
                        busy_ns: 0,
                        busy_subchannels: std::mem::take(&mut ue.busy),
                        capacity_subchannels: (sps.period_sf * m as u64) as u32,
                    });
                }
            }
            matrix = links.matrix(w as u32);
        }

        // reserved transmissions of this subframe
        air.clear();
        for (i, ue) in ues.iter_mut().enumerate() {
            let Some(res) = ue.reservation.as_mut() else { continue };
            if res.next_sf != sf {
                continue;
            }
            res.next_sf += sps.period_sf;
            let first = res.first;
            let Some(t_generated_ns) = ue.pending.take() else { continue };
            air.push(Air {
                tx: TxEvent {
                    id: next_id,
                    sender: i as u32,
                    t_generated_ns,
                    t_air_ns: t_ns,
                    airtime_ns: sps.subframe_ns,
                    size_bytes: cfg.beacon_bytes,
                    resource: Resource::Subchannels { subframe: sf, first, count: k },
                },
                first,
            });
            next_id += 1;
            stats.transmitted += 1;
            ue.counter -= 1;
            if ue.counter == 0 {
                if rng.gen::<f64>() < sps.keep_probability {
                    ue.counter = rng.gen_range(sps.counter_min..=sps.counter_max);
                } else {
                    ue.reselect = true;
                }
            }
        }
        for a in &air {
            txing[a.tx.sender as usize] = true;
        }

        for a in &air {
            let s = a.tx.sender as usize;
            outcomes.clear();
            for rx in 0..n {
                if rx == s {
                    continue;
                }
                let d = matrix.dist(s, rx);
                if d > cfg.max_rx_distance_m {
                    continue;
                }
                let mut interference = 0.0;
                for b in &air {
                    let bs = b.tx.sender as usize;
                    if bs != s && bs != rx {
                        let shared = overlap(a.first, b.first, k);
                        if shared > 0 {
                            interference += matrix.mw(bs, rx) * shared as f64 / k as f64;
                        }
                    }
                }
                let p = matrix.dbm(s, rx);
                let r = decode(p, interference, txing[rx], &cfg.phy);
                outcomes.push(RxOutcome {
                    tx: a.tx.id,
                    receiver: rx as u32,
                    distance_m: d,
                    rx_power_dbm: p,
                    sinr_db: r.sinr_db,
                    decoded: r.decoded,
                    fail_reason: r.fail_reason,
                });
            }
            stats.outcomes += outcomes.len() as u64;
            sink.record_tx(&a.tx, &outcomes);
        }

        // sensing and occupancy
        let slot = (sf % sps.sensing_window_sf) as usize;
        for rx in 0..n {
            let cell = &mut sensed[(rx * ring + slot) * m..][..m];
            cell.iter_mut().for_each(|c| *c = 0.0);
            own_tx[rx * ring + slot] = txing[rx];
            if txing[rx] {
                ues[rx].busy += k as u32;
                continue;
            }
            if air.is_empty() {
                continue;
            }
            for a in &air {
                let share = (matrix.mw(a.tx.sender as usize, rx) / k as f64) as f32;
                for c in &mut cell[a.first as usize..(a.first + k) as usize] {
                    *c += share;
                }
            }
            ues[rx].busy += cell.iter().filter(|&&c| c as f64 >= cbr_mw).count() as u32;
        }
        for a in &air {
            txing[a.tx.sender as usize] = false;
        }

        // beacon generation inside this subframe
        let sf_end = t_ns + sps.subframe_ns;
        for i in 0..n {
            let t_gen = ues[i].next_gen_ns;
            if t_gen >= sf_end || t_gen >= duration_ns {
                continue;
            }
            stats.generated += 1;
            ues[i].next_gen_ns += WINDOW_NS;
            if ues[i].pending.replace(t_gen).is_some() {
                stats.superseded += 1;
            }
            if ues[i].reservation.is_some() && !ues[i].reselect {
                continue;
            }
            let history = &sensed[i * ring * m..(i + 1) * ring * m];
            candidate_grid(history, &own_tx[i * ring..(i + 1) * ring], t_gen, k, sps, sf, &mut candidates);
            let pick = sps_select(&candidates, sps, &mut rng).expect("selection window is non-empty");
            let c = candidates[pick];
            let ue = &mut ues[i];
            ue.reservation = Some(Reservation { next_sf: c.subframe, first: c.first });
            ue.counter = rng.gen_range(sps.counter_min..=sps.counter_max);
            ue.reselect = false;
        }
    }
    stats
}

/// Every (subframe, subchannel start) in the selection window after
/// `t_gen`, with power projected from the sensing history of one node.
fn candidate_grid(history: &[f32], own_tx: &[bool], t_gen: u64, k: u8, sps: &SpsConfig, now_sf: u64, out: &mut Vec<SpsCandidate>) {
    out.clear();
    let m = sps.subchannels as usize;
    let ring = sps.sensing_window_sf;
    let first_sf = (t_gen + sps.selection_start_sf * sps.subframe_ns).div_ceil(sps.subframe_ns);
    let end_sf = (t_gen + sps.selection_end_sf * sps.subframe_ns).div_ceil(sps.subframe_ns);
    let periods = ring / sps.period_sf;
    for s in first_sf..end_sf {
        for first in 0..=(sps.subchannels - k) {
            let mut total = 0.0;
            let mut seen = 0;
            let mut unmonitored = false;
            for p in 1..=periods {
                let Some(past) = s.checked_sub(p * sps.period_sf) else { break };
                if past > now_sf {
                    continue;
                }
                unmonitored |= own_tx[(past % ring) as usize];
                let cell = &history[(past % ring) as usize * m..][..m];
                total += cell[first as usize..(first + k) as usize].iter().map(|&c| c as f64).sum::<f64>() / k as f64;
                seen += 1;
            }
            let measured_mw = if seen == 0 { 0.0 } else { total / seen as f64 };
            out.push(SpsCandidate { subframe: s, first, count: k, measured_mw, unmonitored });
        }
    }
}

fn overlap(a: u8, b: u8, k: u8) -> u8 {
    let lo = a.max(b);
    let hi = (a + k).min(b + k);
    hi.saturating_sub(lo)
}
