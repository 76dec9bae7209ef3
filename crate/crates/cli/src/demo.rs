//! Handshake demo and attack-suite drivers.

use std::fmt;

use ztdim_core::adversary::{attack_suite_with, AttackReport, AttackWorld, SUITE_INSTANCES};
use ztdim_core::handshake::{
    measure_size, run_handshake, DataFrame, Guard, Guards, HandshakeConfig, HandshakeStatus, Participant,
    TranscriptEntry, WireMessage,
};
use ztdim_core::ledger::LedgerNetwork;
use ztdim_core::{generate_keypair, Location};

use crate::config::ConfigError;
use crate::CliError;

pub const DEMO_NODES: usize = 4;
pub const INITIATOR: &str = "veh-a";
pub const RESPONDER: &str = "veh-b";
const DEMO_PAYLOAD: &[u8] = b"beacon: lane 2, 13.9 m/s, heading 090";

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOptions {
    pub seed: u64,
    /// Revoke the responder on the ledger before the handshake.
    pub revoke_peer: bool,
    /// Index of a verifier node to crash before registration.
    pub crash_node: Option<usize>,
    pub freshness_window_ms: u64,
    /// Logical radio latency of one hop.
    pub hop_ms: u64,
    /// Logical latency of one ledger lookup.
    pub query_latency_ms: u64,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            seed: 1,
            revoke_peer: false,
            crash_node: None,
            freshness_window_ms: ztdim_core::handshake::DEFAULT_FRESHNESS_WINDOW_MS,
            hop_ms: 2,
            query_latency_ms: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DemoReport {
    pub status: HandshakeStatus,
    /// Both participants' transcripts, tagged with the owner and in time order.
    pub transcript: Vec<(String, TranscriptEntry)>,
    pub keys_equal: bool,
    pub latency_ms: u64,
    /// Wire size of the encrypted payload frame, once a session exists.
    pub data_frame_bytes: Option<usize>,
    pub live_nodes: usize,
}

impl fmt::Display for DemoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ledger: {} of {DEMO_NODES} verifier nodes live", self.live_nodes)?;
        writeln!(f, "owner,direction,kind,bytes,t_ms,verdict")?;
        for (who, e) in &self.transcript {
            writeln!(f, "{who},{e}")?;
        }
        if let Some(n) = self.data_frame_bytes {
            writeln!(f, "encrypted payload frame: {n} bytes")?;
        }
        writeln!(f, "handshake latency: {} ms (logical clock)", self.latency_ms)?;
        match &self.status {
            HandshakeStatus::Established => write!(f, "verdict: Established, session keys equal: {}", self.keys_equal),
            HandshakeStatus::Rejected(e) => write!(f, "verdict: Rejected ({}: {e})", e.code()),
        }
    }
}

fn security(e: impl fmt::Display) -> CliError {
    CliError::Security(e.to_string())
}

/// Registers two vehicles on a four-node ledger, runs the handshake and, on
/// success, sends one encrypted payload across the session.
pub fn handshake_demo(opts: &DemoOptions) -> Result<DemoReport, CliError> {
    let mut ledger = LedgerNetwork::with_nodes(DEMO_NODES, opts.seed);
    ledger.query_latency_ms = opts.query_latency_ms;
    if let Some(i) = opts.crash_node {
        if i >= DEMO_NODES {
            return Err(ConfigError::BadValue { key: "crash-node", message: format!("{i} is not below {DEMO_NODES}") }.into());
        }
        ledger.crash(&format!("rsu-{i}"))?;
    }
    let config = HandshakeConfig { freshness_window_ms: opts.freshness_window_ms, guards: Guards::default() };
    let participant = |id: &str, k: u64, x: f64| -> Result<Participant, CliError> {
        let key_seed = opts.seed.wrapping_mul(2).wrapping_add(k);
        Participant::new(id, generate_keypair(key_seed), Location::new(x, 0.0), 0, key_seed)
            .map(|p| p.with_config(config.clone()))
            .map_err(security)
    };
    let mut a = participant(INITIATOR, 0, 0.0)?;
    let mut b = participant(RESPONDER, 1, 60.0)?;
    a.register(&mut ledger).map_err(security)?;
    b.register(&mut ledger).map_err(security)?;
    if opts.revoke_peer {
        let authority = ledger.live_nodes().next().map(|n| n.node_id.clone()).ok_or_else(|| security("no live node"))?;
        ledger.revoke_identity(RESPONDER, &authority, "demo revocation")?;
        ledger.commit_pending()?;
    }

    let start_ms = 1_000;
    let outcome = run_handshake(&mut a, &mut b, &ledger, start_ms, opts.hop_ms);
    let mut data_frame_bytes = None;
    let mut keys_equal = false;
    if outcome.is_established() {
        let (sa, sb) = match (a.session(RESPONDER), b.session(INITIATOR)) {
            (Some(sa), Some(sb)) => (sa.clone(), sb.clone()),
            _ => return Err(security("session missing after establishment")),
        };
        keys_equal = sa.key.key == sb.key.key;
        let frame = sa.channel().secure_send(DEMO_PAYLOAD).map_err(security)?;
        let opened = sb.channel().secure_recv(&frame).map_err(security)?;
        if opened != DEMO_PAYLOAD {
            return Err(security("payload changed in transit"));
        }
        let wire = WireMessage::Data(DataFrame { session_id: sa.session_id, frame });
        data_frame_bytes = Some(measure_size(&wire).map_err(security)?);
    }

    let mut transcript: Vec<(String, TranscriptEntry)> = a
        .transcript()
        .iter()
        .map(|e| (INITIATOR.to_string(), e.clone()))
        .chain(b.transcript().iter().map(|e| (RESPONDER.to_string(), e.clone())))
        .collect();
    transcript.sort_by_key(|(_, e)| e.timestamp_ms);
    let last = transcript.iter().map(|(_, e)| e.timestamp_ms).max().unwrap_or(start_ms);
    Ok(DemoReport {
        status: outcome.status,
        transcript,
        keys_equal,
        latency_ms: last.saturating_sub(start_ms),
        data_frame_bytes,
        live_nodes: ledger.live_nodes().count(),
    })
}

/// Runs the attack suite with an optional guard switched off.
pub fn attack_cli(seed: u64, instances: usize, disabled: Option<Guard>) -> AttackReport {
    let guards = disabled.map(Guards::without).unwrap_or_default();
    let config = HandshakeConfig { guards, ..HandshakeConfig::default() };
    attack_suite_with(seed, instances, &AttackWorld::new(seed).with_config(config))
}

pub fn default_attack(seed: u64) -> AttackReport {
    attack_cli(seed, SUITE_INSTANCES, None)
}
