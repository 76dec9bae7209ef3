//! Ledger-mediated mutual authentication and session establishment.
//!
//! ```text
//! A                                   ledger                           B
//! | query(B) -------------------------> |                              |
//! | <------------------- record(B)      |                              |
//! | M1 = Seal_B(B, A, K_A, TS, Q, commit_B) --------------------------> |
//! |                                     | <------------------ query(A) |
//! |                                     | record(A) ------------------> |
//! | <------------------------ M2 = Seal_A(A, B, TS, R, H(B || Q))       |
//! K = KDF(R^q)                                            K = KDF(Q^r)
//! ```
//!
//! The responder checks the presented key against the initiator's record,
//! the echoed commitment against its own record, the timestamp and the
//! initiator's revocation status. The initiator checks the timestamp and
//! that M2 is bound to its own Q. Each check can be switched off through
//! [`Guards`] so the adversary suite can show that every one of them matters.

mod channel;
pub mod wire;

use std::collections::HashMap;
use std::fmt;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub use channel::{Role, SecureChannel};
pub use wire::{
    decode_wire, encode_wire, measure_size, DataFrame, EncodingError, LedgerQuery, LedgerResponse, MessageKind,
    MessageM1, MessageM2, SealedMessage, WireMessage,
};

use crate::identity::{
    self, hash_parts, make_identity_record, verify_record_consistency, DhChallenge, DhGroup, Digest, IdentityError,
    IdentityRecord, KeyPair, Location, PublicKey, SessionKey,
};
use crate::ledger::{LedgerError, LedgerNetwork, LedgerTx, QueryResult, QueryStatus, TxId};

pub const DEFAULT_FRESHNESS_WINDOW_MS: u64 = 5000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("peer is not registered")]
    UnknownPeer,
    #[error("peer identity is revoked")]
    RevokedPeer,
    #[error("presented public key does not match the ledger record")]
    KeyMismatch,
    #[error("echoed commitment does not match the ledger record")]
    CommitmentMismatch,
    #[error("timestamp outside the freshness window")]
    StaleTimestamp,
    #[error("M2 is not bound to this session's challenge")]
    ChallengeBindingMismatch,
    #[error("envelope failed to open")]
    TamperedEnvelope,
    #[error("message addressed to another participant")]
    Misaddressed,
    #[error("no handshake pending with {0}")]
    NoPendingSession(String),
    #[error("session violation")]
    SessionViolation,
    #[error("participant identity is inconsistent with its key pair")]
    InconsistentIdentity,
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Identity(IdentityError),
}

impl From<IdentityError> for HandshakeError {
    fn from(e: IdentityError) -> Self {
        match e {
            IdentityError::TamperedEnvelope => HandshakeError::TamperedEnvelope,
            other => HandshakeError::Identity(other),
        }
    }
}

impl HandshakeError {
    /// Short stable name used in transcripts and attack reports.
    pub fn code(&self) -> &'static str {
        match self {
            HandshakeError::UnknownPeer => "UnknownPeer",
            HandshakeError::RevokedPeer => "RevokedPeer",
            HandshakeError::KeyMismatch => "KeyMismatch",
            HandshakeError::CommitmentMismatch => "CommitmentMismatch",
            HandshakeError::StaleTimestamp => "StaleTimestamp",
            HandshakeError::ChallengeBindingMismatch => "ChallengeBindingMismatch",
            HandshakeError::TamperedEnvelope => "TamperedEnvelope",
            HandshakeError::Misaddressed => "Misaddressed",
            HandshakeError::NoPendingSession(_) => "NoPendingSession",
            HandshakeError::SessionViolation => "SessionViolation",
            HandshakeError::InconsistentIdentity => "InconsistentIdentity",
            HandshakeError::Encoding(_) => "EncodingError",
            HandshakeError::Ledger(_) => "LedgerError",
            HandshakeError::Identity(_) => "IdentityError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Guard {
    Freshness,
    KeyMatch,
    CommitmentEcho,
    ChallengeBinding,
    Revocation,
}

impl Guard {
    pub const ALL: [Guard; 5] =
        [Guard::Freshness, Guard::KeyMatch, Guard::CommitmentEcho, Guard::ChallengeBinding, Guard::Revocation];

    pub fn name(self) -> &'static str {
        match self {
            Guard::Freshness => "freshness",
            Guard::KeyMatch => "key-match",
            Guard::CommitmentEcho => "commitment-echo",
            Guard::ChallengeBinding => "challenge-binding",
            Guard::Revocation => "revocation",
        }
    }
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Guard {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Guard::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown guard {s:?}, expected one of freshness, key-match, commitment-echo, challenge-binding, revocation"))
    }
}

/// Which verification steps are enforced. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Guards {
    pub freshness: bool,
    pub key_match: bool,
    pub commitment_echo: bool,
    pub challenge_binding: bool,
    pub revocation: bool,
}

impl Default for Guards {
    fn default() -> Self {
        Guards { freshness: true, key_match: true, commitment_echo: true, challenge_binding: true, revocation: true }
    }
}

impl Guards {
    pub fn without(guard: Guard) -> Self {
        let mut g = Guards::default();
        g.set(guard, false);
        g
    }

    pub fn set(&mut self, guard: Guard, on: bool) {
        match guard {
            Guard::Freshness => self.freshness = on,
            Guard::KeyMatch => self.key_match = on,
            Guard::CommitmentEcho => self.commitment_echo = on,
            Guard::ChallengeBinding => self.challenge_binding = on,
            Guard::Revocation => self.revocation = on,
        }
    }

    pub fn enabled(&self, guard: Guard) -> bool {
        match guard {
            Guard::Freshness => self.freshness,
            Guard::KeyMatch => self.key_match,
            Guard::CommitmentEcho => self.commitment_echo,
            Guard::ChallengeBinding => self.challenge_binding,
            Guard::Revocation => self.revocation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeConfig {
    pub freshness_window_ms: u64,
    pub guards: Guards,
}

impl Default for HandshakeConfig {
    fn default() -> Self {
        HandshakeConfig { freshness_window_ms: DEFAULT_FRESHNESS_WINDOW_MS, guards: Guards::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
}

/// One wire message as seen by a participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub kind: MessageKind,
    pub size: usize,
    pub timestamp_ms: u64,
    pub verdict: String,
}

impl fmt::Display for TranscriptEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = match self.direction {
            Direction::Out => "out",
            Direction::In => "in",
        };
        write!(f, "{dir},{},{},{},{}", self.kind.label(), self.size, self.timestamp_ms, self.verdict)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandshakeStatus {
    Established,
    Rejected(HandshakeError),
}

#[derive(Debug, Clone)]
pub struct HandshakeOutcome {
    pub status: HandshakeStatus,
    pub session_key: Option<SessionKey>,
    pub transcript_sizes: Vec<(MessageKind, usize)>,
}

impl HandshakeOutcome {
    pub fn is_established(&self) -> bool {
        self.status == HandshakeStatus::Established
    }
}

/// A derived session, confirmed on the initiator side once M2 verifies.
#[derive(Debug, Clone)]
pub struct Session {
    pub peer_id: String,
    pub role: Role,
    pub session_id: Digest,
    pub key: SessionKey,
}

impl Session {
    pub fn channel(&self) -> SecureChannel {
        SecureChannel::new(&self.key, self.session_id, self.role)
    }
}

#[derive(Debug, Clone)]
struct Pending {
    challenge: DhChallenge,
}

/// A vehicle or roadside unit able to take either handshake role.
#[derive(Debug, Clone)]
pub struct Participant {
    identity: IdentityRecord,
    keypair: KeyPair,
    group: DhGroup,
    config: HandshakeConfig,
    ledger_endpoint: Option<String>,
    rng: ChaCha20Rng,
    next_request: u64,
    pending: HashMap<String, Pending>,
    sessions: HashMap<String, Session>,
    transcript: Vec<TranscriptEntry>,
}

/// `H(responder_id || Q)`, the value M2 carries to tie itself to Q.
pub fn challenge_binding(responder_id: &str, q: &BigUint, group: &DhGroup) -> Digest {
    hash_parts(&[responder_id.as_bytes(), &group.encode_element(q)])
}

/// `H(initiator_id || responder_id || Q)`, scoping channel counters.
pub fn session_id(initiator_id: &str, responder_id: &str, q: &BigUint, group: &DhGroup) -> Digest {
    hash_parts(&[initiator_id.as_bytes(), responder_id.as_bytes(), &group.encode_element(q)])
}

/// Seals an encoded M1/M2 plaintext to `recipient` and frames it for the air.
pub fn seal_message(
    kind: MessageKind,
    sender_id: &str,
    plaintext: &[u8],
    recipient: &PublicKey,
    rng_seed: u64,
) -> Result<SealedMessage, HandshakeError> {
    let envelope = identity::seal(plaintext, recipient, rng_seed)?;
    Ok(SealedMessage { kind, sender_id: sender_id.to_owned(), envelope })
}

fn fresh(now_ms: u64, ts_ms: u64, window_ms: u64) -> bool {
    now_ms.abs_diff(ts_ms) <= window_ms
}

impl Participant {
    pub fn new(id: &str, keypair: KeyPair, location: Location, now_ms: u64, rng_seed: u64) -> Result<Self, HandshakeError> {
        let identity = make_identity_record(id, &keypair, now_ms, location)?;
        Ok(Participant {
            identity,
            keypair,
            group: DhGroup::modp2048().clone(),
            config: HandshakeConfig::default(),
            ledger_endpoint: None,
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            next_request: 0,
            pending: HashMap::new(),
            sessions: HashMap::new(),
            transcript: Vec::new(),
        })
    }

    pub fn with_config(mut self, config: HandshakeConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_group(mut self, group: DhGroup) -> Self {
        self.group = group;
        self
    }

    /// Verifier node to ask first; any live node is used if it is down.
    pub fn with_ledger_endpoint(mut self, node_id: &str) -> Self {
        self.ledger_endpoint = Some(node_id.to_owned());
        self
    }

    pub fn id(&self) -> &str {
        &self.identity.id
    }

    pub fn identity(&self) -> &IdentityRecord {
        &self.identity
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keypair
    }

    pub fn group(&self) -> &DhGroup {
        &self.group
    }

    pub fn config(&self) -> &HandshakeConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut HandshakeConfig {
        &mut self.config
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn session(&self, peer_id: &str) -> Option<&Session> {
        self.sessions.get(peer_id)
    }

    pub fn has_pending(&self, peer_id: &str) -> bool {
        self.pending.contains_key(peer_id)
    }

    /// Replaces the key pair and rebuilds the identity record; call
    /// [`register`](Self::register) afterwards to publish it.
    pub fn rotate_key(&mut self, keypair: KeyPair, now_ms: u64) -> Result<(), HandshakeError> {
        self.identity = make_identity_record(&self.identity.id, &keypair, now_ms, self.identity.location)?;
        self.keypair = keypair;
        Ok(())
    }

    pub fn set_location(&mut self, location: Location) {
        self.identity.location = location;
    }

    /// Submits the identity record and runs consensus until it commits.
    pub fn register(&self, ledger: &mut LedgerNetwork) -> Result<TxId, HandshakeError> {
        if !verify_record_consistency(&self.identity, self.keypair.private_key.as_bytes()) {
            return Err(HandshakeError::InconsistentIdentity);
        }
        let seq = ledger.live_nodes().map(|n| n.chain.len() as u64).max().unwrap_or(0);
        let tx = ledger.submit_tx(LedgerTx::register(self.identity.clone(), seq))?;
        ledger.commit_pending()?;
        Ok(tx)
    }

    fn log(&mut self, direction: Direction, kind: MessageKind, size: usize, now_ms: u64, verdict: impl Into<String>) {
        self.transcript.push(TranscriptEntry { direction, kind, size, timestamp_ms: now_ms, verdict: verdict.into() });
    }

    /// Ledger lookup through the preferred endpoint, logged as a query and
    /// response pair.
    pub fn lookup(&mut self, ledger: &LedgerNetwork, target_id: &str, now_ms: u64) -> Result<QueryResult, HandshakeError> {
        let request_id = self.next_request;
        self.next_request += 1;
        let query = WireMessage::Query(LedgerQuery { request_id, timestamp_ms: now_ms, target_id: target_id.to_owned() });
        self.log(Direction::Out, MessageKind::LedgerQuery, measure_size(&query)?, now_ms, "sent");
        let result = match &self.ledger_endpoint {
            Some(node) => match ledger.query_identity(node, target_id) {
                Err(LedgerError::NodeUnavailable(_)) => ledger.query_any(target_id),
                other => other,
            },
            None => ledger.query_any(target_id),
        }?;
        let at = now_ms.saturating_add(ledger.query_latency_ms);
        let response = WireMessage::Response(LedgerResponse { request_id, timestamp_ms: at, result: result.clone() });
        let verdict = match result.status {
            QueryStatus::Found => "found",
            QueryStatus::NotFound => "not-found",
            QueryStatus::Revoked => "revoked",
        };
        self.log(Direction::In, MessageKind::LedgerResponse, measure_size(&response)?, at, verdict);
        Ok(result)
    }

    /// Starts a handshake with `peer_id` and returns the sealed M1.
    pub fn initiate(&mut self, ledger: &LedgerNetwork, peer_id: &str, now_ms: u64) -> Result<SealedMessage, HandshakeError> {
        let result = self.lookup(ledger, peer_id, now_ms)?;
        let record = match (result.status, result.record) {
            (QueryStatus::NotFound, _) | (_, None) => return Err(HandshakeError::UnknownPeer),
            (QueryStatus::Revoked, _) if self.config.guards.revocation => return Err(HandshakeError::RevokedPeer),
            (_, Some(r)) => r,
        };
        let peer_key = record.parsed_public_key()?;
        let echoed = Digest::from_slice(&record.commitment).ok_or(HandshakeError::CommitmentMismatch)?;
        let challenge = DhChallenge::generate(&self.group, &mut self.rng);
        let m1 = MessageM1 {
            recipient_id: peer_id.to_owned(),
            sender_id: self.identity.id.clone(),
            sender_public_key: self.identity.public_key.clone(),
            timestamp_ms: now_ms,
            challenge_q: challenge.public_value.clone(),
            echoed_commitment: echoed,
        };
        let sealed = seal_message(MessageKind::M1, &self.identity.id, &m1.encode()?, &peer_key, self.rng.next_u64())?;
        self.pending.insert(peer_id.to_owned(), Pending { challenge });
        self.log(Direction::Out, MessageKind::M1, measure_size(&WireMessage::Sealed(sealed.clone()))?, now_ms, "sent");
        Ok(sealed)
    }

    fn open_sealed(&self, msg: &SealedMessage, expected: MessageKind) -> Result<Vec<u8>, HandshakeError> {
        if msg.kind != expected {
            return Err(EncodingError::Malformed("message kind").into());
        }
        Ok(identity::open(&msg.envelope, &self.keypair.private_key)?)
    }

    /// Verifies an incoming M1 and answers with M2. On success the derived
    /// session is stored under the initiator's id.
    pub fn respond(&mut self, ledger: &LedgerNetwork, m1: &SealedMessage, now_ms: u64) -> Result<SealedMessage, HandshakeError> {
        let size = measure_size(&WireMessage::Sealed(m1.clone()))?;
        let idx = self.transcript.len();
        self.log(Direction::In, MessageKind::M1, size, now_ms, "received");
        let result = self.respond_inner(ledger, m1, now_ms);
        self.transcript[idx].verdict = match &result {
            Ok(_) => "accepted".to_owned(),
            Err(e) => format!("rejected:{}", e.code()),
        };
        let m2 = result?;
        self.log(Direction::Out, MessageKind::M2, measure_size(&WireMessage::Sealed(m2.clone()))?, now_ms, "sent");
        Ok(m2)
    }

    fn respond_inner(&mut self, ledger: &LedgerNetwork, sealed: &SealedMessage, now_ms: u64) -> Result<SealedMessage, HandshakeError> {
        let plain = self.open_sealed(sealed, MessageKind::M1)?;
        let m1 = MessageM1::decode(&plain)?;
        if m1.recipient_id != self.identity.id || m1.sender_id != sealed.sender_id {
            return Err(HandshakeError::Misaddressed);
        }
        let guards = self.config.guards;
        if guards.freshness && !fresh(now_ms, m1.timestamp_ms, self.config.freshness_window_ms) {
            return Err(HandshakeError::StaleTimestamp);
        }
        let result = self.lookup(ledger, &m1.sender_id, now_ms)?;
        let record = match (result.status, result.record) {
            (QueryStatus::NotFound, _) | (_, None) => return Err(HandshakeError::UnknownPeer),
            (QueryStatus::Revoked, _) if guards.revocation => return Err(HandshakeError::RevokedPeer),
            (_, Some(r)) => r,
        };
        if guards.key_match && m1.sender_public_key != record.public_key {
            return Err(HandshakeError::KeyMismatch);
        }
        if guards.commitment_echo && m1.echoed_commitment.as_bytes()[..] != self.identity.commitment[..] {
            return Err(HandshakeError::CommitmentMismatch);
        }
        let reply_key = PublicKey::from_der(&m1.sender_public_key)?;
        let challenge = DhChallenge::generate(&self.group, &mut self.rng);
        let key = identity::derive_session_key(&challenge.secret, &m1.challenge_q, &self.group, now_ms)?;
        let m2 = MessageM2 {
            recipient_id: m1.sender_id.clone(),
            sender_id: self.identity.id.clone(),
            timestamp_ms: now_ms,
            challenge_r: challenge.public_value,
            binding: challenge_binding(&self.identity.id, &m1.challenge_q, &self.group),
        };
        let sealed = seal_message(MessageKind::M2, &self.identity.id, &m2.encode()?, &reply_key, self.rng.next_u64())?;
        let sid = session_id(&m1.sender_id, &self.identity.id, &m1.challenge_q, &self.group);
        self.sessions.insert(
            m1.sender_id.clone(),
            Session { peer_id: m1.sender_id, role: Role::Responder, session_id: sid, key },
        );
        Ok(sealed)
    }

    /// Verifies M2 against the pending handshake and derives the session key.
    pub fn finalize(&mut self, m2: &SealedMessage, now_ms: u64) -> Result<Session, HandshakeError> {
        let size = measure_size(&WireMessage::Sealed(m2.clone()))?;
        let result = self.finalize_inner(m2, now_ms);
        let verdict = match &result {
            Ok(_) => "established".to_owned(),
            Err(e) => format!("rejected:{}", e.code()),
        };
        self.log(Direction::In, MessageKind::M2, size, now_ms, verdict);
        result
    }

    fn finalize_inner(&mut self, sealed: &SealedMessage, now_ms: u64) -> Result<Session, HandshakeError> {
        let peer = sealed.sender_id.clone();
        let pending = self.pending.get(&peer).ok_or_else(|| HandshakeError::NoPendingSession(peer.clone()))?;
        let plain = self.open_sealed(sealed, MessageKind::M2)?;
        let m2 = MessageM2::decode(&plain)?;
        if m2.recipient_id != self.identity.id || m2.sender_id != peer {
            return Err(HandshakeError::Misaddressed);
        }
        let guards = self.config.guards;
        if guards.freshness && !fresh(now_ms, m2.timestamp_ms, self.config.freshness_window_ms) {
            return Err(HandshakeError::StaleTimestamp);
        }
        let q = &pending.challenge.public_value;
        if guards.challenge_binding && m2.binding != challenge_binding(&peer, q, &self.group) {
            return Err(HandshakeError::ChallengeBindingMismatch);
        }
        let key = identity::derive_session_key(&pending.challenge.secret, &m2.challenge_r, &self.group, now_ms)?;
        let sid = session_id(&self.identity.id, &peer, q, &self.group);
        self.pending.remove(&peer);
        let session = Session { peer_id: peer.clone(), role: Role::Initiator, session_id: sid, key };
        self.sessions.insert(peer, session.clone());
        Ok(session)
    }
}

/// Full honest exchange from `initiator` to `responder`, with each hop
/// taking `hop_ms`. Established only if both ends hold the same key.
pub fn run_handshake(
    initiator: &mut Participant,
    responder: &mut Participant,
    ledger: &LedgerNetwork,
    now_ms: u64,
    hop_ms: u64,
) -> HandshakeOutcome {
    let a_start = initiator.transcript.len();
    let b_start = responder.transcript.len();
    let status = (|| {
        let m1 = initiator.initiate(ledger, responder.id(), now_ms)?;
        let t1 = now_ms + ledger.query_latency_ms + hop_ms;
        let m2 = responder.respond(ledger, &m1, t1)?;
        let t2 = t1 + ledger.query_latency_ms + hop_ms;
        initiator.finalize(&m2, t2)
    })();
    let mut transcript_sizes: Vec<(MessageKind, usize)> = Vec::new();
    let mut entries: Vec<&TranscriptEntry> =
        initiator.transcript[a_start..].iter().chain(&responder.transcript[b_start..]).filter(|e| e.direction == Direction::Out || e.kind == MessageKind::LedgerResponse).collect();
    entries.sort_by_key(|e| e.timestamp_ms);
    transcript_sizes.extend(entries.iter().map(|e| (e.kind, e.size)));
    match status {
        Ok(session) => {
            let agreed = responder.session(initiator.id()).is_some_and(|s| s.key.key == session.key.key);
            if agreed {
                HandshakeOutcome { status: HandshakeStatus::Established, session_key: Some(session.key), transcript_sizes }
            } else {
                HandshakeOutcome {
                    status: HandshakeStatus::Rejected(HandshakeError::SessionViolation),
                    session_key: None,
                    transcript_sizes,
                }
            }
        }
        Err(e) => HandshakeOutcome { status: HandshakeStatus::Rejected(e), session_key: None, transcript_sizes },
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::identity::tests::cached_keypair;

    pub(crate) struct World {
        pub ledger: LedgerNetwork,
        pub a: Participant,
        pub b: Participant,
    }

    pub(crate) fn world() -> World {
        let mut ledger = LedgerNetwork::with_nodes(4, 7);
        let a = Participant::new("veh-a", cached_keypair(101), Location::new(0.0, 0.0), 0, 1).unwrap();
        let b = Participant::new("veh-b", cached_keypair(102), Location::new(50.0, 0.0), 0, 2).unwrap();
        a.register(&mut ledger).unwrap();
        b.register(&mut ledger).unwrap();
        World { ledger, a, b }
    }

    #[test]
    fn registration_commits_and_is_queryable() {
        let w = world();
        let r = w.ledger.query_any("veh-a").unwrap();
        assert_eq!(r.status, QueryStatus::Found);
        assert_eq!(r.record.as_ref(), Some(w.a.identity()));
    }

    #[test]
    fn stale_registration_still_commits() {
        let mut w = world();
        let late = Participant::new("veh-late", cached_keypair(103), Location::default(), 0, 3).unwrap();
        late.register(&mut w.ledger).unwrap();
        let r = w.ledger.query_any("veh-late").unwrap();
        assert_eq!(r.status, QueryStatus::Found);
    }

    #[test]
    fn rotated_key_wins_on_query() {
        let mut w = world();
        w.a.rotate_key(cached_keypair(104), 10).unwrap();
        w.a.register(&mut w.ledger).unwrap();
        let r = w.ledger.query_any("veh-a").unwrap();
        assert_eq!(r.record.unwrap().public_key, cached_keypair(104).public_key.as_bytes());
        let out = run_handshake(&mut w.b, &mut w.a, &w.ledger, 1000, 5);
        assert!(out.is_established(), "{:?}", out.status);
    }

    #[test]
    fn register_propagates_no_quorum() {
        let mut w = world();
        for n in ["rsu-0", "rsu-1", "rsu-2"] {
            w.ledger.crash(n).unwrap();
        }
        let c = Participant::new("veh-c", cached_keypair(103), Location::default(), 0, 3).unwrap();
        assert!(matches!(c.register(&mut w.ledger), Err(HandshakeError::Ledger(LedgerError::NoQuorum { .. }))));
    }

    #[test]
    fn honest_run_establishes_equal_keys() {
        let mut w = world();
        let out = run_handshake(&mut w.a, &mut w.b, &w.ledger, 1000, 5);
        assert!(out.is_established(), "{:?}", out.status);
        let ka = w.a.session("veh-b").unwrap();
        let kb = w.b.session("veh-a").unwrap();
        assert_eq!(ka.key.key, kb.key.key);
        assert_eq!(ka.session_id, kb.session_id);
        assert_eq!(out.session_key.unwrap().key, ka.key.key);

        let kinds: Vec<MessageKind> = out.transcript_sizes.iter().map(|(k, _)| *k).collect();
        assert_eq!(
            kinds,
            [
                MessageKind::LedgerQuery,
                MessageKind::LedgerResponse,
                MessageKind::M1,
                MessageKind::LedgerQuery,
                MessageKind::LedgerResponse,
                MessageKind::M2
            ]
        );
        for (kind, size) in &out.transcript_sizes {
            assert!(*size >= 90 && *size <= 1670, "{kind:?} {size}");
        }
        let m1 = out.transcript_sizes[2].1;
        assert!((m1 as f64 - 1670.0).abs() / 1670.0 <= 0.15, "{m1}");

        let mut ca = ka.channel();
        let mut cb = kb.channel();
        let frame = ca.secure_send(b"beacon").unwrap();
        assert_eq!(cb.secure_recv(&frame).unwrap(), b"beacon");
    }

    #[test]
    fn initiate_gates_on_peer_status() {
        let mut w = world();
        assert_eq!(w.a.initiate(&w.ledger, "veh-z", 0).unwrap_err(), HandshakeError::UnknownPeer);
        w.ledger.revoke_identity("veh-b", "rsu-0", "compromised").unwrap();
        w.ledger.commit_pending().unwrap();
        let before = w.a.transcript().iter().filter(|e| e.kind == MessageKind::M1).count();
        assert_eq!(w.a.initiate(&w.ledger, "veh-b", 0).unwrap_err(), HandshakeError::RevokedPeer);
        assert_eq!(w.a.transcript().iter().filter(|e| e.kind == MessageKind::M1).count(), before);
        assert!(!w.a.has_pending("veh-b"));
    }

    #[test]
    fn m1_opens_only_for_recipient() {
        let mut w = world();
        let m1 = w.a.initiate(&w.ledger, "veh-b", 0).unwrap();
        let mut c = Participant::new("veh-b", cached_keypair(103), Location::default(), 0, 3).unwrap();
        assert_eq!(c.respond(&w.ledger, &m1, 10).unwrap_err(), HandshakeError::TamperedEnvelope);
        let mut tampered = m1.clone();
        let n = tampered.envelope.len();
        tampered.envelope[n - 20] ^= 0x40;
        assert_eq!(w.b.respond(&w.ledger, &tampered, 10).unwrap_err(), HandshakeError::TamperedEnvelope);
        assert!(w.b.respond(&w.ledger, &m1, 10).is_ok());
    }

    #[test]
    fn replayed_m1_after_window_is_stale() {
        let mut w = world();
        let m1 = w.a.initiate(&w.ledger, "veh-b", 0).unwrap();
        assert_eq!(w.b.respond(&w.ledger, &m1, 5001).unwrap_err(), HandshakeError::StaleTimestamp);
        assert!(w.b.respond(&w.ledger, &m1, 5000).is_ok());
    }

    #[test]
    fn foreign_key_is_key_mismatch() {
        let mut w = world();
        // knows veh-a's id and veh-b's commitment, but holds another key
        let mut mallory = Participant::new("veh-a", cached_keypair(103), Location::default(), 0, 9).unwrap();
        let m1 = mallory.initiate(&w.ledger, "veh-b", 0).unwrap();
        assert_eq!(w.b.respond(&w.ledger, &m1, 10).unwrap_err(), HandshakeError::KeyMismatch);
        let line = w.b.transcript().iter().find(|e| e.kind == MessageKind::M1).unwrap().to_string();
        assert_eq!(line, format!("in,M1,{},10,rejected:KeyMismatch", 1643));
    }

    #[test]
    fn finalize_requires_pending_and_binding() {
        let mut w = world();
        let m1 = w.a.initiate(&w.ledger, "veh-b", 0).unwrap();
        let m2 = w.b.respond(&w.ledger, &m1, 10).unwrap();

        // an M2 bound to a different Q, built as the responder would
        let forged = MessageM2 {
            recipient_id: "veh-a".into(),
            sender_id: "veh-b".into(),
            timestamp_ms: 20,
            challenge_r: w.b.group().generator().clone(),
            binding: challenge_binding("veh-b", &BigUint::from(12345u32), w.b.group()),
        };
        let forged = seal_message(MessageKind::M2, "veh-b", &forged.encode().unwrap(), &w.a.keypair().public_key, 5).unwrap();
        assert_eq!(w.a.finalize(&forged, 20).unwrap_err(), HandshakeError::ChallengeBindingMismatch);
        assert_eq!(w.a.finalize(&m2, 20 + 5001).unwrap_err(), HandshakeError::StaleTimestamp);
        let s = w.a.finalize(&m2, 20).unwrap();
        assert_eq!(s.key.key, w.b.session("veh-a").unwrap().key.key);
        assert_eq!(w.a.finalize(&m2, 30).unwrap_err(), HandshakeError::NoPendingSession("veh-b".into()));
    }

    #[test]
    fn ledger_endpoint_falls_back_when_crashed() {
        let mut w = world();
        w.a = w.a.clone().with_ledger_endpoint("rsu-2");
        w.ledger.crash("rsu-2").unwrap();
        assert!(run_handshake(&mut w.a, &mut w.b, &w.ledger, 0, 1).is_established());
    }

    #[test]
    fn sessions_with_distinct_peers_interleave() {
        let mut w = world();
        let mut c = Participant::new("rsu-c", cached_keypair(103), Location::default(), 0, 3).unwrap();
        c.register(&mut w.ledger).unwrap();
        let to_b = w.a.initiate(&w.ledger, "veh-b", 0).unwrap();
        let to_c = w.a.initiate(&w.ledger, "rsu-c", 0).unwrap();
        let from_c = c.respond(&w.ledger, &to_c, 5).unwrap();
        let from_b = w.b.respond(&w.ledger, &to_b, 6).unwrap();
        let sb = w.a.finalize(&from_b, 10).unwrap();
        let sc = w.a.finalize(&from_c, 11).unwrap();
        assert_ne!(sb.key.key, sc.key.key);
        assert_eq!(sc.key.key, c.session("veh-a").unwrap().key.key);
    }

    #[test]
    fn guard_names_parse() {
        for g in Guard::ALL {
            assert_eq!(g.name().parse::<Guard>().unwrap(), g);
            assert!(!Guards::without(g).enabled(g));
        }
        assert!("nope".parse::<Guard>().is_err());
    }
}
