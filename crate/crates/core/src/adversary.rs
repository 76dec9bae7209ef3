//! Scripted attacks against the handshake.
//!
//! The attacker controls the network: it can drop, delay, replay and inject
//! sealed messages, and it knows every participant's id and public key. It
//! holds no honest participant's private key and cannot write to the ledger.
//! An *insider* attacker is additionally a registered participant with its
//! own key pair and ordinary ledger read access; an *outsider* has neither.
//!
//! Every script names the ledger-level outcome that would count as a win.
//! Under the default guards no script may win; switching any one guard off
//! lets at least one script through.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigUint;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::handshake::{
    seal_message, HandshakeConfig, HandshakeError, MessageKind, MessageM1, Participant, SealedMessage,
};
use crate::identity::{generate_keypair, DhChallenge, Digest, KeyPair, Location, PublicKey};
use crate::ledger::LedgerNetwork;

pub const SUITE_INSTANCES: usize = 100;
const VERIFIER_NODES: usize = 4;
const HOP_MS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    Impersonate,
    ReplayM1,
    ReplayM2,
    ChallengeSwap,
    RevokedResurrection,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Impersonate,
        AttackKind::ReplayM1,
        AttackKind::ReplayM2,
        AttackKind::ChallengeSwap,
        AttackKind::RevokedResurrection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Impersonate => "impersonate",
            AttackKind::ReplayM1 => "replay-m1",
            AttackKind::ReplayM2 => "replay-m2",
            AttackKind::ChallengeSwap => "challenge-swap",
            AttackKind::RevokedResurrection => "revoked-resurrection",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One attack instance. Everything random about it derives from `seed`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackScript {
    pub kind: AttackKind,
    pub seed: u64,
    /// Impersonation by a registered insider using its own key, rather than
    /// an outsider presenting the victim's public key.
    pub insider: bool,
    /// How far past the freshness window a replay is delivered.
    pub replay_delay_ms: u64,
}

impl AttackScript {
    pub fn new(kind: AttackKind, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        AttackScript { kind, seed, insider: rng.gen(), replay_delay_ms: rng.gen_range(1..=60_000) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackVerdict {
    pub script: AttackScript,
    pub attacker_succeeded: bool,
    /// The handshake error that stopped the attack, if one did.
    pub terminating_error: Option<HandshakeError>,
}

/// Key material shared by all instances of a suite run.
#[derive(Debug, Clone)]
pub struct AttackWorld {
    pub alice: KeyPair,
    pub bob: KeyPair,
    pub mallory: KeyPair,
    /// Applied to the two honest participants.
    pub config: HandshakeConfig,
}

impl AttackWorld {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Self::from_keys(generate_keypair(rng.next_u64()), generate_keypair(rng.next_u64()), generate_keypair(rng.next_u64()))
    }

    pub fn from_keys(alice: KeyPair, bob: KeyPair, mallory: KeyPair) -> Self {
        AttackWorld { alice, bob, mallory, config: HandshakeConfig::default() }
    }

    pub fn with_config(mut self, config: HandshakeConfig) -> Self {
        self.config = config;
        self
    }
}

struct Stage {
    ledger: LedgerNetwork,
    alice: Participant,
    bob: Participant,
    mallory: Participant,
    rng: ChaCha20Rng,
    now: u64,
}

fn stage(script: &AttackScript, world: &AttackWorld) -> Result<Stage, HandshakeError> {
    let mut rng = ChaCha20Rng::seed_from_u64(script.seed ^ 0x5eed_a77a_c4e5);
    let tag = rng.gen_range(0..10_000u32);
    let ids = [format!("veh-{tag}-a"), format!("veh-{tag}-b"), format!("veh-{tag}-m")];
    let mut ledger = LedgerNetwork::with_nodes(VERIFIER_NODES, rng.next_u64());
    let now = rng.gen_range(1_000_000..2_000_000u64);
    let mk = |id: &str, kp: &KeyPair, seed: u64| Participant::new(id, kp.clone(), Location::default(), now - 1000, seed);
    let alice = mk(&ids[0], &world.alice, rng.next_u64())?.with_config(world.config.clone());
    let bob = mk(&ids[1], &world.bob, rng.next_u64())?.with_config(world.config.clone());
    let mallory = mk(&ids[2], &world.mallory, rng.next_u64())?;
    for p in [&alice, &bob, &mallory] {
        p.register(&mut ledger)?;
    }
    Ok(Stage { ledger, alice, bob, mallory, rng, now })
}

/// A forged M1 claiming `sender` with an arbitrary key and commitment.
fn forge_m1(
    stage: &mut Stage,
    sender_id: &str,
    sender_key: &PublicKey,
    echoed: Digest,
    challenge: &BigUint,
) -> Result<SealedMessage, HandshakeError> {
    let m1 = MessageM1 {
        recipient_id: stage.bob.id().to_owned(),
        sender_id: sender_id.to_owned(),
        sender_public_key: sender_key.as_bytes().to_vec(),
        timestamp_ms: stage.now,
        challenge_q: challenge.clone(),
        echoed_commitment: echoed,
    };
    let seed = stage.rng.next_u64();
    seal_message(MessageKind::M1, sender_id, &m1.encode()?, &stage.bob.keypair().public_key, seed)
}

/// Runs one scripted attack; `Ok(())` means the attacker reached its goal.
fn execute(script: &AttackScript, world: &AttackWorld) -> Result<(), HandshakeError> {
    let mut s = stage(script, world)?;
    let window = world.config.freshness_window_ms;
    let alice_id = s.alice.id().to_owned();
    let bob_id = s.bob.id().to_owned();
    match script.kind {
        AttackKind::Impersonate if script.insider => {
            // Mallory claims Alice's id but can only present its own key.
            let mut fake = Participant::new(&alice_id, world.mallory.clone(), Location::default(), s.now, s.rng.next_u64())?;
            let m1 = fake.initiate(&s.ledger, &bob_id, s.now)?;
            let m2 = s.bob.respond(&s.ledger, &m1, s.now + HOP_MS)?;
            // the win: a session key shared with Bob under Alice's name
            fake.finalize(&m2, s.now + 2 * HOP_MS)?;
            Ok(())
        }
        AttackKind::Impersonate => {
            // An outsider presents Alice's real public key. It cannot read
            // the ledger, so Bob's commitment has to be guessed.
            let mut guess = [0u8; 32];
            s.rng.fill_bytes(&mut guess);
            let q = DhChallenge::generate(s.bob.group(), &mut s.rng).public_value;
            let alice_public = world.alice.public_key.clone();
            let m1 = forge_m1(&mut s, &alice_id, &alice_public, Digest(guess), &q)?;
            s.bob.respond(&s.ledger, &m1, s.now + HOP_MS)?;
            Ok(())
        }
        AttackKind::ReplayM1 => {
            let m1 = s.alice.initiate(&s.ledger, &bob_id, s.now)?;
            let m2 = s.bob.respond(&s.ledger, &m1, s.now + HOP_MS)?;
            s.alice.finalize(&m2, s.now + 2 * HOP_MS)?;
            let late = s.now.saturating_add(window).saturating_add(script.replay_delay_ms);
            s.bob.respond(&s.ledger, &m1, late)?;
            Ok(())
        }
        AttackKind::ReplayM2 => {
            let m1 = s.alice.initiate(&s.ledger, &bob_id, s.now)?;
            let old_m2 = s.bob.respond(&s.ledger, &m1, s.now + HOP_MS)?;
            s.alice.finalize(&old_m2, s.now + 2 * HOP_MS)?;
            let later = s.now.saturating_add(window).saturating_add(script.replay_delay_ms);
            // Alice opens a new session; Bob's real answer is dropped and the
            // old M2 is delivered instead.
            s.alice.initiate(&s.ledger, &bob_id, later)?;
            s.alice.finalize(&old_m2, later.saturating_add(2 * HOP_MS))?;
            Ok(())
        }
        AttackKind::ChallengeSwap => {
            // Alice's M1 is intercepted and dropped. Mallory re-issues it to
            // Bob with its own Q', then relays Bob's M2 back to Alice.
            let _dropped = s.alice.initiate(&s.ledger, &bob_id, s.now)?;
            let bob_commitment = s.mallory.lookup(&s.ledger, &bob_id, s.now)?.record.ok_or(HandshakeError::UnknownPeer)?;
            let echoed = Digest::from_slice(&bob_commitment.commitment).ok_or(HandshakeError::UnknownPeer)?;
            let q_prime = DhChallenge::generate(s.bob.group(), &mut s.rng).public_value;
            let alice_public = world.alice.public_key.clone();
            let forged = forge_m1(&mut s, &alice_id, &alice_public, echoed, &q_prime)?;
            let m2 = s.bob.respond(&s.ledger, &forged, s.now + HOP_MS)?;
            s.alice.finalize(&m2, s.now + 2 * HOP_MS)?;
            Ok(())
        }
        AttackKind::RevokedResurrection => {
            // Alice's key leaked and her identity was revoked. The holder of
            // the leaked key tries to keep using it.
            let mut thief = s.alice.clone().with_config(HandshakeConfig::default());
            s.ledger.revoke_identity(&alice_id, "rsu-0", "key compromised")?;
            s.ledger.commit_pending()?;
            let m1 = thief.initiate(&s.ledger, &bob_id, s.now)?;
            s.bob.respond(&s.ledger, &m1, s.now + HOP_MS)?;
            Ok(())
        }
    }
}

pub fn run_attack(script: &AttackScript, world: &AttackWorld) -> AttackVerdict {
    match execute(script, world) {
        Ok(()) => AttackVerdict { script: script.clone(), attacker_succeeded: true, terminating_error: None },
        Err(e) => AttackVerdict { script: script.clone(), attacker_succeeded: false, terminating_error: Some(e) },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackRow {
    pub kind: AttackKind,
    pub instances: usize,
    pub successes: usize,
    pub errors: BTreeMap<&'static str, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
}

impl AttackReport {
    pub fn total_instances(&self) -> usize {
        self.rows.iter().map(|r| r.instances).sum()
    }

    pub fn total_successes(&self) -> usize {
        self.rows.iter().map(|r| r.successes).sum()
    }

    pub fn row(&self, kind: AttackKind) -> Option<&AttackRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }
}

impl fmt::Display for AttackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>9} {:>9}  terminating errors", "script", "instances", "successes")?;
        for r in &self.rows {
            let hist: Vec<String> = r.errors.iter().map(|(e, n)| format!("{e}={n}")).collect();
            let hist = if hist.is_empty() { "-".to_owned() } else { hist.join(" ") };
            writeln!(f, "{:<22} {:>9} {:>9}  {hist}", r.kind.name(), r.instances, r.successes)?;
        }
        write!(f, "{:<22} {:>9} {:>9}", "total", self.total_instances(), self.total_successes())
    }
}

/// `instances` randomized runs of each script kind.
pub fn attack_suite_with(seed: u64, instances: usize, world: &AttackWorld) -> AttackReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let rows = AttackKind::ALL
        .iter()
        .map(|&kind| {
            let mut row = AttackRow { kind, instances, successes: 0, errors: BTreeMap::new() };
            for _ in 0..instances {
                let verdict = run_attack(&AttackScript::new(kind, rng.next_u64()), world);
                if verdict.attacker_succeeded {
                    row.successes += 1;
                }
                if let Some(e) = verdict.terminating_error {
                    *row.errors.entry(e.code()).or_default() += 1;
                }
            }
            row
        })
        .collect();
    AttackReport { rows }
}

/// The default suite: every script kind, [`SUITE_INSTANCES`] times each.
pub fn attack_suite(seed: u64) -> AttackReport {
    let world = AttackWorld::new(seed);
    attack_suite_with(seed, SUITE_INSTANCES, &world)
}
