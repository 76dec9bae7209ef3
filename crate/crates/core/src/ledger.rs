//! Replicated identity ledger kept by roadside verifier nodes.
//!
//! Each round one leader proposes the transactions in its mempool; every live
//! node checks the proposal against its own tip and votes, and the block is
//! appended everywhere once `floor(n/2) + 1` votes are in. There is no view
//! change: a round whose leader is down simply fails and the next round
//! rotates to the following node. Crashed nodes neither vote nor receive
//! traffic and catch up by replaying committed blocks from a live peer when
//! they recover.
//!
//! Canonical text encoding (one block per line in [`LedgerNetwork::chain_dump`];
//! the block digest is SHA-256 over exactly this line):
//!
//! ```text
//! <height> <prev_digest_hex> <proposer> votes=[<node>,...] txs=[<tx>|...]
//! reg <id> <public_key_hex> <timestamp_ms> <x> <y> <commitment_hex> <submitter> <seq>
//! rev <id> <reason> <submitter> <seq>
//! ```
//!
//! Strings are written as `<byte_len>:<utf8>` so that any identifier round-trips
//! unambiguously; floats use Rust's shortest round-trip formatting.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::identity::{validate_id, Digest, IdentityRecord};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("transaction rejected: {0}")]
    RejectedTx(String),
    #[error("no quorum: {votes} of {quorum} required votes")]
    NoQuorum { votes: usize, quorum: usize },
    #[error("node {0} is unavailable")]
    NodeUnavailable(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("{0} is not a verifier node")]
    Unauthorized(String),
    #[error("chain verification failed at height {0}")]
    BrokenChain(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TxId(pub Digest);

impl std::fmt::Display for TxId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxPayload {
    RegisterIdentity(IdentityRecord),
    RevokeIdentity { id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerTx {
    pub payload: TxPayload,
    pub submitter: String,
    pub seq_hint: u64,
}

fn push_str(out: &mut String, s: &str) {
    let _ = write!(out, "{}:{}", s.len(), s);
}

impl LedgerTx {
    pub fn register(record: IdentityRecord, seq_hint: u64) -> Self {
        let submitter = record.id.clone();
        LedgerTx { payload: TxPayload::RegisterIdentity(record), submitter, seq_hint }
    }

    pub fn revoke(id: &str, reason: &str, authority: &str, seq_hint: u64) -> Self {
        LedgerTx {
            payload: TxPayload::RevokeIdentity { id: id.to_owned(), reason: reason.to_owned() },
            submitter: authority.to_owned(),
            seq_hint,
        }
    }

    pub fn canonical(&self) -> String {
        let mut out = String::new();
        match &self.payload {
            TxPayload::RegisterIdentity(r) => {
                out.push_str("reg ");
                push_str(&mut out, &r.id);
                let _ = write!(
                    out,
                    " {} {} {} {} {} ",
                    hex::encode(&r.public_key),
                    r.timestamp_ms,
                    r.location.x,
                    r.location.y,
                    hex::encode(&r.commitment)
                );
            }
            TxPayload::RevokeIdentity { id, reason } => {
                out.push_str("rev ");
                push_str(&mut out, id);
                out.push(' ');
                push_str(&mut out, reason);
                out.push(' ');
            }
        }
        push_str(&mut out, &self.submitter);
        let _ = write!(out, " {}", self.seq_hint);
        out
    }

    pub fn id(&self) -> TxId {
        TxId(Digest::of(self.canonical().as_bytes()))
    }

    pub fn subject(&self) -> &str {
        match &self.payload {
            TxPayload::RegisterIdentity(r) => &r.id,
            TxPayload::RevokeIdentity { id, .. } => id,
        }
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        let reject = |e: crate::identity::IdentityError| LedgerError::RejectedTx(e.to_string());
        match &self.payload {
            TxPayload::RegisterIdentity(r) => r.validate().map_err(reject)?,
            TxPayload::RevokeIdentity { id, .. } => validate_id(id).map_err(reject)?,
        }
        if self.submitter.is_empty() {
            return Err(LedgerError::RejectedTx("empty submitter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerBlock {
    pub height: u64,
    pub prev_digest: Digest,
    pub txs: Vec<LedgerTx>,
    pub proposer: String,
    pub commit_votes: BTreeSet<String>,
}

impl LedgerBlock {
    pub fn genesis(roster: &[String]) -> Self {
        LedgerBlock {
            height: 0,
            prev_digest: Digest::default(),
            txs: Vec::new(),
            proposer: "genesis".into(),
            commit_votes: roster.iter().cloned().collect(),
        }
    }

    pub fn canonical_line(&self) -> String {
        let mut out = format!("{} {} ", self.height, self.prev_digest.to_hex());
        push_str(&mut out, &self.proposer);
        out.push_str(" votes=[");
        for (i, v) in self.commit_votes.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            push_str(&mut out, v);
        }
        out.push_str("] txs=[");
        for (i, tx) in self.txs.iter().enumerate() {
            if i > 0 {
                out.push('|');
            }
            out.push_str(&tx.canonical());
        }
        out.push(']');
        out
    }

    pub fn digest(&self) -> Digest {
        Digest::of(self.canonical_line().as_bytes())
    }
}

/// Checks digest links from genesis to tip.
pub fn verify_chain(chain: &[LedgerBlock]) -> Result<(), LedgerError> {
    let mut prev = Digest::default();
    for (i, block) in chain.iter().enumerate() {
        if block.height != i as u64 || block.prev_digest != prev {
            return Err(LedgerError::BrokenChain(i as u64));
        }
        prev = block.digest();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryStatus {
    Found,
    NotFound,
    Revoked,
}

/// Answer to an identity lookup. `record` is the latest registration and is
/// also present for `Revoked` so callers can report what was revoked.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub status: QueryStatus,
    pub record: Option<IdentityRecord>,
}

#[derive(Debug, Clone)]
pub struct VerifierNode {
    pub node_id: String,
    pub chain: Vec<LedgerBlock>,
    pub mempool: Vec<(TxId, LedgerTx)>,
    pub alive: bool,
    committed: HashSet<TxId>,
    tip: Digest,
}

impl VerifierNode {
    fn new(node_id: String, genesis: LedgerBlock) -> Self {
        let tip = genesis.digest();
        VerifierNode { node_id, chain: vec![genesis], mempool: Vec::new(), alive: true, committed: HashSet::new(), tip }
    }

    fn height(&self) -> u64 {
        self.chain.len() as u64 - 1
    }

    fn accepts(&self, block: &LedgerBlock) -> bool {
        if block.height != self.height() + 1 || block.prev_digest != self.tip {
            return false;
        }
        let mut seen = HashSet::new();
        block.txs.iter().all(|tx| {
            let id = tx.id();
            tx.validate().is_ok() && !self.committed.contains(&id) && seen.insert(id)
        })
    }

    fn append(&mut self, block: LedgerBlock) {
        let included: HashSet<TxId> = block.txs.iter().map(LedgerTx::id).collect();
        self.mempool.retain(|(id, _)| !included.contains(id));
        self.committed.extend(included);
        self.tip = block.digest();
        self.chain.push(block);
    }

    pub fn query_identity(&self, id: &str) -> QueryResult {
        let mut record = None;
        let mut revoked = false;
        for tx in self.chain.iter().flat_map(|b| &b.txs) {
            match &tx.payload {
                TxPayload::RegisterIdentity(r) if r.id == id => {
                    record = Some(r.clone());
                    revoked = false;
                }
                TxPayload::RevokeIdentity { id: rid, .. } if rid == id && record.is_some() => revoked = true,
                _ => {}
            }
        }
        let status = match (&record, revoked) {
            (None, _) => QueryStatus::NotFound,
            (Some(_), true) => QueryStatus::Revoked,
            (Some(_), false) => QueryStatus::Found,
        };
        QueryResult { status, record }
    }
}

/// In-process network of verifier nodes with a static roster.
#[derive(Debug, Clone)]
pub struct LedgerNetwork {
    nodes: Vec<VerifierNode>,
    next_leader: usize,
    delivery: ChaCha20Rng,
    /// Modelled latency of one identity query, in milliseconds.
    pub query_latency_ms: u64,
}

impl LedgerNetwork {
    pub fn new<S: AsRef<str>>(node_ids: &[S], seed: u64) -> Self {
        let roster: Vec<String> = node_ids.iter().map(|s| s.as_ref().to_owned()).collect();
        assert!(!roster.is_empty(), "ledger needs at least one verifier node");
        let genesis = LedgerBlock::genesis(&roster);
        let nodes = roster.iter().map(|id| VerifierNode::new(id.clone(), genesis.clone())).collect();
        LedgerNetwork { nodes, next_leader: 0, delivery: ChaCha20Rng::seed_from_u64(seed), query_latency_ms: 0 }
    }

    /// `n` nodes named `rsu-0` .. `rsu-{n-1}`.
    pub fn with_nodes(n: usize, seed: u64) -> Self {
        let ids: Vec<String> = (0..n).map(|i| format!("rsu-{i}")).collect();
        Self::new(&ids, seed)
    }

    pub fn quorum(&self) -> usize {
        self.nodes.len() / 2 + 1
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.node_id.as_str())
    }

    pub fn is_verifier(&self, id: &str) -> bool {
        self.nodes.iter().any(|n| n.node_id == id)
    }

    fn index(&self, node: &str) -> Result<usize, LedgerError> {
        self.nodes.iter().position(|n| n.node_id == node).ok_or_else(|| LedgerError::UnknownNode(node.to_owned()))
    }

    pub fn node(&self, node: &str) -> Result<&VerifierNode, LedgerError> {
        Ok(&self.nodes[self.index(node)?])
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = &VerifierNode> {
        self.nodes.iter().filter(|n| n.alive)
    }

    /// Live nodes in the delivery order of this message.
    fn delivery_order(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.nodes[i].alive).collect();
        order.shuffle(&mut self.delivery);
        order
    }

    pub fn submit_tx(&mut self, tx: LedgerTx) -> Result<TxId, LedgerError> {
        tx.validate()?;
        let id = tx.id();
        for i in self.delivery_order() {
            let node = &mut self.nodes[i];
            if !node.committed.contains(&id) && !node.mempool.iter().any(|(m, _)| *m == id) {
                node.mempool.push((id, tx.clone()));
            }
        }
        Ok(id)
    }

    pub fn revoke_identity(&mut self, id: &str, authority: &str, reason: &str) -> Result<TxId, LedgerError> {
        if !self.is_verifier(authority) {
            return Err(LedgerError::Unauthorized(authority.to_owned()));
        }
        let seq = self.nodes.iter().map(|n| n.height()).max().unwrap_or(0);
        self.submit_tx(LedgerTx::revoke(id, reason, authority, seq))
    }

    /// One propose-and-vote round led by `leader`.
    pub fn run_consensus_round(&mut self, leader: &str) -> Result<LedgerBlock, LedgerError> {
        let li = self.index(leader)?;
        let quorum = self.quorum();
        if !self.nodes[li].alive {
            return Err(LedgerError::NoQuorum { votes: 0, quorum });
        }
        let l = &self.nodes[li];
        let mut proposal = LedgerBlock {
            height: l.height() + 1,
            prev_digest: l.tip,
            txs: l.mempool.iter().map(|(_, tx)| tx.clone()).collect(),
            proposer: l.node_id.clone(),
            commit_votes: BTreeSet::new(),
        };
        for i in self.delivery_order() {
            if self.nodes[i].accepts(&proposal) {
                proposal.commit_votes.insert(self.nodes[i].node_id.clone());
            }
        }
        if proposal.commit_votes.len() < quorum {
            return Err(LedgerError::NoQuorum { votes: proposal.commit_votes.len(), quorum });
        }
        for node in self.nodes.iter_mut().filter(|n| n.alive) {
            node.append(proposal.clone());
        }
        Ok(proposal)
    }

    /// Round with the next leader in round-robin order. The rotation advances
    /// whether or not the round commits.
    pub fn run_round(&mut self) -> Result<LedgerBlock, LedgerError> {
        let leader = self.nodes[self.next_leader].node_id.clone();
        self.next_leader = (self.next_leader + 1) % self.nodes.len();
        self.run_consensus_round(&leader)
    }

    /// Runs rounds until one commits, giving every node one turn as leader.
    pub fn commit_pending(&mut self) -> Result<LedgerBlock, LedgerError> {
        let mut last = LedgerError::NoQuorum { votes: 0, quorum: self.quorum() };
        for _ in 0..self.nodes.len() {
            match self.run_round() {
                Ok(b) => return Ok(b),
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    pub fn crash(&mut self, node: &str) -> Result<(), LedgerError> {
        let i = self.index(node)?;
        self.nodes[i].alive = false;
        Ok(())
    }

    /// Brings a node back and replays the blocks it missed from the longest
    /// live replica.
    pub fn recover(&mut self, node: &str) -> Result<(), LedgerError> {
        let i = self.index(node)?;
        let source = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(j, n)| *j != i && n.alive)
            .max_by_key(|(_, n)| n.chain.len())
            .map(|(j, _)| j);
        if let Some(j) = source {
            let from = self.nodes[i].chain.len();
            let missing: Vec<LedgerBlock> = self.nodes[j].chain[from.min(self.nodes[j].chain.len())..].to_vec();
            for block in missing {
                if !self.nodes[i].accepts(&block) {
                    return Err(LedgerError::BrokenChain(block.height));
                }
                self.nodes[i].append(block);
            }
        }
        self.nodes[i].alive = true;
        Ok(())
    }

    pub fn query_identity(&self, node: &str, id: &str) -> Result<QueryResult, LedgerError> {
        let n = self.node(node)?;
        if !n.alive {
            return Err(LedgerError::NodeUnavailable(node.to_owned()));
        }
        Ok(n.query_identity(id))
    }

    /// Query against the first live node in roster order.
    pub fn query_any(&self, id: &str) -> Result<QueryResult, LedgerError> {
        self.live_nodes()
            .next()
            .map(|n| n.query_identity(id))
            .ok_or_else(|| LedgerError::NodeUnavailable("all".into()))
    }

    pub fn chain_digest(&self, node: &str) -> Result<Digest, LedgerError> {
        Ok(self.node(node)?.tip)
    }

    pub fn chain_dump(&self, node: &str) -> Result<String, LedgerError> {
        let n = self.node(node)?;
        Ok(n.chain.iter().map(|b| b.canonical_line() + "\n").collect())
    }
}
