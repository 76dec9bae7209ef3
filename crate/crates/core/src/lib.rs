//! Zero-trust decentralized identity management for V2X participants.
//!
//! A replicated, majority-committed ledger kept by roadside verifier nodes
//! anchors each participant's identity record. Two participants authenticate
//! each other against that ledger, exchange DH contributions inside sealed
//! envelopes and derive a session key for subsequent traffic.

pub mod identity;
pub mod adversary;
pub mod handshake;
pub mod ledger;

pub use identity::{
    commitment_hash, derive_session_key, dh_public, generate_keypair, make_identity_record, open, seal,
    verify_record_consistency, DhChallenge, DhGroup, Digest, IdentityError, IdentityRecord, KeyPair, Location,
    PrivateKey, PublicKey, SessionKey,
};
