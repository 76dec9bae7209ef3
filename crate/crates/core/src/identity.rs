//! Identity material for the ledger-anchored handshake.
//!
//! Everything here is a pure function of explicit inputs: key generation,
//! envelope sealing and DH secret sampling all take a seed or an RNG handed
//! in by the caller, never ambient randomness or wall-clock time.
//!
//! Layouts fixed by this module:
//!
//! * commitment = SHA-256(u32_be(len(id)) || id_utf8 || pkcs8_der(private_key))
//! * session key = SHA-256(`KDF_LABEL` || u32_be(len(s)) || be_minimal(s)) where
//!   `s` is the shared group element
//! * envelope = `0x01 || u16_be(len(wrapped)) || wrapped || nonce[12] || aead_ct`
//!   where `wrapped` is the ChaCha20-Poly1305 envelope key under RSA-OAEP(SHA-256)

use std::fmt;
use std::sync::OnceLock;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rsa::pkcs8::{DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Modulus size of participant key pairs.
pub const RSA_BITS: usize = 2048;
/// Length of every digest produced by this crate.
pub const DIGEST_LEN: usize = 32;
/// Longest identifier accepted, in UTF-8 bytes.
pub const MAX_ID_LEN: usize = 64;
/// Largest payload a single envelope may carry.
pub const MAX_ENVELOPE_PAYLOAD: usize = 64 * 1024;
/// Bytes an envelope adds on top of its payload with a 2048-bit recipient key.
pub const ENVELOPE_OVERHEAD: usize = 1 + 2 + RSA_BITS / 8 + NONCE_LEN + TAG_LEN;

const ENVELOPE_VERSION: u8 = 1;
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const KDF_LABEL: &[u8] = b"ztdim/session-key/v1";
/// Bit length of sampled DH secrets in groups larger than this.
const SHORT_EXPONENT_BITS: u64 = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("invalid identity: {0}")]
    InvalidIdentity(String),
    #[error("DH secret outside [1, group order)")]
    InvalidSecret,
    #[error("DH public value outside the valid range")]
    InvalidPublicValue,
    #[error("invalid DH group: {0}")]
    InvalidGroup(&'static str),
    #[error("malformed public key")]
    InvalidPublicKey,
    #[error("envelope payload of {0} bytes exceeds the 64 KiB limit")]
    PayloadTooLarge(usize),
    #[error("envelope failed to open")]
    TamperedEnvelope,
}

/// SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; DIGEST_LEN]>::try_from(bytes).ok().map(Digest)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Hashes length-prefixed parts: `u32_be(len) || bytes` for each part.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// RSA public key together with its SPKI DER encoding.
#[derive(Clone)]
pub struct PublicKey {
    der: Vec<u8>,
    key: RsaPublicKey,
}

impl PublicKey {
    pub fn from_der(der: &[u8]) -> Result<Self, IdentityError> {
        let key = RsaPublicKey::from_public_key_der(der).map_err(|_| IdentityError::InvalidPublicKey)?;
        Ok(PublicKey { der: der.to_vec(), key })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.der
    }
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.der == other.der
    }
}

impl Eq for PublicKey {}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = Digest::of(&self.der);
        write!(f, "PublicKey({}..)", &d.to_hex()[..16])
    }
}

/// RSA private key together with its PKCS#8 DER encoding.
#[derive(Clone)]
pub struct PrivateKey {
    der: Vec<u8>,
    key: RsaPrivateKey,
}

impl PrivateKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.der
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public_key: PublicKey,
    pub private_key: PrivateKey,
}

/// Deterministic 2048-bit RSA key pair for `rng_seed`.
pub fn generate_keypair(rng_seed: u64) -> KeyPair {
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let key = RsaPrivateKey::new(&mut rng, RSA_BITS).expect("RSA key generation");
    let public = RsaPublicKey::from(&key);
    let public_der = public.to_public_key_der().expect("SPKI encoding").as_bytes().to_vec();
    let private_der = key.to_pkcs8_der().expect("PKCS#8 encoding").as_bytes().to_vec();
    KeyPair {
        public_key: PublicKey { der: public_der, key: public },
        private_key: PrivateKey { der: private_der, key },
    }
}

/// Checks the identifier rules shared by records and wire fields.
pub fn validate_id(id: &str) -> Result<(), IdentityError> {
    if id.is_empty() {
        return Err(IdentityError::InvalidIdentity("empty id".into()));
    }
    if id.len() > MAX_ID_LEN {
        return Err(IdentityError::InvalidIdentity(format!("id longer than {MAX_ID_LEN} bytes")));
    }
    if id.contains('\0') {
        return Err(IdentityError::InvalidIdentity("id contains NUL".into()));
    }
    Ok(())
}

pub fn commitment_hash(id: &str, private_key: &[u8]) -> Result<Digest, IdentityError> {
    if id.is_empty() {
        return Err(IdentityError::InvalidIdentity("empty id".into()));
    }
    let mut h = Sha256::new();
    h.update((id.len() as u32).to_be_bytes());
    h.update(id.as_bytes());
    h.update(private_key);
    Ok(Digest(h.finalize().into()))
}

/// Planar position in metres on the simulated map.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Location { x, y }
    }
}

/// The tuple a participant publishes on the ledger.
///
/// Key and commitment are kept as raw octets so that the ledger can reject
/// malformed submissions instead of the type system hiding them.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRecord {
    pub id: String,
    pub public_key: Vec<u8>,
    pub timestamp_ms: u64,
    pub location: Location,
    pub commitment: Vec<u8>,
}

impl IdentityRecord {
    /// Shape checks a verifier can run without the private key.
    pub fn validate(&self) -> Result<(), IdentityError> {
        validate_id(&self.id)?;
        if self.commitment.len() != DIGEST_LEN {
            return Err(IdentityError::InvalidIdentity(format!(
                "commitment is {} bytes, expected {DIGEST_LEN}",
                self.commitment.len()
            )));
        }
        if !(self.location.x.is_finite() && self.location.y.is_finite()) {
            return Err(IdentityError::InvalidIdentity("non-finite location".into()));
        }
        PublicKey::from_der(&self.public_key)?;
        Ok(())
    }

    pub fn parsed_public_key(&self) -> Result<PublicKey, IdentityError> {
        PublicKey::from_der(&self.public_key)
    }
}

pub fn make_identity_record(
    id: &str,
    keypair: &KeyPair,
    timestamp_ms: u64,
    location: Location,
) -> Result<IdentityRecord, IdentityError> {
    validate_id(id)?;
    let commitment = commitment_hash(id, keypair.private_key.as_bytes())?;
    Ok(IdentityRecord {
        id: id.to_owned(),
        public_key: keypair.public_key.as_bytes().to_vec(),
        timestamp_ms,
        location,
        commitment: commitment.0.to_vec(),
    })
}

pub fn verify_record_consistency(record: &IdentityRecord, private_key: &[u8]) -> bool {
    match commitment_hash(&record.id, private_key) {
        Ok(d) => record.commitment == d.0,
        Err(_) => false,
    }
}

/// Multiplicative group used for the Q/R exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhGroup {
    modulus: BigUint,
    generator: BigUint,
    order: BigUint,
}

// RFC 3526 group 14.
const MODP_2048_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74",
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437",
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05",
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB",
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718",
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

impl DhGroup {
    pub fn new(modulus: BigUint, generator: BigUint, order: BigUint) -> Result<Self, IdentityError> {
        let one = BigUint::from(1u8);
        if modulus <= BigUint::from(3u8) {
            return Err(IdentityError::InvalidGroup("modulus too small"));
        }
        if generator <= one || generator >= modulus {
            return Err(IdentityError::InvalidGroup("generator out of range"));
        }
        if order <= one || generator.modpow(&order, &modulus) != one {
            return Err(IdentityError::InvalidGroup("generator order mismatch"));
        }
        Ok(DhGroup { modulus, generator, order })
    }

    /// The 2048-bit MODP safe-prime group (generator 2, order (p-1)/2).
    pub fn modp2048() -> &'static DhGroup {
        static GROUP: OnceLock<DhGroup> = OnceLock::new();
        GROUP.get_or_init(|| {
            let p = BigUint::parse_bytes(MODP_2048_HEX.as_bytes(), 16).expect("group constant");
            let q = (&p - 1u8) >> 1;
            DhGroup::new(p, BigUint::from(2u8), q).expect("group constant")
        })
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn generator(&self) -> &BigUint {
        &self.generator
    }

    pub fn order(&self) -> &BigUint {
        &self.order
    }

    /// Bytes of a group element on the wire (fixed width, big-endian).
    pub fn element_len(&self) -> usize {
        (self.modulus.bits() as usize).div_ceil(8)
    }

    pub fn encode_element(&self, value: &BigUint) -> Vec<u8> {
        let raw = value.to_bytes_be();
        let mut out = vec![0u8; self.element_len().saturating_sub(raw.len())];
        out.extend_from_slice(&raw);
        out
    }

    /// Samples a secret in `[1, order)`. Groups wider than 256 bits use
    /// 256-bit short exponents.
    pub fn sample_secret<R: RngCore>(&self, rng: &mut R) -> BigUint {
        let bits = self.order.bits().min(SHORT_EXPONENT_BITS);
        let len = bits.div_ceil(8) as usize;
        let excess = len as u64 * 8 - bits;
        let one = BigUint::from(1u8);
        loop {
            let mut buf = vec![0u8; len];
            rng.fill_bytes(&mut buf);
            buf[0] &= 0xFF >> excess;
            let candidate = BigUint::from_bytes_be(&buf);
            if candidate >= one && candidate < self.order {
                return candidate;
            }
        }
    }
}

/// One side's contribution to the exchange: Q for the initiator, R for the responder.
#[derive(Clone, PartialEq, Eq)]
pub struct DhChallenge {
    pub secret: BigUint,
    pub public_value: BigUint,
}

impl fmt::Debug for DhChallenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DhChallenge").field("public_value", &self.public_value).finish_non_exhaustive()
    }
}

impl DhChallenge {
    pub fn generate<R: RngCore>(group: &DhGroup, rng: &mut R) -> Self {
        let secret = group.sample_secret(rng);
        let public_value = dh_public(&secret, group).expect("sampled secret is in range");
        DhChallenge { secret, public_value }
    }
}

pub fn dh_public(secret: &BigUint, group: &DhGroup) -> Result<BigUint, IdentityError> {
    if *secret < BigUint::from(1u8) || secret >= &group.order {
        return Err(IdentityError::InvalidSecret);
    }
    Ok(group.generator.modpow(secret, &group.modulus))
}

/// Shared group element `peer_public ^ own_secret mod p`.
pub fn dh_shared(own_secret: &BigUint, peer_public: &BigUint, group: &DhGroup) -> Result<BigUint, IdentityError> {
    if *own_secret < BigUint::from(1u8) || own_secret >= &group.order {
        return Err(IdentityError::InvalidSecret);
    }
    if *peer_public < BigUint::from(2u8) || peer_public > &(&group.modulus - 1u8) {
        return Err(IdentityError::InvalidPublicValue);
    }
    Ok(peer_public.modpow(own_secret, &group.modulus))
}

/// Symmetric key shared by the two ends of a completed handshake.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey {
    pub key: [u8; 32],
    pub established_at: u64,
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKey").field("established_at", &self.established_at).finish_non_exhaustive()
    }
}

pub fn kdf(shared: &BigUint) -> [u8; 32] {
    let bytes = shared.to_bytes_be();
    let mut h = Sha256::new();
    h.update(KDF_LABEL);
    h.update((bytes.len() as u32).to_be_bytes());
    h.update(&bytes);
    h.finalize().into()
}

pub fn derive_session_key(
    own_secret: &BigUint,
    peer_public: &BigUint,
    group: &DhGroup,
    established_at: u64,
) -> Result<SessionKey, IdentityError> {
    let shared = dh_shared(own_secret, peer_public, group)?;
    Ok(SessionKey { key: kdf(&shared), established_at })
}

/// Hybrid public-key envelope: a fresh ChaCha20-Poly1305 key wrapped with
/// RSA-OAEP, payload under the AEAD.
pub fn seal(payload: &[u8], recipient: &PublicKey, rng_seed: u64) -> Result<Vec<u8>, IdentityError> {
    if payload.len() > MAX_ENVELOPE_PAYLOAD {
        return Err(IdentityError::PayloadTooLarge(payload.len()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut envelope_key = [0u8; 32];
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut envelope_key);
    rng.fill_bytes(&mut nonce);
    let wrapped = recipient
        .key
        .encrypt(&mut rng, Oaep::new::<Sha256>(), &envelope_key)
        .map_err(|_| IdentityError::InvalidPublicKey)?;
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&envelope_key));
    let body = cipher
        .encrypt(Nonce::from_slice(&nonce), payload)
        .expect("AEAD encryption of bounded payload");

    let mut out = Vec::with_capacity(3 + wrapped.len() + NONCE_LEN + body.len());
    out.push(ENVELOPE_VERSION);
    out.extend_from_slice(&(wrapped.len() as u16).to_be_bytes());
    out.extend_from_slice(&wrapped);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn open(envelope: &[u8], recipient: &PrivateKey) -> Result<Vec<u8>, IdentityError> {
    let tampered = || IdentityError::TamperedEnvelope;
    let (&version, rest) = envelope.split_first().ok_or_else(tampered)?;
    if version != ENVELOPE_VERSION || rest.len() < 2 {
        return Err(tampered());
    }
    let wrapped_len = u16::from_be_bytes([rest[0], rest[1]]) as usize;
    let rest = &rest[2..];
    if rest.len() < wrapped_len + NONCE_LEN + TAG_LEN {
        return Err(tampered());
    }
    let (wrapped, rest) = rest.split_at(wrapped_len);
    let (nonce, body) = rest.split_at(NONCE_LEN);
    let envelope_key = recipient.key.decrypt(Oaep::new::<Sha256>(), wrapped).map_err(|_| tampered())?;
    if envelope_key.len() != 32 {
        return Err(tampered());
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&envelope_key));
    cipher.decrypt(Nonce::from_slice(nonce), body).map_err(|_| tampered())
}
