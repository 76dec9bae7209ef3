//! Canonical binary layout of every message a participant puts on the air.
//!
//! ```text
//! header   magic "ZD" | version u8 | type u8 | flags u16 | body_len u32      10 B
//! id slot  UTF-8 identifier, NUL padded                                      64 B
//!
//! 0x01 LedgerQuery     request_id u64 | timestamp u64 | target id slot       90 B total
//! 0x02 LedgerResponse  request_id u64 | timestamp u64 | status u8
//!                      [record: id slot | ts u64 | x f64 | y f64 | commitment 32 | key u16+bytes]
//! 0x03 M1, 0x04 M2     sender id slot | envelope u16+bytes
//! 0x05 Data            session_id 32 | frame u32+bytes
//! ```
//!
//! M1 and M2 envelopes carry an inner plaintext (`type u8 | fields | zero
//! padding`) padded to [`SEALED_BODY_LEN`], so both protocol messages have the
//! same length on the air whatever their group element sizes. All integers
//! are big-endian.

use num_bigint::BigUint;
use thiserror::Error;

use crate::identity::{Digest, IdentityRecord, Location, DIGEST_LEN, MAX_ID_LEN};
use crate::ledger::{QueryResult, QueryStatus};

pub const MAGIC: [u8; 2] = *b"ZD";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const ID_SLOT_LEN: usize = MAX_ID_LEN;
/// Padded length of the plaintext inside M1 and M2 envelopes.
pub const SEALED_BODY_LEN: usize = 1280;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodingError {
    #[error("field {0} exceeds its maximum width")]
    Oversize(&'static str),
    #[error("truncated input")]
    Truncated,
    #[error("bad magic or version")]
    BadHeader,
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("malformed field {0}")]
    Malformed(&'static str),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    LedgerQuery,
    LedgerResponse,
    M1,
    M2,
    Data,
}

impl MessageKind {
    fn code(self) -> u8 {
        match self {
            MessageKind::LedgerQuery => 0x01,
            MessageKind::LedgerResponse => 0x02,
            MessageKind::M1 => 0x03,
            MessageKind::M2 => 0x04,
            MessageKind::Data => 0x05,
        }
    }

    fn from_code(code: u8) -> Result<Self, EncodingError> {
        Ok(match code {
            0x01 => MessageKind::LedgerQuery,
            0x02 => MessageKind::LedgerResponse,
            0x03 => MessageKind::M1,
            0x04 => MessageKind::M2,
            0x05 => MessageKind::Data,
            other => return Err(EncodingError::UnknownType(other)),
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            MessageKind::LedgerQuery => "query",
            MessageKind::LedgerResponse => "response",
            MessageKind::M1 => "M1",
            MessageKind::M2 => "M2",
            MessageKind::Data => "data",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerQuery {
    pub request_id: u64,
    pub timestamp_ms: u64,
    pub target_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerResponse {
    pub request_id: u64,
    pub timestamp_ms: u64,
    pub result: QueryResult,
}

/// An M1 or M2 as seen on the air: the sender's claimed id in the clear and
/// a sealed envelope only the addressee can open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedMessage {
    pub kind: MessageKind,
    pub sender_id: String,
    pub envelope: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFrame {
    pub session_id: Digest,
    pub frame: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Query(LedgerQuery),
    Response(LedgerResponse),
    Sealed(SealedMessage),
    Data(DataFrame),
}

impl WireMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            WireMessage::Query(_) => MessageKind::LedgerQuery,
            WireMessage::Response(_) => MessageKind::LedgerResponse,
            WireMessage::Sealed(s) => s.kind,
            WireMessage::Data(_) => MessageKind::Data,
        }
    }
}

/// Plaintext of M1: what the initiator seals to the responder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageM1 {
    pub recipient_id: String,
    pub sender_id: String,
    pub sender_public_key: Vec<u8>,
    pub timestamp_ms: u64,
    pub challenge_q: BigUint,
    pub echoed_commitment: Digest,
}

/// Plaintext of M2: what the responder seals back to the initiator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageM2 {
    pub recipient_id: String,
    pub sender_id: String,
    pub timestamp_ms: u64,
    pub challenge_r: BigUint,
    pub binding: Digest,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_be_bytes());
    }
    fn raw(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn id(&mut self, id: &str) -> Result<(), EncodingError> {
        if id.len() > ID_SLOT_LEN {
            return Err(EncodingError::Oversize("id"));
        }
        if id.is_empty() || id.contains('\0') {
            return Err(EncodingError::Malformed("id"));
        }
        self.raw(id.as_bytes());
        self.0.resize(self.0.len() + ID_SLOT_LEN - id.len(), 0);
        Ok(())
    }
    fn bytes16(&mut self, field: &'static str, b: &[u8]) -> Result<(), EncodingError> {
        let len = u16::try_from(b.len()).map_err(|_| EncodingError::Oversize(field))?;
        self.u16(len);
        self.raw(b);
        Ok(())
    }
    fn biguint(&mut self, field: &'static str, v: &BigUint) -> Result<(), EncodingError> {
        self.bytes16(field, &v.to_bytes_be())
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncodingError> {
        if self.0.len() < n {
            return Err(EncodingError::Truncated);
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, EncodingError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, EncodingError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, EncodingError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, EncodingError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, EncodingError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn id(&mut self) -> Result<String, EncodingError> {
        let slot = self.take(ID_SLOT_LEN)?;
        let end = slot.iter().position(|&b| b == 0).unwrap_or(ID_SLOT_LEN);
        if end == 0 || slot[end..].iter().any(|&b| b != 0) {
            return Err(EncodingError::Malformed("id"));
        }
        String::from_utf8(slot[..end].to_vec()).map_err(|_| EncodingError::Malformed("id"))
    }
    fn digest(&mut self) -> Result<Digest, EncodingError> {
        Ok(Digest::from_slice(self.take(DIGEST_LEN)?).unwrap())
    }
    fn bytes16(&mut self) -> Result<Vec<u8>, EncodingError> {
        let n = self.u16()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn biguint(&mut self) -> Result<BigUint, EncodingError> {
        let raw = self.bytes16()?;
        // minimal encoding only, so that decode is the inverse of encode
        if raw.is_empty() || (raw.len() > 1 && raw[0] == 0) {
            return Err(EncodingError::Malformed("group element"));
        }
        Ok(BigUint::from_bytes_be(&raw))
    }
    fn finish(self) -> Result<(), EncodingError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(EncodingError::Trailing(self.0.len()))
        }
    }
}

const STATUS_FOUND: u8 = 0;
const STATUS_NOT_FOUND: u8 = 1;
const STATUS_REVOKED: u8 = 2;

fn encode_body(msg: &WireMessage, w: &mut Writer) -> Result<(), EncodingError> {
    match msg {
        WireMessage::Query(q) => {
            w.u64(q.request_id);
            w.u64(q.timestamp_ms);
            w.id(&q.target_id)?;
        }
        WireMessage::Response(r) => {
            w.u64(r.request_id);
            w.u64(r.timestamp_ms);
            let status = match r.result.status {
                QueryStatus::Found => STATUS_FOUND,
                QueryStatus::NotFound => STATUS_NOT_FOUND,
                QueryStatus::Revoked => STATUS_REVOKED,
            };
            w.u8(status);
            match (&r.result.record, r.result.status) {
                (Some(rec), QueryStatus::Found | QueryStatus::Revoked) => {
                    if rec.commitment.len() != DIGEST_LEN {
                        return Err(EncodingError::Malformed("commitment"));
                    }
                    w.id(&rec.id)?;
                    w.u64(rec.timestamp_ms);
                    w.f64(rec.location.x);
                    w.f64(rec.location.y);
                    w.raw(&rec.commitment);
                    w.bytes16("public key", &rec.public_key)?;
                }
                (None, QueryStatus::NotFound) => {}
                _ => return Err(EncodingError::Malformed("query result")),
            }
        }
        WireMessage::Sealed(s) => {
            if !matches!(s.kind, MessageKind::M1 | MessageKind::M2) {
                return Err(EncodingError::Malformed("sealed kind"));
            }
            w.id(&s.sender_id)?;
            w.bytes16("envelope", &s.envelope)?;
        }
        WireMessage::Data(d) => {
            w.raw(d.session_id.as_bytes());
            let len = u32::try_from(d.frame.len()).map_err(|_| EncodingError::Oversize("frame"))?;
            w.raw(&len.to_be_bytes());
            w.raw(&d.frame);
        }
    }
    Ok(())
}

pub fn encode_wire(msg: &WireMessage) -> Result<Vec<u8>, EncodingError> {
    let mut body = Writer(Vec::new());
    encode_body(msg, &mut body)?;
    let body_len = u32::try_from(body.0.len()).map_err(|_| EncodingError::Oversize("body"))?;
    let mut w = Writer(Vec::with_capacity(HEADER_LEN + body.0.len()));
    w.raw(&MAGIC);
    w.u8(VERSION);
    w.u8(msg.kind().code());
    w.u16(0);
    w.raw(&body_len.to_be_bytes());
    w.raw(&body.0);
    Ok(w.0)
}

pub fn measure_size(msg: &WireMessage) -> Result<usize, EncodingError> {
    encode_wire(msg).map(|b| b.len())
}

/// Decodes one message from the front of `bytes`; returns it with the
/// number of bytes consumed.
pub fn decode_wire(bytes: &[u8]) -> Result<(WireMessage, usize), EncodingError> {
    let mut r = Reader(bytes);
    if r.take(2)? != MAGIC || r.u8()? != VERSION {
        return Err(EncodingError::BadHeader);
    }
    let kind = MessageKind::from_code(r.u8()?)?;
    if r.u16()? != 0 {
        return Err(EncodingError::Malformed("flags"));
    }
    let body_len = r.u32()? as usize;
    let mut b = Reader(r.take(body_len)?);
    let msg = match kind {
        MessageKind::LedgerQuery => {
            WireMessage::Query(LedgerQuery { request_id: b.u64()?, timestamp_ms: b.u64()?, target_id: b.id()? })
        }
        MessageKind::LedgerResponse => {
            let request_id = b.u64()?;
            let timestamp_ms = b.u64()?;
            let status = match b.u8()? {
                STATUS_FOUND => QueryStatus::Found,
                STATUS_NOT_FOUND => QueryStatus::NotFound,
                STATUS_REVOKED => QueryStatus::Revoked,
                _ => return Err(EncodingError::Malformed("status")),
            };
            let record = if status == QueryStatus::NotFound {
                None
            } else {
                let id = b.id()?;
                let ts = b.u64()?;
                let x = b.f64()?;
                let y = b.f64()?;
                let commitment = b.take(DIGEST_LEN)?.to_vec();
                let public_key = b.bytes16()?;
                Some(IdentityRecord { id, public_key, timestamp_ms: ts, location: Location::new(x, y), commitment })
            };
            WireMessage::Response(LedgerResponse { request_id, timestamp_ms, result: QueryResult { status, record } })
        }
        MessageKind::M1 | MessageKind::M2 => {
            WireMessage::Sealed(SealedMessage { kind, sender_id: b.id()?, envelope: b.bytes16()? })
        }
        MessageKind::Data => {
            let session_id = b.digest()?;
            let n = b.u32()? as usize;
            WireMessage::Data(DataFrame { session_id, frame: b.take(n)?.to_vec() })
        }
    };
    b.finish()?;
    Ok((msg, HEADER_LEN + body_len))
}

const INNER_M1: u8 = 0x31;
const INNER_M2: u8 = 0x32;

fn pad(mut w: Writer) -> Result<Vec<u8>, EncodingError> {
    if w.0.len() > SEALED_BODY_LEN {
        return Err(EncodingError::Oversize("sealed body"));
    }
    w.0.resize(SEALED_BODY_LEN, 0);
    Ok(w.0)
}

fn unpad(r: Reader<'_>) -> Result<(), EncodingError> {
    if r.0.iter().any(|&b| b != 0) {
        return Err(EncodingError::Malformed("padding"));
    }
    Ok(())
}

impl MessageM1 {
    pub fn encode(&self) -> Result<Vec<u8>, EncodingError> {
        let mut w = Writer(Vec::with_capacity(SEALED_BODY_LEN));
        w.u8(INNER_M1);
        w.id(&self.recipient_id)?;
        w.id(&self.sender_id)?;
        w.u64(self.timestamp_ms);
        w.bytes16("public key", &self.sender_public_key)?;
        w.biguint("challenge", &self.challenge_q)?;
        w.raw(self.echoed_commitment.as_bytes());
        pad(w)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EncodingError> {
        if bytes.len() != SEALED_BODY_LEN {
            return Err(EncodingError::Malformed("sealed body length"));
        }
        let mut r = Reader(bytes);
        if r.u8()? != INNER_M1 {
            return Err(EncodingError::Malformed("inner type"));
        }
        let m = MessageM1 {
            recipient_id: r.id()?,
            sender_id: r.id()?,
            timestamp_ms: r.u64()?,
            sender_public_key: r.bytes16()?,
            challenge_q: r.biguint()?,
            echoed_commitment: r.digest()?,
        };
        unpad(r)?;
        Ok(m)
    }
}

impl MessageM2 {
    pub fn encode(&self) -> Result<Vec<u8>, EncodingError> {
        let mut w = Writer(Vec::with_capacity(SEALED_BODY_LEN));
        w.u8(INNER_M2);
        w.id(&self.recipient_id)?;
        w.id(&self.sender_id)?;
        w.u64(self.timestamp_ms);
        w.biguint("challenge", &self.challenge_r)?;
        w.raw(self.binding.as_bytes());
        pad(w)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EncodingError> {
        if bytes.len() != SEALED_BODY_LEN {
            return Err(EncodingError::Malformed("sealed body length"));
        }
        let mut r = Reader(bytes);
        if r.u8()? != INNER_M2 {
            return Err(EncodingError::Malformed("inner type"));
        }
        let m = MessageM2 {
            recipient_id: r.id()?,
            sender_id: r.id()?,
            timestamp_ms: r.u64()?,
            challenge_r: r.biguint()?,
            binding: r.digest()?,
        };
        unpad(r)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::ENVELOPE_OVERHEAD;
    use proptest::prelude::*;

    #[test]
    fn query_is_the_ninety_byte_minimum() {
        let q = WireMessage::Query(LedgerQuery { request_id: 7, timestamp_ms: 1, target_id: "veh2".into() });
        // 10 header + 8 request id + 8 timestamp + 64 id slot
        assert_eq!(HEADER_LEN + 8 + 8 + ID_SLOT_LEN, 90);
        assert_eq!(measure_size(&q).unwrap(), 90);
        let long = WireMessage::Query(LedgerQuery { request_id: 7, timestamp_ms: 1, target_id: "x".repeat(64) });
        assert_eq!(measure_size(&long).unwrap(), 90);
    }

    #[test]
    fn sealed_message_size_from_layout() {
        // header + sender slot + u16 envelope length + envelope(padded body)
        let expected = HEADER_LEN + ID_SLOT_LEN + 2 + ENVELOPE_OVERHEAD + SEALED_BODY_LEN;
        assert_eq!(expected, 1643);
        let s = WireMessage::Sealed(SealedMessage {
            kind: MessageKind::M1,
            sender_id: "veh1".into(),
            envelope: vec![0; ENVELOPE_OVERHEAD + SEALED_BODY_LEN],
        });
        assert_eq!(measure_size(&s).unwrap(), expected);
        assert!((expected as f64 - 1670.0).abs() / 1670.0 <= 0.15);
    }

    #[test]
    fn oversize_fields_rejected() {
        let q = WireMessage::Query(LedgerQuery { request_id: 0, timestamp_ms: 0, target_id: "x".repeat(65) });
        assert_eq!(encode_wire(&q), Err(EncodingError::Oversize("id")));
        let s = WireMessage::Sealed(SealedMessage { kind: MessageKind::M2, sender_id: "a".into(), envelope: vec![0; 70_000] });
        assert_eq!(encode_wire(&s), Err(EncodingError::Oversize("envelope")));
        let m1 = MessageM1 {
            recipient_id: "b".into(),
            sender_id: "a".into(),
            sender_public_key: vec![1; 1200],
            timestamp_ms: 0,
            challenge_q: BigUint::from(5u8),
            echoed_commitment: Digest::default(),
        };
        assert_eq!(m1.encode(), Err(EncodingError::Oversize("sealed body")));
    }

    #[test]
    fn decoder_rejects_garbage() {
        let q = encode_wire(&WireMessage::Query(LedgerQuery { request_id: 1, timestamp_ms: 2, target_id: "v".into() })).unwrap();
        assert_eq!(decode_wire(&q[..50]), Err(EncodingError::Truncated));
        let mut bad = q.clone();
        bad[0] = b'X';
        assert_eq!(decode_wire(&bad), Err(EncodingError::BadHeader));
        let mut bad = q.clone();
        bad[3] = 0x77;
        assert_eq!(decode_wire(&bad), Err(EncodingError::UnknownType(0x77)));
        let mut bad = q;
        bad[HEADER_LEN + 16] = 0;
        assert_eq!(decode_wire(&bad), Err(EncodingError::Malformed("id")));
    }

    fn id_strategy() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9_.:-]{1,64}"
    }

    fn record_strategy() -> impl Strategy<Value = IdentityRecord> {
        (id_strategy(), proptest::collection::vec(any::<u8>(), 0..400), any::<u64>(), -1e4f64..1e4, -1e4f64..1e4, any::<[u8; 32]>())
            .prop_map(|(id, public_key, ts, x, y, c)| IdentityRecord {
                id,
                public_key,
                timestamp_ms: ts,
                location: Location::new(x, y),
                commitment: c.to_vec(),
            })
    }

    fn wire_strategy() -> impl Strategy<Value = WireMessage> {
        prop_oneof![
            (any::<u64>(), any::<u64>(), id_strategy())
                .prop_map(|(r, t, id)| WireMessage::Query(LedgerQuery { request_id: r, timestamp_ms: t, target_id: id })),
            (any::<u64>(), any::<u64>(), proptest::option::of(record_strategy()), any::<bool>()).prop_map(|(r, t, rec, revoked)| {
                let status = match (&rec, revoked) {
                    (None, _) => QueryStatus::NotFound,
                    (Some(_), true) => QueryStatus::Revoked,
                    (Some(_), false) => QueryStatus::Found,
                };
                WireMessage::Response(LedgerResponse { request_id: r, timestamp_ms: t, result: QueryResult { status, record: rec } })
            }),
            (any::<bool>(), id_strategy(), proptest::collection::vec(any::<u8>(), 0..2000)).prop_map(|(m1, id, env)| {
                WireMessage::Sealed(SealedMessage {
                    kind: if m1 { MessageKind::M1 } else { MessageKind::M2 },
                    sender_id: id,
                    envelope: env,
                })
            }),
            (any::<[u8; 32]>(), proptest::collection::vec(any::<u8>(), 0..300))
                .prop_map(|(s, f)| WireMessage::Data(DataFrame { session_id: Digest(s), frame: f })),
        ]
    }

    proptest! {
        #[test]
        fn wire_round_trip_and_self_delimiting(a in wire_strategy(), b in wire_strategy()) {
            let ea = encode_wire(&a).unwrap();
            let eb = encode_wire(&b).unwrap();
            prop_assert_eq!(ea.len(), measure_size(&a).unwrap());
            let mut stream = ea.clone();
            stream.extend_from_slice(&eb);
            let (da, used) = decode_wire(&stream).unwrap();
            prop_assert_eq!(used, ea.len());
            prop_assert_eq!(&da, &a);
            let (db, _) = decode_wire(&stream[used..]).unwrap();
            prop_assert_eq!(db, b);
        }

        #[test]
        fn inner_messages_round_trip(
            ids in (id_strategy(), id_strategy()),
            key in proptest::collection::vec(any::<u8>(), 0..400),
            ts in any::<u64>(),
            q in proptest::collection::vec(any::<u8>(), 1..257),
            c in any::<[u8; 32]>(),
        ) {
            let challenge = BigUint::from_bytes_be(&q);
            let m1 = MessageM1 {
                recipient_id: ids.0.clone(),
                sender_id: ids.1.clone(),
                sender_public_key: key,
                timestamp_ms: ts,
                challenge_q: challenge.clone(),
                echoed_commitment: Digest(c),
            };
            let enc = m1.encode().unwrap();
            prop_assert_eq!(enc.len(), SEALED_BODY_LEN);
            prop_assert_eq!(MessageM1::decode(&enc).unwrap(), m1);
            let m2 = MessageM2 { recipient_id: ids.1, sender_id: ids.0, timestamp_ms: ts, challenge_r: challenge, binding: Digest(c) };
            prop_assert_eq!(MessageM2::decode(&m2.encode().unwrap()).unwrap(), m2);
        }
    }
}
