//! Authenticated data exchange under an established session key.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};

use super::HandshakeError;
use crate::identity::{Digest, SessionKey};

const COUNTER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Initiator,
    Responder,
}

impl Role {
    fn direction(self) -> u8 {
        match self {
            Role::Initiator => b'I',
            Role::Responder => b'R',
        }
    }

    pub fn peer(self) -> Role {
        match self {
            Role::Initiator => Role::Responder,
            Role::Responder => Role::Initiator,
        }
    }
}

/// One end of a secure session.
///
/// Frames are `counter u64 | ciphertext`. The nonce is the sender's
/// direction byte followed by the counter, and the session id is bound as
/// associated data, so a frame only opens under the key, session and
/// direction it was produced for. Received counters must strictly increase.
#[derive(Clone)]
pub struct SecureChannel {
    cipher: ChaCha20Poly1305,
    session_id: Digest,
    role: Role,
    next_send: u64,
    highest_received: Option<u64>,
}

impl std::fmt::Debug for SecureChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureChannel")
            .field("session_id", &self.session_id)
            .field("role", &self.role)
            .field("next_send", &self.next_send)
            .field("highest_received", &self.highest_received)
            .finish()
    }
}

fn nonce(direction: u8, counter: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[0] = direction;
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

impl SecureChannel {
    pub fn new(key: &SessionKey, session_id: Digest, role: Role) -> Self {
        SecureChannel {
            cipher: ChaCha20Poly1305::new(Key::from_slice(&key.key)),
            session_id,
            role,
            next_send: 0,
            highest_received: None,
        }
    }

    pub fn session_id(&self) -> Digest {
        self.session_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn secure_send(&mut self, payload: &[u8]) -> Result<Vec<u8>, HandshakeError> {
        let counter = self.next_send;
        self.next_send = counter.checked_add(1).ok_or(HandshakeError::SessionViolation)?;
        let n = nonce(self.role.direction(), counter);
        let ct = self
            .cipher
            .encrypt(Nonce::from_slice(&n), Payload { msg: payload, aad: self.session_id.as_bytes() })
            .map_err(|_| HandshakeError::SessionViolation)?;
        let mut frame = Vec::with_capacity(COUNTER_LEN + ct.len());
        frame.extend_from_slice(&counter.to_be_bytes());
        frame.extend_from_slice(&ct);
        Ok(frame)
    }

    pub fn secure_recv(&mut self, frame: &[u8]) -> Result<Vec<u8>, HandshakeError> {
        if frame.len() < COUNTER_LEN {
            return Err(HandshakeError::SessionViolation);
        }
        let (head, ct) = frame.split_at(COUNTER_LEN);
        let counter = u64::from_be_bytes(head.try_into().unwrap());
        if self.highest_received.is_some_and(|h| counter <= h) {
            return Err(HandshakeError::SessionViolation);
        }
        let n = nonce(self.role.peer().direction(), counter);
        let plain = self
            .cipher
            .decrypt(Nonce::from_slice(&n), Payload { msg: ct, aad: self.session_id.as_bytes() })
            .map_err(|_| HandshakeError::SessionViolation)?;
        self.highest_received = Some(counter);
        Ok(plain)
    }
}
