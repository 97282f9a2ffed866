//! Key request plus AES-256-GCM / one-time-pad protection of image payloads.
//!
//! AES uses the first 256 bits of the reserved key block, a 96-bit nonce and
//! a 128-bit tag; the mode byte and key id are bound as associated data.
//! OTP XORs the payload with the key material prefix.
//!
//! Serialized payload layout:
//!
//! ```text
//! aes256: 0x01 | key_id[16] | nonce[12] | len u64 BE | ciphertext | tag[16]
//! otp:    0x02 | key_id[16] | len u64 BE | ciphertext
//! ```

use crate::session::{KeyBlock, KeyId, KeyRegistry, KeyStoreError};
use crate::topology::NodeId;
use crate::trace::{Trace, TraceEvent};
use crate::wire::WireMessage;
use aes_gcm::aead::{AeadInOut, KeyInit, Nonce, Tag};
use aes_gcm::Aes256Gcm;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub const AES_KEY_BITS: u64 = 256;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CipherMode {
    #[default]
    Aes256,
    Otp,
}

impl CipherMode {
    pub fn to_byte(self) -> u8 {
        match self {
            CipherMode::Aes256 => 0x01,
            CipherMode::Otp => 0x02,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(CipherMode::Aes256),
            0x02 => Some(CipherMode::Otp),
            _ => None,
        }
    }

    /// Key bits to reserve for a plaintext of `len` bytes, rounded up to
    /// whole key blocks.
    pub fn key_bits_for(self, len: usize, block_bits: u32) -> u64 {
        let block = u64::from(block_bits.max(8));
        let raw = match self {
            CipherMode::Aes256 => AES_KEY_BITS,
            CipherMode::Otp => (len as u64 * 8).max(1),
        };
        raw.div_ceil(block) * block
    }
}

impl fmt::Display for CipherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CipherMode::Aes256 => "aes256",
            CipherMode::Otp => "otp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncryptedPayload {
    Aes256 {
        key_id: KeyId,
        nonce: [u8; NONCE_LEN],
        ciphertext: Vec<u8>,
        tag: [u8; TAG_LEN],
    },
    Otp {
        key_id: KeyId,
        ciphertext: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CryptoError {
    #[error("one-time pad needs {needed} key bits, key has {available}")]
    OtpKeyTooShort { needed: u64, available: u64 },
    #[error("AES-256 needs a 256-bit key, got {0} bits")]
    AesKeyTooShort(u64),
    #[error("integrity check failed")]
    IntegrityFailure,
    #[error("one-time pad key of {key_bits} bits cannot cover {ciphertext_bits} ciphertext bits")]
    OtpLengthMismatch { key_bits: u64, ciphertext_bits: u64 },
    #[error("payload is too large for the cipher")]
    PayloadTooLarge,
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Keys(#[from] KeyStoreError),
}

impl CryptoError {
    /// Short reason code carried in nack messages.
    pub fn code(&self) -> &'static str {
        match self {
            CryptoError::OtpKeyTooShort { .. } => "otp-key-too-short",
            CryptoError::AesKeyTooShort(_) => "aes-key-too-short",
            CryptoError::IntegrityFailure => "integrity-failure",
            CryptoError::OtpLengthMismatch { .. } => "otp-length-mismatch",
            CryptoError::PayloadTooLarge => "payload-too-large",
            CryptoError::Malformed(_) => "malformed-payload",
            CryptoError::Keys(KeyStoreError::UnknownKeyId(_)) => "unknown-key-id",
            CryptoError::Keys(KeyStoreError::AlreadyConsumed(_)) => "already-consumed",
            CryptoError::Keys(KeyStoreError::InsufficientMaterial { .. }) => {
                "insufficient-material"
            }
            CryptoError::Keys(_) => "key-store-error",
        }
    }
}

impl EncryptedPayload {
    pub fn mode(&self) -> CipherMode {
        match self {
            EncryptedPayload::Aes256 { .. } => CipherMode::Aes256,
            EncryptedPayload::Otp { .. } => CipherMode::Otp,
        }
    }

    pub fn key_id(&self) -> KeyId {
        match self {
            EncryptedPayload::Aes256 { key_id, .. } | EncryptedPayload::Otp { key_id, .. } => {
                *key_id
            }
        }
    }

    pub fn ciphertext(&self) -> &[u8] {
        match self {
            EncryptedPayload::Aes256 { ciphertext, .. }
            | EncryptedPayload::Otp { ciphertext, .. } => ciphertext,
        }
    }

    pub fn ciphertext_mut(&mut self) -> &mut Vec<u8> {
        match self {
            EncryptedPayload::Aes256 { ciphertext, .. }
            | EncryptedPayload::Otp { ciphertext, .. } => ciphertext,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let ct = self.ciphertext();
        let mut out = Vec::with_capacity(1 + 16 + NONCE_LEN + 8 + ct.len() + TAG_LEN);
        out.push(self.mode().to_byte());
        out.extend_from_slice(&self.key_id().0);
        match self {
            EncryptedPayload::Aes256 {
                nonce,
                ciphertext,
                tag,
                ..
            } => {
                out.extend_from_slice(nonce);
                out.extend_from_slice(&(ciphertext.len() as u64).to_be_bytes());
                out.extend_from_slice(ciphertext);
                out.extend_from_slice(tag);
            }
            EncryptedPayload::Otp { ciphertext, .. } => {
                out.extend_from_slice(&(ciphertext.len() as u64).to_be_bytes());
                out.extend_from_slice(ciphertext);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        let take = |buf: &mut &[u8], n: usize| -> Result<Vec<u8>, CryptoError> {
            if buf.len() < n {
                return Err(CryptoError::Malformed("truncated"));
            }
            let (h, t) = buf.split_at(n);
            *buf = t;
            Ok(h.to_vec())
        };
        let mut buf = bytes;
        let mode = CipherMode::from_byte(take(&mut buf, 1)?[0])
            .ok_or(CryptoError::Malformed("unknown mode"))?;
        let key_id = KeyId(take(&mut buf, 16)?.try_into().expect("16 bytes"));
        let payload = match mode {
            CipherMode::Aes256 => {
                let nonce = take(&mut buf, NONCE_LEN)?.try_into().expect("12 bytes");
                let len = u64::from_be_bytes(take(&mut buf, 8)?.try_into().expect("8 bytes"));
                let len = usize::try_from(len).map_err(|_| CryptoError::Malformed("length"))?;
                let ciphertext = take(&mut buf, len)?;
                let tag = take(&mut buf, TAG_LEN)?.try_into().expect("16 bytes");
                EncryptedPayload::Aes256 {
                    key_id,
                    nonce,
                    ciphertext,
                    tag,
                }
            }
            CipherMode::Otp => {
                let len = u64::from_be_bytes(take(&mut buf, 8)?.try_into().expect("8 bytes"));
                let len = usize::try_from(len).map_err(|_| CryptoError::Malformed("length"))?;
                EncryptedPayload::Otp {
                    key_id,
                    ciphertext: take(&mut buf, len)?,
                }
            }
        };
        if !buf.is_empty() {
            return Err(CryptoError::Malformed("trailing bytes"));
        }
        Ok(payload)
    }
}

pub trait NonceSource {
    fn next_nonce(&mut self) -> [u8; NONCE_LEN];
}

/// 32-bit prefix followed by a 64-bit counter; never repeats within one
/// source.
#[derive(Debug, Clone)]
pub struct CounterNonces {
    prefix: [u8; 4],
    counter: u64,
}

impl CounterNonces {
    pub fn new(prefix: u32) -> Self {
        Self {
            prefix: prefix.to_be_bytes(),
            counter: 0,
        }
    }
}

impl NonceSource for CounterNonces {
    fn next_nonce(&mut self) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        n[..4].copy_from_slice(&self.prefix);
        n[4..].copy_from_slice(&self.counter.to_be_bytes());
        self.counter += 1;
        n
    }
}

fn aad(mode: CipherMode, key_id: &KeyId) -> [u8; 17] {
    let mut a = [0u8; 17];
    a[0] = mode.to_byte();
    a[1..].copy_from_slice(&key_id.0);
    a
}

fn aes_cipher(key: &KeyBlock) -> Result<Aes256Gcm, CryptoError> {
    if key.length_bits() < AES_KEY_BITS {
        return Err(CryptoError::AesKeyTooShort(key.length_bits()));
    }
    Ok(Aes256Gcm::new_from_slice(&key.material[..32]).expect("32-byte AES key"))
}

/// Ask the Alice key server for `length_bits` of key shared with `bob`.
/// The exchange is recorded in `trace` as a key-request / key-response pair.
#[allow(clippy::too_many_arguments)]
pub fn request_key(
    keys: &mut KeyRegistry,
    alice: &NodeId,
    bob: &NodeId,
    length_bits: u64,
    job: u64,
    now: f64,
    trace: &mut Trace,
) -> Result<KeyBlock, KeyStoreError> {
    let server = format!("ks-{alice}");
    let request = WireMessage::KeyRequest {
        job,
        peer: bob.clone(),
        bits: length_bits,
    };
    record(trace, now, "co", &server, &request);
    match keys.reserve_key(alice, bob, length_bits) {
        Ok(block) => {
            let response = WireMessage::KeyResponse {
                job,
                key_id: block.key_id,
                bits: block.length_bits(),
            };
            record(trace, now, &server, "co", &response);
            Ok(block)
        }
        Err(e) => {
            let nack = WireMessage::Nack {
                job,
                reason: e.to_string(),
            };
            record(trace, now, &server, "co", &nack);
            Err(e)
        }
    }
}

pub(crate) fn record(trace: &mut Trace, now: f64, from: &str, to: &str, msg: &WireMessage) {
    trace.push(
        now,
        TraceEvent::Message {
            from: from.to_string(),
            to: to.to_string(),
            kind: msg.kind(),
            size: msg.frame_len(),
            job: msg.job(),
        },
    );
}

/// Encrypt under a reserved key. The block is taken by value, so a reserved
/// key can protect at most one payload.
pub fn encrypt(
    plaintext: &[u8],
    key: KeyBlock,
    mode: CipherMode,
    nonces: &mut dyn NonceSource,
) -> Result<EncryptedPayload, CryptoError> {
    match mode {
        CipherMode::Aes256 => {
            let cipher = aes_cipher(&key)?;
            let nonce = nonces.next_nonce();
            let mut buf = plaintext.to_vec();
            let tag = cipher
                .encrypt_inout_detached(
                    &Nonce::<Aes256Gcm>::from(nonce),
                    &aad(mode, &key.key_id),
                    buf.as_mut_slice().into(),
                )
                .map_err(|_| CryptoError::PayloadTooLarge)?;
            let mut tag_bytes = [0u8; TAG_LEN];
            tag_bytes.copy_from_slice(&tag);
            Ok(EncryptedPayload::Aes256 {
                key_id: key.key_id,
                nonce,
                ciphertext: buf,
                tag: tag_bytes,
            })
        }
        CipherMode::Otp => {
            let needed = plaintext.len() as u64 * 8;
            if key.length_bits() < needed {
                return Err(CryptoError::OtpKeyTooShort {
                    needed,
                    available: key.length_bits(),
                });
            }
            Ok(EncryptedPayload::Otp {
                key_id: key.key_id,
                ciphertext: xor_prefix(plaintext, &key.material),
            })
        }
    }
}

/// Invert [`encrypt`] given the matching key block.
pub fn decrypt_with_key(
    payload: &EncryptedPayload,
    key: &KeyBlock,
) -> Result<Vec<u8>, CryptoError> {
    match payload {
        EncryptedPayload::Aes256 {
            key_id,
            nonce,
            ciphertext,
            tag,
        } => {
            let cipher = aes_cipher(key)?;
            let mut buf = ciphertext.clone();
            cipher
                .decrypt_inout_detached(
                    &Nonce::<Aes256Gcm>::from(*nonce),
                    &aad(CipherMode::Aes256, key_id),
                    buf.as_mut_slice().into(),
                    &Tag::<Aes256Gcm>::from(*tag),
                )
                .map_err(|_| CryptoError::IntegrityFailure)?;
            Ok(buf)
        }
        EncryptedPayload::Otp { ciphertext, .. } => {
            let ciphertext_bits = ciphertext.len() as u64 * 8;
            if key.length_bits() < ciphertext_bits {
                return Err(CryptoError::OtpLengthMismatch {
                    key_bits: key.length_bits(),
                    ciphertext_bits,
                });
            }
            Ok(xor_prefix(ciphertext, &key.material))
        }
    }
}

/// Fetch the key named by the payload from `receiver`'s store (consuming
/// it) and decrypt.
pub fn decrypt(
    payload: &EncryptedPayload,
    keys: &mut KeyRegistry,
    receiver: &NodeId,
) -> Result<Vec<u8>, CryptoError> {
    let key = keys.fetch_key_by_id(receiver, &payload.key_id())?;
    decrypt_with_key(payload, &key)
}

fn xor_prefix(data: &[u8], pad: &[u8]) -> Vec<u8> {
    data.iter().zip(pad).map(|(d, k)| d ^ k).collect()
}
