//! Framed binary protocol between the orchestrator, the key server and the
//! slave DC stacks.
//!
//! Frame layout: `u32` big-endian length, then a one-byte kind, then the
//! body. The length counts the kind byte plus the body. Integers inside
//! bodies are big-endian; strings are a `u16` byte length followed by UTF-8.

use crate::crypto::CipherMode;
use crate::network::ControlKind;
use crate::session::KeyId;
use crate::topology::{NodeId, PortId};
use std::fmt;
use std::io::{self, Read, Write};
use thiserror::Error;

/// Largest body any frame may carry.
pub const MAX_BODY: usize = 64 * 1024;
/// Image bytes per chunk once the job id and sequence number are counted.
pub const MAX_CHUNK_DATA: usize = MAX_BODY - 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    TransferInit = 1,
    FlowMod = 2,
    KeyRequest = 3,
    KeyResponse = 4,
    ImageChunk = 5,
    KeyIdNotify = 6,
    DeployReport = 7,
    Ack200 = 8,
    Nack = 9,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        use MessageKind::*;
        Some(match b {
            1 => TransferInit,
            2 => FlowMod,
            3 => KeyRequest,
            4 => KeyResponse,
            5 => ImageChunk,
            6 => KeyIdNotify,
            7 => DeployReport,
            8 => Ack200,
            9 => Nack,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::TransferInit => "transfer-init",
            MessageKind::FlowMod => "flow-mod",
            MessageKind::KeyRequest => "key-request",
            MessageKind::KeyResponse => "key-response",
            MessageKind::ImageChunk => "image-chunk",
            MessageKind::KeyIdNotify => "key-id-notify",
            MessageKind::DeployReport => "deploy-report",
            MessageKind::Ack200 => "ack-200",
            MessageKind::Nack => "nack",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    TransferInit {
        job: u64,
        image_id: String,
        name: String,
        size: u64,
        checksum: [u8; 32],
        mode: CipherMode,
    },
    FlowMod {
        job: u64,
        correlation: u64,
        kind: ControlKind,
        ingress: PortId,
        egress: PortId,
    },
    KeyRequest {
        job: u64,
        peer: NodeId,
        bits: u64,
    },
    KeyResponse {
        job: u64,
        key_id: KeyId,
        bits: u64,
    },
    ImageChunk {
        job: u64,
        seq: u32,
        data: Vec<u8>,
    },
    KeyIdNotify {
        job: u64,
        image_id: String,
        key_id: KeyId,
    },
    DeployReport {
        job: u64,
        image_id: String,
        decrypt_s: f64,
    },
    Ack200 {
        job: u64,
    },
    Nack {
        job: u64,
        reason: String,
    },
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("frame body of {0} bytes exceeds the 64 KiB limit")]
    TooLarge(usize),
    #[error("{0} unexpected trailing bytes in frame")]
    TrailingBytes(usize),
    #[error("invalid field: {0}")]
    BadField(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            WireMessage::TransferInit { .. } => MessageKind::TransferInit,
            WireMessage::FlowMod { .. } => MessageKind::FlowMod,
            WireMessage::KeyRequest { .. } => MessageKind::KeyRequest,
            WireMessage::KeyResponse { .. } => MessageKind::KeyResponse,
            WireMessage::ImageChunk { .. } => MessageKind::ImageChunk,
            WireMessage::KeyIdNotify { .. } => MessageKind::KeyIdNotify,
            WireMessage::DeployReport { .. } => MessageKind::DeployReport,
            WireMessage::Ack200 { .. } => MessageKind::Ack200,
            WireMessage::Nack { .. } => MessageKind::Nack,
        }
    }

    pub fn job(&self) -> u64 {
        match self {
            WireMessage::TransferInit { job, .. }
            | WireMessage::FlowMod { job, .. }
            | WireMessage::KeyRequest { job, .. }
            | WireMessage::KeyResponse { job, .. }
            | WireMessage::ImageChunk { job, .. }
            | WireMessage::KeyIdNotify { job, .. }
            | WireMessage::DeployReport { job, .. }
            | WireMessage::Ack200 { job }
            | WireMessage::Nack { job, .. } => *job,
        }
    }

    fn body(&self) -> Vec<u8> {
        let mut b = Vec::new();
        match self {
            WireMessage::TransferInit {
                job,
                image_id,
                name,
                size,
                checksum,
                mode,
            } => {
                put_u64(&mut b, *job);
                put_str(&mut b, image_id);
                put_str(&mut b, name);
                put_u64(&mut b, *size);
                b.extend_from_slice(checksum);
                b.push(mode.to_byte());
            }
            WireMessage::FlowMod {
                job,
                correlation,
                kind,
                ingress,
                egress,
            } => {
                put_u64(&mut b, *job);
                put_u64(&mut b, *correlation);
                b.push(match kind {
                    ControlKind::AddCrossConnect => 1,
                    ControlKind::RemoveCrossConnect => 2,
                });
                put_str(&mut b, ingress.as_str());
                put_str(&mut b, egress.as_str());
            }
            WireMessage::KeyRequest { job, peer, bits } => {
                put_u64(&mut b, *job);
                put_str(&mut b, peer.as_str());
                put_u64(&mut b, *bits);
            }
            WireMessage::KeyResponse { job, key_id, bits } => {
                put_u64(&mut b, *job);
                b.extend_from_slice(&key_id.0);
                put_u64(&mut b, *bits);
            }
            WireMessage::ImageChunk { job, seq, data } => {
                put_u64(&mut b, *job);
                b.extend_from_slice(&seq.to_be_bytes());
                b.extend_from_slice(data);
            }
            WireMessage::KeyIdNotify {
                job,
                image_id,
                key_id,
            } => {
                put_u64(&mut b, *job);
                put_str(&mut b, image_id);
                b.extend_from_slice(&key_id.0);
            }
            WireMessage::DeployReport {
                job,
                image_id,
                decrypt_s,
            } => {
                put_u64(&mut b, *job);
                put_str(&mut b, image_id);
                put_u64(&mut b, decrypt_s.to_bits());
            }
            WireMessage::Ack200 { job } => put_u64(&mut b, *job),
            WireMessage::Nack { job, reason } => {
                put_u64(&mut b, *job);
                put_str(&mut b, reason);
            }
        }
        b
    }

    /// Whole frame, length prefix included.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let body = self.body();
        if body.len() > MAX_BODY {
            return Err(WireError::TooLarge(body.len()));
        }
        let mut frame = Vec::with_capacity(5 + body.len());
        frame.extend_from_slice(&(body.len() as u32 + 1).to_be_bytes());
        frame.push(self.kind() as u8);
        frame.extend_from_slice(&body);
        Ok(frame)
    }

    /// Encoded frame size in bytes.
    pub fn frame_len(&self) -> usize {
        5 + self.body().len()
    }

    /// Decode one complete frame.
    pub fn decode(frame: &[u8]) -> Result<Self, WireError> {
        if frame.len() < 5 {
            return Err(WireError::Truncated);
        }
        let len = u32::from_be_bytes(frame[..4].try_into().expect("4 bytes")) as usize;
        if len == 0 {
            return Err(WireError::BadField("zero frame length"));
        }
        if len - 1 > MAX_BODY {
            return Err(WireError::TooLarge(len - 1));
        }
        match (4 + len).cmp(&frame.len()) {
            std::cmp::Ordering::Greater => return Err(WireError::Truncated),
            std::cmp::Ordering::Less => {
                return Err(WireError::TrailingBytes(frame.len() - 4 - len))
            }
            std::cmp::Ordering::Equal => {}
        }
        Self::decode_body(frame[4], &frame[5..])
    }

    fn decode_body(kind: u8, body: &[u8]) -> Result<Self, WireError> {
        let kind = MessageKind::from_byte(kind).ok_or(WireError::UnknownKind(kind))?;
        let mut c = Cursor { buf: body };
        let msg = match kind {
            MessageKind::TransferInit => WireMessage::TransferInit {
                job: c.u64()?,
                image_id: c.string()?,
                name: c.string()?,
                size: c.u64()?,
                checksum: c.array()?,
                mode: CipherMode::from_byte(c.u8()?).ok_or(WireError::BadField("cipher mode"))?,
            },
            MessageKind::FlowMod => WireMessage::FlowMod {
                job: c.u64()?,
                correlation: c.u64()?,
                kind: match c.u8()? {
                    1 => ControlKind::AddCrossConnect,
                    2 => ControlKind::RemoveCrossConnect,
                    _ => return Err(WireError::BadField("flow-mod command")),
                },
                ingress: PortId(c.string()?),
                egress: PortId(c.string()?),
            },
            MessageKind::KeyRequest => WireMessage::KeyRequest {
                job: c.u64()?,
                peer: NodeId(c.string()?),
                bits: c.u64()?,
            },
            MessageKind::KeyResponse => WireMessage::KeyResponse {
                job: c.u64()?,
                key_id: KeyId(c.array()?),
                bits: c.u64()?,
            },
            MessageKind::ImageChunk => {
                let job = c.u64()?;
                let seq = u32::from_be_bytes(c.array()?);
                let data = c.rest().to_vec();
                WireMessage::ImageChunk { job, seq, data }
            }
            MessageKind::KeyIdNotify => WireMessage::KeyIdNotify {
                job: c.u64()?,
                image_id: c.string()?,
                key_id: KeyId(c.array()?),
            },
            MessageKind::DeployReport => WireMessage::DeployReport {
                job: c.u64()?,
                image_id: c.string()?,
                decrypt_s: f64::from_bits(c.u64()?),
            },
            MessageKind::Ack200 => WireMessage::Ack200 { job: c.u64()? },
            MessageKind::Nack => WireMessage::Nack {
                job: c.u64()?,
                reason: c.string()?,
            },
        };
        if !c.buf.is_empty() {
            return Err(WireError::TrailingBytes(c.buf.len()));
        }
        Ok(msg)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), WireError> {
        w.write_all(&self.encode()?)?;
        Ok(())
    }

    /// Read one frame. `Ok(None)` on a clean end of stream before any byte
    /// of a new frame; a stream ending mid-frame is [`WireError::Truncated`].
    pub fn read_from(r: &mut impl Read) -> Result<Option<Self>, WireError> {
        let mut len_buf = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match r.read(&mut len_buf[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(WireError::Truncated),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let len = u32::from_be_bytes(len_buf) as usize;
        if len == 0 {
            return Err(WireError::BadField("zero frame length"));
        }
        if len - 1 > MAX_BODY {
            return Err(WireError::TooLarge(len - 1));
        }
        let mut rest = vec![0u8; len];
        r.read_exact(&mut rest).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => WireError::Truncated,
            _ => WireError::Io(e),
        })?;
        Self::decode_body(rest[0], &rest[1..]).map(Some)
    }
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_be_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    let len = bytes.len().min(u16::MAX as usize);
    b.extend_from_slice(&(len as u16).to_be_bytes());
    b.extend_from_slice(&bytes[..len]);
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let len = u16::from_be_bytes(self.array()?) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| WireError::BadField("utf-8 string"))
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }
}
