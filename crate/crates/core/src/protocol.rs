//! Device/server messages and their wire encoding.
//!
//! A frame is
//!
//! ```text
//! +----------------+---------+------------------------------+
//! | length: u32 BE | version | body: UTF-8 JSON, len-1 bytes|
//! +----------------+---------+------------------------------+
//! ```
//!
//! `length` counts the version byte plus the body. The body is a compact JSON
//! object with keys in the fixed order `kind, sender, msg_id, sent_at,
//! payload`, so equal messages always encode to equal bytes.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DeviceId, PerformanceRecord, ResourceProfile, Task, Timestamp};
use crate::teacher::CandidateBundle;

pub const PROTOCOL_VERSION: u8 = 1;
/// Largest accepted `length` field.
pub const MAX_FRAME_LEN: u32 = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("protocol version {found} not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sender {
    Server,
    Device(DeviceId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    ResourceReport,
    PerformanceRecord,
    TaskRequest,
    CandidateBundle,
    Ack,
    Error,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::ResourceReport,
        MessageKind::PerformanceRecord,
        MessageKind::TaskRequest,
        MessageKind::CandidateBundle,
        MessageKind::Ack,
        MessageKind::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::ResourceReport => "resource_report",
            MessageKind::PerformanceRecord => "performance_record",
            MessageKind::TaskRequest => "task_request",
            MessageKind::CandidateBundle => "candidate_bundle",
            MessageKind::Ack => "ack",
            MessageKind::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AckBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// Message body; the variant determines the wire `kind`.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    ResourceReport(ResourceProfile),
    PerformanceRecord(PerformanceRecord),
    TaskRequest(Task),
    CandidateBundle(CandidateBundle),
    Ack(AckBody),
    Error(ErrorBody),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::ResourceReport(_) => MessageKind::ResourceReport,
            Payload::PerformanceRecord(_) => MessageKind::PerformanceRecord,
            Payload::TaskRequest(_) => MessageKind::TaskRequest,
            Payload::CandidateBundle(_) => MessageKind::CandidateBundle,
            Payload::Ack(_) => MessageKind::Ack,
            Payload::Error(_) => MessageKind::Error,
        }
    }

    fn to_value(&self) -> serde_json::Value {
        let v = match self {
            Payload::ResourceReport(p) => serde_json::to_value(p),
            Payload::PerformanceRecord(p) => serde_json::to_value(p),
            Payload::TaskRequest(p) => serde_json::to_value(p),
            Payload::CandidateBundle(p) => serde_json::to_value(p),
            Payload::Ack(p) => serde_json::to_value(p),
            Payload::Error(p) => serde_json::to_value(p),
        };
        v.expect("domain values serialize")
    }

    fn from_value(kind: MessageKind, v: serde_json::Value) -> Result<Self, serde_json::Error> {
        Ok(match kind {
            MessageKind::ResourceReport => Payload::ResourceReport(serde_json::from_value(v)?),
            MessageKind::PerformanceRecord => Payload::PerformanceRecord(serde_json::from_value(v)?),
            MessageKind::TaskRequest => Payload::TaskRequest(serde_json::from_value(v)?),
            MessageKind::CandidateBundle => Payload::CandidateBundle(serde_json::from_value(v)?),
            MessageKind::Ack => Payload::Ack(serde_json::from_value(v)?),
            MessageKind::Error => Payload::Error(serde_json::from_value(v)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: Sender,
    /// Unique per sender; responses reuse the request's id.
    pub msg_id: u64,
    pub sent_at: Timestamp,
    pub payload: Payload,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    kind: &'static str,
    sender: &'a Sender,
    msg_id: u64,
    sent_at: Timestamp,
    payload: serde_json::Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvelopeIn {
    kind: String,
    sender: Sender,
    msg_id: u64,
    sent_at: Timestamp,
    payload: serde_json::Value,
}

fn body_bytes(msg: &Message) -> Vec<u8> {
    let env = EnvelopeOut {
        kind: msg.kind().as_str(),
        sender: &msg.sender,
        msg_id: msg.msg_id,
        sent_at: msg.sent_at,
        payload: msg.payload.to_value(),
    };
    serde_json::to_vec(&env).expect("envelope serializes")
}

/// One complete frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let body = body_bytes(msg);
    let len = u32::try_from(body.len() + 1).expect("frame fits u32");
    let mut out = Vec::with_capacity(body.len() + 5);
    out.extend_from_slice(&len.to_be_bytes());
    out.push(PROTOCOL_VERSION);
    out.extend_from_slice(&body);
    out
}

/// Decodes exactly one frame; trailing bytes are malformed.
pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    if bytes.len() < 5 {
        return Err(ProtocolError::Malformed(format!("{} bytes is shorter than a header", bytes.len())));
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(ProtocolError::Malformed(format!("bad length {len}")));
    }
    let expected = 4 + len as usize;
    if bytes.len() < expected {
        return Err(ProtocolError::Malformed(format!("truncated: need {expected}, have {}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(ProtocolError::Malformed(format!("{} trailing bytes", bytes.len() - expected)));
    }
    decode_body(bytes[4], &bytes[5..])
}

fn decode_body(version: u8, body: &[u8]) -> Result<Message, ProtocolError> {
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::VersionMismatch {
            found: version,
            expected: PROTOCOL_VERSION,
        });
    }
    let env: EnvelopeIn =
        serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let kind = MessageKind::parse(&env.kind).ok_or_else(|| ProtocolError::UnknownKind(env.kind.clone()))?;
    let payload =
        Payload::from_value(kind, env.payload).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    Ok(Message {
        sender: env.sender,
        msg_id: env.msg_id,
        sent_at: env.sent_at,
        payload,
    })
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<(), ProtocolError> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads the next frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>, ProtocolError> {
    let mut header = [0u8; 4];
    match r.read_exact(&mut header[..1]) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    r.read_exact(&mut header[1..]).map_err(truncated)?;
    let len = u32::from_be_bytes(header);
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(ProtocolError::Malformed(format!("bad length {len}")));
    }
    let mut rest = vec![0u8; len as usize];
    r.read_exact(&mut rest).map_err(truncated)?;
    decode_body(rest[0], &rest[1..]).map(Some)
}

fn truncated(e: io::Error) -> ProtocolError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        ProtocolError::Malformed("stream ended mid-frame".into())
    } else {
        ProtocolError::Io(e)
    }
}
