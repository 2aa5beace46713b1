// ============================================================================
// WIRE FORMAT
// ============================================================================
//
// Every message is one frame, all integers little-endian:
//
//   [u32 len][u8 type][u32 client_id][u64 seq][payload ...]
//
// `len` counts everything after itself, so a frame occupies
// `FRAME_OVERHEAD + payload.len()` bytes on the wire.
//
// Payloads by type:
//
//   HELLO         c->s  u16 version, 15-byte shard geometry
//                 s->c  u16 version, u64 last committed seq, u64 records committed
//   UPLOAD_BATCH  c->s  whole PCED records, concatenated
//   UPLOAD_DONE   c->s  u64 records sent
//                 s->c  u64 records committed
//   MODEL_REQUEST c->s  empty
//   MODEL_CHUNK   s->c  seq 0: u64 total bytes, u32 chunk count, 32-byte SHA-256
//                       seq 1..=count: artifact bytes
//   ERROR         s->c  u16 code, UTF-8 diagnostic
//
// There is no message type that carries key material.
// ============================================================================

use std::io::{self, Read, Write};

use super::ProtocolError;
use crate::dataset::{ShardGeometry, GEOMETRY_LEN};

pub const PROTOCOL_VERSION: u16 = 1;
pub const FRAME_OVERHEAD: usize = 4 + 1 + 4 + 8;
pub const MAX_FRAME_LEN: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    UploadBatch = 2,
    UploadDone = 3,
    ModelRequest = 4,
    ModelChunk = 5,
    Error = 6,
}

impl MessageType {
    pub const ALL: [MessageType; 6] = [
        MessageType::Hello,
        MessageType::UploadBatch,
        MessageType::UploadDone,
        MessageType::ModelRequest,
        MessageType::ModelChunk,
        MessageType::Error,
    ];

    pub fn from_tag(tag: u8) -> Option<Self> {
        MessageType::ALL.into_iter().find(|t| *t as u8 == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MessageType,
    pub client_id: u32,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: MessageType, client_id: u32, seq: u64, payload: Vec<u8>) -> Self {
        Frame {
            kind,
            client_id,
            seq,
            payload,
        }
    }

    pub fn wire_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        let len = (self.wire_len() - 4) as u32;
        out.extend_from_slice(&len.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Writes one frame and returns the number of bytes put on the wire.
pub fn write_frame<W: Write + ?Sized>(w: &mut W, frame: &Frame) -> io::Result<usize> {
    let bytes = frame.encode();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly between frames;
/// a close in the middle of a frame is an `UnexpectedEof` I/O error.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Option<Frame>, ProtocolError> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len_buf);
    if len < (FRAME_OVERHEAD - 4) as u32 || len > MAX_FRAME_LEN {
        return Err(ProtocolError::Malformed(format!("frame length {len} out of range")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    let tag = body[0];
    let kind = MessageType::from_tag(tag).ok_or(ProtocolError::UnknownType(tag))?;
    Ok(Some(Frame {
        kind,
        client_id: u32::from_le_bytes(body[1..5].try_into().unwrap()),
        seq: u64::from_le_bytes(body[5..13].try_into().unwrap()),
        payload: body.split_off(13),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    Malformed = 1,
    UnexpectedType = 2,
    Replay = 3,
    GeometryMismatch = 4,
    SessionClosed = 5,
    NoModel = 6,
    SequenceGap = 7,
    BadRecord = 8,
    ClientMismatch = 9,
    Internal = 10,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        use ErrorCode::*;
        [
            Malformed,
            UnexpectedType,
            Replay,
            GeometryMismatch,
            SessionClosed,
            NoModel,
            SequenceGap,
            BadRecord,
            ClientMismatch,
            Internal,
        ]
        .into_iter()
        .find(|c| *c as u16 == v)
    }
}

pub fn error_payload(code: ErrorCode, msg: &str) -> Vec<u8> {
    let mut v = (code as u16).to_le_bytes().to_vec();
    v.extend_from_slice(msg.as_bytes());
    v
}

pub fn parse_error_payload(p: &[u8]) -> (u16, String) {
    if p.len() < 2 {
        return (0, String::new());
    }
    (u16::from_le_bytes([p[0], p[1]]), String::from_utf8_lossy(&p[2..]).into_owned())
}

pub fn hello_payload(g: &ShardGeometry) -> Vec<u8> {
    let mut v = PROTOCOL_VERSION.to_le_bytes().to_vec();
    v.extend_from_slice(&g.to_bytes());
    v
}

pub fn parse_hello(p: &[u8]) -> Result<ShardGeometry, ProtocolError> {
    if p.len() != 2 + GEOMETRY_LEN {
        return Err(ProtocolError::Malformed(format!("HELLO payload of {} bytes", p.len())));
    }
    let version = u16::from_le_bytes([p[0], p[1]]);
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::Malformed(format!("protocol version {version}")));
    }
    ShardGeometry::read_bytes(&p[2..]).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HelloAck {
    pub last_seq: u64,
    pub records: u64,
}

impl HelloAck {
    pub fn encode(&self) -> Vec<u8> {
        let mut v = PROTOCOL_VERSION.to_le_bytes().to_vec();
        v.extend_from_slice(&self.last_seq.to_le_bytes());
        v.extend_from_slice(&self.records.to_le_bytes());
        v
    }

    pub fn decode(p: &[u8]) -> Result<Self, ProtocolError> {
        if p.len() != 18 {
            return Err(ProtocolError::Malformed(format!("HELLO reply of {} bytes", p.len())));
        }
        Ok(HelloAck {
            last_seq: u64::from_le_bytes(p[2..10].try_into().unwrap()),
            records: u64::from_le_bytes(p[10..18].try_into().unwrap()),
        })
    }
}

pub fn u64_payload(v: u64) -> Vec<u8> {
    v.to_le_bytes().to_vec()
}

pub fn parse_u64(p: &[u8]) -> Result<u64, ProtocolError> {
    let arr: [u8; 8] = p
        .try_into()
        .map_err(|_| ProtocolError::Malformed(format!("expected 8-byte payload, got {}", p.len())))?;
    Ok(u64::from_le_bytes(arr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelHeader {
    pub total_len: u64,
    pub chunks: u32,
    pub sha256: [u8; 32],
}

impl ModelHeader {
    pub const LEN: usize = 8 + 4 + 32;

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend_from_slice(&self.total_len.to_le_bytes());
        v.extend_from_slice(&self.chunks.to_le_bytes());
        v.extend_from_slice(&self.sha256);
        v
    }

    pub fn decode(p: &[u8]) -> Result<Self, ProtocolError> {
        if p.len() != Self::LEN {
            return Err(ProtocolError::Malformed(format!("model header of {} bytes", p.len())));
        }
        Ok(ModelHeader {
            total_len: u64::from_le_bytes(p[0..8].try_into().unwrap()),
            chunks: u32::from_le_bytes(p[8..12].try_into().unwrap()),
            sha256: p[12..44].try_into().unwrap(),
        })
    }
}
