use std::collections::HashSet;
use std::io::Read;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::transport::{Connector, Stream};
use super::wire::{
    hello_payload, parse_error_payload, parse_u64, read_frame, u64_payload, write_frame, Frame, HelloAck,
    MessageType, ModelHeader, FRAME_OVERHEAD,
};
use super::ProtocolError;
use crate::dataset::{Shard, ShardGeometry};

#[derive(Debug, Clone, Copy)]
pub struct UploadOptions {
    pub records_per_batch: usize,
    /// Reconnect attempts after the first connection fails.
    pub max_retries: u32,
}

impl Default for UploadOptions {
    fn default() -> Self {
        UploadOptions {
            records_per_batch: 16,
            max_retries: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TransferSummary {
    pub client_id: u32,
    pub records: u64,
    pub batches: u64,
    /// Bytes of every frame fully written, across all connections.
    pub bytes_sent: u64,
    pub frames_sent: u64,
    pub connections: u32,
    pub server_records: u64,
}

/// Bytes a fault-free upload puts on the wire: HELLO, one frame per batch,
/// UPLOAD_DONE.
pub fn expected_upload_bytes(g: &ShardGeometry, records: usize, records_per_batch: usize) -> u64 {
    let hello = FRAME_OVERHEAD + 2 + crate::dataset::GEOMETRY_LEN;
    let batches = records.div_ceil(records_per_batch.max(1));
    let done = FRAME_OVERHEAD + 8;
    (hello + batches * FRAME_OVERHEAD + records * g.record_len() + done) as u64
}

fn remote_error(f: &Frame) -> ProtocolError {
    let (code, message) = parse_error_payload(&f.payload);
    ProtocolError::Remote { code, message }
}

fn expect_frame<S: Read + ?Sized>(s: &mut S, kind: MessageType) -> Result<Frame, ProtocolError> {
    match read_frame(s)? {
        None => Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into()),
        Some(f) if f.kind == MessageType::Error => Err(remote_error(&f)),
        Some(f) if f.kind != kind => Err(ProtocolError::Malformed(format!("expected {kind:?}, got {:?}", f.kind))),
        Some(f) => Ok(f),
    }
}

/// Uploads every record of `shards` in one logical session, reconnecting and
/// resuming from the server's last committed sequence number on I/O failure.
pub fn upload(
    connector: &dyn Connector,
    shards: &[Shard],
    client_id: u32,
    opts: UploadOptions,
) -> Result<TransferSummary, ProtocolError> {
    let geometry = match shards.first() {
        Some(s) => s.geometry,
        // an empty upload still announces a geometry; use the standard one
        None => ShardGeometry::new(224, 224, 3, 16).expect("valid geometry"),
    };
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for s in shards {
        if s.geometry != geometry {
            return Err(ProtocolError::Local("shards disagree on geometry".into()));
        }
        for r in &s.records {
            if r.client_id != client_id {
                return Err(ProtocolError::Local(format!("record for client {} in upload for {client_id}", r.client_id)));
            }
            if !seen.insert(r.id()) {
                return Err(ProtocolError::Local(format!("duplicate image {} epoch {}", r.image_id, r.epoch)));
            }
            records.push(r);
        }
    }
    let batches: Vec<Vec<u8>> = records
        .chunks(opts.records_per_batch.max(1))
        .map(|chunk| {
            let mut payload = Vec::with_capacity(chunk.len() * geometry.record_len());
            for r in chunk {
                r.write_bytes(&mut payload);
            }
            payload
        })
        .collect();
    let done_seq = batches.len() as u64 + 1;

    let mut summary = TransferSummary {
        client_id,
        records: records.len() as u64,
        batches: batches.len() as u64,
        ..Default::default()
    };
    loop {
        summary.connections += 1;
        match attempt(connector, &geometry, client_id, &batches, done_seq, records.len() as u64, &mut summary) {
            Ok(server_records) => {
                summary.server_records = server_records;
                return Ok(summary);
            }
            Err(ProtocolError::Io(_)) if summary.connections <= opts.max_retries => {}
            Err(e) => return Err(e),
        }
    }
}

fn send(s: &mut dyn Stream, frame: &Frame, summary: &mut TransferSummary) -> Result<(), ProtocolError> {
    match write_frame(s, frame) {
        Ok(n) => {
            summary.bytes_sent += n as u64;
            summary.frames_sent += 1;
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

fn attempt(
    connector: &dyn Connector,
    geometry: &ShardGeometry,
    client_id: u32,
    batches: &[Vec<u8>],
    done_seq: u64,
    total: u64,
    summary: &mut TransferSummary,
) -> Result<u64, ProtocolError> {
    let mut s = connector.connect()?;
    send(&mut *s, &Frame::new(MessageType::Hello, client_id, 0, hello_payload(geometry)), summary)?;
    let ack = HelloAck::decode(&expect_frame(&mut *s, MessageType::Hello)?.payload)?;
    for (i, payload) in batches.iter().enumerate() {
        let seq = i as u64 + 1;
        if seq <= ack.last_seq {
            continue;
        }
        send(&mut *s, &Frame::new(MessageType::UploadBatch, client_id, seq, payload.clone()), summary)?;
    }
    send(&mut *s, &Frame::new(MessageType::UploadDone, client_id, done_seq, u64_payload(total)), summary)?;
    let reply = expect_frame(&mut *s, MessageType::UploadDone)?;
    let committed = parse_u64(&reply.payload)?;
    if committed != total {
        return Err(ProtocolError::Malformed(format!("server committed {committed} of {total} records")));
    }
    Ok(committed)
}

/// Downloads the model artifact and checks its SHA-256.
pub fn fetch_model(connector: &dyn Connector, client_id: u32) -> Result<Vec<u8>, ProtocolError> {
    let mut s = connector.connect()?;
    write_frame(&mut *s, &Frame::new(MessageType::ModelRequest, client_id, 0, Vec::new()))?;
    let head = expect_frame(&mut *s, MessageType::ModelChunk)?;
    if head.seq != 0 {
        return Err(ProtocolError::Malformed(format!("model stream starts at seq {}", head.seq)));
    }
    let header = ModelHeader::decode(&head.payload)?;
    let mut bytes = Vec::with_capacity(header.total_len.min(1 << 30) as usize);
    for expected in 1..=header.chunks as u64 {
        let f = expect_frame(&mut *s, MessageType::ModelChunk)?;
        if f.seq != expected {
            return Err(ProtocolError::Malformed(format!("model chunk {} arrived as {expected}", f.seq)));
        }
        bytes.extend_from_slice(&f.payload);
    }
    if bytes.len() as u64 != header.total_len {
        return Err(ProtocolError::DigestMismatch);
    }
    let digest: [u8; 32] = Sha256::digest(&bytes).into();
    if digest != header.sha256 {
        return Err(ProtocolError::DigestMismatch);
    }
    Ok(bytes)
}
