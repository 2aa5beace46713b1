mod common;

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use common::{client_upload_set, contains_any, dir_bytes};
use permcollab::dataset::{DatasetManifest, Shard, ShardGeometry, MANIFEST_FILE};
use permcollab::proto::transport::{duplex, Stream};
use permcollab::proto::wire::{hello_payload, parse_error_payload, read_frame, u64_payload, write_frame, HelloAck};
use permcollab::proto::{
    expected_upload_bytes, fetch_model, serve, upload, Connector, ErrorCode, Fault, FaultPlan, Frame, LoopbackConnector,
    MessageType, ProtocolError, Server, ServerConfig, SessionState, TcpConnector, UploadOptions,
};
use permcollab::KeyCache;

const SIDE: usize = 32;
const P: usize = 8;

fn server(dir: &tempfile::TempDir, expected: usize) -> Arc<Server> {
    Arc::new(Server::new(ServerConfig::new(dir.path(), expected)).unwrap())
}

fn opts(per_batch: usize) -> UploadOptions {
    UploadOptions {
        records_per_batch: per_batch,
        max_retries: 5,
    }
}

fn key_patterns(keys: &KeyCache) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for (_, k) in keys.iter() {
        out.push(k.to_bytes());
        out.push(k.block_perm().to_bytes());
        out.push(k.pixel_perm().to_bytes());
    }
    out
}

/// Records every byte written and read through a connection.
struct Tap {
    inner: Box<dyn Stream>,
    log: Arc<Mutex<Vec<u8>>>,
}

impl Read for Tap {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.log.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }
}

impl Write for Tap {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.log.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }
    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

struct TapConnector<C> {
    inner: C,
    log: Arc<Mutex<Vec<u8>>>,
}

impl<C: Connector> Connector for TapConnector<C> {
    fn connect(&self) -> io::Result<Box<dyn Stream>> {
        Ok(Box::new(Tap {
            inner: self.inner.connect()?,
            log: Arc::clone(&self.log),
        }))
    }
}

/// Sends raw frames on one connection and collects the server's replies.
fn exchange(server: &Arc<Server>, frames: &[Frame]) -> Vec<Frame> {
    let (mut client, server_end) = duplex();
    let s = Arc::clone(server);
    let h = thread::spawn(move || s.handle_connection(server_end));
    for f in frames {
        if write_frame(&mut client, f).is_err() {
            break;
        }
    }
    client.close_write();
    let mut replies = Vec::new();
    while let Ok(Some(f)) = read_frame(&mut client) {
        replies.push(f);
    }
    h.join().unwrap();
    replies
}

fn error_code(f: &Frame) -> Option<ErrorCode> {
    assert_eq!(f.kind, MessageType::Error);
    ErrorCode::from_u16(parse_error_payload(&f.payload).0)
}

#[test]
fn single_client_upload() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let (set, _) = client_upload_set(1, 10, SIDE, P, 0, 0);
    let summary = upload(&LoopbackConnector::new(Arc::clone(&srv)), std::slice::from_ref(&set.shard), 1, opts(4)).unwrap();
    assert_eq!(summary.records, 10);
    assert_eq!(summary.server_records, 10);
    assert_eq!(summary.batches, 3);
    assert_eq!(summary.connections, 1);

    let manifest = srv.wait_sealed(Duration::from_secs(5)).unwrap();
    assert_eq!(manifest.total_records, 10);
    manifest.verify(dir.path()).unwrap();
    let on_disk = DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk, manifest);
    let stored = Shard::read_file(&manifest.shard_paths(dir.path())[0]).unwrap();
    assert_eq!(stored, set.shard);
}

#[test]
fn five_clients_concurrently() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 5);
    let sets: Vec<_> = (1..=5).map(|c| client_upload_set(c, 100, SIDE, P, 0, 0).0).collect();
    thread::scope(|s| {
        for (i, set) in sets.iter().enumerate() {
            let srv = Arc::clone(&srv);
            s.spawn(move || {
                let c = i as u32 + 1;
                let sum = upload(&LoopbackConnector::new(srv), std::slice::from_ref(&set.shard), c, opts(7)).unwrap();
                assert_eq!(sum.server_records, 100);
            });
        }
    });
    let manifest = srv.wait_sealed(Duration::from_secs(10)).unwrap();
    assert_eq!(manifest.total_records, 500);
    assert_eq!(manifest.per_client.len(), 5);
    assert!(manifest.per_client.values().all(|&n| n == 100));
    let mut ids = BTreeSet::new();
    for path in manifest.shard_paths(dir.path()) {
        for r in Shard::read_file(path).unwrap().records {
            assert!(ids.insert(r.id()));
        }
    }
    assert_eq!(ids.len(), 500);
    assert!(srv.logical_sessions().values().all(|&n| n == 1));
}

#[test]
fn unknown_type_tag_gets_error_and_close() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let (mut client, server_end) = duplex();
    let s = Arc::clone(&srv);
    let h = thread::spawn(move || s.handle_connection(server_end));
    // len = 13 (type, client, seq), type 0x63
    let mut raw = 13u32.to_le_bytes().to_vec();
    raw.push(0x63);
    raw.extend_from_slice(&7u32.to_le_bytes());
    raw.extend_from_slice(&0u64.to_le_bytes());
    client.write_all(&raw).unwrap();
    let reply = read_frame(&mut client).unwrap().unwrap();
    assert_eq!(error_code(&reply), Some(ErrorCode::UnexpectedType));
    h.join().unwrap();
    assert!(read_frame(&mut client).unwrap().is_none());
    assert_eq!(srv.errors_sent(), 1);
}

#[test]
fn server_only_messages_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let r = exchange(&srv, &[Frame::new(MessageType::ModelChunk, 1, 0, vec![])]);
    assert_eq!(error_code(&r[0]), Some(ErrorCode::UnexpectedType));
    let r = exchange(&srv, &[Frame::new(MessageType::UploadBatch, 1, 1, vec![0; 4])]);
    assert_eq!(error_code(&r[0]), Some(ErrorCode::UnexpectedType));
}

#[test]
fn replayed_record_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let (set, _) = client_upload_set(3, 2, SIDE, P, 0, 0);
    let g = set.shard.geometry;
    let rec = set.shard.records[0].to_bytes();
    let r = exchange(
        &srv,
        &[
            Frame::new(MessageType::Hello, 3, 0, hello_payload(&g)),
            Frame::new(MessageType::UploadBatch, 3, 1, rec.clone()),
            Frame::new(MessageType::UploadBatch, 3, 2, rec.clone()),
        ],
    );
    assert_eq!(r.len(), 2);
    assert_eq!(r[0].kind, MessageType::Hello);
    assert_eq!(error_code(&r[1]), Some(ErrorCode::Replay));

    // the same record twice inside one batch
    let mut twice = set.shard.records[1].to_bytes();
    twice.extend_from_slice(&set.shard.records[1].to_bytes());
    let r = exchange(
        &srv,
        &[
            Frame::new(MessageType::Hello, 3, 0, hello_payload(&g)),
            Frame::new(MessageType::UploadBatch, 3, 2, twice),
        ],
    );
    assert_eq!(HelloAck::decode(&r[0].payload).unwrap().last_seq, 1);
    assert_eq!(error_code(&r[1]), Some(ErrorCode::Replay));
    assert_eq!(srv.session_stats()[&3].records, 1);
}

#[test]
fn records_for_another_client_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let (set, _) = client_upload_set(4, 1, SIDE, P, 0, 0);
    let r = exchange(
        &srv,
        &[
            Frame::new(MessageType::Hello, 5, 0, hello_payload(&set.shard.geometry)),
            Frame::new(MessageType::UploadBatch, 5, 1, set.shard.records[0].to_bytes()),
        ],
    );
    assert_eq!(error_code(&r[1]), Some(ErrorCode::ClientMismatch));
    let err = upload(&LoopbackConnector::new(Arc::clone(&srv)), std::slice::from_ref(&set.shard), 5, opts(1)).unwrap_err();
    assert!(matches!(err, ProtocolError::Local(_)));
}

#[test]
fn sequence_gap_and_geometry_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let (set, _) = client_upload_set(6, 1, SIDE, P, 0, 0);
    let g = set.shard.geometry;
    let r = exchange(
        &srv,
        &[
            Frame::new(MessageType::Hello, 6, 0, hello_payload(&g)),
            Frame::new(MessageType::UploadBatch, 6, 3, set.shard.records[0].to_bytes()),
        ],
    );
    assert_eq!(error_code(&r[1]), Some(ErrorCode::SequenceGap));
    let other = ShardGeometry::new(SIDE, SIDE, 3, 4).unwrap();
    let r = exchange(&srv, &[Frame::new(MessageType::Hello, 7, 0, hello_payload(&other))]);
    assert_eq!(error_code(&r[0]), Some(ErrorCode::GeometryMismatch));
}

#[test]
fn completed_session_cannot_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 2);
    let (set, _) = client_upload_set(8, 3, SIDE, P, 0, 0);
    let conn = LoopbackConnector::new(Arc::clone(&srv));
    upload(&conn, std::slice::from_ref(&set.shard), 8, opts(2)).unwrap();
    let err = upload(&conn, std::slice::from_ref(&set.shard), 8, opts(2)).unwrap_err();
    assert_eq!(err.remote_code(), Some(ErrorCode::SessionClosed));
    assert_eq!(srv.session_stats()[&8].records, 3);
}

#[test]
fn resume_after_drop_mid_upload() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let (set, _) = client_upload_set(9, 100, SIDE, P, 0, 0);
    let g = set.shard.geometry;
    let rl = g.record_len();
    let per_batch = 10;
    // cut inside record 50: five full batches, then a partial sixth
    let hello = 17 + 2 + 15;
    let cut = hello + 5 * (17 + per_batch * rl) + 17 + 3 * rl + 11;
    let plan = FaultPlan::new([Some(Fault::DropAfterBytes(cut)), None]);
    let conn = LoopbackConnector::with_faults(Arc::clone(&srv), plan);
    let sum = upload(&conn, std::slice::from_ref(&set.shard), 9, opts(per_batch)).unwrap();
    assert_eq!(sum.connections, 2);
    assert_eq!(sum.server_records, 100);

    let manifest = srv.wait_sealed(Duration::from_secs(5)).unwrap();
    let stored = Shard::read_file(&manifest.shard_paths(dir.path())[0]).unwrap();
    assert_eq!(stored.records, set.shard.records);
    let stats = &srv.session_stats()[&9];
    assert_eq!(stats.state, SessionState::Done);
    assert_eq!(stats.connections, 2);
    assert_eq!(srv.logical_sessions()[&9], 1);
}

#[test]
fn exhausted_retries_surface_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let (set, _) = client_upload_set(10, 4, SIDE, P, 0, 0);
    let plan = FaultPlan::new(std::iter::repeat_n(Some(Fault::DropAfterBytes(40)), 3));
    let conn = LoopbackConnector::with_faults(Arc::clone(&srv), plan);
    let err = upload(&conn, std::slice::from_ref(&set.shard), 10, UploadOptions { records_per_batch: 2, max_retries: 2 }).unwrap_err();
    assert!(matches!(err, ProtocolError::Io(_)));
}

#[test]
fn delayed_connection_still_completes() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let (set, _) = client_upload_set(11, 5, SIDE, P, 0, 0);
    let plan = FaultPlan::new([Some(Fault::Delay(Duration::from_millis(50)))]);
    let sum = upload(&LoopbackConnector::with_faults(Arc::clone(&srv), plan), std::slice::from_ref(&set.shard), 11, opts(2)).unwrap();
    assert_eq!(sum.server_records, 5);
}

#[test]
fn byte_count_matches_frame_arithmetic() {
    for (records, per_batch) in [(0usize, 4usize), (1, 4), (10, 4), (12, 4), (37, 16)] {
        let dir = tempfile::tempdir().unwrap();
        let srv = server(&dir, 1);
        let (set, _) = client_upload_set(12, records.max(1), SIDE, P, 0, 0);
        let mut shard = set.shard.clone();
        shard.records.truncate(records);
        let shards = if records == 0 { vec![] } else { vec![shard] };
        let sum = upload(&LoopbackConnector::new(Arc::clone(&srv)), &shards, 12, opts(per_batch)).unwrap();

        let g = if records == 0 { ShardGeometry::new(224, 224, 3, 16).unwrap() } else { set.shard.geometry };
        let payload = g.h as usize * g.w as usize * g.c as usize;
        let record = 8 + 4 + 4 + 1 + payload + 16 + 4 + 4;
        let batches = records.div_ceil(per_batch);
        let want = (17 + 2 + 15) + batches * 17 + records * record + (17 + 8);
        assert_eq!(sum.bytes_sent, want as u64, "records={records} per_batch={per_batch}");
        assert_eq!(sum.bytes_sent, expected_upload_bytes(&g, records, per_batch));
        assert_eq!(sum.frames_sent, batches as u64 + 2);
    }
}

#[test]
fn empty_upload_is_hello_and_done() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let sum = upload(&LoopbackConnector::new(Arc::clone(&srv)), &[], 13, opts(16)).unwrap();
    assert_eq!(sum.frames_sent, 2);
    assert_eq!(sum.records, 0);
    let manifest = srv.wait_sealed(Duration::from_secs(5)).unwrap();
    assert_eq!(manifest.total_records, 0);
    manifest.verify(dir.path()).unwrap();
}

#[test]
fn done_with_wrong_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let (set, _) = client_upload_set(14, 1, SIDE, P, 0, 0);
    let r = exchange(
        &srv,
        &[
            Frame::new(MessageType::Hello, 14, 0, hello_payload(&set.shard.geometry)),
            Frame::new(MessageType::UploadBatch, 14, 1, set.shard.records[0].to_bytes()),
            Frame::new(MessageType::UploadDone, 14, 2, u64_payload(5)),
        ],
    );
    assert_eq!(error_code(&r[1]), Some(ErrorCode::BadRecord));
    assert!(srv.manifest().is_none());
}

#[test]
fn model_fetch_sizes_and_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 1);
    let conn = LoopbackConnector::new(Arc::clone(&srv));
    let err = fetch_model(&conn, 1).unwrap_err();
    assert_eq!(err.remote_code(), Some(ErrorCode::NoModel));

    srv.set_model(Vec::new());
    assert_eq!(fetch_model(&conn, 1).unwrap(), Vec::<u8>::new());

    let big: Vec<u8> = (0..10 * 1024 * 1024u32).map(|i| (i.wrapping_mul(2_654_435_761) >> 13) as u8).collect();
    srv.set_model(big.clone());
    assert_eq!(fetch_model(&conn, 1).unwrap(), big);

    // header frame is 17 + 44 bytes; flip a byte inside the first data chunk
    let plan = FaultPlan::new([Some(Fault::CorruptInbound { offset: 61 + 17 + 1000, mask: 0x01 })]);
    let tampered = LoopbackConnector::with_faults(Arc::clone(&srv), plan);
    assert!(matches!(fetch_model(&tampered, 1), Err(ProtocolError::DigestMismatch)));
}

#[test]
fn keys_never_leave_the_client() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir, 2);
    srv.set_model(vec![7u8; 4096]);
    let log = Arc::new(Mutex::new(Vec::new()));
    let mut patterns = Vec::new();
    let mut plain = Vec::new();
    for (c, (nbs, nps)) in [(21u32, (0, 0)), (22, (8, 96))] {
        let (set, _) = client_upload_set(c, 20, SIDE, P, nbs, nps);
        patterns.extend(key_patterns(&set.keys));
        plain.push((set.shard.clone(), c));
    }
    // a fault forces a second HELLO and a replayed batch on the wire
    let plan = FaultPlan::new([Some(Fault::DropAfterBytes(5000)), None, None, None]);
    let conn = TapConnector {
        inner: LoopbackConnector::with_faults(Arc::clone(&srv), plan),
        log: Arc::clone(&log),
    };
    for (shard, c) in &plain {
        upload(&conn, std::slice::from_ref(shard), *c, opts(3)).unwrap();
    }
    fetch_model(&conn, 21).unwrap();
    let clean = TapConnector {
        inner: LoopbackConnector::new(Arc::clone(&srv)),
        log: Arc::clone(&log),
    };
    fetch_model(&clean, 0).unwrap();
    srv.wait_sealed(Duration::from_secs(5)).unwrap();

    let wire = log.lock().unwrap().clone();
    assert!(!wire.is_empty());
    assert!(!contains_any(&wire, &patterns), "key material on the wire");
    for (name, bytes) in dir_bytes(dir.path()) {
        assert!(!contains_any(&bytes, &patterns), "key material in {name}");
    }
    // the scanner does find a planted key
    let mut planted = wire.clone();
    planted.extend_from_slice(&patterns[1]);
    assert!(contains_any(&planted, &patterns));
}

#[test]
fn tcp_server_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let handle = serve("127.0.0.1:0", dir.path(), 2).unwrap();
    handle.server.set_model(b"placeholder model".to_vec());
    let conn = TcpConnector::new(handle.addr);
    let sets: Vec<_> = (31..=32).map(|c| client_upload_set(c, 12, SIDE, P, 0, 0).0).collect();
    thread::scope(|s| {
        for (i, set) in sets.iter().enumerate() {
            let conn = conn.clone();
            s.spawn(move || upload(&conn, std::slice::from_ref(&set.shard), 31 + i as u32, opts(5)).unwrap());
        }
    });
    let manifest = handle.server.wait_sealed(Duration::from_secs(10)).unwrap();
    assert_eq!(manifest.total_records, 24);
    assert_eq!(fetch_model(&conn, 31).unwrap(), b"placeholder model");
    handle.shutdown();
}
