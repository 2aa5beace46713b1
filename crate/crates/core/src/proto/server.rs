//! The collecting server.
//!
//! Per-client session states:
//!
//! ```text
//!   (none) --HELLO--> Open --UPLOAD_BATCH*--> Open --UPLOAD_DONE--> Done
//!                      ^                        |
//!                      +--HELLO (reconnect)-----+
//! ```
//!
//! A reconnect resumes the same logical session from the last committed
//! sequence number; a `Done` session never reopens. Once every expected
//! client is `Done`, the manifest is sealed. All commits go through the one
//! state mutex.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use super::wire::{
    error_payload, parse_hello, parse_u64, read_frame, u64_payload, write_frame, ErrorCode, Frame, HelloAck,
    MessageType, ModelHeader,
};
use super::ProtocolError;
use crate::dataset::{DatasetManifest, ShardGeometry, ShardRecord, ShardWriter, MANIFEST_FILE};
use crate::key::KeyId;

pub const DEFAULT_CHUNK_SIZE: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub out_dir: PathBuf,
    pub expected_clients: usize,
    pub model_chunk_size: usize,
}

impl ServerConfig {
    pub fn new(out_dir: impl Into<PathBuf>, expected_clients: usize) -> Self {
        ServerConfig {
            out_dir: out_dir.into(),
            expected_clients,
            model_chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Open,
    Done,
}

struct Session {
    writer: ShardWriter,
    file: String,
    last_seq: u64,
    records: u64,
    state: SessionState,
    connections: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionStats {
    pub state: SessionState,
    pub records: u64,
    pub last_seq: u64,
    /// Transport connections that joined this logical session.
    pub connections: u32,
}

#[derive(Default)]
struct State {
    geometry: Option<ShardGeometry>,
    sessions: BTreeMap<u32, Session>,
    /// Sessions ever opened per client; a correct run never exceeds 1.
    logical_sessions: BTreeMap<u32, u32>,
    seen: HashSet<KeyId>,
    manifest: Option<DatasetManifest>,
    model: Option<Arc<Vec<u8>>>,
    errors: u64,
}

pub struct Server {
    cfg: ServerConfig,
    state: Mutex<State>,
    sealed: Condvar,
}

type Reply = Result<(), (ErrorCode, String)>;

fn reject<T>(code: ErrorCode, msg: impl Into<String>) -> Result<T, (ErrorCode, String)> {
    Err((code, msg.into()))
}

impl Server {
    pub fn new(cfg: ServerConfig) -> io::Result<Self> {
        fs::create_dir_all(&cfg.out_dir)?;
        Ok(Server {
            cfg,
            state: Mutex::new(State::default()),
            sealed: Condvar::new(),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Installs the opaque model artifact served on MODEL_REQUEST.
    pub fn set_model(&self, bytes: Vec<u8>) {
        self.lock().model = Some(Arc::new(bytes));
    }

    pub fn manifest(&self) -> Option<DatasetManifest> {
        self.lock().manifest.clone()
    }

    pub fn session_stats(&self) -> BTreeMap<u32, SessionStats> {
        self.lock()
            .sessions
            .iter()
            .map(|(&id, s)| {
                (
                    id,
                    SessionStats {
                        state: s.state,
                        records: s.records,
                        last_seq: s.last_seq,
                        connections: s.connections,
                    },
                )
            })
            .collect()
    }

    pub fn logical_sessions(&self) -> BTreeMap<u32, u32> {
        self.lock().logical_sessions.clone()
    }

    /// Number of ERROR replies sent so far.
    pub fn errors_sent(&self) -> u64 {
        self.lock().errors
    }

    /// Blocks until the manifest is sealed or `timeout` passes.
    pub fn wait_sealed(&self, timeout: Duration) -> Option<DatasetManifest> {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if let Some(m) = &st.manifest {
                return Some(m.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            st = self.sealed.wait_timeout(st, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    /// Serves one connection until the peer closes it or a protocol error
    /// ends the session.
    pub fn handle_connection<S: Read + Write>(&self, mut stream: S) {
        let mut bound: Option<u32> = None;
        loop {
            let frame = match read_frame(&mut stream) {
                Ok(Some(f)) => f,
                Ok(None) => return,
                // a partial frame means the connection dropped; nothing was committed
                Err(ProtocolError::Io(_)) => return,
                Err(ProtocolError::UnknownType(tag)) => {
                    self.send_error(&mut stream, ErrorCode::UnexpectedType, &format!("unknown type tag {tag}"));
                    return;
                }
                Err(e) => {
                    self.send_error(&mut stream, ErrorCode::Malformed, &e.to_string());
                    return;
                }
            };
            let result = match frame.kind {
                MessageType::Hello => self.on_hello(&frame, &mut bound, &mut stream),
                MessageType::UploadBatch => self.on_batch(&frame, bound),
                MessageType::UploadDone => self.on_done(&frame, bound, &mut stream),
                MessageType::ModelRequest => self.on_model_request(&frame, &mut stream),
                MessageType::ModelChunk | MessageType::Error => reject(
                    ErrorCode::UnexpectedType,
                    format!("{:?} is not accepted by the server", frame.kind),
                ),
            };
            if let Err((code, msg)) = result {
                self.send_error(&mut stream, code, &msg);
                return;
            }
        }
    }

    fn send_error<S: Write>(&self, stream: &mut S, code: ErrorCode, msg: &str) {
        self.lock().errors += 1;
        let _ = write_frame(stream, &Frame::new(MessageType::Error, 0, 0, error_payload(code, msg)));
    }

    fn reply<S: Write>(stream: &mut S, frame: Frame) -> Reply {
        // the peer vanishing after we committed is not a protocol error
        let _ = write_frame(stream, &frame);
        Ok(())
    }

    fn on_hello<S: Write>(&self, f: &Frame, bound: &mut Option<u32>, stream: &mut S) -> Reply {
        let geometry = parse_hello(&f.payload).or_else(|e| reject(ErrorCode::Malformed, e.to_string()))?;
        if bound.is_some_and(|c| c != f.client_id) {
            return reject(ErrorCode::ClientMismatch, "connection already bound to another client");
        }
        let mut st = self.lock();
        let st = &mut *st;
        match st.geometry {
            Some(g) if g != geometry => {
                return reject(ErrorCode::GeometryMismatch, format!("server holds {g:?}, client sent {geometry:?}"));
            }
            Some(_) => {}
            None => st.geometry = Some(geometry),
        }
        let ack = match st.sessions.get_mut(&f.client_id) {
            Some(s) if s.state == SessionState::Done => {
                return reject(ErrorCode::SessionClosed, format!("client {} already completed its upload", f.client_id));
            }
            Some(s) => {
                s.connections += 1;
                HelloAck {
                    last_seq: s.last_seq,
                    records: s.records,
                }
            }
            None => {
                if st.manifest.is_some() {
                    return reject(ErrorCode::SessionClosed, "dataset is already sealed");
                }
                let file = format!("client-{:08}.pced", f.client_id);
                let writer = ShardWriter::create(self.cfg.out_dir.join(&file), geometry)
                    .or_else(|e| reject(ErrorCode::Internal, e.to_string()))?;
                st.sessions.insert(
                    f.client_id,
                    Session {
                        writer,
                        file,
                        last_seq: 0,
                        records: 0,
                        state: SessionState::Open,
                        connections: 1,
                    },
                );
                *st.logical_sessions.entry(f.client_id).or_insert(0) += 1;
                HelloAck { last_seq: 0, records: 0 }
            }
        };
        *bound = Some(f.client_id);
        Self::reply(stream, Frame::new(MessageType::Hello, f.client_id, f.seq, ack.encode()))
    }

    fn on_batch(&self, f: &Frame, bound: Option<u32>) -> Reply {
        let client = self.check_bound(f, bound)?;
        let mut st = self.lock();
        let st = &mut *st;
        let geometry = st.geometry.expect("bound sessions have a geometry");
        let session = st.sessions.get_mut(&client).expect("bound sessions exist");
        if session.state == SessionState::Done {
            return reject(ErrorCode::SessionClosed, "upload already completed");
        }
        if f.seq <= session.last_seq {
            // retransmission of a committed batch
            return Ok(());
        }
        if f.seq != session.last_seq + 1 {
            return reject(
                ErrorCode::SequenceGap,
                format!("expected seq {}, got {}", session.last_seq + 1, f.seq),
            );
        }
        let rl = geometry.record_len();
        if f.payload.is_empty() || !f.payload.len().is_multiple_of(rl) {
            return reject(
                ErrorCode::BadRecord,
                format!("batch of {} bytes is not a whole number of {rl}-byte records", f.payload.len()),
            );
        }
        let mut ids = Vec::with_capacity(f.payload.len() / rl);
        for raw in f.payload.chunks_exact(rl) {
            let rec = ShardRecord::from_bytes(raw, &geometry).or_else(|e| reject(ErrorCode::BadRecord, e.to_string()))?;
            if rec.client_id != client {
                return reject(ErrorCode::ClientMismatch, format!("record for client {} in session {client}", rec.client_id));
            }
            let id = rec.id();
            if st.seen.contains(&id) || ids.contains(&id) {
                return reject(
                    ErrorCode::Replay,
                    format!("duplicate record (client {}, image {}, epoch {})", id.client_id, id.image_id, id.epoch),
                );
            }
            ids.push(id);
        }
        session
            .writer
            .append_raw(&f.payload)
            .and_then(|_| session.writer.commit())
            .or_else(|e| reject(ErrorCode::Internal, e.to_string()))?;
        session.last_seq = f.seq;
        session.records += ids.len() as u64;
        st.seen.extend(ids);
        Ok(())
    }

    fn on_done<S: Write>(&self, f: &Frame, bound: Option<u32>, stream: &mut S) -> Reply {
        let client = self.check_bound(f, bound)?;
        let claimed = parse_u64(&f.payload).or_else(|e| reject(ErrorCode::Malformed, e.to_string()))?;
        let mut st = self.lock();
        let session = st.sessions.get_mut(&client).expect("bound sessions exist");
        if session.state == SessionState::Open {
            if f.seq != session.last_seq + 1 {
                return reject(
                    ErrorCode::SequenceGap,
                    format!("UPLOAD_DONE seq {} but last committed is {}", f.seq, session.last_seq),
                );
            }
            if claimed != session.records {
                return reject(
                    ErrorCode::BadRecord,
                    format!("client reports {claimed} records, server committed {}", session.records),
                );
            }
            session.last_seq = f.seq;
            session.state = SessionState::Done;
        }
        let records = session.records;
        self.maybe_seal(&mut st).or_else(|e| reject(ErrorCode::Internal, e.to_string()))?;
        drop(st);
        Self::reply(stream, Frame::new(MessageType::UploadDone, client, f.seq, u64_payload(records)))
    }

    fn check_bound(&self, f: &Frame, bound: Option<u32>) -> Result<u32, (ErrorCode, String)> {
        match bound {
            None => reject(ErrorCode::UnexpectedType, format!("{:?} before HELLO", f.kind)),
            Some(c) if c != f.client_id => {
                reject(ErrorCode::ClientMismatch, format!("frame for client {} on session {c}", f.client_id))
            }
            Some(c) => Ok(c),
        }
    }

    fn maybe_seal(&self, st: &mut State) -> crate::error::Result<()> {
        if st.manifest.is_some() {
            return Ok(());
        }
        let done = st.sessions.values().filter(|s| s.state == SessionState::Done).count();
        if done < self.cfg.expected_clients {
            return Ok(());
        }
        let geometry = st.geometry.expect("sessions imply geometry");
        let mut manifest = DatasetManifest::new(geometry);
        for s in st.sessions.values().filter(|s| s.state == SessionState::Done) {
            let bytes = fs::read(self.cfg.out_dir.join(&s.file))?;
            manifest.add_shard(&s.file, &bytes)?;
        }
        manifest.save(self.cfg.out_dir.join(MANIFEST_FILE))?;
        st.manifest = Some(manifest);
        self.sealed.notify_all();
        Ok(())
    }

    fn on_model_request<S: Write>(&self, f: &Frame, stream: &mut S) -> Reply {
        let Some(model) = self.lock().model.clone() else {
            return reject(ErrorCode::NoModel, "no model artifact is available");
        };
        let chunk = self.cfg.model_chunk_size.max(1);
        let header = ModelHeader {
            total_len: model.len() as u64,
            chunks: model.len().div_ceil(chunk) as u32,
            sha256: Sha256::digest(&model[..]).into(),
        };
        let frames = std::iter::once(Frame::new(MessageType::ModelChunk, f.client_id, 0, header.encode())).chain(
            model
                .chunks(chunk)
                .enumerate()
                .map(|(i, c)| Frame::new(MessageType::ModelChunk, f.client_id, i as u64 + 1, c.to_vec())),
        );
        for fr in frames {
            if write_frame(stream, &fr).is_err() {
                break;
            }
        }
        Ok(())
    }
}

/// A running TCP server.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub server: Arc<Server>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

/// Binds `endpoint` and accepts client sessions on a background thread.
pub fn serve(endpoint: &str, out_dir: impl AsRef<Path>, expected_clients: usize) -> io::Result<ServerHandle> {
    serve_with(endpoint, ServerConfig::new(out_dir.as_ref(), expected_clients))
}

pub fn serve_with(endpoint: &str, cfg: ServerConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(endpoint)?;
    let addr = listener.local_addr()?;
    let server = Arc::new(Server::new(cfg)?);
    let stop = Arc::new(AtomicBool::new(false));
    let accept = {
        let server = Arc::clone(&server);
        let stop = Arc::clone(&stop);
        thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let server = Arc::clone(&server);
                thread::spawn(move || server.handle_connection(stream));
            }
        })
    };
    Ok(ServerHandle {
        addr,
        server,
        stop,
        accept: Some(accept),
    })
}
