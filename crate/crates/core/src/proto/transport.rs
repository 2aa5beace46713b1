//! Byte-stream transports: TCP, and an in-process loopback pipe with fault
//! injection for tests and simulations.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::server::Server;

pub trait Stream: Read + Write + Send {}

impl<T: Read + Write + Send> Stream for T {}

/// Opens a fresh connection to a server.
pub trait Connector: Send + Sync {
    fn connect(&self) -> io::Result<Box<dyn Stream>>;
}

#[derive(Debug, Clone)]
pub struct TcpConnector {
    pub addr: SocketAddr,
    pub timeout: Option<Duration>,
}

impl TcpConnector {
    pub fn new(addr: SocketAddr) -> Self {
        TcpConnector {
            addr,
            timeout: Some(Duration::from_secs(30)),
        }
    }
}

impl Connector for TcpConnector {
    fn connect(&self) -> io::Result<Box<dyn Stream>> {
        let s = TcpStream::connect(self.addr)?;
        s.set_read_timeout(self.timeout)?;
        s.set_nodelay(true)?;
        Ok(Box::new(s))
    }
}

/// One end of an in-memory duplex pipe. Dropping an end closes it; the peer
/// then reads EOF and its writes fail.
pub struct PipeEnd {
    tx: Option<Sender<Vec<u8>>>,
    rx: Receiver<Vec<u8>>,
    pending: VecDeque<u8>,
}

pub fn duplex() -> (PipeEnd, PipeEnd) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        PipeEnd {
            tx: Some(a_tx),
            rx: a_rx,
            pending: VecDeque::new(),
        },
        PipeEnd {
            tx: Some(b_tx),
            rx: b_rx,
            pending: VecDeque::new(),
        },
    )
}

impl PipeEnd {
    /// Closes the sending half; the peer sees EOF after draining.
    pub fn close_write(&mut self) {
        self.tx = None;
    }
}

impl Read for PipeEnd {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        while self.pending.is_empty() {
            match self.rx.recv() {
                Ok(chunk) => self.pending.extend(chunk),
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len());
        for (dst, src) in buf.iter_mut().zip(self.pending.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}

impl Write for PipeEnd {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let tx = self.tx.as_ref().ok_or(io::ErrorKind::BrokenPipe)?;
        tx.send(buf.to_vec()).map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// A fault applied to one loopback connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Cut the connection once the client has written this many bytes; the
    /// write that crosses the limit is delivered only up to it.
    DropAfterBytes(usize),
    /// XOR `mask` into the byte at `offset` of the server-to-client stream.
    CorruptInbound { offset: usize, mask: u8 },
    /// Hold the connection back before the server sees it.
    Delay(Duration),
}

/// Connection-ordered fault schedule: the k-th `connect` takes the k-th entry
/// (`None` meaning a clean connection).
#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    queue: Arc<Mutex<VecDeque<Option<Fault>>>>,
}

impl FaultPlan {
    pub fn new(faults: impl IntoIterator<Item = Option<Fault>>) -> Self {
        FaultPlan {
            queue: Arc::new(Mutex::new(faults.into_iter().collect())),
        }
    }

    fn next(&self) -> Option<Fault> {
        self.queue.lock().unwrap().pop_front().flatten()
    }
}

struct FaultyStream {
    inner: PipeEnd,
    fault: Option<Fault>,
    written: usize,
    read: usize,
    dead: bool,
}

impl Read for FaultyStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.dead {
            return Err(io::ErrorKind::ConnectionReset.into());
        }
        let n = self.inner.read(buf)?;
        if let Some(Fault::CorruptInbound { offset, mask }) = self.fault {
            if (self.read..self.read + n).contains(&offset) {
                buf[offset - self.read] ^= mask;
            }
        }
        self.read += n;
        Ok(n)
    }
}

impl Write for FaultyStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.dead {
            return Err(io::ErrorKind::ConnectionReset.into());
        }
        if let Some(Fault::DropAfterBytes(limit)) = self.fault {
            if self.written + buf.len() > limit {
                let keep = limit - self.written;
                if keep > 0 {
                    self.inner.write_all(&buf[..keep])?;
                }
                self.written = limit;
                self.inner.close_write();
                self.dead = true;
                return Err(io::ErrorKind::ConnectionReset.into());
            }
        }
        let n = self.inner.write(buf)?;
        self.written += n;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Connects straight into an in-process [`Server`], one handler thread per
/// connection.
pub struct LoopbackConnector {
    server: Arc<Server>,
    faults: FaultPlan,
}

impl LoopbackConnector {
    pub fn new(server: Arc<Server>) -> Self {
        LoopbackConnector {
            server,
            faults: FaultPlan::default(),
        }
    }

    pub fn with_faults(server: Arc<Server>, faults: FaultPlan) -> Self {
        LoopbackConnector { server, faults }
    }
}

impl Connector for LoopbackConnector {
    fn connect(&self) -> io::Result<Box<dyn Stream>> {
        let (client, server_end) = duplex();
        let fault = self.faults.next();
        let server = Arc::clone(&self.server);
        thread::spawn(move || {
            if let Some(Fault::Delay(d)) = fault {
                thread::sleep(d);
            }
            server.handle_connection(server_end);
        });
        Ok(Box::new(FaultyStream {
            inner: client,
            fault,
            written: 0,
            read: 0,
            dead: false,
        }))
    }
}
