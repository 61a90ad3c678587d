//! TCP full mesh between worker processes.
//!
//! A hostfile lists one `<id> <host>:<port>` pair per line (`#` starts a
//! comment). Every node listens on its own address, dials every lower id and
//! accepts every higher one; the dialler announces itself with an 8-byte
//! handshake (`b"FTSG"` then its id, little endian). Frames are the
//! [`wire`](crate::wire) encoding written back to back.
//!
//! One reader thread per peer feeds a single event queue. End of stream is
//! reported as [`Event::PeerDown`]; a background heartbeat thread reports
//! silent peers as [`Event::Suspect`]. Connections are never re-established.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::transport::{Event, HeartbeatConfig, HeartbeatMonitor, MailboxStats, RecvError, SendError, Transport};
use crate::wire::{Op, WireMessage, HEADER_LEN};
use crate::NodeId;

const HANDSHAKE: &[u8; 4] = b"FTSG";

#[derive(Debug, Error)]
pub enum TcpError {
    #[error("hostfile line {line}: {msg}")]
    Hostfile { line: usize, msg: String },
    #[error("node {0} is not in the hostfile")]
    NotListed(NodeId),
    #[error("could not reach node {peer} at {addr}: {source}")]
    Connect {
        peer: NodeId,
        addr: SocketAddr,
        source: io::Error,
    },
    #[error("bad handshake from {0}")]
    Handshake(SocketAddr),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn parse_hostfile(text: &str) -> Result<BTreeMap<NodeId, SocketAddr>, TcpError> {
    let mut hosts = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| TcpError::Hostfile { line: i + 1, msg };
        let mut parts = line.split_whitespace();
        let (Some(id), Some(addr), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err("expected `<id> <host>:<port>`".into()));
        };
        let id: NodeId = id.parse().map_err(|_| err(format!("bad node id `{id}`")))?;
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| err(format!("bad address `{addr}`: {e}")))?
            .next()
            .ok_or_else(|| err(format!("`{addr}` resolves to nothing")))?;
        if hosts.insert(id, addr).is_some() {
            return Err(err(format!("node {id} listed twice")));
        }
    }
    Ok(hosts)
}

#[derive(Clone, Copy, Debug)]
pub struct TcpConfig {
    pub heartbeat: HeartbeatConfig,
    /// How long to keep retrying while peers start up.
    pub connect_timeout: Duration,
}

impl Default for TcpConfig {
    fn default() -> Self {
        TcpConfig {
            heartbeat: HeartbeatConfig::default(),
            connect_timeout: Duration::from_secs(30),
        }
    }
}

struct Shared {
    writers: BTreeMap<NodeId, Mutex<TcpStream>>,
    down: Mutex<BTreeSet<NodeId>>,
    stats: Mutex<MailboxStats>,
    monitor: Mutex<HeartbeatMonitor>,
    closing: AtomicBool,
    started: Instant,
}

impl Shared {
    fn write(&self, to: NodeId, bytes: &[u8]) -> Result<(), SendError> {
        if self.down.lock().expect("down set").contains(&to) {
            self.stats.lock().expect("stats").dropped += 1;
            return Err(SendError::Dead(to));
        }
        let w = self.writers.get(&to).ok_or(SendError::Unknown(to))?;
        let ok = w.lock().expect("writer").write_all(bytes).is_ok();
        if !ok {
            self.down.lock().expect("down set").insert(to);
            self.stats.lock().expect("stats").dropped += 1;
            return Err(SendError::Dead(to));
        }
        let mut s = self.stats.lock().expect("stats");
        s.sent += 1;
        s.bytes_sent += bytes.len() as u64;
        Ok(())
    }
}

pub struct TcpTransport {
    me: NodeId,
    shared: Arc<Shared>,
    events: Receiver<Event>,
}

impl TcpTransport {
    /// Builds the full mesh. Blocks until every listed peer is connected.
    pub fn connect(me: NodeId, hosts: &BTreeMap<NodeId, SocketAddr>, cfg: TcpConfig) -> Result<Self, TcpError> {
        let own = *hosts.get(&me).ok_or(TcpError::NotListed(me))?;
        let listener = TcpListener::bind(own)?;
        let started = Instant::now();
        let mut streams = BTreeMap::new();
        for (&peer, &addr) in hosts.range(..me) {
            let mut s = dial(addr, started + cfg.connect_timeout).map_err(|source| TcpError::Connect { peer, addr, source })?;
            s.write_all(HANDSHAKE)?;
            s.write_all(&me.to_le_bytes())?;
            streams.insert(peer, s);
        }
        let higher = hosts.range(me + 1..).count();
        while streams.len() < hosts.len() - 1 {
            let (mut s, addr) = listener.accept()?;
            let mut hs = [0u8; 8];
            s.read_exact(&mut hs)?;
            let peer = NodeId::from_le_bytes(hs[4..].try_into().expect("4 bytes"));
            if &hs[..4] != HANDSHAKE || peer <= me || !hosts.contains_key(&peer) || streams.contains_key(&peer) {
                return Err(TcpError::Handshake(addr));
            }
            streams.insert(peer, s);
        }
        debug_assert_eq!(streams.range(me + 1..).count(), higher);

        let (tx, events) = mpsc::channel();
        let mut writers = BTreeMap::new();
        let mut readers = Vec::new();
        for (peer, s) in streams {
            s.set_nodelay(true)?;
            readers.push((peer, s.try_clone()?));
            writers.insert(peer, Mutex::new(s));
        }
        let now = started.elapsed();
        let shared = Arc::new(Shared {
            monitor: Mutex::new(HeartbeatMonitor::new(writers.keys().copied(), now, cfg.heartbeat.timeout)),
            writers,
            down: Mutex::new(BTreeSet::new()),
            stats: Mutex::new(MailboxStats::default()),
            closing: AtomicBool::new(false),
            started,
        });
        for (peer, s) in readers {
            let (sh, tx) = (shared.clone(), tx.clone());
            thread::Builder::new()
                .name(format!("tcp-rx-{peer}"))
                .spawn(move || read_loop(peer, s, &sh, &tx))?;
        }
        let sh = shared.clone();
        thread::Builder::new()
            .name("tcp-heartbeat".into())
            .spawn(move || heartbeat_loop(me, &sh, &tx, cfg.heartbeat))?;
        Ok(TcpTransport { me, shared, events })
    }
}

fn dial(addr: SocketAddr, give_up: Instant) -> io::Result<TcpStream> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_secs(1)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= give_up => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn read_loop(peer: NodeId, s: TcpStream, sh: &Shared, tx: &Sender<Event>) {
    let mut r = BufReader::new(s);
    let mut header = [0u8; HEADER_LEN];
    loop {
        if r.read_exact(&mut header).is_err() {
            break;
        }
        let Ok(len) = WireMessage::payload_len(&header) else {
            break;
        };
        let mut frame = header.to_vec();
        frame.resize(HEADER_LEN + len, 0);
        if r.read_exact(&mut frame[HEADER_LEN..]).is_err() {
            break;
        }
        match WireMessage::decode(&frame) {
            Ok(m) if m.op == Op::Heartbeat => sh.monitor.lock().expect("monitor").heard(peer, sh.started.elapsed()),
            Ok(m) => {
                {
                    let mut st = sh.stats.lock().expect("stats");
                    st.received += 1;
                    st.bytes_received += frame.len() as u64;
                }
                if tx.send(Event::Message(m)).is_err() {
                    return;
                }
            }
            Err(_) => sh.stats.lock().expect("stats").dropped += 1,
        }
    }
    sh.down.lock().expect("down set").insert(peer);
    let _ = tx.send(Event::PeerDown(peer));
}

fn heartbeat_loop(me: NodeId, sh: &Shared, tx: &Sender<Event>, cfg: HeartbeatConfig) {
    let beat = WireMessage::new(Op::Heartbeat, me, 0, 0).encode();
    while !sh.closing.load(Ordering::Relaxed) {
        let live: Vec<NodeId> = sh.monitor.lock().expect("monitor").live_peers().collect();
        for p in live {
            let _ = sh.write(p, &beat);
        }
        let fresh = sh.monitor.lock().expect("monitor").check(sh.started.elapsed());
        for p in fresh {
            if tx.send(Event::Suspect(p)).is_err() {
                return;
            }
        }
        thread::sleep(cfg.interval);
    }
}

impl Transport for TcpTransport {
    fn me(&self) -> NodeId {
        self.me
    }

    fn send(&mut self, to: NodeId, msg: &WireMessage) -> Result<(), SendError> {
        self.shared.write(to, &msg.encode())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Event, RecvError> {
        match self.events.recv_timeout(timeout) {
            Ok(ev) => Ok(ev),
            Err(RecvTimeoutError::Timeout) => Err(RecvError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(RecvError::Shutdown),
        }
    }

    fn now(&self) -> Duration {
        self.shared.started.elapsed()
    }

    fn advance(&mut self, _work: Duration) {}

    fn kill_self(&mut self) {
        // SAFETY: signalling our own pid has no memory-safety implications.
        unsafe {
            libc::kill(libc::getpid(), libc::SIGKILL);
        }
        unreachable!("SIGKILL delivered to self");
    }

    fn stats(&self) -> MailboxStats {
        self.shared.stats.lock().expect("stats").clone()
    }

    fn note_dropped(&mut self) {
        self.shared.stats.lock().expect("stats").dropped += 1;
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shared.closing.store(true, Ordering::Relaxed);
        for w in self.shared.writers.values() {
            if let Ok(s) = w.lock() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }
}
