//! In-process network.
//!
//! Every node has a worker task and, optionally, a heartbeat task. Each task
//! runs on its own thread and owns an inbox ordered by delivery time.
//!
//! In [`SimMode::Deterministic`] exactly one task runs at a time. A task gives
//! up the token only when it blocks (receive, or [`Transport::advance`]); the
//! scheduler then picks the next runnable task with a seeded RNG, and moves
//! virtual time forward to the next deadline or delivery when nothing is
//! runnable. Delivery time follows a simple latency model: per-sender link
//! serialization (`send_overhead + bytes * ns_per_byte`) plus a fixed
//! `base_latency`, clamped so every sender/receiver pair stays FIFO. A kill
//! stops the victim at once; frames it already sent are still delivered.
//!
//! In [`SimMode::Free`] tasks run concurrently on real time and messages are
//! deliverable immediately.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::transport::{Event, HeartbeatConfig, HeartbeatMonitor, MailboxStats, RecvError, SendError, Transport};
use crate::wire::{Op, WireMessage};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimMode {
    Deterministic,
    Free,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub mode: SimMode,
    pub seed: u64,
    pub base_latency: Duration,
    pub ns_per_byte: f64,
    pub send_overhead: Duration,
    /// Peers learn of a kill through an immediate connection-reset notice.
    /// When off, only the heartbeat service detects failures.
    pub connection_reset_notices: bool,
    pub heartbeat: Option<HeartbeatConfig>,
    /// Virtual time after which a run is declared stalled.
    pub horizon: Duration,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: SimMode::Deterministic,
            seed: 0,
            base_latency: Duration::from_micros(20),
            ns_per_byte: 1.0,
            send_overhead: Duration::from_micros(1),
            connection_reset_notices: true,
            heartbeat: Some(HeartbeatConfig::default()),
            horizon: Duration::from_secs(24 * 3600),
        }
    }
}

impl SimConfig {
    pub fn deterministic(seed: u64) -> Self {
        SimConfig {
            seed,
            ..Self::default()
        }
    }

    pub fn free() -> Self {
        SimConfig {
            mode: SimMode::Free,
            ..Self::default()
        }
    }
}

const WORKER: u8 = 0;
const HEARTBEAT: u8 = 1;

type TaskId = usize;

enum Body {
    Frame(Vec<u8>),
    Notice(Event),
}

struct Envelope {
    sent_at: u64,
    body: Body,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Pending,
    Running,
    Blocked { deadline: u64, recv: bool },
    Finished,
}

struct Task {
    node: NodeId,
    daemon: bool,
    status: Status,
    inbox: BTreeMap<(u64, u64), Envelope>,
}

struct State {
    now: u64,
    tasks: Vec<Task>,
    index: BTreeMap<(NodeId, u8), TaskId>,
    running: Option<TaskId>,
    started: bool,
    rng: ChaCha8Rng,
    dead: BTreeSet<NodeId>,
    nic_free: BTreeMap<NodeId, u64>,
    last_delivery: BTreeMap<(TaskId, TaskId), u64>,
    next_seq: u64,
    stats: BTreeMap<NodeId, MailboxStats>,
    shutdown: bool,
    stalled: bool,
    kills: Vec<(NodeId, Duration)>,
    switches: u64,
}

struct Shared {
    state: Mutex<State>,
    cvs: Vec<Condvar>,
    cfg: SimConfig,
    epoch: Instant,
}

/// Handle on a running in-process network.
#[derive(Clone)]
pub struct SimNet {
    shared: Arc<Shared>,
}

/// The tasks belonging to one node.
pub struct NodeEndpoints {
    pub node: NodeId,
    pub worker: SimEndpoint,
    pub heartbeat: Option<SimEndpoint>,
}

impl SimNet {
    pub fn new(cfg: SimConfig, nodes: &[NodeId]) -> (SimNet, Vec<NodeEndpoints>) {
        let mut tasks = Vec::new();
        let mut index = BTreeMap::new();
        let mut stats = BTreeMap::new();
        for &n in nodes {
            stats.insert(n, MailboxStats::default());
            index.insert((n, WORKER), tasks.len());
            tasks.push(Task {
                node: n,
                daemon: false,
                status: Status::Pending,
                inbox: BTreeMap::new(),
            });
            if cfg.heartbeat.is_some() {
                index.insert((n, HEARTBEAT), tasks.len());
                tasks.push(Task {
                    node: n,
                    daemon: true,
                    status: Status::Pending,
                    inbox: BTreeMap::new(),
                });
            }
        }
        let cvs = (0..tasks.len()).map(|_| Condvar::new()).collect();
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                now: 0,
                tasks,
                index,
                running: None,
                started: false,
                rng: ChaCha8Rng::seed_from_u64(cfg.seed),
                dead: BTreeSet::new(),
                nic_free: BTreeMap::new(),
                last_delivery: BTreeMap::new(),
                next_seq: 0,
                stats,
                shutdown: false,
                stalled: false,
                kills: Vec::new(),
                switches: 0,
            }),
            cvs,
            cfg,
            epoch: Instant::now(),
        });
        let st = shared.state.lock().expect("fresh lock");
        let endpoints = nodes
            .iter()
            .map(|&n| {
                let ep = |port| SimEndpoint {
                    shared: shared.clone(),
                    task: st.index[&(n, port)],
                    node: n,
                    entered: Cell::new(false),
                    finished: false,
                };
                NodeEndpoints {
                    node: n,
                    worker: ep(WORKER),
                    heartbeat: st.index.contains_key(&(n, HEARTBEAT)).then(|| ep(HEARTBEAT)),
                }
            })
            .collect();
        drop(st);
        (SimNet { shared }, endpoints)
    }

    pub fn config(&self) -> &SimConfig {
        &self.shared.cfg
    }

    pub fn stats(&self, node: NodeId) -> MailboxStats {
        self.lock().stats.get(&node).cloned().unwrap_or_default()
    }

    pub fn kills(&self) -> Vec<(NodeId, Duration)> {
        self.lock().kills.clone()
    }

    pub fn is_dead(&self, node: NodeId) -> bool {
        self.lock().dead.contains(&node)
    }

    pub fn stalled(&self) -> bool {
        self.lock().stalled
    }

    /// Number of scheduling decisions made so far.
    pub fn switches(&self) -> u64 {
        self.lock().switches
    }

    pub fn now(&self) -> Duration {
        now_of(&self.shared, &self.lock())
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        lock(&self.shared)
    }
}

fn lock(shared: &Shared) -> MutexGuard<'_, State> {
    shared.state.lock().unwrap_or_else(|e| e.into_inner())
}

fn now_of(shared: &Shared, st: &State) -> Duration {
    match shared.cfg.mode {
        SimMode::Deterministic => Duration::from_nanos(st.now),
        SimMode::Free => shared.epoch.elapsed(),
    }
}

fn now_ns(shared: &Shared, st: &State) -> u64 {
    now_of(shared, st).as_nanos() as u64
}

fn dur_ns(d: Duration) -> u64 {
    d.as_nanos().min(u64::MAX as u128) as u64
}

impl State {
    fn is_ready(&self, t: &Task) -> bool {
        match t.status {
            Status::Pending => true,
            Status::Blocked { deadline, recv } => {
                deadline <= self.now
                    || self.dead.contains(&t.node)
                    || (t.daemon && self.shutdown)
                    || (recv && t.inbox.keys().next().is_some_and(|k| k.0 <= self.now))
            }
            Status::Running | Status::Finished => false,
        }
    }

    fn next_wake(t: &Task) -> Option<u64> {
        match t.status {
            Status::Blocked { deadline, recv } => {
                let mail = if recv { t.inbox.keys().next().map(|k| k.0) } else { None };
                Some(mail.map_or(deadline, |m| m.min(deadline)))
            }
            _ => None,
        }
    }

    fn update_shutdown(&mut self) {
        if !self.shutdown
            && self
                .tasks
                .iter()
                .all(|t| t.daemon || t.status == Status::Finished)
        {
            self.shutdown = true;
        }
    }

    fn push(&mut self, to: TaskId, deliver: u64, env: Envelope) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.tasks[to].inbox.insert((deliver, seq), env);
    }
}

/// Hands the token to a random runnable task, advancing virtual time as
/// needed. Called with the lock held by a task that just blocked or finished.
fn schedule(shared: &Shared, st: &mut State) {
    st.running = None;
    loop {
        st.update_shutdown();
        let ready: Vec<TaskId> = (0..st.tasks.len()).filter(|&i| st.is_ready(&st.tasks[i])).collect();
        if !ready.is_empty() {
            let pick = ready[st.rng.gen_range(0..ready.len())];
            st.running = Some(pick);
            st.switches += 1;
            st.tasks[pick].status = Status::Running;
            shared.cvs[pick].notify_all();
            return;
        }
        if st.tasks.iter().all(|t| t.status == Status::Finished) {
            return;
        }
        let next = st.tasks.iter().filter_map(State::next_wake).min();
        match next {
            Some(t) if t <= dur_ns(shared.cfg.horizon) => st.now = st.now.max(t),
            _ => {
                st.stalled = true;
                for cv in &shared.cvs {
                    cv.notify_all();
                }
                return;
            }
        }
    }
}

/// One task's view of the network; implements [`Transport`].
pub struct SimEndpoint {
    shared: Arc<Shared>,
    task: TaskId,
    node: NodeId,
    entered: Cell<bool>,
    finished: bool,
}

impl SimEndpoint {
    fn deterministic(&self) -> bool {
        self.shared.cfg.mode == SimMode::Deterministic
    }

    /// Blocks until this task holds the token. Only meaningful under the
    /// deterministic scheduler.
    fn wait_turn<'a>(&self, mut st: MutexGuard<'a, State>) -> MutexGuard<'a, State> {
        while st.running != Some(self.task) && !st.stalled {
            st = self.shared.cvs[self.task]
                .wait(st)
                .unwrap_or_else(|e| e.into_inner());
        }
        st
    }

    fn enter(&self) -> MutexGuard<'_, State> {
        let mut st = lock(&self.shared);
        if self.deterministic() && !self.entered.get() {
            if !st.started {
                st.started = true;
                schedule(&self.shared, &mut st);
            }
            st = self.wait_turn(st);
        }
        self.entered.set(true);
        st
    }

    /// Blocks the running task until `deadline` (or mail, if `recv`).
    fn block<'a>(&self, mut st: MutexGuard<'a, State>, deadline: u64, recv: bool) -> MutexGuard<'a, State> {
        st.tasks[self.task].status = Status::Blocked { deadline, recv };
        schedule(&self.shared, &mut st);
        self.wait_turn(st)
    }

    /// Delivers a notice to this node's worker immediately.
    pub fn notify_local(&mut self, event: Event) {
        let shared = self.shared.clone();
        let mut st = self.enter();
        if st.dead.contains(&self.node) {
            return;
        }
        let to = st.index[&(self.node, WORKER)];
        let now = now_ns(&shared, &st);
        st.push(
            to,
            now,
            Envelope {
                sent_at: now,
                body: Body::Notice(event),
            },
        );
        shared.cvs[to].notify_all();
    }

    /// Marks this task finished. A worker that finishes normally looks to
    /// its peers like a closed connection.
    pub fn finish(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        let shared = self.shared.clone();
        let task = self.task;
        let node = self.node;
        let mut st = self.enter();
        let daemon = st.tasks[task].daemon;
        if !daemon && !st.dead.contains(&node) && shared.cfg.connection_reset_notices {
            let now = now_ns(&shared, &st);
            let base = dur_ns(shared.cfg.base_latency);
            let peers: Vec<(NodeId, TaskId)> = st
                .index
                .iter()
                .filter(|((n, p), _)| *p == WORKER && *n != node && !st.dead.contains(n))
                .map(|((n, _), t)| (*n, *t))
                .collect();
            for (_, to) in peers {
                let last = st.last_delivery.get(&(task, to)).copied().unwrap_or(0);
                let at = (now + base).max(last);
                st.last_delivery.insert((task, to), at);
                st.push(
                    to,
                    at,
                    Envelope {
                                sent_at: now,
                        body: Body::Notice(Event::PeerDown(node)),
                    },
                );
                shared.cvs[to].notify_all();
            }
        }
        st.tasks[task].status = Status::Finished;
        st.tasks[task].inbox.clear();
        if self.shared.cfg.mode == SimMode::Deterministic {
            if st.running == Some(task) {
                schedule(&shared, &mut st);
            }
        } else {
            st.update_shutdown();
            if st.shutdown {
                for cv in &shared.cvs {
                    cv.notify_all();
                }
            }
        }
    }

    fn pop_ready(&self, st: &mut State, now: u64, free: bool) -> Option<Envelope> {
        let inbox = &mut st.tasks[self.task].inbox;
        let key = *inbox.keys().next()?;
        if !free && key.0 > now {
            return None;
        }
        inbox.remove(&key)
    }
}

impl Drop for SimEndpoint {
    fn drop(&mut self) {
        self.finish();
    }
}

impl Transport for SimEndpoint {
    fn me(&self) -> NodeId {
        self.node
    }

    fn send(&mut self, to: NodeId, msg: &WireMessage) -> Result<(), SendError> {
        let shared = self.shared.clone();
        let me = self.node;
        let from_task = self.task;
        let mut st = self.enter();
        if st.dead.contains(&me) {
            return Err(SendError::Killed);
        }
        let port = if msg.op == Op::Heartbeat { HEARTBEAT } else { WORKER };
        let Some(&dest) = st.index.get(&(to, port)) else {
            return Err(SendError::Unknown(to));
        };
        if st.dead.contains(&to) || st.tasks[dest].status == Status::Finished {
            st.stats.get_mut(&me).expect("registered").dropped += 1;
            return Err(SendError::Dead(to));
        }
        let bytes = msg.encode();
        let now = now_ns(&shared, &st);
        let deliver = match shared.cfg.mode {
            SimMode::Free => now,
            SimMode::Deterministic => {
                let tx = (bytes.len() as f64 * shared.cfg.ns_per_byte) as u64 + dur_ns(shared.cfg.send_overhead);
                let depart = now.max(st.nic_free.get(&me).copied().unwrap_or(0));
                st.nic_free.insert(me, depart + tx);
                let at = depart + tx + dur_ns(shared.cfg.base_latency);
                let last = st.last_delivery.get(&(from_task, dest)).copied().unwrap_or(0);
                let at = at.max(last);
                st.last_delivery.insert((from_task, dest), at);
                at
            }
        };
        let s = st.stats.get_mut(&me).expect("registered");
        s.sent += 1;
        s.bytes_sent += bytes.len() as u64;
        st.push(
            dest,
            deliver,
            Envelope {
                sent_at: now,
                body: Body::Frame(bytes),
            },
        );
        if shared.cfg.mode == SimMode::Free {
            shared.cvs[dest].notify_all();
        }
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Event, RecvError> {
        let shared = self.shared.clone();
        let me = self.node;
        let task = self.task;
        let free = shared.cfg.mode == SimMode::Free;
        let mut st = self.enter();
        let deadline = now_ns(&shared, &st).saturating_add(dur_ns(timeout));
        loop {
            if st.dead.contains(&me) {
                return Err(RecvError::Killed);
            }
            if st.stalled {
                return Err(RecvError::Stalled);
            }
            let now = now_ns(&shared, &st);
            if let Some(env) = self.pop_ready(&mut st, now, free) {
                let s = st.stats.get_mut(&me).expect("registered");
                match env.body {
                    Body::Notice(ev) => return Ok(ev),
                    Body::Frame(bytes) => match WireMessage::decode(&bytes) {
                        Ok(m) => {
                            s.received += 1;
                            s.bytes_received += bytes.len() as u64;
                            s.latency_total += Duration::from_nanos(now.saturating_sub(env.sent_at));
                            return Ok(Event::Message(m));
                        }
                        Err(_) => {
                            s.dropped += 1;
                            continue;
                        }
                    },
                }
            }
            if st.tasks[task].daemon && st.shutdown {
                return Err(RecvError::Shutdown);
            }
            if now >= deadline {
                return Err(RecvError::Timeout);
            }
            if free {
                let wait = Duration::from_nanos(deadline - now);
                st = shared.cvs[task]
                    .wait_timeout(st, wait)
                    .unwrap_or_else(|e| e.into_inner())
                    .0;
            } else {
                st = self.block(st, deadline, true);
            }
        }
    }

    fn now(&self) -> Duration {
        now_of(&self.shared, &lock(&self.shared))
    }

    fn advance(&mut self, work: Duration) {
        if !self.deterministic() || work.is_zero() {
            return;
        }
        let st = self.enter();
        let deadline = st.now + dur_ns(work);
        let _st = self.block(st, deadline, false);
    }

    fn kill_self(&mut self) {
        let shared = self.shared.clone();
        let me = self.node;
        let mut st = self.enter();
        if !st.dead.insert(me) {
            return;
        }
        let now = now_ns(&shared, &st);
        st.kills.push((me, Duration::from_nanos(now)));
        for t in st.tasks.iter_mut().filter(|t| t.node == me) {
            t.inbox.clear();
        }
        if shared.cfg.connection_reset_notices {
            let mine: Vec<TaskId> = (0..st.tasks.len()).filter(|&t| st.tasks[t].node == me).collect();
            let peers: Vec<TaskId> = st
                .index
                .iter()
                .filter(|((n, p), t)| *p == WORKER && *n != me && !st.dead.contains(n) && st.tasks[**t].status != Status::Finished)
                .map(|(_, t)| *t)
                .collect();
            for to in peers {
                // frames already sent still arrive, ahead of the reset
                let at = mine
                    .iter()
                    .filter_map(|&from| st.last_delivery.get(&(from, to)).copied())
                    .fold(now + dur_ns(shared.cfg.base_latency), u64::max);
                st.push(
                    to,
                    at,
                    Envelope {
                                sent_at: now,
                        body: Body::Notice(Event::PeerDown(me)),
                    },
                );
            }
        }
        for cv in &shared.cvs {
            cv.notify_all();
        }
    }

    fn stats(&self) -> MailboxStats {
        lock(&self.shared).stats.get(&self.node).cloned().unwrap_or_default()
    }

    fn note_dropped(&mut self) {
        let node = self.node;
        if let Some(s) = lock(&self.shared).stats.get_mut(&node) {
            s.dropped += 1;
        }
    }
}

/// Builds a network over `nodes`, runs `body` once per node on its own
/// thread (heartbeat tasks alongside), and returns the results in node order.
pub fn run<R: Send>(cfg: SimConfig, nodes: &[NodeId], body: impl Fn(SimEndpoint) -> R + Sync) -> (SimNet, Vec<R>) {
    let hb = cfg.heartbeat;
    let (net, endpoints) = SimNet::new(cfg, nodes);
    let body = &body;
    let results = std::thread::scope(|s| {
        let mut workers = Vec::new();
        for ne in endpoints {
            if let (Some(mut ep), Some(hcfg)) = (ne.heartbeat, hb) {
                let peers = nodes.to_vec();
                std::thread::Builder::new()
                    .name(format!("hb-{}", ne.node))
                    .spawn_scoped(s, move || {
                        run_heartbeat(&mut ep, &peers, hcfg);
                        ep.finish();
                    })
                    .expect("spawn heartbeat thread");
            }
            let ep = ne.worker;
            workers.push(
                std::thread::Builder::new()
                    .name(format!("node-{}", ne.node))
                    .spawn_scoped(s, move || body(ep))
                    .expect("spawn worker thread"),
            );
        }
        workers
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    (net, results)
}

/// Heartbeat task body: announce liveness every `interval`, suspect peers
/// unheard from for `timeout`, and hand suspicions to the local worker.
/// Returns when the node dies or the run shuts down.
pub fn run_heartbeat(ep: &mut SimEndpoint, peers: &[NodeId], cfg: HeartbeatConfig) {
    let me = ep.me();
    let mut mon = HeartbeatMonitor::new(peers.iter().copied().filter(|&p| p != me), ep.now(), cfg.timeout);
    let beat = WireMessage::new(Op::Heartbeat, me, 0, 0);
    let mut next_beat = ep.now();
    loop {
        let now = ep.now();
        if now >= next_beat {
            let live: Vec<NodeId> = mon.live_peers().collect();
            for p in live {
                let _ = ep.send(p, &beat);
            }
            next_beat = now + cfg.interval;
        }
        let wait = next_beat.saturating_sub(ep.now());
        match ep.recv(wait) {
            Ok(Event::Message(m)) if m.op == Op::Heartbeat => mon.heard(m.sender, ep.now()),
            Ok(_) | Err(RecvError::Timeout) => {}
            Err(_) => return,
        }
        for p in mon.check(ep.now()) {
            ep.notify_local(Event::Suspect(p));
        }
    }
}

/// Runs [`run_heartbeat`] on a thread of its own.
pub fn spawn_heartbeat(mut ep: SimEndpoint, peers: Vec<NodeId>, cfg: HeartbeatConfig) -> JoinHandle<()> {
    std::thread::Builder::new()
        .name(format!("hb-{}", ep.me()))
        .spawn(move || {
            run_heartbeat(&mut ep, &peers, cfg);
            ep.finish();
        })
        .expect("spawn heartbeat thread")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::Payload;

    fn msg(from: NodeId, seq: u32) -> WireMessage {
        WireMessage::new(Op::Bcast, from, 0, seq).with_payload(Payload::Reals(vec![seq as f64]))
    }

    #[test]
    fn self_send_is_intact() {
        let cfg = SimConfig {
            heartbeat: None,
            ..SimConfig::deterministic(1)
        };
        let (_net, mut eps) = SimNet::new(cfg, &[0]);
        let mut ep = eps.remove(0).worker;
        let m = msg(0, 3).with_chunk(9).with_aux(4);
        ep.send(0, &m).unwrap();
        assert_eq!(ep.recv(Duration::from_secs(1)), Ok(Event::Message(m)));
        assert_eq!(ep.recv(Duration::from_secs(1)), Err(RecvError::Timeout));
    }

    #[test]
    fn virtual_time_moves_only_by_events() {
        let cfg = SimConfig {
            heartbeat: None,
            ..SimConfig::deterministic(5)
        };
        let (_net, mut eps) = SimNet::new(cfg, &[0]);
        let mut ep = eps.remove(0).worker;
        assert_eq!(ep.now(), Duration::ZERO);
        ep.advance(Duration::from_millis(7));
        assert_eq!(ep.now(), Duration::from_millis(7));
        assert_eq!(ep.recv(Duration::from_millis(3)), Err(RecvError::Timeout));
        assert_eq!(ep.now(), Duration::from_millis(10));
    }

    #[test]
    fn dead_destination_errors() {
        let cfg = SimConfig {
            heartbeat: None,
            ..SimConfig::deterministic(2)
        };
        let (net, eps) = SimNet::new(cfg, &[0, 1]);
        let mut it = eps.into_iter();
        let mut a = it.next().unwrap().worker;
        let mut b = it.next().unwrap().worker;
        let h = std::thread::spawn(move || {
            b.kill_self();
            assert_eq!(b.recv(Duration::from_secs(1)), Err(RecvError::Killed));
            assert_eq!(b.send(0, &msg(1, 0)), Err(SendError::Killed));
        });
        // either order of kill/recv: the peer-down notice arrives or send fails
        let first = a.recv(Duration::from_secs(1));
        assert_eq!(first, Ok(Event::PeerDown(1)));
        assert_eq!(a.send(1, &msg(0, 0)), Err(SendError::Dead(1)));
        drop(a);
        h.join().unwrap();
        assert!(net.is_dead(1));
        assert_eq!(net.stats(0).dropped, 1);
    }
}
