//! Collective operations over a [`Transport`], and the communicator that
//! shrinks itself to the surviving members after a failure.
//!
//! Every message carries the communicator epoch. Messages from an older
//! epoch are discarded on arrival, messages from a newer one are held until
//! this node catches up. A failure observed during a collective (connection
//! reset, heartbeat suspicion, timeout, or a shrink message from a peer)
//! revokes the communicator: the operation returns [`Outcome::Failed`] and
//! only [`Communicator::shrink`] is allowed until it has run.
//!
//! The `*_until_success` variants wrap each attempt in a gather/release
//! agreement round. A node that completes the round knows everyone finished
//! the attempt; the shrink reports the highest such operation among the
//! survivors, so all survivors either keep the attempt's result or all retry.

mod ops;
mod shrink;

use std::collections::{BTreeSet, VecDeque};
use std::time::Duration;

use thiserror::Error;

use crate::transport::{Event, FaultInjector, RecvError, SendError, Transport};
use crate::wire::{Op, WireMessage};
use crate::NodeId;

pub use ops::Agreed;
pub use shrink::ShrinkReport;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome<T> {
    Ok(T),
    /// A member failed; the set holds the members known to be dead (possibly
    /// empty when the failure was learnt from a peer's shrink).
    Failed(BTreeSet<NodeId>),
}

impl<T> Outcome<T> {
    pub fn is_ok(&self) -> bool {
        matches!(self, Outcome::Ok(_))
    }

    pub fn ok(self) -> Option<T> {
        match self {
            Outcome::Ok(v) => Some(v),
            Outcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CommError {
    #[error("this node was killed")]
    Killed,
    #[error("buffer length mismatch: local {expected}, peer {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("communicator is revoked; shrink first")]
    Revoked,
    #[error("a peer declared this node dead")]
    SelfExcluded,
    #[error("the surviving members committed a group without this node")]
    Excluded,
    #[error("node {0} is not a member")]
    NotMember(NodeId),
    #[error("survivors disagree on a committed result")]
    Inconsistent,
    #[error("transport: {0}")]
    Transport(String),
    #[error("transport shut down")]
    Shutdown,
    #[error("simulation stalled")]
    Stalled,
}

impl From<RecvError> for CommError {
    fn from(e: RecvError) -> Self {
        match e {
            RecvError::Killed => CommError::Killed,
            RecvError::Shutdown => CommError::Shutdown,
            RecvError::Stalled => CommError::Stalled,
            RecvError::Timeout => CommError::Transport("unexpected timeout".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommConfig {
    /// Silence from an awaited peer after which it is suspected.
    pub wait_timeout: Duration,
    pub shrink_timeout: Duration,
}

impl Default for CommConfig {
    fn default() -> Self {
        CommConfig {
            wait_timeout: Duration::from_secs(10),
            shrink_timeout: Duration::from_secs(10),
        }
    }
}

pub(crate) enum Wait {
    Got(WireMessage),
    Failed(BTreeSet<NodeId>),
}

pub struct Communicator<T> {
    t: T,
    cfg: CommConfig,
    epoch: u32,
    members: Vec<NodeId>,
    rank: usize,
    revoked: bool,
    stash: VecDeque<WireMessage>,
    dead: BTreeSet<NodeId>,
    /// Sequence number of the operation in progress.
    seq: u32,
    next_seq: u32,
    /// Latest agreed operation this node knows every member finished.
    last_ok: u32,
    injector: FaultInjector,
    fenced: u64,
    shrinks: Vec<ShrinkReport>,
    scratch: Vec<f64>,
}

impl<T: Transport> Communicator<T> {
    pub fn new(t: T, members: impl IntoIterator<Item = NodeId>, cfg: CommConfig) -> Result<Self, CommError> {
        let mut members: Vec<NodeId> = members.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        let me = t.me();
        let rank = members.binary_search(&me).map_err(|_| CommError::NotMember(me))?;
        Ok(Communicator {
            t,
            cfg,
            epoch: 0,
            members,
            rank,
            revoked: false,
            stash: VecDeque::new(),
            dead: BTreeSet::new(),
            seq: 0,
            next_seq: 1,
            last_ok: 0,
            injector: FaultInjector::default(),
            fenced: 0,
            shrinks: Vec::new(),
            scratch: Vec::new(),
        })
    }

    pub fn with_injector(mut self, injector: FaultInjector) -> Self {
        self.injector = injector;
        self
    }

    pub fn me(&self) -> NodeId {
        self.t.me()
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn is_revoked(&self) -> bool {
        self.revoked
    }

    /// Nodes this node has seen fail, members or not.
    pub fn dead(&self) -> &BTreeSet<NodeId> {
        &self.dead
    }

    /// Messages discarded for carrying a stale epoch or sequence number.
    pub fn fenced(&self) -> u64 {
        self.fenced
    }

    pub fn shrinks(&self) -> &[ShrinkReport] {
        &self.shrinks
    }

    pub fn transport(&self) -> &T {
        &self.t
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.t
    }

    pub fn into_transport(self) -> T {
        self.t
    }

    pub fn injector_mut(&mut self) -> &mut FaultInjector {
        &mut self.injector
    }

    /// Dies on the spot, as a fault plan demands.
    pub fn kill(&mut self) -> CommError {
        self.t.kill_self();
        CommError::Killed
    }

    fn begin(&mut self) -> u32 {
        self.seq = self.next_seq;
        self.next_seq += 1;
        self.seq
    }

    fn msg(&self, op: Op) -> WireMessage {
        WireMessage::new(op, self.me(), self.epoch, self.seq)
    }

    fn dead_members(&self) -> BTreeSet<NodeId> {
        self.members.iter().copied().filter(|m| self.dead.contains(m)).collect()
    }

    /// Records a failure; true when it concerns a current member.
    fn note_dead(&mut self, p: NodeId) -> bool {
        if p == self.me() {
            return false;
        }
        self.dead.insert(p);
        self.members.contains(&p)
    }

    fn fail(&mut self) -> Wait {
        self.revoked = true;
        Wait::Failed(self.dead_members())
    }

    fn fence(&mut self) {
        self.fenced += 1;
        self.t.note_dropped();
    }

    /// Sends through the fault injector. `Some(peer)` when the peer is gone.
    fn send_to(&mut self, to: NodeId, msg: &WireMessage) -> Result<Option<NodeId>, CommError> {
        if self.injector.before_send(msg.op) {
            return Err(self.kill());
        }
        match self.t.send(to, msg) {
            Ok(()) => Ok(None),
            Err(SendError::Dead(p)) => {
                self.note_dead(p);
                Ok(Some(p))
            }
            Err(SendError::Killed) => Err(CommError::Killed),
            Err(e @ SendError::Unknown(_)) => Err(CommError::Transport(e.to_string())),
        }
    }

    fn stash_shrink_pending(&self) -> bool {
        self.stash
            .iter()
            .any(|m| m.epoch == self.epoch && matches!(m.op, Op::ShrinkPropose | Op::ShrinkCommit))
    }

    /// Takes in whatever has already arrived, without blocking.
    fn absorb_ready(&mut self) -> Result<(), CommError> {
        loop {
            match self.t.recv(Duration::ZERO) {
                Ok(Event::Message(m)) => {
                    if m.epoch < self.epoch || (m.epoch == self.epoch && m.seq < self.seq && !matches!(m.op, Op::ShrinkPropose | Op::ShrinkCommit)) {
                        self.fence();
                    } else {
                        self.stash.push_back(m);
                    }
                }
                Ok(Event::PeerDown(p) | Event::Suspect(p)) => {
                    self.note_dead(p);
                }
                Err(RecvError::Timeout) => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Revokes at the start of an operation if a member is known dead or a
    /// shrink is already under way.
    fn healthy_at_start(&mut self) -> Result<bool, CommError> {
        self.absorb_ready()?;
        if !self.dead_members().is_empty() || self.stash_shrink_pending() {
            self.revoked = true;
        }
        Ok(!self.revoked)
    }

    /// Waits for a message from `from` at the current epoch satisfying
    /// `pred`, watching for failures meanwhile.
    fn await_msg(&mut self, from: NodeId, pred: impl Fn(&WireMessage) -> bool) -> Result<Wait, CommError> {
        if self.revoked || self.dead.contains(&from) {
            return Ok(self.fail());
        }
        let epoch = self.epoch;
        if let Some(i) = self
            .stash
            .iter()
            .position(|m| m.epoch == epoch && m.sender == from && pred(m))
        {
            return Ok(Wait::Got(self.stash.remove(i).expect("index in range")));
        }
        let deadline = self.t.now() + self.cfg.wait_timeout;
        loop {
            let left = deadline.saturating_sub(self.t.now());
            match self.t.recv(left) {
                Ok(Event::Message(m)) => {
                    if m.epoch < self.epoch {
                        self.fence();
                    } else if m.epoch > self.epoch {
                        self.stash.push_back(m);
                    } else if matches!(m.op, Op::ShrinkPropose | Op::ShrinkCommit) {
                        self.stash.push_back(m);
                        return Ok(self.fail());
                    } else if m.sender == from && pred(&m) {
                        return Ok(Wait::Got(m));
                    } else if m.seq < self.seq {
                        self.fence();
                    } else {
                        self.stash.push_back(m);
                    }
                }
                Ok(Event::PeerDown(p) | Event::Suspect(p)) => {
                    // other deaths surface through whoever waits on them
                    if self.note_dead(p) && p == from {
                        return Ok(self.fail());
                    }
                }
                Err(RecvError::Timeout) => {
                    self.note_dead(from);
                    return Ok(self.fail());
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}
