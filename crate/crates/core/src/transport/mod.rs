//! Point-to-point transports behind one contract, the heartbeat failure
//! detector, and fault injection.
//!
//! Two implementations exist: an in-process network ([`sim`]) that can run
//! under a seeded deterministic scheduler with virtual time, and a TCP full
//! mesh between worker processes ([`tcp`]).

mod fault;
mod heartbeat;
pub mod sim;
pub mod tcp;

use std::time::Duration;

use thiserror::Error;

use crate::wire::WireMessage;
use crate::NodeId;

pub use fault::{Fault, FaultInjector, FaultPlan, PlanError, Trigger};
pub use heartbeat::{HeartbeatConfig, HeartbeatMonitor};

/// Something a worker can observe on its transport.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Message(WireMessage),
    /// The connection to a peer closed or reset.
    PeerDown(NodeId),
    /// The local heartbeat service stopped hearing from a peer.
    Suspect(NodeId),
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum RecvError {
    #[error("receive timed out")]
    Timeout,
    #[error("this node has been killed")]
    Killed,
    #[error("transport shut down")]
    Shutdown,
    #[error("simulation stalled with no pending events")]
    Stalled,
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum SendError {
    #[error("node {0} is unreachable")]
    Dead(NodeId),
    #[error("this node has been killed")]
    Killed,
    #[error("unknown node {0}")]
    Unknown(NodeId),
}

/// Counters kept per node by every transport.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MailboxStats {
    pub sent: u64,
    pub received: u64,
    /// Messages discarded because the destination was dead, the frame failed
    /// validation, or the communicator fenced it by epoch.
    pub dropped: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Sum of send-to-delivery latency over received messages.
    pub latency_total: Duration,
}

pub trait Transport: Send {
    fn me(&self) -> NodeId;

    fn send(&mut self, to: NodeId, msg: &WireMessage) -> Result<(), SendError>;

    fn recv(&mut self, timeout: Duration) -> Result<Event, RecvError>;

    /// Time since the run started; virtual under the deterministic scheduler.
    fn now(&self) -> Duration;

    /// Charges modelled work. Lets virtual time pass under the deterministic
    /// scheduler and does nothing on real-time transports.
    fn advance(&mut self, work: Duration);

    /// Terminates this node the way SIGKILL would: no farewell messages.
    fn kill_self(&mut self);

    fn stats(&self) -> MailboxStats;

    /// Records a message the layer above discarded.
    fn note_dropped(&mut self);
}
