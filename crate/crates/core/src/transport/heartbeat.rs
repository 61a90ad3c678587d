use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeartbeatConfig {
    pub interval: Duration,
    pub timeout: Duration,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        HeartbeatConfig {
            interval: Duration::from_millis(100),
            timeout: Duration::from_millis(500),
        }
    }
}

/// Timeout-based suspicion. Once suspected, a peer stays suspected.
#[derive(Clone, Debug)]
pub struct HeartbeatMonitor {
    timeout: Duration,
    last_heard: BTreeMap<NodeId, Duration>,
    suspected: BTreeSet<NodeId>,
}

impl HeartbeatMonitor {
    pub fn new(peers: impl IntoIterator<Item = NodeId>, now: Duration, timeout: Duration) -> Self {
        HeartbeatMonitor {
            timeout,
            last_heard: peers.into_iter().map(|p| (p, now)).collect(),
            suspected: BTreeSet::new(),
        }
    }

    pub fn heard(&mut self, peer: NodeId, now: Duration) {
        if let Some(t) = self.last_heard.get_mut(&peer) {
            *t = (*t).max(now);
        }
    }

    /// Peers newly suspected at `now`.
    pub fn check(&mut self, now: Duration) -> Vec<NodeId> {
        let mut fresh = Vec::new();
        for (&p, &t) in &self.last_heard {
            if !self.suspected.contains(&p) && now.saturating_sub(t) > self.timeout {
                fresh.push(p);
            }
        }
        self.suspected.extend(&fresh);
        fresh
    }

    pub fn is_suspected(&self, peer: NodeId) -> bool {
        self.suspected.contains(&peer)
    }

    pub fn live_peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.last_heard.keys().copied().filter(|p| !self.suspected.contains(p))
    }

    pub fn suspected(&self) -> &BTreeSet<NodeId> {
        &self.suspected
    }
}
