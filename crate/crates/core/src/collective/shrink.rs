//! Agreement on the surviving membership.
//!
//! Each survivor sends every live member a proposal naming the coordinator
//! it believes in (the lowest live id), the last agreed operation it knows
//! was finished everywhere, and the members it knows are dead. Dead sets
//! merge on receipt, and a proposal is re-sent whenever its coordinator or
//! dead set changes. The coordinator commits once every live member's latest
//! proposal names it. Every receiver of a commit forwards it to the new
//! members before adopting, so a coordinator that dies mid-commit still
//! leaves everyone on the same epoch.
//!
//! Safety rests on the failure detector never suspecting a live node.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use crate::collective::{CommError, Communicator};
use crate::transport::{Event, RecvError, Transport};
use crate::wire::{Op, Payload, WireMessage};
use crate::NodeId;

const DIRECT: u32 = 0;
const RELAY: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShrinkReport {
    pub old_epoch: u32,
    pub new_epoch: u32,
    pub coordinator: NodeId,
    pub removed: Vec<NodeId>,
    pub members: Vec<NodeId>,
    /// Highest agreed operation some survivor saw complete everywhere.
    pub committed: u32,
    pub duration: Duration,
}

impl<T: Transport> Communicator<T> {
    /// Agrees with the other survivors on a new, smaller communicator.
    pub fn shrink(&mut self) -> Result<ShrinkReport, CommError> {
        let start = self.t.now();
        let me = self.me();
        let epoch = self.epoch;
        let mut latest: BTreeMap<NodeId, (NodeId, u32)> = BTreeMap::new();
        let mut announced = None;
        let mut queue: VecDeque<WireMessage> = VecDeque::new();
        self.stash.retain(|m| {
            let ours = m.epoch == epoch && matches!(m.op, Op::ShrinkPropose | Op::ShrinkCommit);
            if ours {
                queue.push_back(m.clone());
            }
            !ours
        });
        let mut last_progress = self.t.now();
        loop {
            while let Some(m) = queue.pop_front() {
                let ids = m.payload.ids();
                if m.op == Op::ShrinkCommit {
                    if ids.len() >= 2 {
                        return self.accept_commit(&m, start);
                    }
                    continue;
                }
                let Some((&last_ok, dead)) = ids.split_first() else {
                    continue;
                };
                latest.insert(m.sender, (m.aux, last_ok));
                for &d in dead {
                    if d == me {
                        return Err(CommError::SelfExcluded);
                    }
                    self.note_dead(d);
                }
                last_progress = self.t.now();
            }

            let live: Vec<NodeId> = self.members.iter().copied().filter(|m| !self.dead.contains(m)).collect();
            let coord = live[0];
            let dead_members: Vec<u32> = self.dead_members().into_iter().collect();
            if announced != Some((coord, dead_members.len())) {
                let mut ids = vec![self.last_ok];
                ids.extend(&dead_members);
                let msg = self
                    .msg(Op::ShrinkPropose)
                    .with_aux(coord)
                    .with_payload(Payload::Ids(ids));
                let mut lost = false;
                for p in live.iter().copied().filter(|&p| p != me).collect::<Vec<_>>() {
                    lost |= self.send_to(p, &msg)?.is_some();
                }
                announced = Some((coord, dead_members.len()));
                if lost {
                    continue;
                }
            }

            if coord == me && live[1..].iter().all(|p| latest.get(p).is_some_and(|&(b, _)| b == me)) {
                let committed = live[1..]
                    .iter()
                    .map(|p| latest[p].1)
                    .fold(self.last_ok, u32::max);
                let mut ids = vec![epoch + 1, committed];
                ids.extend(&live);
                let msg = self
                    .msg(Op::ShrinkCommit)
                    .with_chunk(DIRECT)
                    .with_aux(me)
                    .with_payload(Payload::Ids(ids));
                for &p in &live[1..] {
                    // a member lost here is found by the next operation
                    self.send_to(p, &msg)?;
                }
                return Ok(self.adopt(epoch + 1, live, committed, me, start));
            }

            let budget = self.cfg.shrink_timeout.saturating_sub(self.t.now().saturating_sub(last_progress));
            match self.t.recv(budget) {
                Ok(Event::Message(m)) => {
                    if m.epoch < epoch {
                        self.fence();
                    } else if m.epoch > epoch {
                        self.stash.push_back(m);
                    } else if matches!(m.op, Op::ShrinkPropose | Op::ShrinkCommit) {
                        queue.push_back(m);
                    } else {
                        self.fence();
                    }
                }
                Ok(Event::PeerDown(p) | Event::Suspect(p)) => {
                    self.note_dead(p);
                }
                Err(RecvError::Timeout) => {
                    if coord == me {
                        for &p in &live[1..] {
                            if latest.get(&p).is_none_or(|&(b, _)| b != me) {
                                self.note_dead(p);
                            }
                        }
                    } else {
                        self.note_dead(coord);
                    }
                    last_progress = self.t.now();
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn accept_commit(&mut self, m: &WireMessage, start: Duration) -> Result<ShrinkReport, CommError> {
        let ids = m.payload.ids();
        let (new_epoch, committed, members) = (ids[0], ids[1], ids[2..].to_vec());
        let me = self.me();
        if !members.contains(&me) {
            return Err(CommError::Excluded);
        }
        let relay = self
            .msg(Op::ShrinkCommit)
            .with_chunk(RELAY)
            .with_aux(m.aux)
            .with_payload(m.payload.clone());
        for &p in &members {
            if p != me && p != m.aux && p != m.sender {
                self.send_to(p, &relay)?;
            }
        }
        Ok(self.adopt(new_epoch, members, committed, m.aux, start))
    }

    fn adopt(&mut self, new_epoch: u32, mut members: Vec<NodeId>, committed: u32, coordinator: NodeId, start: Duration) -> ShrinkReport {
        members.sort_unstable();
        let removed: Vec<NodeId> = self.members.iter().copied().filter(|m| !members.contains(m)).collect();
        self.dead.extend(&removed);
        let old_epoch = self.epoch;
        self.epoch = new_epoch;
        self.rank = members.binary_search(&self.me()).expect("member of the commit");
        self.members = members;
        self.last_ok = self.last_ok.max(committed);
        let before = self.stash.len();
        self.stash.retain(|m| m.epoch >= new_epoch);
        for _ in self.stash.len()..before {
            self.fence();
        }
        self.revoked = self.stash_shrink_pending();
        let report = ShrinkReport {
            old_epoch,
            new_epoch,
            coordinator,
            removed,
            members: self.members.clone(),
            committed,
            duration: self.t.now().saturating_sub(start),
        };
        self.shrinks.push(report.clone());
        report
    }
}
