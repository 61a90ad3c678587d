use std::collections::BTreeSet;
use std::time::Duration;

use crate::collective::{CommError, Communicator, Outcome, ShrinkReport, Wait};
use crate::transport::{Event, RecvError, Transport};
use crate::wire::{Op, Payload, WireMessage};

const AGREE_GATHER: u32 = u32::MAX - 1;
const AGREE_RELEASE: u32 = u32::MAX;
const GOODBYE: u32 = u32::MAX - 2;

/// Result of an operation retried across shrinks until it succeeded.
#[derive(Clone, Debug, PartialEq)]
pub struct Agreed<R> {
    pub value: R,
    /// Communicator size of the attempt whose result was kept.
    pub contributors: usize,
    pub shrinks: Vec<ShrinkReport>,
}

impl<R> Agreed<R> {
    pub fn shrink_time(&self) -> Duration {
        self.shrinks.iter().map(|s| s.duration).sum()
    }
}

macro_rules! attempt {
    ($e:expr) => {
        match $e? {
            Wait::Got(m) => m,
            Wait::Failed(s) => return Ok(Outcome::Failed(s)),
        }
    };
}

macro_rules! deliver {
    ($self:ident, $to:expr, $msg:expr) => {
        if let Some(p) = $self.send_to($to, $msg)? {
            $self.revoked = true;
            return Ok(Outcome::Failed(BTreeSet::from([p])));
        }
    };
}

/// Near-even split: chunk `c` of `n` over `len` elements.
pub(crate) fn chunk_bounds(len: usize, n: usize, c: usize) -> (usize, usize) {
    (c * len / n, (c + 1) * len / n)
}

impl<T: Transport> Communicator<T> {
    fn check_usable(&self) -> Result<(), CommError> {
        if self.revoked {
            Err(CommError::Revoked)
        } else {
            Ok(())
        }
    }

    /// In-place ring allreduce (sum). `Failed` leaves `data` unspecified.
    pub fn allreduce_sum(&mut self, data: &mut [f64]) -> Result<Outcome<()>, CommError> {
        self.check_usable()?;
        self.begin();
        if !self.healthy_at_start()? {
            return Ok(Outcome::Failed(self.dead_members()));
        }
        self.ring(None, data)
    }

    /// Copies rank `root`'s `data` into everyone's `data`.
    pub fn bcast(&mut self, data: &mut [f64], root: usize) -> Result<Outcome<()>, CommError> {
        self.check_usable()?;
        self.begin();
        if !self.healthy_at_start()? {
            return Ok(Outcome::Failed(self.dead_members()));
        }
        self.linear_bcast(data, root)
    }

    pub fn barrier(&mut self) -> Result<Outcome<()>, CommError> {
        self.check_usable()?;
        self.begin();
        if !self.healthy_at_start()? {
            return Ok(Outcome::Failed(self.dead_members()));
        }
        self.gather_release(Op::Barrier, 0, 1, false)
    }

    /// Sums `data` in place over the members, shrinking and retrying on
    /// failure until an attempt succeeds on the survivors. Every attempt
    /// reduces the caller's original contribution.
    pub fn allreduce_until_success(&mut self, data: &mut Vec<f64>) -> Result<Agreed<()>, CommError> {
        let mut out = std::mem::take(&mut self.scratch);
        out.resize(data.len(), 0.0);
        let r = self.until_success(Op::Allreduce, |c| c.ring(Some(data), &mut out));
        if r.is_ok() {
            std::mem::swap(data, &mut out);
        }
        self.scratch = out;
        r
    }

    /// Broadcast from rank 0, retried on the survivors. Every caller passes a
    /// buffer of the same length; only rank 0's contents matter.
    pub fn bcast_until_success(&mut self, data: &[f64]) -> Result<Agreed<Vec<f64>>, CommError> {
        self.until_success(Op::Bcast, |c| {
            let mut buf = data.to_vec();
            Ok(match c.linear_bcast(&mut buf, 0)? {
                Outcome::Ok(()) => Outcome::Ok(buf),
                Outcome::Failed(s) => Outcome::Failed(s),
            })
        })
    }

    pub fn barrier_until_success(&mut self) -> Result<Agreed<()>, CommError> {
        self.until_success(Op::Barrier, |_| Ok(Outcome::Ok(())))
    }

    /// Stays reachable after the last operation until every member has said
    /// goodbye or is known dead, joining any shrink a straggler starts.
    /// Deaths noticed here do not shrink the communicator.
    pub fn linger(&mut self) -> Result<Vec<ShrinkReport>, CommError> {
        let is_bye = |m: &WireMessage| m.op == Op::Barrier && m.chunk == GOODBYE;
        let mut heard: BTreeSet<_> = self.stash.iter().filter(|m| is_bye(m)).map(|m| m.sender).collect();
        self.stash.retain(|m| !is_bye(m));
        let mut shrinks = Vec::new();
        self.say_goodbye()?;
        loop {
            if self.stash_shrink_pending() {
                shrinks.push(self.shrink()?);
                self.say_goodbye()?;
                continue;
            }
            let me = self.me();
            let unheard: Vec<_> = self
                .members
                .iter()
                .copied()
                .filter(|&p| p != me && !heard.contains(&p) && !self.dead.contains(&p))
                .collect();
            if unheard.is_empty() {
                return Ok(shrinks);
            }
            match self.t.recv(self.cfg.wait_timeout) {
                Ok(Event::Message(m)) => {
                    if is_bye(&m) {
                        heard.insert(m.sender);
                    } else if m.epoch > self.epoch || (m.epoch == self.epoch && matches!(m.op, Op::ShrinkPropose | Op::ShrinkCommit)) {
                        self.stash.push_back(m);
                    } else {
                        self.fence();
                    }
                }
                Ok(Event::PeerDown(p) | Event::Suspect(p)) => {
                    self.note_dead(p);
                }
                Err(RecvError::Timeout) => {
                    for p in unheard {
                        self.note_dead(p);
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn say_goodbye(&mut self) -> Result<(), CommError> {
        let msg = self.msg(Op::Barrier).with_chunk(GOODBYE);
        let me = self.me();
        for p in self.members.clone() {
            if p != me && !self.dead.contains(&p) {
                self.send_to(p, &msg)?;
            }
        }
        Ok(())
    }

    fn until_success<R>(
        &mut self,
        op: Op,
        mut attempt: impl FnMut(&mut Self) -> Result<Outcome<R>, CommError>,
    ) -> Result<Agreed<R>, CommError> {
        let seq = self.begin();
        let mut shrinks = Vec::new();
        loop {
            let mut pending = None;
            if self.healthy_at_start()? {
                let size = self.size();
                if let Outcome::Ok(r) = attempt(self)? {
                    pending = Some((r, size));
                    if self.gather_release(op, AGREE_GATHER, AGREE_RELEASE, true)?.is_ok() {
                        let (value, contributors) = pending.expect("just set");
                        return Ok(Agreed {
                            value,
                            contributors,
                            shrinks,
                        });
                    }
                }
            }
            let report = self.shrink()?;
            let committed = report.committed;
            shrinks.push(report);
            self.seq = seq;
            if committed >= seq {
                let (value, contributors) = pending.ok_or(CommError::Inconsistent)?;
                return Ok(Agreed {
                    value,
                    contributors,
                    shrinks,
                });
            }
        }
    }

    /// Ring allreduce into `data`. With `src`, the local contribution is read
    /// from `src` and `data` only receives output.
    fn ring(&mut self, src: Option<&[f64]>, data: &mut [f64]) -> Result<Outcome<()>, CommError> {
        let n = self.size();
        if n == 1 {
            if let Some(src) = src {
                data.copy_from_slice(src);
            }
            return Ok(Outcome::Ok(()));
        }
        let len = data.len();
        let expected = u32::try_from(len).map_err(|_| CommError::Transport("buffer too long".into()))?;
        let r = self.rank;
        let right = self.members[(r + 1) % n];
        let left = self.members[(r + n - 1) % n];
        let seq = self.seq;
        for step in 0..2 * (n - 1) {
            let (send_c, recv_c, reduce) = if step < n - 1 {
                ((r + n - step) % n, (r + 2 * n - step - 1) % n, true)
            } else {
                let s = step - (n - 1);
                ((r + 1 + n - s) % n, (r + n - s) % n, false)
            };
            let (a, b) = chunk_bounds(len, n, send_c);
            let msg = self
                .msg(Op::Allreduce)
                .with_chunk(step as u32)
                .with_aux(expected)
                .with_payload(Payload::Reals(match src {
                    Some(src) if step == 0 => src[a..b].to_vec(),
                    _ => data[a..b].to_vec(),
                }));
            deliver!(self, right, &msg);
            let step32 = step as u32;
            let m = attempt!(self.await_msg(left, |m| m.op == Op::Allreduce && m.seq == seq && m.chunk == step32));
            if m.aux != expected {
                return Err(CommError::LengthMismatch {
                    expected: len,
                    found: m.aux as usize,
                });
            }
            let (a, b) = chunk_bounds(len, n, recv_c);
            let vals = m.payload.reals();
            if vals.len() != b - a {
                return Err(CommError::LengthMismatch {
                    expected: b - a,
                    found: vals.len(),
                });
            }
            let dst = &mut data[a..b];
            if let (true, Some(src)) = (reduce, src) {
                dst.iter_mut().zip(&src[a..b]).zip(vals).for_each(|((d, x), v)| *d = x + v);
            } else if reduce {
                dst.iter_mut().zip(vals).for_each(|(d, v)| *d += v);
            } else {
                dst.copy_from_slice(vals);
            }
        }
        Ok(Outcome::Ok(()))
    }

    fn linear_bcast(&mut self, data: &mut [f64], root: usize) -> Result<Outcome<()>, CommError> {
        let n = self.size();
        if root >= n {
            return Err(CommError::Transport(format!("root rank {root} out of range")));
        }
        let root_id = self.members[root];
        let seq = self.seq;
        if self.rank == root {
            let msg = self.msg(Op::Bcast).with_payload(Payload::Reals(data.to_vec()));
            let mut lost = BTreeSet::new();
            for to in self.members.clone() {
                if to != root_id {
                    if let Some(p) = self.send_to(to, &msg)? {
                        lost.insert(p);
                    }
                }
            }
            if !lost.is_empty() {
                self.revoked = true;
                return Ok(Outcome::Failed(lost));
            }
            return Ok(Outcome::Ok(()));
        }
        let m = attempt!(self.await_msg(root_id, |m| m.op == Op::Bcast && m.seq == seq && m.chunk == 0));
        let vals = m.payload.reals();
        if vals.len() != data.len() {
            return Err(CommError::LengthMismatch {
                expected: data.len(),
                found: vals.len(),
            });
        }
        data.copy_from_slice(vals);
        Ok(Outcome::Ok(()))
    }

    /// Everyone reports to rank 0, which releases everyone. With `agree`,
    /// completing the round records the operation as finished by all.
    fn gather_release(&mut self, op: Op, gather: u32, release: u32, agree: bool) -> Result<Outcome<()>, CommError> {
        let seq = self.seq;
        let root = self.members[0];
        if self.size() == 1 {
            if agree {
                self.last_ok = seq;
            }
            return Ok(Outcome::Ok(()));
        }
        if self.rank == 0 {
            let peers = self.members[1..].to_vec();
            for &from in &peers {
                attempt!(self.await_msg(from, |m| m.op == op && m.seq == seq && m.chunk == gather));
            }
            if agree {
                self.last_ok = seq;
            }
            let msg = self.msg(op).with_chunk(release);
            for &to in &peers {
                // a release lost to a dead peer is noticed by the next operation
                self.send_to(to, &msg)?;
            }
            return Ok(Outcome::Ok(()));
        }
        let msg: WireMessage = self.msg(op).with_chunk(gather);
        deliver!(self, root, &msg);
        attempt!(self.await_msg(root, |m| m.op == op && m.seq == seq && m.chunk == release));
        if agree {
            self.last_ok = seq;
        }
        Ok(Outcome::Ok(()))
    }
}
