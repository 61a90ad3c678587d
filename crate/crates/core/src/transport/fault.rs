use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::wire::Op;
use crate::NodeId;

/// When a victim dies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Trigger {
    /// After `k` completed batch updates, before batch `k` starts.
    AtBatch(u64),
    /// Just before the victim's `index`-th send (zero based, counted over the
    /// whole run) of a message with this op.
    AtStep { op: Op, index: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fault {
    pub victim: NodeId,
    pub trigger: Trigger,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("cannot parse fault `{0}`: expected <node>@batch:<k> or <node>@step:<op>:<i>")]
    Syntax(String),
    #[error("fault victim {0} is not an initial member")]
    UnknownVictim(NodeId),
}

impl FromStr for Fault {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        let err = || PlanError::Syntax(s.to_string());
        let (victim, rest) = s.split_once('@').ok_or_else(err)?;
        let victim: NodeId = victim.trim().parse().map_err(|_| err())?;
        let parts: Vec<&str> = rest.trim().split(':').collect();
        let trigger = match parts.as_slice() {
            ["batch", k] => Trigger::AtBatch(k.parse().map_err(|_| err())?),
            ["step", op, i] => Trigger::AtStep {
                op: Op::parse(op).filter(|o| *o != Op::Heartbeat).ok_or_else(err)?,
                index: i.parse().map_err(|_| err())?,
            },
            _ => return Err(err()),
        };
        Ok(Fault { victim, trigger })
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.trigger {
            Trigger::AtBatch(k) => write!(f, "{}@batch:{k}", self.victim),
            Trigger::AtStep { op, index } => write!(f, "{}@step:{}:{index}", self.victim, op.name()),
        }
    }
}

/// Hard-kill schedule for a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    faults: Vec<Fault>,
}

impl FaultPlan {
    pub fn new(mut faults: Vec<Fault>) -> Self {
        faults.sort();
        faults.dedup();
        FaultPlan { faults }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn parse<'a>(items: impl IntoIterator<Item = &'a str>) -> Result<Self, PlanError> {
        let faults = items.into_iter().map(str::parse).collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(faults))
    }

    pub fn faults(&self) -> &[Fault] {
        &self.faults
    }

    pub fn is_empty(&self) -> bool {
        self.faults.is_empty()
    }

    pub fn victims(&self) -> BTreeSet<NodeId> {
        self.faults.iter().map(|f| f.victim).collect()
    }

    pub fn validate(&self, members: &[NodeId]) -> Result<(), PlanError> {
        for f in &self.faults {
            if !members.contains(&f.victim) {
                return Err(PlanError::UnknownVictim(f.victim));
            }
        }
        Ok(())
    }

    pub fn injector_for(&self, node: NodeId) -> FaultInjector {
        let mine = self.faults.iter().filter(|f| f.victim == node);
        let mut inj = FaultInjector::default();
        for f in mine {
            match f.trigger {
                Trigger::AtBatch(k) => inj.batch = Some(inj.batch.map_or(k, |b: u64| b.min(k))),
                Trigger::AtStep { op, index } => {
                    let e = inj.steps.entry(op).or_insert(index);
                    *e = (*e).min(index);
                }
            }
        }
        inj
    }
}

impl fmt::Display for FaultPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.faults.iter().map(Fault::to_string).collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Per-node trigger state consulted by the trainer and the collectives.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultInjector {
    batch: Option<u64>,
    steps: BTreeMap<Op, u64>,
    sent: BTreeMap<Op, u64>,
}

impl FaultInjector {
    pub fn at_batch(&self, batch: u64) -> bool {
        self.batch == Some(batch)
    }

    /// Counts one send of `op`; true when the node must die instead.
    pub fn before_send(&mut self, op: Op) -> bool {
        let n = self.sent.entry(op).or_insert(0);
        let fire = self.steps.get(&op) == Some(n);
        *n += 1;
        fire
    }

    /// Sends performed so far, per op.
    pub fn sends(&self, op: Op) -> u64 {
        self.sent.get(&op).copied().unwrap_or(0)
    }

    pub fn is_armed(&self) -> bool {
        self.batch.is_some() || !self.steps.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_cli_forms() {
        let p = FaultPlan::parse(["2@batch:30", "1@step:allreduce:3", "0@step:commit:1"]).unwrap();
        assert_eq!(p.faults().len(), 3);
        assert_eq!(p.to_string(), "0@step:shrink-commit:1 1@step:allreduce:3 2@batch:30");
        assert!(FaultPlan::parse(["2@batch"]).is_err());
        assert!(FaultPlan::parse(["x@batch:1"]).is_err());
        assert!(FaultPlan::parse(["1@step:heartbeat:0"]).is_err());
        assert_eq!(p.validate(&[0, 1]), Err(PlanError::UnknownVictim(2)));
    }

    #[test]
    fn step_counter_fires_on_index() {
        let mut inj = FaultPlan::parse(["1@step:allreduce:2"]).unwrap().injector_for(1);
        assert!(!inj.before_send(Op::Allreduce));
        assert!(!inj.before_send(Op::Bcast));
        assert!(!inj.before_send(Op::Allreduce));
        assert!(inj.before_send(Op::Allreduce));
        assert!(!FaultPlan::none().injector_for(1).is_armed());
        let b = FaultPlan::parse(["3@batch:30", "3@batch:10"]).unwrap().injector_for(3);
        assert!(b.at_batch(10) && !b.at_batch(30));
    }
}
