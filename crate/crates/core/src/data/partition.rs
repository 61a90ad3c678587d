use std::collections::{BTreeMap, BTreeSet};

use crate::data::DataError;
use crate::NodeId;

/// Half-open range of sample indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShardRange {
    pub start: usize,
    pub end: usize,
}

impl ShardRange {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start < end, "empty shard range {start}..{end}");
        ShardRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }
}

/// Ranges that each surviving node must newly read after a failure.
pub type ReloadPlan = BTreeMap<NodeId, Vec<ShardRange>>;

/// Shard ownership for one communicator epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionMap {
    pub epoch: u32,
    pub sample_count: usize,
    pub assignment: BTreeMap<NodeId, Vec<ShardRange>>,
}

/// Splits `[0, total)` into `parts` contiguous pieces whose sizes differ by
/// at most one, larger pieces first.
fn even_sizes(total: usize, parts: usize) -> impl Iterator<Item = usize> {
    let (q, r) = (total / parts, total % parts);
    (0..parts).map(move |i| q + usize::from(i < r))
}

impl PartitionMap {
    pub fn partition(sample_count: usize, nodes: &[NodeId], epoch: u32) -> Result<Self, DataError> {
        if nodes.is_empty() {
            return Err(DataError::NoRanks);
        }
        if sample_count < nodes.len() {
            return Err(DataError::TooFewSamples {
                samples: sample_count,
                ranks: nodes.len(),
            });
        }
        check_unique(nodes)?;
        let mut assignment = BTreeMap::new();
        let mut start = 0;
        for (&node, size) in nodes.iter().zip(even_sizes(sample_count, nodes.len())) {
            assignment.insert(node, vec![ShardRange::new(start, start + size)]);
            start += size;
        }
        Ok(PartitionMap {
            epoch,
            sample_count,
            assignment,
        })
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.assignment.keys().copied()
    }

    pub fn ranges_of(&self, node: NodeId) -> &[ShardRange] {
        self.assignment.get(&node).map_or(&[], Vec::as_slice)
    }

    pub fn samples_of(&self, node: NodeId) -> usize {
        self.ranges_of(node).iter().map(ShardRange::len).sum()
    }

    /// Survivors keep what they own; the failed nodes' ranges, taken in index
    /// order, are cut into near-equal consecutive pieces handed to survivors
    /// in the order given.
    pub fn repartition_after_failure(
        &self,
        failed: &BTreeSet<NodeId>,
        survivors: &[NodeId],
        new_epoch: u32,
    ) -> Result<(PartitionMap, ReloadPlan), DataError> {
        if survivors.is_empty() {
            return Err(DataError::NoSurvivors);
        }
        check_unique(survivors)?;
        for s in survivors {
            if failed.contains(s) {
                return Err(DataError::BadFailure(format!("node {s} is both failed and surviving")));
            }
            if !self.assignment.contains_key(s) {
                return Err(DataError::BadFailure(format!("survivor {s} is not in the map")));
            }
        }
        for f in failed {
            if !self.assignment.contains_key(f) {
                return Err(DataError::BadFailure(format!("failed node {f} is not in the map")));
            }
        }
        if failed.len() + survivors.len() != self.assignment.len() {
            return Err(DataError::BadFailure("failed and survivors do not cover the map".into()));
        }

        let mut lost: Vec<ShardRange> = failed.iter().flat_map(|f| self.ranges_of(*f).iter().copied()).collect();
        lost.sort();
        let lost_total: usize = lost.iter().map(ShardRange::len).sum();

        let mut assignment: BTreeMap<NodeId, Vec<ShardRange>> =
            survivors.iter().map(|&s| (s, self.ranges_of(s).to_vec())).collect();
        let mut plan = ReloadPlan::new();
        let mut pieces = lost.into_iter();
        let mut current = pieces.next();
        for (&node, mut need) in survivors.iter().zip(even_sizes(lost_total, survivors.len())) {
            while need > 0 {
                let r = current.expect("lost ranges cover the quota");
                let take = need.min(r.len());
                let piece = ShardRange::new(r.start, r.start + take);
                plan.entry(node).or_default().push(piece);
                assignment.get_mut(&node).expect("survivor").push(piece);
                need -= take;
                current = if take == r.len() {
                    pieces.next()
                } else {
                    Some(ShardRange::new(r.start + take, r.end))
                };
            }
        }
        for ranges in assignment.values_mut() {
            ranges.sort();
        }
        let map = PartitionMap {
            epoch: new_epoch,
            sample_count: self.sample_count,
            assignment,
        };
        debug_assert!(map.validate().is_ok());
        Ok((map, plan))
    }

    /// Checks the disjoint full-cover invariant.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut all: Vec<ShardRange> = self.assignment.values().flatten().copied().collect();
        all.sort();
        let mut next = 0;
        for r in all {
            if r.start != next || r.is_empty() {
                return Err(DataError::BadCover(format!("gap or overlap at {}", r.start.min(next))));
            }
            next = r.end;
        }
        if next != self.sample_count {
            return Err(DataError::BadCover(format!("cover ends at {next} of {}", self.sample_count)));
        }
        Ok(())
    }

    /// Rejects a map that belongs to another communicator generation.
    pub fn ensure_epoch(&self, epoch: u32) -> Result<(), DataError> {
        if self.epoch != epoch {
            return Err(DataError::StaleMap {
                map: self.epoch,
                comm: epoch,
            });
        }
        Ok(())
    }
}

fn check_unique(nodes: &[NodeId]) -> Result<(), DataError> {
    let set: BTreeSet<_> = nodes.iter().collect();
    if set.len() != nodes.len() {
        return Err(DataError::BadFailure("duplicate node id".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(m: &PartitionMap) -> Vec<usize> {
        m.nodes().map(|n| m.samples_of(n)).collect()
    }

    #[test]
    fn even_and_remainder_splits() {
        let m = PartitionMap::partition(1000, &[0, 1, 2, 3], 0).unwrap();
        let starts: Vec<_> = m.nodes().map(|n| m.ranges_of(n)[0]).collect();
        assert_eq!(
            starts,
            vec![
                ShardRange::new(0, 250),
                ShardRange::new(250, 500),
                ShardRange::new(500, 750),
                ShardRange::new(750, 1000)
            ]
        );
        let m = PartitionMap::partition(10, &[0, 1, 2], 0).unwrap();
        assert_eq!(sizes(&m), vec![4, 3, 3]);
        assert!(PartitionMap::partition(10, &[], 0).is_err());
        assert!(PartitionMap::partition(2, &[0, 1, 2], 0).is_err());
    }

    #[test]
    fn one_failure_spreads_lost_shard() {
        let m = PartitionMap::partition(1000, &[0, 1, 2, 3], 0).unwrap();
        let (m2, plan) = m.repartition_after_failure(&BTreeSet::from([2]), &[0, 1, 3], 1).unwrap();
        let got: Vec<usize> = plan.values().map(|r| r.iter().map(ShardRange::len).sum()).collect();
        assert_eq!(got, vec![84, 83, 83]);
        assert_eq!(plan[&0], vec![ShardRange::new(500, 584)]);
        assert_eq!(m2.ranges_of(0)[0], ShardRange::new(0, 250));
        assert_eq!(m2.epoch, 1);
        m2.validate().unwrap();
    }

    #[test]
    fn no_failure_and_sole_survivor() {
        let m = PartitionMap::partition(1000, &[0, 1, 2, 3], 0).unwrap();
        let (same, plan) = m.repartition_after_failure(&BTreeSet::new(), &[0, 1, 2, 3], 5).unwrap();
        assert!(plan.is_empty());
        assert_eq!(same.assignment, m.assignment);
        assert_eq!(same.epoch, 5);
        let (solo, plan) = m.repartition_after_failure(&BTreeSet::from([0, 1, 3]), &[2], 1).unwrap();
        assert_eq!(plan[&2].iter().map(ShardRange::len).sum::<usize>(), 750);
        assert_eq!(solo.samples_of(2), 1000);
        solo.validate().unwrap();
        assert!(matches!(
            m.repartition_after_failure(&BTreeSet::from([0, 1, 2, 3]), &[], 1),
            Err(DataError::NoSurvivors)
        ));
        assert!(m.repartition_after_failure(&BTreeSet::from([1]), &[0, 1, 2, 3], 1).is_err());
        assert!(m.ensure_epoch(1).is_err());
    }
}
