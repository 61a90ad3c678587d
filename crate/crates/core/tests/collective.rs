use std::collections::BTreeSet;

use ftsgd_core::collective::{CommConfig, CommError, Communicator, Outcome};
use ftsgd_core::transport::sim::{self, SimConfig, SimEndpoint};
use ftsgd_core::transport::{FaultPlan, Transport};
use ftsgd_core::NodeId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ids(n: usize) -> Vec<NodeId> {
    (0..n as NodeId).collect()
}

fn inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn oracle_sum(rows: &[Vec<f64>], which: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (_, r) in rows.iter().enumerate().filter(|(i, _)| which(*i)) {
        out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
    }
    out
}

fn max_rel_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn comm(ep: SimEndpoint, n: usize) -> Communicator<SimEndpoint> {
    Communicator::new(ep, ids(n), CommConfig::default()).unwrap()
}

fn quiet(seed: u64) -> SimConfig {
    SimConfig {
        heartbeat: None,
        ..SimConfig::deterministic(seed)
    }
}

#[test]
fn single_member_allreduce_is_identity() {
    let (_, out) = sim::run(quiet(0), &[7], |ep| {
        let mut c = Communicator::new(ep, [7], CommConfig::default()).unwrap();
        let mut v = vec![1.5, -2.0, 3.25];
        assert_eq!(c.allreduce_sum(&mut v), Ok(Outcome::Ok(())));
        let mut w = v.clone();
        let a = c.allreduce_until_success(&mut w).unwrap();
        (v, w, a.contributors)
    });
    assert_eq!(out[0].0, vec![1.5, -2.0, 3.25]);
    assert_eq!(out[0].1, out[0].0);
    assert_eq!(out[0].2, 1);
}

#[test]
fn six_ones_sum_to_six_everywhere() {
    let (_, out) = sim::run(quiet(11), &ids(6), |ep| {
        let mut c = comm(ep, 6);
        let mut v = vec![1.0; 13];
        c.allreduce_sum(&mut v).unwrap().ok().unwrap();
        v
    });
    for v in out {
        assert_eq!(v, vec![6.0; 13]);
    }
}

#[test]
fn ring_matches_sequential_oracle_on_five_nodes() {
    let rows = inputs(5, 10_007, 42);
    let want = oracle_sum(&rows, |_| true);
    let rows_ref = &rows;
    let (_, out) = sim::run(quiet(3), &ids(5), |ep| {
        let me = ep.me() as usize;
        let mut c = comm(ep, 5);
        let mut v = rows_ref[me].clone();
        c.allreduce_sum(&mut v).unwrap().ok().unwrap();
        v
    });
    for v in &out {
        assert!(max_rel_gap(v, &want) <= 1e-12);
        assert_eq!(v, &out[0], "all ranks hold bit-identical results");
    }
}

#[test]
fn lengths_must_agree() {
    let (_, out) = sim::run(quiet(1), &ids(3), |ep| {
        let me = ep.me();
        let mut c = comm(ep, 3);
        let mut v = vec![1.0; if me == 1 { 5 } else { 6 }];
        c.allreduce_sum(&mut v)
    });
    assert!(out.iter().any(|r| matches!(r, Err(CommError::LengthMismatch { .. }))));
}

#[test]
fn bcast_reaches_eight_nodes() {
    let (_, out) = sim::run(quiet(8), &ids(8), |ep| {
        let me = ep.me();
        let mut c = comm(ep, 8);
        let mut v = if me == 0 { vec![3.0, 1.0, 4.0, 1.0, 5.0] } else { vec![0.0; 5] };
        c.bcast(&mut v, 0).unwrap().ok().unwrap();
        let again = c.bcast_until_success(&[me as f64; 2]).unwrap();
        (v, again.value)
    });
    for (v, w) in out {
        assert_eq!(v, vec![3.0, 1.0, 4.0, 1.0, 5.0]);
        assert_eq!(w, vec![0.0; 2]);
    }
}

#[test]
fn older_epochs_are_fenced_newer_ones_held() {
    use ftsgd_core::wire::{Op, Payload, WireMessage};
    let (_, out) = sim::run(quiet(4), &ids(2), |ep| {
        let me = ep.me();
        let mut c = comm(ep, 2);
        if me == 1 {
            // a frame from an epoch that is already over
            let stale = WireMessage::new(Op::Allreduce, 1, 0, 1)
                .with_aux(1)
                .with_payload(Payload::Reals(vec![99.0]));
            c.transport_mut().send(0, &stale).unwrap();
        }
        c.barrier().unwrap().ok().unwrap();
        assert!(c.shrink().unwrap().removed.is_empty());
        let mut v = vec![1.0];
        c.allreduce_sum(&mut v).unwrap().ok().unwrap();
        (v, c.epoch(), c.fenced())
    });
    assert_eq!(out[0].0, vec![2.0]);
    assert_eq!(out[1].0, vec![2.0]);
    assert_eq!(out[0].1, 1);
    assert!(out[0].2 >= 1, "the stale frame was discarded at the epoch change");
}

/// Sum, contributors, final members and epoch of one node.
type FtOutcome = Result<(Vec<f64>, usize, Vec<NodeId>, u32), CommError>;

fn ft_run(n: usize, plan: &FaultPlan, seed: u64, notices: bool, rows: &[Vec<f64>]) -> Vec<FtOutcome> {
    let cfg = SimConfig {
        connection_reset_notices: notices,
        ..SimConfig::deterministic(seed)
    };
    let (_, out) = sim::run(cfg, &ids(n), |ep| {
        let me = ep.me();
        let mut c = comm(ep, n).with_injector(plan.injector_for(me));
        let mut v = rows[me as usize].clone();
        let a = c.allreduce_until_success(&mut v)?;
        c.linger()?;
        Ok((v, a.contributors, c.members().to_vec(), c.epoch()))
    });
    out
}

/// Survivors agree on one result, and that result is either the sum over
/// the original members or the sum over the survivors.
fn check_consistent(rows: &[Vec<f64>], out: &[FtOutcome], victims: &BTreeSet<NodeId>) {
    let n = rows.len();
    let mut first: Option<&(Vec<f64>, usize, Vec<NodeId>, u32)> = None;
    for (i, r) in out.iter().enumerate() {
        if victims.contains(&(i as NodeId)) {
            assert_eq!(r.as_ref().err(), Some(&CommError::Killed), "victim {i}");
            continue;
        }
        let got = r.as_ref().unwrap_or_else(|e| panic!("node {i}: {e}"));
        match first {
            None => first = Some(got),
            Some(f) => {
                assert_eq!(f.0, got.0, "node {i} disagrees");
                assert_eq!((f.1, &f.2, f.3), (got.1, &got.2, got.3));
            }
        }
    }
    let (value, contributors, members, _) = first.expect("a survivor");
    let survivors: Vec<NodeId> = (0..n as NodeId).filter(|i| !victims.contains(i)).collect();
    assert_eq!(members, &survivors);
    let want = if *contributors == n {
        oracle_sum(rows, |_| true)
    } else {
        assert_eq!(*contributors, survivors.len());
        oracle_sum(rows, |i| !victims.contains(&(i as NodeId)))
    };
    assert!(max_rel_gap(value, &want) <= 1e-12);
}

#[test]
fn a_survivor_that_missed_the_last_release_adopts_the_committed_sum() {
    let n = 4;
    let rows = inputs(n, 5, 3);
    // ring sends are 0..6, then the root releases nodes 1, 2, 3
    let plan = FaultPlan::parse(["0@step:allreduce:7"]).unwrap();
    let out = ft_run(n, &plan, 0, true, &rows);
    check_consistent(&rows, &out, &BTreeSet::from([0]));
    let (_, contributors, members, epoch) = out[2].as_ref().unwrap();
    assert_eq!((*contributors, members.as_slice(), *epoch), (4, &[1, 2, 3][..], 1));
}

#[test]
fn one_failure_at_every_allreduce_send() {
    let n = 4;
    let rows = inputs(n, 37, 9);
    for victim in 0..n as NodeId {
        for index in 0..2 * (n as u64 - 1) + 1 {
            let plan = FaultPlan::parse([format!("{victim}@step:allreduce:{index}").as_str()]).unwrap();
            let out = ft_run(n, &plan, index * 31 + victim as u64, true, &rows);
            check_consistent(&rows, &out, &BTreeSet::from([victim]));
        }
    }
}

#[test]
fn coordinator_dies_while_committing() {
    let n = 5;
    let rows = inputs(n, 11, 2);
    // node 1 dies in the ring, then node 0 (the coordinator) dies before its
    // first and after its first commit message
    for commit_index in 0..3 {
        let plan = FaultPlan::parse(["1@step:allreduce:2", &format!("0@step:shrink-commit:{commit_index}")]).unwrap();
        let out = ft_run(n, &plan, 77 + commit_index, true, &rows);
        check_consistent(&rows, &out, &BTreeSet::from([0, 1]));
    }
}

#[test]
fn death_during_proposal_round() {
    let n = 5;
    let rows = inputs(n, 20, 5);
    for index in 0..4 {
        let plan = FaultPlan::parse(["4@step:allreduce:1", &format!("2@step:shrink-propose:{index}")]).unwrap();
        let out = ft_run(n, &plan, 5 + index, true, &rows);
        let fired = out[2].is_err();
        // three live peers receive the first proposal
        assert!(fired || index >= 3);
        let victims = if fired { BTreeSet::from([2, 4]) } else { BTreeSet::from([4]) };
        check_consistent(&rows, &out, &victims);
    }
}

#[test]
fn heartbeat_alone_detects_a_silent_death() {
    let n = 4;
    let rows = inputs(n, 16, 6);
    let plan = FaultPlan::parse(["3@step:allreduce:1"]).unwrap();
    let out = ft_run(n, &plan, 6, false, &rows);
    check_consistent(&rows, &out, &BTreeSet::from([3]));
}

#[test]
fn shrink_example_renumbers_ranks() {
    let cfg = SimConfig::deterministic(21);
    let (net, out) = sim::run(cfg, &ids(4), |mut ep| {
        let me = ep.me();
        if me == 2 {
            ep.kill_self();
            return None;
        }
        let mut c = comm(ep, 4);
        let r = c.barrier().unwrap();
        assert!(!r.is_ok());
        let rep = c.shrink().unwrap();
        Some((rep, c.rank(), c.size()))
    });
    assert_eq!(net.kills().len(), 1);
    let ranks: Vec<usize> = out.iter().flatten().map(|(_, r, _)| *r).collect();
    assert_eq!(ranks, vec![0, 1, 2]);
    for (rep, _, size) in out.into_iter().flatten() {
        assert_eq!(size, 3);
        assert_eq!(rep.members, vec![0, 1, 3]);
        assert_eq!(rep.removed, vec![2]);
        assert_eq!((rep.old_epoch, rep.new_epoch), (0, 1));
    }
}

#[test]
fn barrier_with_dead_member_returns_promptly() {
    let cfg = SimConfig {
        connection_reset_notices: false,
        ..SimConfig::deterministic(13)
    };
    let hb = cfg.heartbeat.unwrap();
    let (net, out) = sim::run(cfg, &ids(5), |mut ep| {
        if ep.me() == 4 {
            ep.kill_self();
            return None;
        }
        let mut c = comm(ep, 5);
        let a = c.barrier_until_success().unwrap();
        Some((a.shrinks.len(), c.transport().now()))
    });
    let killed_at = net.kills()[0].1;
    for (shrinks, at) in out.into_iter().flatten() {
        assert_eq!(shrinks, 1);
        assert!(at - killed_at <= 2 * hb.timeout, "{at:?}");
    }
}

#[test]
fn plain_allreduce_reports_failure() {
    let plan = FaultPlan::parse(["1@step:allreduce:0"]).unwrap();
    let (_, out) = sim::run(SimConfig::deterministic(2), &ids(3), |ep| {
        let me = ep.me();
        let mut c = comm(ep, 3).with_injector(plan.injector_for(me));
        let mut v = vec![1.0; 9];
        c.allreduce_sum(&mut v)
    });
    assert_eq!(out[1], Err(CommError::Killed));
    for r in [&out[0], &out[2]] {
        assert!(matches!(r, Ok(Outcome::Failed(s)) if s.contains(&1)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ring_sum_independent_of_schedule_and_size(n in 1usize..8, len in 0usize..40, seed: u64) {
        let rows = inputs(n, len, seed);
        let want = if len == 0 { vec![] } else { oracle_sum(&rows, |_| true) };
        let rows_ref = &rows;
        let (_, out) = sim::run(quiet(seed), &ids(n), |ep| {
            let me = ep.me() as usize;
            let mut c = comm(ep, n);
            let mut v = rows_ref[me].clone();
            c.allreduce_sum(&mut v).unwrap().ok().unwrap();
            v
        });
        for v in &out {
            prop_assert!(max_rel_gap(v, &want) <= 1e-12);
        }
    }

    #[test]
    fn one_random_failure_keeps_survivors_consistent(n in 2usize..6, victim_pick: u64, index in 0u64..12, seed: u64) {
        let victim = (victim_pick % n as u64) as NodeId;
        let rows = inputs(n, 17, seed);
        let plan = FaultPlan::parse([format!("{victim}@step:allreduce:{index}").as_str()]).unwrap();
        let out = ft_run(n, &plan, seed, true, &rows);
        let fired = out[victim as usize].is_err();
        let victims = if fired { BTreeSet::from([victim]) } else { BTreeSet::new() };
        check_consistent(&rows, &out, &victims);
    }
}
