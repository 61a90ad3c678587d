use std::collections::BTreeSet;

use ftsgd_core::collective::{CommConfig, Communicator};
use ftsgd_core::data::synth::{write_dataset, OutputFormat, SynthSpec};
use ftsgd_core::data::{DatasetMeta, PartitionMap};
use ftsgd_core::model_spec::ModelSpec;
use ftsgd_core::trainer::{reference_run, train_in_process, CostModel, Mode, TrainConfig, TrainError};
use ftsgd_core::transport::sim::{self, SimConfig};
use ftsgd_core::transport::{FaultPlan, Transport};
use ftsgd_core::NodeId;

const FEATURES: usize = 36;

fn dataset(count: usize) -> (tempfile::TempDir, DatasetMeta) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        count,
        shape: vec![6, 6, 1],
        classes: 4,
        seed: 11,
        noise: 60,
    };
    write_dataset(dir.path(), &spec, OutputFormat::Raw).unwrap();
    let meta = DatasetMeta::open_dir(dir.path()).unwrap();
    (dir, meta)
}

fn config(nodes: usize, batches: u64, mode: Mode, faults: &[&str]) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::parse("input 36\nfc 12\nrelu\nfc 4\nsoftmax\n").unwrap(),
        lr: 0.1,
        batch: 24,
        batches,
        nodes,
        seed: 5,
        mode,
        faults: FaultPlan::parse(faults.iter().copied()).unwrap(),
        cost: CostModel::default(),
        comm: CommConfig::default(),
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn max_rel_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn single_node_matches_sequential_bit_for_bit() {
    let (_d, meta) = dataset(200);
    let cfg = config(1, 20, Mode::FtSgd, &[]);
    let run = train_in_process(&cfg, &meta, SimConfig::deterministic(1)).unwrap();
    let seq = reference_run(&cfg, &meta).unwrap();
    assert_eq!(bits(run.final_params().unwrap()), bits(&seq.final_params));
    assert_eq!(bits(&run.metrics.losses()), bits(&seq.losses));
}

#[test]
fn opposite_gradients_cancel() {
    let (_, out) = sim::run(SimConfig::deterministic(2), &[0, 1], |ep| {
        let me = ep.me();
        let mut c = Communicator::new(ep, [0, 1], CommConfig::default()).unwrap();
        let g: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * if me == 0 { 1.0 } else { -1.0 }).collect();
        let mut g = g;
        let a = c.allreduce_until_success(&mut g).unwrap();
        (g, a.contributors)
    });
    for (v, k) in out {
        assert_eq!(k, 2);
        assert!(v.iter().all(|x| *x == 0.0));
    }
}

#[test]
fn four_ranks_match_one_full_batch_model() {
    let (_d, meta) = dataset(400);
    let cfg = config(4, 40, Mode::FtSgd, &[]);
    let run = train_in_process(&cfg, &meta, SimConfig::deterministic(3)).unwrap();
    let seq = reference_run(&cfg, &meta).unwrap();
    assert!(run.survivors_agree);
    assert!(max_rel_gap(run.final_params().unwrap(), &seq.final_params) < 1e-10);
    assert!(max_rel_gap(&run.metrics.losses(), &seq.losses) < 1e-10);
    assert!(run.metrics.records.iter().all(|r| r.live_nodes == 4 && r.shrink_count == 0));
    run.metrics.validate().unwrap();
}

#[test]
fn kill_at_batch_thirty_averages_over_survivors() {
    let (_d, meta) = dataset(400);
    let cfg = config(4, 45, Mode::FtSgd, &["2@batch:30"]);
    let run = train_in_process(&cfg, &meta, SimConfig::deterministic(4)).unwrap();
    assert!(!run.stalled);
    assert!(run.survivors_agree);
    assert_eq!(run.kills.iter().map(|k| k.0).collect::<Vec<_>>(), vec![2]);

    let victim = &run.workers[2];
    assert!(victim.killed);
    assert_eq!(victim.records.len(), 30);

    let survivors: Vec<_> = run.survivors().collect();
    assert_eq!(survivors.len(), 3);
    for w in &survivors {
        assert_eq!(w.contributors[29], 4);
        assert_eq!(w.contributors[30], 3);
        assert_eq!(w.final_members, vec![0, 1, 3]);
        assert_eq!(w.interrupted_batches(), 1);
    }
    let local_sum: f64 = survivors.iter().map(|w| w.local_losses[30]).sum();
    let rec = &run.metrics.records[30];
    assert!((rec.loss - local_sum / 3.0).abs() < 1e-12);
    assert_eq!(rec.shrink_count, 1);
    assert!(rec.shrink_time_s > 0.0);
    let live: Vec<usize> = run.metrics.records.iter().map(|r| r.live_nodes).collect();
    assert_eq!(&live[..30], &[4; 30]);
    assert_eq!(&live[30..], &[3; 15]);

    let seq = reference_run(&cfg, &meta).unwrap();
    assert_eq!(seq.live_nodes, live);
    assert!(max_rel_gap(run.final_params().unwrap(), &seq.final_params) < 1e-10);
    run.metrics.validate().unwrap();
}

#[test]
fn only_the_lost_shard_is_reloaded() {
    let (_d, meta) = dataset(401);
    let cfg = config(4, 12, Mode::FtSgd, &["1@batch:5"]);
    let run = train_in_process(&cfg, &meta, SimConfig::deterministic(5)).unwrap();
    let record = (FEATURES + 1) as u64;
    let map = PartitionMap::partition(401, &[0, 1, 2, 3], 0).unwrap();
    assert_eq!(run.metrics.summary.full_load_bytes, 401 * record);
    assert_eq!(run.metrics.summary.partial_load_bytes, map.samples_of(1) as u64 * record);
    assert_eq!(run.metrics.records[5].reload_bytes, map.samples_of(1) as u64 * record);
    assert!(run.metrics.records.iter().enumerate().all(|(i, r)| i == 5 || r.reload_bytes == 0));
}

#[test]
fn same_seed_same_run() {
    let (_d, meta) = dataset(300);
    let cfg = config(3, 15, Mode::FtSgd, &["0@batch:7"]);
    let a = train_in_process(&cfg, &meta, SimConfig::deterministic(9)).unwrap();
    let b = train_in_process(&cfg, &meta, SimConfig::deterministic(9)).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    assert_eq!(a.workers, b.workers);
}

#[test]
fn fault_free_ft_equals_plain_sgd_bitwise() {
    let (_d, meta) = dataset(300);
    let sgd = train_in_process(&config(3, 20, Mode::Sgd, &[]), &meta, SimConfig::deterministic(6)).unwrap();
    let ft = train_in_process(&config(3, 20, Mode::FtSgd, &[]), &meta, SimConfig::deterministic(6)).unwrap();
    assert_eq!(bits(sgd.final_params().unwrap()), bits(ft.final_params().unwrap()));
    assert_eq!(bits(&sgd.metrics.losses()), bits(&ft.metrics.losses()));
}

#[test]
fn plain_sgd_stops_at_a_failure() {
    let (_d, meta) = dataset(300);
    let cfg = config(3, 20, Mode::Sgd, &["1@batch:4"]);
    match train_in_process(&cfg, &meta, SimConfig::deterministic(7)) {
        Err(TrainError::TerminalFailure { batch, failed }) => {
            assert_eq!(batch, 4);
            assert_eq!(failed, BTreeSet::from([1 as NodeId]));
        }
        other => panic!("expected a terminal failure, got {other:?}"),
    }
}

#[test]
fn rejects_batch_smaller_than_node_count() {
    let (_d, meta) = dataset(100);
    let mut cfg = config(4, 1, Mode::FtSgd, &[]);
    cfg.batch = 3;
    assert!(matches!(train_in_process(&cfg, &meta, SimConfig::deterministic(0)), Err(TrainError::Config(_))));
    let cfg = config(2, 1, Mode::FtSgd, &["5@batch:0"]);
    assert!(matches!(reference_run(&cfg, &meta), Err(TrainError::Plan(_))));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

        #[test]
        fn batch_kills_track_the_sequential_model(n in 2usize..5, victim in 0u32..4, at in 0u64..8, seed in 0u64..1000) {
            let victim = victim % n as u32;
            let (_d, meta) = dataset(160);
            let fault = format!("{victim}@batch:{at}");
            let cfg = config(n, 10, Mode::FtSgd, &[fault.as_str()]);
            let run = train_in_process(&cfg, &meta, SimConfig::deterministic(seed)).unwrap();
            let seq = reference_run(&cfg, &meta).unwrap();
            prop_assert!(run.survivors_agree);
            prop_assert!(max_rel_gap(run.final_params().unwrap(), &seq.final_params) < 1e-10);
            prop_assert_eq!(run.metrics.records.iter().map(|r| r.live_nodes).collect::<Vec<_>>(), seq.live_nodes);
        }

        #[test]
        fn send_kills_lose_at_most_one_update(n in 2usize..5, victim in 0u32..4, op in 0usize..3, index in 0u64..40, seed in 0u64..1000) {
            let victim = victim % n as u32;
            let op = ["allreduce", "bcast", "barrier"][op];
            let fault = format!("{victim}@step:{op}:{index}");
            let (_d, meta) = dataset(160);
            let cfg = config(n, 8, Mode::FtSgd, &[fault.as_str()]);
            let run = train_in_process(&cfg, &meta, SimConfig::deterministic(seed)).unwrap();
            prop_assert!(!run.stalled);
            prop_assert!(run.survivors_agree);
            for w in run.survivors() {
                prop_assert_eq!(w.records.len(), 8);
                prop_assert!(w.interrupted_batches() <= 1);
            }
            run.metrics.validate().unwrap();
        }
    }
}
