use std::collections::BTreeSet;

use super::{run_worker, Sampler, TrainConfig, TrainError, WorkerReport};
use crate::data::{load_ranges, DatasetMeta, LoadedShard, PartitionMap};
use crate::metrics::{RunMetrics, RunSummary};
use crate::transport::sim::{self, SimConfig};
use crate::transport::Trigger;
use crate::{FlatGradient, Network, NodeId, Tensor};

/// Outcome of a run on the in-process network.
#[derive(Debug)]
pub struct InProcessRun {
    pub metrics: RunMetrics,
    /// One report per initial node, in node order.
    pub workers: Vec<WorkerReport>,
    pub kills: Vec<(NodeId, std::time::Duration)>,
    pub stalled: bool,
    /// Every survivor ended with bit-identical parameters and membership.
    pub survivors_agree: bool,
}

impl InProcessRun {
    pub fn survivors(&self) -> impl Iterator<Item = &WorkerReport> {
        self.workers.iter().filter(|w| !w.killed)
    }

    pub fn reference_worker(&self) -> Option<&WorkerReport> {
        self.survivors().next()
    }

    pub fn final_params(&self) -> Option<&[f64]> {
        self.reference_worker().map(|w| w.final_params.as_slice())
    }
}

/// Runs every node as a thread on the simulated network.
pub fn train_in_process(cfg: &TrainConfig, meta: &DatasetMeta, net: SimConfig) -> Result<InProcessRun, TrainError> {
    cfg.validate(meta)?;
    let nodes = cfg.node_ids();
    let (simnet, results) = sim::run(net, &nodes, |ep| run_worker(ep, cfg, meta));
    let workers = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let (metrics, survivors_agree) = aggregate(&workers)?;
    Ok(InProcessRun {
        metrics,
        workers,
        kills: simnet.kills(),
        stalled: simnet.stalled(),
        survivors_agree,
    })
}

/// Combines per-worker reports into one run's metrics. Per-batch rows come
/// from the lowest surviving node; reload volume is summed across survivors
/// and reload time is the slowest survivor's. Also reports whether all
/// survivors ended with bit-identical parameters and membership.
pub fn aggregate(workers: &[WorkerReport]) -> Result<(RunMetrics, bool), TrainError> {
    let survivors: Vec<&WorkerReport> = workers.iter().filter(|w| !w.killed).collect();
    let lead = *survivors.first().ok_or(TrainError::NoSurvivors)?;
    let survivors_agree = survivors.iter().all(|w| {
        w.final_members == lead.final_members
            && w.final_epoch == lead.final_epoch
            && bits(&w.final_params) == bits(&lead.final_params)
    });

    let mut records = lead.records.clone();
    for (i, r) in records.iter_mut().enumerate() {
        let rows: Vec<_> = survivors.iter().filter_map(|w| w.records.get(i)).collect();
        r.reload_bytes = rows.iter().map(|x| x.reload_bytes).sum();
        r.reload_time_s = rows.iter().map(|x| x.reload_time_s).fold(0.0, f64::max);
    }
    let max = |f: fn(&RunSummary) -> f64, set: &[&WorkerReport]| set.iter().map(|w| f(&w.summary)).fold(0.0, f64::max);
    let all: Vec<&WorkerReport> = workers.iter().collect();
    let summary = RunSummary {
        total_time_s: max(|s| s.total_time_s, &survivors),
        shrinks: lead.summary.shrinks,
        full_load_bytes: workers.iter().map(|w| w.summary.full_load_bytes).sum(),
        full_load_time_s: max(|s| s.full_load_time_s, &all),
        partial_load_bytes: survivors.iter().map(|w| w.summary.partial_load_bytes).sum(),
        partial_load_time_s: max(|s| s.partial_load_time_s, &survivors),
    };
    Ok((RunMetrics { records, summary }, survivors_agree))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Result of the sequential emulation.
#[derive(Clone, Debug)]
pub struct ReferenceRun {
    pub losses: Vec<f64>,
    pub live_nodes: Vec<usize>,
    pub final_params: Vec<f64>,
}

/// Sequential single-model emulation of a run: each batch concatenates the
/// slices every live virtual node would draw and takes one full-batch step.
/// Batch-triggered faults drop the victim from that batch on; at most one
/// victim per batch, and send-triggered faults are not modelled.
pub fn reference_run(cfg: &TrainConfig, meta: &DatasetMeta) -> Result<ReferenceRun, TrainError> {
    cfg.validate(meta)?;
    let mut kills: Vec<(u64, NodeId)> = Vec::new();
    for f in cfg.faults.faults() {
        match f.trigger {
            Trigger::AtBatch(k) => kills.push((k, f.victim)),
            Trigger::AtStep { .. } => {
                return Err(TrainError::Config("the sequential reference cannot model send-time faults".into()))
            }
        }
    }
    kills.sort_unstable();
    let victims: BTreeSet<NodeId> = kills.iter().map(|k| k.1).collect();
    if victims.len() != kills.len() || kills.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(TrainError::Config("the sequential reference models one victim per batch".into()));
    }

    let mut live = cfg.node_ids();
    let mut epoch = 0u32;
    let mut map = PartitionMap::partition(meta.sample_count, &live, epoch)?;
    let mut shards: Vec<LoadedShard> = live.iter().map(|&n| load_ranges(meta, map.ranges_of(n))).collect::<Result<_, _>>()?;
    let mut samplers: Vec<Sampler> = live
        .iter()
        .zip(&shards)
        .map(|(&n, s)| Sampler::new(cfg.seed, epoch, n, s.len()))
        .collect();
    let mut net = Network::from_spec(&cfg.model, cfg.seed)?;
    let classes = net.output_features();
    let slice = cfg.slice();
    let mut out = ReferenceRun {
        losses: Vec::new(),
        live_nodes: Vec::new(),
        final_params: Vec::new(),
    };

    for batch in 0..cfg.batches {
        let victim = kills.iter().find(|k| k.0 == batch).map(|k| k.1);
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for (i, &node) in live.iter().enumerate() {
            let rows = samplers[i].next_slice(slice);
            if Some(node) == victim {
                continue;
            }
            for r in rows {
                x.extend_from_slice(shards[i].row(r));
                labels.push(shards[i].labels[r] as usize);
            }
        }
        let b = labels.len();
        let mut dims = vec![b];
        dims.extend(&cfg.model.input);
        let mut y = vec![0.0; b * classes];
        for (i, l) in labels.into_iter().enumerate() {
            y[i * classes + l] = 1.0;
        }
        net.forward(&Tensor::from_vec(&dims, x)?)?;
        let (loss, grad): (f64, FlatGradient) = net.backward(&Tensor::from_vec(&[b, classes], y)?)?;
        net.apply_update(&grad, cfg.lr)?;

        if let Some(v) = victim {
            let pos = live.iter().position(|&n| n == v).expect("victim is live");
            live.remove(pos);
            shards.remove(pos);
            epoch += 1;
            let failed: BTreeSet<NodeId> = [v].into();
            let (next, plan) = map.repartition_after_failure(&failed, &live, epoch)?;
            for (i, &n) in live.iter().enumerate() {
                if let Some(r) = plan.get(&n) {
                    let extra = load_ranges(meta, r)?;
                    shards[i].extend(extra);
                }
            }
            map = next;
            samplers = live
                .iter()
                .zip(&shards)
                .map(|(&n, s)| Sampler::new(cfg.seed, epoch, n, s.len()))
                .collect();
        }
        out.losses.push(loss);
        out.live_nodes.push(live.len());
    }
    out.final_params = net.parameter_vector();
    Ok(out)
}
