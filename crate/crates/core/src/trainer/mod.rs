//! Data-parallel training loop with survivor continuation.
//!
//! Every worker holds a full model replica and a shard of the dataset. Per
//! batch it runs forward/backward on `batch / nodes` samples of its shard,
//! sums gradients (and its local loss) with the other workers, divides by the
//! number of contributions and applies the update. In fault-tolerant mode a
//! failure shrinks the communicator, the survivors' already-computed
//! gradients are re-reduced without the dead node's, and the dead nodes'
//! shards are read back and spread over the survivors before the next batch.

mod dump;
mod orchestrate;
mod sampler;

use std::collections::BTreeSet;
use std::time::Duration;

use thiserror::Error;

use crate::collective::{CommConfig, CommError, Communicator, Outcome, ShrinkReport};
use crate::data::{load_ranges, DataError, DatasetMeta, LoadedShard, PartitionMap};
use crate::metrics::{secs, BatchRecord, RunSummary};
use crate::model_spec::ModelSpec;
use crate::nn::{FlatGradient, NnError};
use crate::transport::{FaultPlan, MailboxStats, PlanError, Transport};
use crate::{Network, NodeId, Tensor};

pub use dump::{read_param_dump, write_param_dump, DUMP_MAGIC};
pub use orchestrate::{aggregate, reference_run, train_in_process, InProcessRun, ReferenceRun};
pub use sampler::Sampler;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Plain allreduce; any failure ends the run.
    Sgd,
    /// Allreduce retried on the survivors until it succeeds.
    FtSgd,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Sgd => "sgd",
            Mode::FtSgd => "ft-sgd",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "sgd" => Some(Mode::Sgd),
            "ft-sgd" | "ft" => Some(Mode::FtSgd),
            _ => None,
        }
    }
}

/// Modelled cost charged to the transport clock. Only the deterministic
/// in-process network lets it move time; real-time transports ignore it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub ns_per_mac: f64,
    pub io_ns_per_byte: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            ns_per_mac: 1.0,
            io_ns_per_byte: 1.0,
        }
    }
}

impl CostModel {
    /// Forward plus backward, counted as three forward passes.
    pub fn compute(&self, macs_per_sample: u64, samples: usize) -> Duration {
        Duration::from_nanos((3.0 * macs_per_sample as f64 * samples as f64 * self.ns_per_mac) as u64)
    }

    pub fn io(&self, bytes: u64) -> Duration {
        Duration::from_nanos((bytes as f64 * self.io_ns_per_byte) as u64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub lr: f64,
    /// Global batch size at full strength.
    pub batch: usize,
    pub batches: u64,
    pub nodes: usize,
    pub seed: u64,
    pub mode: Mode,
    pub faults: FaultPlan,
    pub cost: CostModel,
    pub comm: CommConfig,
}

impl TrainConfig {
    pub fn node_ids(&self) -> Vec<NodeId> {
        (0..self.nodes as NodeId).collect()
    }

    /// Samples per node per batch; constant for the whole run.
    pub fn slice(&self) -> usize {
        self.batch / self.nodes
    }

    pub fn validate(&self, meta: &DatasetMeta) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.nodes == 0 {
            return bad("at least one node is required".into());
        }
        if self.batch < self.nodes {
            return bad(format!("batch {} is smaller than node count {}", self.batch, self.nodes));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if meta.sample_count < self.nodes {
            return bad(format!("{} samples cannot be split over {} nodes", meta.sample_count, self.nodes));
        }
        let features: usize = self.model.input.iter().product();
        if features != meta.features() {
            return bad(format!("model takes {features} inputs, dataset has {}", meta.features()));
        }
        let outputs = self.model.shapes().map_err(|e| TrainError::Config(e.to_string()))?;
        let classes = outputs.last().map_or(0, |s| s.features());
        if classes < meta.class_count {
            return bad(format!("model has {classes} outputs, dataset has {} classes", meta.class_count));
        }
        self.faults.validate(&self.node_ids())?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("batch {batch}: collective failed (nodes {failed:?}); plain SGD cannot continue")]
    TerminalFailure { batch: u64, failed: BTreeSet<NodeId> },
    #[error("no survivors")]
    NoSurvivors,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything one worker observed. Killed workers report what they did
/// before dying.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkerReport {
    pub node: NodeId,
    pub killed: bool,
    pub records: Vec<BatchRecord>,
    pub summary: RunSummary,
    pub local_losses: Vec<f64>,
    /// Communicator size when each batch started, and the number of
    /// gradients its applied update averaged.
    pub started_with: Vec<usize>,
    pub contributors: Vec<usize>,
    pub final_params: Vec<f64>,
    pub final_members: Vec<NodeId>,
    pub final_epoch: u32,
    pub shrinks: Vec<ShrinkReport>,
    pub fenced: u64,
    pub stats: MailboxStats,
}

impl WorkerReport {
    /// Batches whose update lacks a gradient computed for it.
    pub fn interrupted_batches(&self) -> usize {
        self.started_with
            .iter()
            .zip(&self.contributors)
            .filter(|(s, c)| c < s)
            .count()
    }
}

struct Recovery {
    bytes: u64,
    time: Duration,
}

struct Worker<'a, T: Transport> {
    cfg: &'a TrainConfig,
    meta: &'a DatasetMeta,
    comm: Communicator<T>,
    net: Network,
    map: PartitionMap,
    shard: LoadedShard,
    sampler: Sampler,
    report: WorkerReport,
}

/// Runs one worker to completion over any transport.
pub fn run_worker<T: Transport>(t: T, cfg: &TrainConfig, meta: &DatasetMeta) -> Result<WorkerReport, TrainError> {
    let me = t.me();
    let members = cfg.node_ids();
    let comm = Communicator::new(t, members.clone(), cfg.comm)?.with_injector(cfg.faults.injector_for(me));
    let map = PartitionMap::partition(meta.sample_count, &members, 0)?;
    let mut w = Worker {
        cfg,
        meta,
        comm,
        net: Network::from_spec(&cfg.model, cfg.seed)?,
        shard: LoadedShard::default(),
        sampler: Sampler::new(cfg.seed, 0, me, 1),
        map,
        report: WorkerReport {
            node: me,
            ..WorkerReport::default()
        },
    };
    match w.run() {
        Ok(()) => {}
        Err(TrainError::Comm(CommError::Killed)) => w.report.killed = true,
        Err(e) => return Err(e),
    }
    w.report.final_params = w.net.parameter_vector();
    w.report.final_members = w.comm.members().to_vec();
    w.report.final_epoch = w.comm.epoch();
    w.report.shrinks = w.comm.shrinks().to_vec();
    w.report.fenced = w.comm.fenced();
    w.report.stats = w.comm.transport().stats();
    Ok(w.report)
}

impl<T: Transport> Worker<'_, T> {
    fn now(&self) -> Duration {
        self.comm.transport().now()
    }

    fn run(&mut self) -> Result<(), TrainError> {
        let cfg = self.cfg;
        let me = self.comm.me();
        let start = self.now();
        let batch_trigger = cfg.faults.injector_for(me);

        let t0 = self.now();
        self.shard = load_ranges(self.meta, self.map.ranges_of(me))?;
        let io = cfg.cost.io(self.shard.stats.bytes_read());
        self.comm.transport_mut().advance(io);
        self.report.summary.full_load_bytes = self.shard.stats.payload_bytes();
        self.report.summary.full_load_time_s = secs(self.now() - t0);
        self.sampler = Sampler::new(cfg.seed, self.comm.epoch(), me, self.shard.len());

        let mut carried = self.start_replicas()?;

        let slice = cfg.slice();
        let macs = self.net.forward_macs_per_sample();
        let mut dims = vec![slice];
        dims.extend(&cfg.model.input);
        let classes = self.net.output_features();

        for batch in 0..cfg.batches {
            if batch_trigger.at_batch(batch) {
                return Err(self.comm.kill().into());
            }
            let tb = self.now();
            let rows = self.sampler.next_slice(slice);
            let (x, y) = self.gather(&rows, &dims, classes)?;
            self.net.forward(&x)?;
            let (loss, grad) = self.net.backward(&y)?;
            self.comm.transport_mut().advance(cfg.cost.compute(macs, slice));
            let mut compute = self.now() - tb;

            let started = self.comm.size();
            let mut buf = grad.0;
            buf.push(loss);
            let tc = self.now();
            let (sum, contributors, shrinks) = match cfg.mode {
                Mode::FtSgd => {
                    let a = self.comm.allreduce_until_success(&mut buf)?;
                    (buf, a.contributors, a.shrinks)
                }
                Mode::Sgd => match self.comm.allreduce_sum(&mut buf)? {
                    Outcome::Ok(()) => (buf, started, Vec::new()),
                    Outcome::Failed(failed) => return Err(TrainError::TerminalFailure { batch, failed }),
                },
            };
            let shrink_time: Duration = shrinks.iter().map(|s| s.duration).sum();
            let comm = (self.now() - tc).saturating_sub(shrink_time);

            let tu = self.now();
            let divisor = contributors as f64;
            let mut avg: Vec<f64> = sum.into_iter().map(|v| v / divisor).collect();
            let mean_loss = avg.pop().expect("loss slot");
            self.net.apply_update(&FlatGradient(avg), cfg.lr)?;
            compute += self.now() - tu;

            let rec = self.recover(&shrinks)?;
            let shrink_count = shrinks.len() + carried.0;
            let shrink_time_s = secs(shrink_time) + carried.1;
            carried = (0, 0.0);
            self.report.local_losses.push(loss);
            self.report.started_with.push(started);
            self.report.contributors.push(contributors);
            self.report.records.push(BatchRecord {
                batch,
                epoch: self.comm.epoch(),
                live_nodes: self.comm.size(),
                loss: mean_loss,
                compute_time_s: secs(compute),
                comm_time_s: secs(comm),
                shrink_count,
                shrink_time_s,
                reload_bytes: rec.bytes,
                reload_time_s: secs(rec.time),
            });
        }

        if cfg.mode == Mode::FtSgd {
            self.comm.linger()?;
        }
        self.report.summary.total_time_s = secs(self.now() - start);
        self.report.summary.shrinks = self.comm.shrinks().len();
        Ok(())
    }

    /// Brings every replica to rank 0's parameters. Shrinks here are charged
    /// to the first batch.
    fn start_replicas(&mut self) -> Result<(usize, f64), TrainError> {
        let params = self.net.parameter_vector();
        match self.cfg.mode {
            Mode::FtSgd => {
                let a = self.comm.bcast_until_success(&params)?;
                self.net.load_parameter_vector(&a.value)?;
                let b = self.comm.barrier_until_success()?;
                let shrinks: Vec<ShrinkReport> = a.shrinks.into_iter().chain(b.shrinks).collect();
                self.recover(&shrinks)?;
                Ok((shrinks.len(), shrinks.iter().map(|s| secs(s.duration)).sum()))
            }
            Mode::Sgd => {
                let mut p = params;
                for step in [self.comm.bcast(&mut p, 0)?, self.comm.barrier()?] {
                    if let Outcome::Failed(failed) = step {
                        return Err(TrainError::TerminalFailure { batch: 0, failed });
                    }
                }
                self.net.load_parameter_vector(&p)?;
                Ok((0, 0.0))
            }
        }
    }

    fn gather(&self, rows: &[usize], dims: &[usize], classes: usize) -> Result<(Tensor, Tensor), TrainError> {
        let f = self.shard.features;
        let mut x = Vec::with_capacity(rows.len() * f);
        let mut y = vec![0.0; rows.len() * classes];
        for (i, &r) in rows.iter().enumerate() {
            x.extend_from_slice(self.shard.row(r));
            let label = self.shard.labels[r] as usize;
            if label >= classes {
                return Err(TrainError::Config(format!("label {label} exceeds {classes} classes")));
            }
            y[i * classes + label] = 1.0;
        }
        Ok((Tensor::from_vec(dims, x)?, Tensor::from_vec(&[rows.len(), classes], y)?))
    }

    /// Applies each shrink to the partition map and reads back this node's
    /// share of the lost shards.
    fn recover(&mut self, shrinks: &[ShrinkReport]) -> Result<Recovery, TrainError> {
        let mut out = Recovery {
            bytes: 0,
            time: Duration::ZERO,
        };
        if shrinks.is_empty() {
            return Ok(out);
        }
        let me = self.comm.me();
        let t0 = self.now();
        for s in shrinks {
            let failed: BTreeSet<NodeId> = s.removed.iter().copied().collect();
            let (map, plan) = self.map.repartition_after_failure(&failed, &s.members, s.new_epoch)?;
            if let Some(ranges) = plan.get(&me) {
                let extra = load_ranges(self.meta, ranges)?;
                out.bytes += extra.stats.payload_bytes();
                let io = self.cfg.cost.io(extra.stats.bytes_read());
                self.comm.transport_mut().advance(io);
                self.shard.extend(extra);
            }
            self.map = map;
        }
        self.map.ensure_epoch(self.comm.epoch())?;
        self.sampler = Sampler::new(self.cfg.seed, self.comm.epoch(), me, self.shard.len());
        out.time = self.now() - t0;
        self.report.summary.partial_load_bytes += out.bytes;
        self.report.summary.partial_load_time_s += secs(out.time);
        Ok(out)
    }
}
