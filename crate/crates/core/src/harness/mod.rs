//! Experiment runner: named scenarios, repetitions, per-run CSVs, aggregates
//! and gnuplot scripts.
//!
//! Scenario files are flat TOML tables, one per scenario:
//!
//! ```text
//! [mlp-ft-kill]
//! dataset = "synth:6000"        # or a directory holding IDX or raw shard files
//! model = "models/mlp.txt"
//! nodes = 4
//! batches = 100
//! batch = 64
//! mode = "ft-sgd"               # or "sgd"
//! faults = ["1@batch:30"]
//! seeds = [1, 2]
//! repetitions = 3
//! transport = "sim"             # "sim", "sim-free" or "tcp"
//! ```
//!
//! Relative paths resolve against the scenario file's directory.

mod aggregate;
mod plots;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::audit::{IoAudit, Phase, WriteKind};
use crate::collective::CommConfig;
use crate::data::synth::{write_dataset, OutputFormat, SynthSpec};
use crate::data::{DataError, DatasetMeta};
use crate::metrics::{median, MetricsError, RunMetrics};
use crate::model_spec::ModelSpec;
use crate::trainer::{train_in_process, write_param_dump, CostModel, Mode, TrainConfig, TrainError};
use crate::transport::sim::SimConfig;
use crate::transport::{FaultPlan, HeartbeatConfig};

pub use aggregate::{aggregate_runs, AggregateRow, AGGREGATE_COLUMNS};
pub use plots::write_plots;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario file: {0}")]
    Spec(String),
    #[error("scenario `{scenario}`: {msg}")]
    Scenario { scenario: String, msg: String },
    #[error("missing asset {0}")]
    Missing(PathBuf),
    #[error("launch failed: {0}")]
    Launch(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    /// In-process, deterministic virtual time.
    Sim,
    /// In-process, real threads and wall-clock time.
    SimFree,
    /// One OS process per node over loopback TCP.
    Tcp,
}

impl TransportKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sim" => Some(Self::Sim),
            "sim-free" => Some(Self::SimFree),
            "tcp" => Some(Self::Tcp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sim => "sim",
            Self::SimFree => "sim-free",
            Self::Tcp => "tcp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Dir(PathBuf),
    /// MNIST-shaped synthetic set generated on first use.
    Synth { count: usize, seed: u64 },
}

impl DatasetSource {
    pub fn parse(s: &str, base: &Path) -> Result<Self, String> {
        match s.strip_prefix("synth:") {
            Some(rest) => {
                let mut it = rest.split(':');
                let count = it.next().and_then(|c| c.parse().ok()).ok_or(format!("bad synthetic dataset `{s}`"))?;
                let seed = match it.next() {
                    Some(x) => x.parse().map_err(|_| format!("bad synthetic seed in `{s}`"))?,
                    None => 7,
                };
                Ok(Self::Synth { count, seed })
            }
            None => Ok(Self::Dir(base.join(s))),
        }
    }

    /// Directory holding the dataset, generating it under `cache` if needed.
    pub fn materialize(&self, cache: &Path, audit: &IoAudit) -> Result<PathBuf, HarnessError> {
        match self {
            Self::Dir(d) => {
                if !d.is_dir() {
                    return Err(HarnessError::Missing(d.clone()));
                }
                Ok(d.clone())
            }
            &Self::Synth { count, seed } => {
                let dir = cache.join(format!("synth-{count}-{seed}"));
                if DatasetMeta::open_dir(&dir).map(|m| m.sample_count).ok() != Some(count) {
                    write_dataset(&dir, &SynthSpec::mnist_like(count, seed), OutputFormat::Raw)?;
                    for entry in fs::read_dir(&dir)? {
                        let entry = entry?;
                        audit.note(entry.path(), WriteKind::Dataset, entry.metadata()?.len());
                    }
                }
                Ok(dir)
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    dataset: String,
    model: String,
    nodes: usize,
    batches: u64,
    batch: usize,
    #[serde(default = "default_lr")]
    lr: f64,
    #[serde(default = "default_mode")]
    mode: String,
    #[serde(default)]
    faults: Vec<String>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_reps")]
    repetitions: usize,
    #[serde(default = "default_transport")]
    transport: String,
    heartbeat_interval_ms: Option<u64>,
    heartbeat_timeout_ms: Option<u64>,
    ns_per_mac: Option<f64>,
    io_ns_per_byte: Option<f64>,
}

fn default_lr() -> f64 {
    0.05
}
fn default_mode() -> String {
    "ft-sgd".into()
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_reps() -> usize {
    1
}
fn default_transport() -> String {
    "sim".into()
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub dataset: DatasetSource,
    pub model_path: PathBuf,
    pub model: ModelSpec,
    pub nodes: usize,
    pub batches: u64,
    pub batch: usize,
    pub lr: f64,
    pub mode: Mode,
    pub faults: FaultPlan,
    pub seeds: Vec<u64>,
    pub repetitions: usize,
    pub transport: TransportKind,
    pub heartbeat: HeartbeatConfig,
    pub cost: CostModel,
}

impl Scenario {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            lr: self.lr,
            batch: self.batch,
            batches: self.batches,
            nodes: self.nodes,
            seed,
            mode: self.mode,
            faults: self.faults.clone(),
            cost: self.cost,
            comm: CommConfig::default(),
        }
    }

    /// Network settings for one repetition of one seed.
    pub fn sim_config(&self, seed: u64, rep: usize) -> SimConfig {
        let base = match self.transport {
            TransportKind::SimFree => SimConfig::free(),
            _ => SimConfig::deterministic(seed.wrapping_mul(1_000_003).wrapping_add(rep as u64)),
        };
        SimConfig {
            heartbeat: Some(self.heartbeat),
            ..base
        }
    }

    /// (seed, repetition) pairs in run order.
    pub fn runs(&self) -> Vec<(u64, usize)> {
        self.seeds
            .iter()
            .flat_map(|&s| (0..self.repetitions).map(move |r| (s, r)))
            .collect()
    }

    fn from_raw(name: String, raw: RawScenario, base: &Path) -> Result<Self, HarnessError> {
        let bad = |msg: String| HarnessError::Scenario {
            scenario: name.clone(),
            msg,
        };
        if raw.repetitions == 0 {
            return Err(bad("repetitions must be at least 1".into()));
        }
        if raw.seeds.is_empty() {
            return Err(bad("at least one seed is required".into()));
        }
        let model_path = base.join(&raw.model);
        let model = ModelSpec::from_file(&model_path).map_err(|e| bad(format!("{}: {e}", model_path.display())))?;
        let mode = Mode::parse(&raw.mode).ok_or_else(|| bad(format!("unknown mode `{}`", raw.mode)))?;
        let transport =
            TransportKind::parse(&raw.transport).ok_or_else(|| bad(format!("unknown transport `{}`", raw.transport)))?;
        let faults = FaultPlan::parse(raw.faults.iter().map(String::as_str)).map_err(|e| bad(e.to_string()))?;
        let nodes: Vec<u32> = (0..raw.nodes as u32).collect();
        faults.validate(&nodes).map_err(|e| bad(e.to_string()))?;
        let d = HeartbeatConfig::default();
        let heartbeat = HeartbeatConfig {
            interval: raw.heartbeat_interval_ms.map_or(d.interval, Duration::from_millis),
            timeout: raw.heartbeat_timeout_ms.map_or(d.timeout, Duration::from_millis),
        };
        if heartbeat.timeout <= heartbeat.interval {
            return Err(bad("heartbeat timeout must exceed the interval".into()));
        }
        let c = CostModel::default();
        Ok(Scenario {
            dataset: DatasetSource::parse(&raw.dataset, base).map_err(bad)?,
            model_path,
            model,
            nodes: raw.nodes,
            batches: raw.batches,
            batch: raw.batch,
            lr: raw.lr,
            mode,
            faults,
            seeds: raw.seeds,
            repetitions: raw.repetitions,
            transport,
            heartbeat,
            cost: CostModel {
                ns_per_mac: raw.ns_per_mac.unwrap_or(c.ns_per_mac),
                io_ns_per_byte: raw.io_ns_per_byte.unwrap_or(c.io_ns_per_byte),
            },
            name,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub scenarios: Vec<Scenario>,
}

impl ExperimentSpec {
    pub fn parse(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let tables: BTreeMap<String, toml::Value> = toml::from_str(text).map_err(|e| HarnessError::Spec(e.to_string()))?;
        // keep file order; TOML rejects duplicate table names
        let mut order: Vec<(usize, String)> = tables
            .keys()
            .map(|k| (text.find(&format!("[{k}]")).unwrap_or(usize::MAX), k.clone()))
            .collect();
        order.sort();
        let mut scenarios = Vec::new();
        for (_, name) in order {
            let raw: RawScenario = tables[&name].clone().try_into().map_err(|e: toml::de::Error| HarnessError::Scenario {
                scenario: name.clone(),
                msg: e.message().to_string(),
            })?;
            scenarios.push(Scenario::from_raw(name, raw, base)?);
        }
        if scenarios.is_empty() {
            return Err(HarnessError::Spec("no scenarios".into()));
        }
        Ok(ExperimentSpec { scenarios })
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|_| HarnessError::Missing(path.to_path_buf()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// What a launcher hands back for one run.
#[derive(Clone, Debug)]
pub struct Launched {
    pub metrics: RunMetrics,
    pub final_params: Vec<f64>,
    pub survivors_agree: bool,
    /// Largest number of batches any survivor applied without a gradient
    /// computed for it.
    pub lost_updates: usize,
}

/// Starts the workers of one run and collects their results.
pub trait Launcher {
    fn launch(
        &self,
        scenario: &Scenario,
        cfg: &TrainConfig,
        data_dir: &Path,
        meta: &DatasetMeta,
        net: SimConfig,
    ) -> Result<Launched, HarnessError>;
}

/// Runs workers as threads on the simulated network.
pub struct InProcess;

impl Launcher for InProcess {
    fn launch(
        &self,
        scenario: &Scenario,
        cfg: &TrainConfig,
        _data_dir: &Path,
        meta: &DatasetMeta,
        net: SimConfig,
    ) -> Result<Launched, HarnessError> {
        if scenario.transport == TransportKind::Tcp {
            return Err(HarnessError::Launch("tcp scenarios need the multi-process launcher".into()));
        }
        let run = train_in_process(cfg, meta, net)?;
        if run.stalled {
            return Err(HarnessError::Launch("simulated network stalled".into()));
        }
        Ok(Launched {
            final_params: run.final_params().unwrap_or_default().to_vec(),
            survivors_agree: run.survivors_agree,
            lost_updates: run.survivors().map(|w| w.interrupted_batches()).max().unwrap_or(0),
            metrics: run.metrics,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub scenario: String,
    pub seed: u64,
    pub rep: usize,
    pub nodes: usize,
    pub mode: Mode,
    pub csv: PathBuf,
    pub metrics: RunMetrics,
    pub survivors_agree: bool,
    pub lost_updates: usize,
}

impl RunOutcome {
    pub fn median_batch_time_s(&self) -> f64 {
        median(&self.metrics.batch_times())
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub runs: Vec<RunOutcome>,
}

impl ExperimentReport {
    pub fn runs_of<'a>(&'a self, scenario: &'a str) -> impl Iterator<Item = &'a RunOutcome> + 'a {
        self.runs.iter().filter(move |r| r.scenario == scenario)
    }
}

pub const SUMMARY_COLUMNS: &str = "scenario,seed,rep,mode,nodes,batches,final_loss,median_batch_time_s,total_time_s,shrinks,shrink_time_s,full_load_bytes,full_load_time_s,partial_load_bytes,partial_load_time_s,lost_updates,survivors_agree";

/// Runs every scenario, writing `<out>/<scenario>/seed<S>-rep<R>.csv` and
/// the final parameters per run, `<out>/<scenario>/aggregate.csv`,
/// `<out>/summary.csv` and plot scripts under `<out>/plots`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out: &Path,
    launcher: &dyn Launcher,
    audit: &IoAudit,
) -> Result<ExperimentReport, HarnessError> {
    audit.set_phase(Phase::Setup);
    fs::create_dir_all(out)?;
    let mut prepared = Vec::new();
    for sc in &spec.scenarios {
        let dir = sc.dataset.materialize(&out.join("data"), audit)?;
        let meta = DatasetMeta::open_dir(&dir)?;
        sc.train_config(sc.seeds[0])
            .validate(&meta)
            .map_err(|e| HarnessError::Scenario {
                scenario: sc.name.clone(),
                msg: e.to_string(),
            })?;
        fs::create_dir_all(out.join(&sc.name))?;
        prepared.push((dir, meta));
    }

    let mut runs = Vec::new();
    for (sc, (dir, meta)) in spec.scenarios.iter().zip(&prepared) {
        let mut metrics = Vec::new();
        for (seed, rep) in sc.runs() {
            let cfg = sc.train_config(seed);
            audit.set_phase(Phase::Training);
            let launched = launcher.launch(sc, &cfg, dir, meta, sc.sim_config(seed, rep))?;
            audit.set_phase(Phase::Final);
            launched.metrics.validate()?;
            let stem = format!("seed{seed}-rep{rep}");
            let csv = out.join(&sc.name).join(format!("{stem}.csv"));
            audit.write_file(&csv, WriteKind::Metrics, launched.metrics.to_csv().as_bytes())?;
            write_param_dump(audit, out.join(&sc.name).join(format!("{stem}.params")), &launched.final_params)?;
            metrics.push(launched.metrics.clone());
            runs.push(RunOutcome {
                scenario: sc.name.clone(),
                seed,
                rep,
                nodes: sc.nodes,
                mode: sc.mode,
                csv,
                metrics: launched.metrics,
                survivors_agree: launched.survivors_agree,
                lost_updates: launched.lost_updates,
            });
        }
        let rows = aggregate_runs(&metrics);
        audit.write_file(
            out.join(&sc.name).join("aggregate.csv"),
            WriteKind::Metrics,
            aggregate::to_csv(&rows).as_bytes(),
        )?;
    }

    let report = ExperimentReport {
        out_dir: out.to_path_buf(),
        runs,
    };
    audit.write_file(out.join("summary.csv"), WriteKind::Report, summary_csv(&report).as_bytes())?;
    write_plots(spec, &report, &out.join("plots"), audit)?;
    Ok(report)
}

pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut s = format!("{SUMMARY_COLUMNS}\n");
    for r in &report.runs {
        let m = &r.metrics.summary;
        s += &format!(
            "{},{},{},{},{},{},{:?},{:?},{:?},{},{:?},{},{:?},{},{:?},{},{}\n",
            r.scenario,
            r.seed,
            r.rep,
            r.mode.name(),
            r.nodes,
            r.metrics.records.len(),
            r.metrics.records.last().map_or(f64::NAN, |x| x.loss),
            r.median_batch_time_s(),
            m.total_time_s,
            m.shrinks,
            r.metrics.total_shrink_time_s(),
            m.full_load_bytes,
            m.full_load_time_s,
            m.partial_load_bytes,
            m.partial_load_time_s,
            r.lost_updates,
            r.survivors_agree
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::sim::SimMode;

    const MLP: &str = "input 784\nfc 16\nrelu\nfc 10\nsoftmax\n";

    fn spec_dir(text: &str) -> (tempfile::TempDir, ExperimentSpec) {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mlp.txt"), MLP).unwrap();
        let spec = ExperimentSpec::parse(text, dir.path()).unwrap();
        (dir, spec)
    }

    #[test]
    fn parses_scenarios_in_file_order_with_defaults() {
        let (_d, spec) = spec_dir(
            "[b]\ndataset = \"synth:100\"\nmodel = \"mlp.txt\"\nnodes = 2\nbatches = 3\nbatch = 8\n\n\
             [a]\ndataset = \"synth:100:3\"\nmodel = \"mlp.txt\"\nnodes = 4\nbatches = 3\nbatch = 8\nmode = \"sgd\"\n\
             faults = [\"1@batch:1\"]\nseeds = [4, 5]\nrepetitions = 2\ntransport = \"sim-free\"\n",
        );
        let names: Vec<&str> = spec.scenarios.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        let b = &spec.scenarios[0];
        assert_eq!((b.mode, b.transport, b.repetitions, b.lr), (Mode::FtSgd, TransportKind::Sim, 1, 0.05));
        assert_eq!(b.dataset, DatasetSource::Synth { count: 100, seed: 7 });
        let a = &spec.scenarios[1];
        assert_eq!(a.runs(), vec![(4, 0), (4, 1), (5, 0), (5, 1)]);
        assert_eq!(a.faults.to_string(), "1@batch:1");
        assert_eq!(a.sim_config(4, 0).mode, SimMode::Free);
    }

    #[test]
    fn rejects_bad_scenarios() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mlp.txt"), MLP).unwrap();
        let base = "dataset = \"synth:10\"\nmodel = \"mlp.txt\"\nnodes = 2\nbatches = 1\nbatch = 2\n";
        for extra in ["repetitions = 0\n", "seeds = []\n", "mode = \"adam\"\n", "faults = [\"9@batch:0\"]\n", "colour = 1\n"] {
            let text = format!("[x]\n{base}{extra}");
            assert!(ExperimentSpec::parse(&text, dir.path()).is_err(), "{extra}");
        }
        assert!(ExperimentSpec::parse(&format!("[x]\n{base}[x]\n{base}"), dir.path()).is_err());
        assert!(ExperimentSpec::parse("", dir.path()).is_err());
    }

    #[test]
    fn experiment_writes_runs_aggregate_and_plots() {
        let (d, spec) = spec_dir(
            "[pair-ft]\ndataset = \"synth:200\"\nmodel = \"mlp.txt\"\nnodes = 2\nbatches = 4\nbatch = 8\n\
             faults = [\"1@batch:2\"]\n\n\
             [pair-sgd]\ndataset = \"synth:200\"\nmodel = \"mlp.txt\"\nnodes = 2\nbatches = 4\nbatch = 8\nmode = \"sgd\"\nrepetitions = 2\n",
        );
        let out = d.path().join("out");
        let audit = IoAudit::new();
        let report = run_experiment(&spec, &out, &InProcess, &audit).unwrap();
        assert_eq!(report.runs.len(), 3);
        let ft = report.runs_of("pair-ft").next().unwrap();
        assert_eq!(ft.metrics.records.iter().map(|r| r.live_nodes).collect::<Vec<_>>(), [2, 2, 1, 1]);
        let back = RunMetrics::parse_csv(&fs::read_to_string(&ft.csv).unwrap()).unwrap();
        assert_eq!(back, ft.metrics);
        for f in ["summary.csv", "pair-ft/aggregate.csv", "plots/loss.gp", "plots/shrink.gp", "plots/dataload.gp", "plots/batch_time.gp"] {
            assert!(out.join(f).exists(), "{f}");
        }
        assert_eq!(audit.parameter_writes_outside_final(), 0);
        assert_eq!(audit.writes_during(Phase::Training), 0);
    }
}
