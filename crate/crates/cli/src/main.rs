//! `ftsgd`: dataset generation, topology analysis, training runs, experiment
//! sweeps and run comparison.
//!
//! Exit status is 0 on success, 1 when something could not be run, and 2
//! when a run completed but violated a checked tolerance.

mod launch;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ftsgd_core::audit::{IoAudit, Phase, WriteKind};
use ftsgd_core::data::synth::{write_dataset, OutputFormat, SynthSpec};
use ftsgd_core::data::DatasetMeta;
use ftsgd_core::harness::{
    run_experiment, DatasetSource, ExperimentSpec, Launcher, Scenario, TransportKind,
};
use ftsgd_core::metrics::{compare_runs, RunMetrics, Tolerances};
use ftsgd_core::model_spec::ModelSpec;
use ftsgd_core::topology::{compare_parallelism, specs_from_model};
use ftsgd_core::trainer::{write_param_dump, CostModel, Mode};
use ftsgd_core::transport::{FaultPlan, HeartbeatConfig};

use launch::{ProcessLauncher, WorkerArgs};

#[derive(Parser)]
#[command(name = "ftsgd", version, about = "Fault-tolerant data-parallel SGD")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic MNIST-shaped dataset.
    Mkdata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60_000)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Idx)]
        format: Format,
        /// Per-sample extents, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [28, 28, 1])]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Count parameters and activations per layer and compare model- and
    /// data-parallel communication.
    Analyze {
        model: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: u64,
        #[arg(long, default_value_t = 16)]
        nodes: u64,
        #[arg(long)]
        csv: bool,
    },
    /// Train one model and write its metrics and final parameters.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = Net::Sim)]
        transport: Net,
        /// Seed for the simulated network's scheduler.
        #[arg(long, default_value_t = 0)]
        net_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every scenario in a scenario file.
    Experiment {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two metrics files.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        #[arg(long, default_value_t = Tolerances::default().pre_fault_loss)]
        loss_tol: f64,
        #[arg(long, default_value_t = Tolerances::default().time_ratio)]
        time_tol: f64,
        /// Write the per-batch loss gap here.
        #[arg(long)]
        gaps: Option<PathBuf>,
    },
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Idx,
    Raw,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Net {
    Sim,
    SimFree,
    Tcp,
}

/// Everything that defines a training run.
#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub nodes: usize,
    #[arg(long, default_value_t = 100)]
    pub batches: u64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value = "ft-sgd", value_parser = parse_mode)]
    pub mode: Mode,
    /// `<node>@batch:<k>` or `<node>@step:<op>:<i>`; repeatable.
    #[arg(long = "fail")]
    pub faults: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub heartbeat_interval_ms: u64,
    #[arg(long, default_value_t = 500)]
    pub heartbeat_timeout_ms: u64,
    #[arg(long, default_value_t = CostModel::default().ns_per_mac)]
    pub ns_per_mac: f64,
    #[arg(long, default_value_t = CostModel::default().io_ns_per_byte)]
    pub io_ns_per_byte: f64,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (sgd or ft-sgd)"))
}

impl RunArgs {
    pub fn scenario(&self, transport: TransportKind) -> Result<Scenario, String> {
        let model = ModelSpec::from_file(&self.model).map_err(|e| format!("{}: {e}", self.model.display()))?;
        let faults = FaultPlan::parse(self.faults.iter().map(String::as_str)).map_err(|e| e.to_string())?;
        Ok(Scenario {
            name: "train".into(),
            dataset: DatasetSource::Dir(self.data.clone()),
            model_path: self.model.clone(),
            model,
            nodes: self.nodes,
            batches: self.batches,
            batch: self.batch,
            lr: self.lr,
            mode: self.mode,
            faults,
            seeds: vec![self.seed],
            repetitions: 1,
            transport,
            heartbeat: HeartbeatConfig {
                interval: Duration::from_millis(self.heartbeat_interval_ms),
                timeout: Duration::from_millis(self.heartbeat_timeout_ms),
            },
            cost: CostModel {
                ns_per_mac: self.ns_per_mac,
                io_ns_per_byte: self.io_ns_per_byte,
            },
        })
    }

    /// Flags that reproduce this run, for spawning workers.
    pub fn to_flags(&self) -> Vec<String> {
        let mut v = vec![
            "--model".into(),
            self.model.display().to_string(),
            "--data".into(),
            self.data.display().to_string(),
            "--nodes".into(),
            self.nodes.to_string(),
            "--batches".into(),
            self.batches.to_string(),
            "--batch".into(),
            self.batch.to_string(),
            "--lr".into(),
            format!("{:?}", self.lr),
            "--mode".into(),
            self.mode.name().into(),
            "--seed".into(),
            self.seed.to_string(),
            "--heartbeat-interval-ms".into(),
            self.heartbeat_interval_ms.to_string(),
            "--heartbeat-timeout-ms".into(),
            self.heartbeat_timeout_ms.to_string(),
            "--ns-per-mac".into(),
            format!("{:?}", self.ns_per_mac),
            "--io-ns-per-byte".into(),
            format!("{:?}", self.io_ns_per_byte),
        ];
        for f in &self.faults {
            v.push("--fail".into());
            v.push(f.clone());
        }
        v
    }

    pub fn from_scenario(sc: &Scenario, cfg_seed: u64, data: &Path) -> Self {
        RunArgs {
            model: sc.model_path.clone(),
            data: data.to_path_buf(),
            nodes: sc.nodes,
            batches: sc.batches,
            batch: sc.batch,
            lr: sc.lr,
            mode: sc.mode,
            faults: sc.faults.faults().iter().map(|f| f.to_string()).collect(),
            seed: cfg_seed,
            heartbeat_interval_ms: sc.heartbeat.interval.as_millis() as u64,
            heartbeat_timeout_ms: sc.heartbeat.timeout.as_millis() as u64,
            ns_per_mac: sc.cost.ns_per_mac,
            io_ns_per_byte: sc.cost.io_ns_per_byte,
        }
    }
}

/// Error classes mapped to exit codes.
enum Failure {
    Infra(String),
    Tolerance(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Infra(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Infra(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Tolerance(m)) => {
            eprintln!("tolerance failure: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Mkdata {
            out,
            count,
            seed,
            format,
            shape,
            classes,
        } => {
            let spec = SynthSpec {
                count,
                shape,
                classes,
                ..SynthSpec::mnist_like(count, seed)
            };
            let format = match format {
                Format::Idx => OutputFormat::Idx,
                Format::Raw => OutputFormat::Raw,
            };
            write_dataset(&out, &spec, format)?;
            let meta = DatasetMeta::open_dir(&out)?;
            println!(
                "wrote {} samples of {} features, {} classes to {}",
                meta.sample_count,
                meta.features(),
                meta.class_count,
                out.display()
            );
            Ok(())
        }
        Cmd::Analyze { model, batch, nodes, csv } => {
            let spec = ModelSpec::from_file(&model)?;
            let report = compare_parallelism(&specs_from_model(&spec), batch, nodes)?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                println!("{report}");
            }
            Ok(())
        }
        Cmd::Train {
            run,
            transport,
            net_seed,
            out,
        } => train(&run, transport, net_seed, &out),
        Cmd::Experiment { spec, out } => experiment(&spec, &out),
        Cmd::Compare {
            baseline,
            candidate,
            loss_tol,
            time_tol,
            gaps,
        } => {
            let read = |p: &Path| -> Result<RunMetrics, Failure> {
                let text = fs::read_to_string(p).map_err(|e| Failure::Infra(format!("{}: {e}", p.display())))?;
                Ok(RunMetrics::parse_csv(&text)?)
            };
            let tol = Tolerances {
                pre_fault_loss: loss_tol,
                time_ratio: time_tol,
            };
            let c = compare_runs(&read(&baseline)?, &read(&candidate)?, tol)?;
            println!("{}", c.report());
            if let Some(g) = gaps {
                fs::write(g, c.gap_csv())?;
            }
            if c.passed {
                Ok(())
            } else {
                Err(Failure::Tolerance("comparison outside tolerance".into()))
            }
        }
        Cmd::Worker(w) => launch::worker(&w).map_err(Failure::Infra),
    }
}

fn train(run: &RunArgs, net: Net, net_seed: u64, out: &Path) -> Result<(), Failure> {
    let kind = match net {
        Net::Sim => TransportKind::Sim,
        Net::SimFree => TransportKind::SimFree,
        Net::Tcp => TransportKind::Tcp,
    };
    let sc = run.scenario(kind).map_err(Failure::Infra)?;
    let meta = DatasetMeta::open_dir(&run.data)?;
    let cfg = sc.train_config(run.seed);
    cfg.validate(&meta)?;
    fs::create_dir_all(out)?;
    let audit = IoAudit::new();
    audit.set_phase(Phase::Training);
    let launched = ProcessLauncher::new(out.join("workers")).launch(&sc, &cfg, &run.data, &meta, sc.sim_config(net_seed, 0))?;
    audit.set_phase(Phase::Final);
    audit.write_file(out.join("metrics.csv"), WriteKind::Metrics, launched.metrics.to_csv().as_bytes())?;
    write_param_dump(&audit, out.join("final.params"), &launched.final_params)?;
    let last = launched.metrics.records.last();
    println!(
        "{} batches, final loss {:.6}, live nodes {}, shrinks {}, lost updates {}",
        launched.metrics.records.len(),
        last.map_or(f64::NAN, |r| r.loss),
        last.map_or(0, |r| r.live_nodes),
        launched.metrics.summary.shrinks,
        launched.lost_updates
    );
    check_run(launched.survivors_agree, launched.lost_updates)
}

fn check_run(agree: bool, lost: usize) -> Result<(), Failure> {
    if !agree {
        return Err(Failure::Tolerance("survivors disagree on the final model".into()));
    }
    if lost > 1 {
        return Err(Failure::Tolerance(format!("{lost} batch updates lost to one fault schedule")));
    }
    Ok(())
}

fn experiment(spec: &Path, out: &Path) -> Result<(), Failure> {
    let spec = ExperimentSpec::from_file(spec)?;
    let audit = IoAudit::new();
    let report = run_experiment(&spec, out, &ProcessLauncher::new(out.join("workers")), &audit)?;
    for r in &report.runs {
        let last = r.metrics.records.last();
        println!(
            "{:<24} seed {:<4} rep {:<3} loss {:.6} live {} shrinks {} median batch {:.6}s",
            r.scenario,
            r.seed,
            r.rep,
            last.map_or(f64::NAN, |x| x.loss),
            last.map_or(0, |x| x.live_nodes),
            r.metrics.summary.shrinks,
            r.median_batch_time_s()
        );
    }
    println!("results in {}", out.display());
    for r in &report.runs {
        check_run(r.survivors_agree, r.lost_updates)?;
    }
    Ok(())
}
