//! One OS process per node over loopback TCP.

use std::fs::{self, File};
use std::net::TcpListener;
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use clap::Args;
use ftsgd_core::audit::{IoAudit, Phase, WriteKind};
use ftsgd_core::data::{DatasetMeta, PartitionMap};
use ftsgd_core::harness::{HarnessError, InProcess, Launched, Launcher, Scenario, TransportKind};
use ftsgd_core::metrics::{RunMetrics, RunSummary};
use ftsgd_core::trainer::{aggregate, read_param_dump, run_worker, write_param_dump, TrainConfig, WorkerReport};
use ftsgd_core::transport::sim::SimConfig;
use ftsgd_core::transport::tcp::{parse_hostfile, TcpConfig, TcpTransport};
use ftsgd_core::NodeId;
use serde_json::{json, Value};

use crate::RunArgs;

#[derive(Args, Clone, Debug)]
pub struct WorkerArgs {
    #[arg(long)]
    pub id: NodeId,
    #[arg(long)]
    pub hostfile: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

fn stem(dir: &Path, id: NodeId) -> PathBuf {
    dir.join(format!("worker-{id}"))
}

/// Body of the hidden `worker` subcommand.
pub fn worker(w: &WorkerArgs) -> Result<(), String> {
    let text = fs::read_to_string(&w.hostfile).map_err(|e| format!("{}: {e}", w.hostfile.display()))?;
    let hosts = parse_hostfile(&text).map_err(|e| e.to_string())?;
    let sc = w.run.scenario(TransportKind::Tcp)?;
    let cfg = sc.train_config(w.run.seed);
    let meta = DatasetMeta::open_dir(&w.run.data).map_err(|e| e.to_string())?;
    cfg.validate(&meta).map_err(|e| e.to_string())?;
    let t = TcpTransport::connect(
        w.id,
        &hosts,
        TcpConfig {
            heartbeat: sc.heartbeat,
            ..TcpConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let r = run_worker(t, &cfg, &meta).map_err(|e| e.to_string())?;

    let base = stem(&w.out, w.id);
    let audit = IoAudit::new();
    audit.set_phase(Phase::Final);
    let metrics = RunMetrics {
        records: r.records.clone(),
        summary: r.summary.clone(),
    };
    audit
        .write_file(base.with_extension("csv"), WriteKind::Metrics, metrics.to_csv().as_bytes())
        .map_err(|e| e.to_string())?;
    write_param_dump(&audit, base.with_extension("params"), &r.final_params).map_err(|e| e.to_string())?;
    let info = json!({
        "node": r.node,
        "final_members": r.final_members,
        "final_epoch": r.final_epoch,
        "started_with": r.started_with,
        "contributors": r.contributors,
        "local_losses": r.local_losses,
        "shrinks": r.shrinks.len(),
        "fenced": r.fenced,
    });
    audit
        .write_file(base.with_extension("json"), WriteKind::Report, info.to_string().as_bytes())
        .map_err(|e| e.to_string())?;
    Ok(())
}

fn read_report(dir: &Path, id: NodeId) -> Result<WorkerReport, String> {
    let base = stem(dir, id);
    let read = |ext: &str| fs::read_to_string(base.with_extension(ext)).map_err(|e| format!("worker {id}: {e}"));
    let metrics = RunMetrics::parse_csv(&read("csv")?).map_err(|e| e.to_string())?;
    let info: Value = serde_json::from_str(&read("json")?).map_err(|e| e.to_string())?;
    let ints = |k: &str| -> Vec<u64> {
        info[k].as_array().map(|a| a.iter().filter_map(Value::as_u64).collect()).unwrap_or_default()
    };
    Ok(WorkerReport {
        node: id,
        killed: false,
        records: metrics.records,
        summary: metrics.summary,
        local_losses: info["local_losses"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default(),
        started_with: ints("started_with").into_iter().map(|v| v as usize).collect(),
        contributors: ints("contributors").into_iter().map(|v| v as usize).collect(),
        final_params: read_param_dump(base.with_extension("params")).map_err(|e| format!("worker {id}: {e}"))?,
        final_members: ints("final_members").into_iter().map(|v| v as NodeId).collect(),
        final_epoch: info["final_epoch"].as_u64().unwrap_or(0) as u32,
        fenced: info["fenced"].as_u64().unwrap_or(0),
        ..WorkerReport::default()
    })
}

/// Spawns `ftsgd worker` processes for tcp scenarios; runs everything else
/// in-process.
pub struct ProcessLauncher {
    dir: PathBuf,
    timeout: Duration,
}

static LAUNCHES: AtomicU64 = AtomicU64::new(0);

impl ProcessLauncher {
    pub fn new(dir: PathBuf) -> Self {
        ProcessLauncher {
            dir,
            timeout: Duration::from_secs(1800),
        }
    }

    fn free_ports(n: usize) -> std::io::Result<Vec<u16>> {
        let held: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0")).collect::<Result<_, _>>()?;
        held.iter().map(|l| Ok(l.local_addr()?.port())).collect()
    }

    fn wait_all(&self, children: &mut [Child]) -> Result<Vec<std::process::ExitStatus>, HarnessError> {
        let start = Instant::now();
        let mut status = vec![None; children.len()];
        while status.iter().any(Option::is_none) {
            for (i, c) in children.iter_mut().enumerate() {
                if status[i].is_none() {
                    status[i] = c.try_wait()?;
                }
            }
            if start.elapsed() > self.timeout {
                for c in children.iter_mut() {
                    let _ = c.kill();
                }
                return Err(HarnessError::Launch("workers did not finish in time".into()));
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        Ok(status.into_iter().flatten().collect())
    }
}

impl Launcher for ProcessLauncher {
    fn launch(
        &self,
        scenario: &Scenario,
        cfg: &TrainConfig,
        data_dir: &Path,
        meta: &DatasetMeta,
        net: SimConfig,
    ) -> Result<Launched, HarnessError> {
        if scenario.transport != TransportKind::Tcp {
            return InProcess.launch(scenario, cfg, data_dir, meta, net);
        }
        let launch = LAUNCHES.fetch_add(1, Ordering::Relaxed);
        let dir = self.dir.join(format!("{}-seed{}-{launch}", scenario.name, cfg.seed));
        fs::create_dir_all(&dir)?;
        let ports = Self::free_ports(cfg.nodes)?;
        let hostfile = dir.join("hosts");
        let hosts: String = ports.iter().enumerate().map(|(i, p)| format!("{i} 127.0.0.1:{p}\n")).collect();
        fs::write(&hostfile, hosts)?;

        let exe = std::env::current_exe()?;
        let flags = RunArgs::from_scenario(scenario, cfg.seed, data_dir).to_flags();
        let mut children = Vec::new();
        for id in cfg.node_ids() {
            let log = File::create(dir.join(format!("worker-{id}.log")))?;
            let spawned = Command::new(&exe)
                .arg("worker")
                .args(["--id", &id.to_string()])
                .arg("--hostfile")
                .arg(&hostfile)
                .arg("--out")
                .arg(&dir)
                .args(&flags)
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(log)
                .spawn();
            match spawned {
                Ok(c) => children.push(c),
                Err(e) => {
                    for c in &mut children {
                        let _ = c.kill();
                    }
                    return Err(HarnessError::Launch(format!("spawning worker {id}: {e}")));
                }
            }
        }
        let status = self.wait_all(&mut children)?;

        let victims = cfg.faults.victims();
        let initial = PartitionMap::partition(meta.sample_count, &cfg.node_ids(), 0)?;
        let record = (meta.samples.record_bytes() + meta.labels.record_bytes()) as u64;
        let mut workers = Vec::new();
        for (id, st) in cfg.node_ids().into_iter().zip(status) {
            if st.success() {
                workers.push(read_report(&dir, id).map_err(HarnessError::Launch)?);
            } else if st.signal() == Some(9) && victims.contains(&id) {
                workers.push(WorkerReport {
                    node: id,
                    killed: true,
                    summary: RunSummary {
                        full_load_bytes: initial.samples_of(id) as u64 * record,
                        ..RunSummary::default()
                    },
                    ..WorkerReport::default()
                });
            } else {
                let log = fs::read_to_string(dir.join(format!("worker-{id}.log"))).unwrap_or_default();
                return Err(HarnessError::Launch(format!("worker {id} exited with {st}: {}", log.trim())));
            }
        }
        let (metrics, survivors_agree) = aggregate(&workers)?;
        let lead = workers.iter().find(|w| !w.killed).expect("aggregate found a survivor");
        Ok(Launched {
            final_params: lead.final_params.clone(),
            lost_updates: workers.iter().filter(|w| !w.killed).map(WorkerReport::interrupted_batches).max().unwrap_or(0),
            survivors_agree,
            metrics,
        })
    }
}
