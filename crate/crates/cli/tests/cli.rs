use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ftsgd_core::metrics::RunMetrics;
use ftsgd_core::trainer::read_param_dump;

fn ftsgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftsgd")).args(args).output().expect("run ftsgd")
}

fn models() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn model(name: &str) -> String {
    models().join(name).display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn mkdata(dir: &Path, count: usize) -> String {
    let data = dir.join("data");
    let out = ftsgd(&["mkdata", "--out", &s(&data), "--count", &count.to_string(), "--format", "raw"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    s(&data)
}

fn metrics(path: &Path) -> RunMetrics {
    RunMetrics::parse_csv(&fs::read_to_string(path).unwrap()).unwrap()
}

fn train(data: &str, out: &Path, extra: &[&str]) -> Output {
    let mlp = model("mlp.txt");
    let mut args = vec![
        "train", "--model", &mlp, "--data", data, "--nodes", "4", "--batch", "32", "--batches", "12", "--out",
    ];
    let o = s(out);
    args.push(&o);
    args.extend_from_slice(extra);
    ftsgd(&args)
}

#[test]
fn analyze_reports_the_alexnet_first_and_last_layers() {
    let out = ftsgd(&["analyze", &model("alexnet.txt"), "--csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!((rows[0][4], rows[0][6]), ("34848", "301056"));
    let last = rows.last().unwrap();
    assert_eq!((last[4], last[6]), ("4096000", "1000"));
}

#[test]
fn train_then_compare_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = mkdata(dir.path(), 2000);
    for name in ["a", "b"] {
        let out = train(&data, &dir.path().join(name), &["--fail", "1@batch:6"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = dir.path().join("a/metrics.csv");
    let b = dir.path().join("b/metrics.csv");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m = metrics(&a);
    assert_eq!(m.records.iter().map(|r| r.live_nodes).collect::<Vec<_>>(), [4, 4, 4, 4, 4, 4, 3, 3, 3, 3, 3, 3]);
    let params = read_param_dump(dir.path().join("a/final.params")).unwrap();
    assert_eq!(params.len(), 784 * 128 + 128 + 128 * 10 + 10);

    let gaps = dir.path().join("gaps.csv");
    let out = ftsgd(&["compare", &s(&a), &s(&b), "--gaps", &s(&gaps)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(fs::read_to_string(gaps).unwrap().lines().skip(1).all(|l| l.ends_with(",0.0")));
}

#[test]
fn exit_codes_separate_tolerance_from_infrastructure() {
    let dir = tempfile::tempdir().unwrap();
    let data = mkdata(dir.path(), 2000);
    assert!(train(&data, &dir.path().join("a"), &["--seed", "1"]).status.success());
    assert!(train(&data, &dir.path().join("b"), &["--seed", "2"]).status.success());
    let a = s(&dir.path().join("a/metrics.csv"));
    let b = s(&dir.path().join("b/metrics.csv"));
    assert_eq!(ftsgd(&["compare", &a, &b]).status.code(), Some(2));
    assert_eq!(ftsgd(&["compare", &a, "/nonexistent.csv"]).status.code(), Some(1));
    assert_eq!(train(&data, &dir.path().join("c"), &["--fail", "9@batch:1"]).status.code(), Some(1));
}

#[test]
fn tcp_processes_match_the_in_process_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = mkdata(dir.path(), 2000);
    let sim = train(&data, &dir.path().join("sim"), &[]);
    assert!(sim.status.success());
    let tcp = train(&data, &dir.path().join("tcp"), &["--transport", "tcp"]);
    assert!(tcp.status.success(), "{}", String::from_utf8_lossy(&tcp.stderr));
    let a = metrics(&dir.path().join("sim/metrics.csv"));
    let b = metrics(&dir.path().join("tcp/metrics.csv"));
    // the ring adds in a fixed order, so the transport cannot change the arithmetic
    let bits = |m: &RunMetrics| m.losses().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(
        read_param_dump(dir.path().join("sim/final.params")).unwrap(),
        read_param_dump(dir.path().join("tcp/final.params")).unwrap()
    );
}

#[test]
fn tcp_survivors_continue_after_a_real_kill() {
    let dir = tempfile::tempdir().unwrap();
    let data = mkdata(dir.path(), 2000);
    let out = train(&data, &dir.path().join("t"), &["--transport", "tcp", "--fail", "3@batch:4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = metrics(&dir.path().join("t/metrics.csv"));
    assert_eq!(m.records.len(), 12);
    assert_eq!(m.records[3].live_nodes, 4);
    assert!(m.records[4..].iter().all(|r| r.live_nodes == 3));
    assert_eq!(m.summary.shrinks, 1);
    assert_eq!(m.summary.full_load_bytes, 2000 * 785);
    assert_eq!(m.summary.partial_load_bytes, 500 * 785);
}

#[test]
fn experiment_runs_a_scenario_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sweep.toml");
    fs::write(
        &spec,
        format!(
            "[ft]\ndataset = \"synth:1200\"\nmodel = \"{m}\"\nnodes = 3\nbatches = 8\nbatch = 24\nfaults = [\"0@batch:3\"]\nrepetitions = 2\n\n\
             [sgd]\ndataset = \"synth:1200\"\nmodel = \"{m}\"\nnodes = 3\nbatches = 8\nbatch = 24\nmode = \"sgd\"\n",
            m = model("mlp.txt")
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let run = ftsgd(&["experiment", &s(&spec), "--out", &s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    for f in ["ft/seed1-rep0.csv", "ft/seed1-rep1.csv", "ft/aggregate.csv", "sgd/seed1-rep0.params", "plots/loss.gp"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(metrics(&out.join("ft/seed1-rep1.csv")).records[3].live_nodes, 2);
}
