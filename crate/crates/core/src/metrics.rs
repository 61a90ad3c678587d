//! Per-batch run records, their versioned CSV form, and run comparison.
//!
//! ```text
//! # ftsgd-metrics v1
//! batch,epoch,live_nodes,loss,compute_time_s,comm_time_s,shrink_count,shrink_time_s,reload_bytes,reload_time_s
//! 0,0,4,2.302585092994046,0.0095,0.0003,0,0,0,0
//! ...
//! # summary total_time_s=1.25 shrinks=1 full_load_bytes=... full_load_time_s=... partial_load_bytes=... partial_load_time_s=...
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! a file reproduces the values bit for bit.

use std::fmt::Write as _;
use std::time::Duration;

use thiserror::Error;

pub const SCHEMA: &str = "# ftsgd-metrics v1";
pub const COLUMNS: &str =
    "batch,epoch,live_nodes,loss,compute_time_s,comm_time_s,shrink_count,shrink_time_s,reload_bytes,reload_time_s";

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub batch: u64,
    pub epoch: u32,
    pub live_nodes: usize,
    pub loss: f64,
    pub compute_time_s: f64,
    pub comm_time_s: f64,
    pub shrink_count: usize,
    pub shrink_time_s: f64,
    pub reload_bytes: u64,
    pub reload_time_s: f64,
}

impl BatchRecord {
    pub fn batch_time_s(&self) -> f64 {
        self.compute_time_s + self.comm_time_s + self.shrink_time_s + self.reload_time_s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub total_time_s: f64,
    pub shrinks: usize,
    pub full_load_bytes: u64,
    pub full_load_time_s: f64,
    pub partial_load_bytes: u64,
    pub partial_load_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<BatchRecord>,
    pub summary: RunSummary,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("missing `{SCHEMA}` header")]
    Schema,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SCHEMA}\n{COLUMNS}\n");
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{:?},{:?},{:?},{},{:?},{},{:?}",
                r.batch,
                r.epoch,
                r.live_nodes,
                r.loss,
                r.compute_time_s,
                r.comm_time_s,
                r.shrink_count,
                r.shrink_time_s,
                r.reload_bytes,
                r.reload_time_s
            )
            .expect("write to string");
        }
        let m = &self.summary;
        writeln!(
            s,
            "# summary total_time_s={:?} shrinks={} full_load_bytes={} full_load_time_s={:?} partial_load_bytes={} partial_load_time_s={:?}",
            m.total_time_s, m.shrinks, m.full_load_bytes, m.full_load_time_s, m.partial_load_bytes, m.partial_load_time_s
        )
        .expect("write to string");
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == SCHEMA => {}
            _ => return Err(MetricsError::Schema),
        }
        let mut out = RunMetrics::default();
        for (i, line) in lines {
            let line = line.trim();
            let err = |msg: String| MetricsError::Parse { line: i + 1, msg };
            if line.is_empty() || line == COLUMNS {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# summary") {
                out.summary = parse_summary(rest).map_err(err)?;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(err(format!("expected 10 fields, found {}", f.len())));
            }
            fn p<T: std::str::FromStr>(s: &str) -> Result<T, String> {
                s.trim().parse().map_err(|_| format!("bad value `{s}`"))
            }
            out.records.push(BatchRecord {
                batch: p(f[0]).map_err(err)?,
                epoch: p(f[1]).map_err(err)?,
                live_nodes: p(f[2]).map_err(err)?,
                loss: p(f[3]).map_err(err)?,
                compute_time_s: p(f[4]).map_err(err)?,
                comm_time_s: p(f[5]).map_err(err)?,
                shrink_count: p(f[6]).map_err(err)?,
                shrink_time_s: p(f[7]).map_err(err)?,
                reload_bytes: p(f[8]).map_err(err)?,
                reload_time_s: p(f[9]).map_err(err)?,
            });
        }
        Ok(out)
    }

    /// Checks the record-level invariants and that the summary is consistent
    /// with the records.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: String| Err(MetricsError::Invariant(m));
        for w in self.records.windows(2) {
            if w[1].live_nodes > w[0].live_nodes {
                return bad(format!("live nodes increase at batch {}", w[1].batch));
            }
            if w[1].batch != w[0].batch + 1 {
                return bad(format!("batch {} follows {}", w[1].batch, w[0].batch));
            }
        }
        for r in &self.records {
            if r.shrink_count == 0 && r.shrink_time_s != 0.0 {
                return bad(format!("shrink time without shrink at batch {}", r.batch));
            }
        }
        let shrinks: usize = self.records.iter().map(|r| r.shrink_count).sum();
        if shrinks > self.summary.shrinks {
            return bad(format!("records hold {shrinks} shrinks, summary {}", self.summary.shrinks));
        }
        let reload: u64 = self.records.iter().map(|r| r.reload_bytes).sum();
        if reload > self.summary.partial_load_bytes {
            return bad(format!("records reload {reload} bytes, summary {}", self.summary.partial_load_bytes));
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn batch_times(&self) -> Vec<f64> {
        self.records.iter().map(BatchRecord::batch_time_s).collect()
    }

    pub fn total_shrink_time_s(&self) -> f64 {
        self.records.iter().map(|r| r.shrink_time_s).sum()
    }
}

fn parse_summary(rest: &str) -> Result<RunSummary, String> {
    let mut s = RunSummary::default();
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad summary item `{kv}`"))?;
        let f = || v.parse::<f64>().map_err(|_| format!("bad number `{v}`"));
        let u = || v.parse::<u64>().map_err(|_| format!("bad count `{v}`"));
        match k {
            "total_time_s" => s.total_time_s = f()?,
            "shrinks" => s.shrinks = u()? as usize,
            "full_load_bytes" => s.full_load_bytes = u()?,
            "full_load_time_s" => s.full_load_time_s = f()?,
            "partial_load_bytes" => s.partial_load_bytes = u()?,
            "partial_load_time_s" => s.partial_load_time_s = f()?,
            _ => return Err(format!("unknown summary key `{k}`")),
        }
    }
    Ok(s)
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Largest allowed |loss gap| on batches before the first shrink.
    pub pre_fault_loss: f64,
    /// Largest allowed |median batch-time ratio - 1|.
    pub time_ratio: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            pre_fault_loss: 1e-12,
            time_ratio: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub batches: usize,
    /// candidate − baseline, per aligned batch.
    pub loss_gap: Vec<f64>,
    pub max_abs_gap: f64,
    /// First batch at which the candidate shows a shrink.
    pub first_fault: Option<u64>,
    pub max_pre_fault_gap: f64,
    pub median_time_ratio: f64,
    /// Mean gap over the first and second halves of the post-fault span.
    pub post_fault_trend: Option<(f64, f64)>,
    pub passed: bool,
    pub notes: Vec<String>,
}

pub fn compare_runs(baseline: &RunMetrics, candidate: &RunMetrics, tol: Tolerances) -> Result<Comparison, MetricsError> {
    let n = baseline.records.len().min(candidate.records.len());
    for i in 0..n {
        if baseline.records[i].batch != candidate.records[i].batch {
            return Err(MetricsError::Invariant(format!("batch index mismatch at row {i}")));
        }
    }
    let loss_gap: Vec<f64> = (0..n)
        .map(|i| candidate.records[i].loss - baseline.records[i].loss)
        .collect();
    let max_abs_gap = loss_gap.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let first_fault = candidate.records[..n]
        .iter()
        .find(|r| r.shrink_count > 0)
        .map(|r| r.batch);
    let pre_end = first_fault.map_or(n, |b| b as usize);
    let max_pre_fault_gap = loss_gap[..pre_end].iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let median_time_ratio = median(&candidate.batch_times()[..n]) / median(&baseline.batch_times()[..n]);
    let post_fault_trend = first_fault.and_then(|b| {
        let post = &loss_gap[b as usize..];
        (post.len() >= 2).then(|| {
            let h = post.len() / 2;
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            (mean(&post[..h]), mean(&post[h..]))
        })
    });
    let mut notes = Vec::new();
    let mut passed = true;
    if max_pre_fault_gap > tol.pre_fault_loss {
        passed = false;
        notes.push(format!("pre-fault loss gap {max_pre_fault_gap:e} exceeds {:e}", tol.pre_fault_loss));
    }
    if first_fault.is_none() && (median_time_ratio - 1.0).abs() > tol.time_ratio {
        passed = false;
        notes.push(format!("median batch-time ratio {median_time_ratio:.4} outside 1 ± {}", tol.time_ratio));
    }
    if let Some((a, b)) = post_fault_trend {
        let trend = if b.abs() <= a.abs() { "shrinking or stable" } else { "growing" };
        notes.push(format!("post-fault loss gap {trend}: {a:.3e} then {b:.3e}"));
    }
    if baseline.records.len() != candidate.records.len() {
        notes.push(format!(
            "compared {n} batches ({} vs {})",
            baseline.records.len(),
            candidate.records.len()
        ));
    }
    Ok(Comparison {
        batches: n,
        loss_gap,
        max_abs_gap,
        first_fault,
        max_pre_fault_gap,
        median_time_ratio,
        post_fault_trend,
        passed,
        notes,
    })
}

impl Comparison {
    pub fn report(&self) -> String {
        let mut s = format!(
            "batches compared: {}\nmax |loss gap|: {:e}\npre-fault max |loss gap|: {:e}\nmedian batch-time ratio: {:.4}\n",
            self.batches, self.max_abs_gap, self.max_pre_fault_gap, self.median_time_ratio
        );
        if let Some(b) = self.first_fault {
            s += &format!("first shrink at batch {b}\n");
        }
        for n in &self.notes {
            s += &format!("note: {n}\n");
        }
        s += if self.passed { "PASS\n" } else { "FAIL\n" };
        s
    }

    pub fn gap_csv(&self) -> String {
        let mut s = String::from("batch,loss_gap\n");
        for (i, g) in self.loss_gap.iter().enumerate() {
            s += &format!("{i},{g:?}\n");
        }
        s
    }
}
