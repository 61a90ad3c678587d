use crate::metrics::{median, RunMetrics};

pub const AGGREGATE_COLUMNS: &str = "batch,runs,loss_min,loss_median,loss_max,batch_time_min_s,batch_time_median_s,batch_time_max_s,live_nodes_min,shrink_time_median_s,reload_bytes_median";

/// Per-batch statistics across repetitions of one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub batch: u64,
    pub runs: usize,
    pub loss: [f64; 3],
    pub batch_time_s: [f64; 3],
    pub live_nodes_min: usize,
    pub shrink_time_median_s: f64,
    pub reload_bytes_median: f64,
}

fn spread(xs: &[f64]) -> [f64; 3] {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [lo, median(xs), hi]
}

/// Rows cover the batches every run reached.
pub fn aggregate_runs(runs: &[RunMetrics]) -> Vec<AggregateRow> {
    let n = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    (0..n)
        .map(|i| {
            let col = |f: &dyn Fn(&crate::metrics::BatchRecord) -> f64| -> Vec<f64> {
                runs.iter().map(|r| f(&r.records[i])).collect()
            };
            AggregateRow {
                batch: runs[0].records[i].batch,
                runs: runs.len(),
                loss: spread(&col(&|r| r.loss)),
                batch_time_s: spread(&col(&|r| r.batch_time_s())),
                live_nodes_min: runs.iter().map(|r| r.records[i].live_nodes).min().unwrap_or(0),
                shrink_time_median_s: median(&col(&|r| r.shrink_time_s)),
                reload_bytes_median: median(&col(&|r| r.reload_bytes as f64)),
            }
        })
        .collect()
}

pub fn to_csv(rows: &[AggregateRow]) -> String {
    let mut s = format!("{AGGREGATE_COLUMNS}\n");
    for r in rows {
        s += &format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{},{:?},{:?}\n",
            r.batch,
            r.runs,
            r.loss[0],
            r.loss[1],
            r.loss[2],
            r.batch_time_s[0],
            r.batch_time_s[1],
            r.batch_time_s[2],
            r.live_nodes_min,
            r.shrink_time_median_s,
            r.reload_bytes_median
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::BatchRecord;

    fn run(losses: &[f64], live: &[usize]) -> RunMetrics {
        RunMetrics {
            records: losses
                .iter()
                .zip(live)
                .enumerate()
                .map(|(i, (&loss, &live_nodes))| BatchRecord {
                    batch: i as u64,
                    epoch: 0,
                    live_nodes,
                    loss,
                    compute_time_s: loss,
                    comm_time_s: 0.0,
                    shrink_count: 0,
                    shrink_time_s: 0.0,
                    reload_bytes: i as u64,
                    reload_time_s: 0.0,
                })
                .collect(),
            ..RunMetrics::default()
        }
    }

    #[test]
    fn rows_are_order_statistics_of_the_records() {
        let runs = [run(&[3.0, 1.0], &[4, 4]), run(&[1.0, 2.0], &[4, 3]), run(&[2.0, 9.0, 7.0], &[4, 4, 4])];
        let rows = aggregate_runs(&runs);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].loss, [1.0, 2.0, 3.0]);
        assert_eq!(rows[1].loss, [1.0, 2.0, 9.0]);
        assert_eq!(rows[1].batch_time_s, rows[1].loss);
        assert_eq!(rows[1].live_nodes_min, 3);
        assert_eq!(rows[1].reload_bytes_median, 1.0);
        assert_eq!(to_csv(&rows).lines().count(), 3);
    }
}
