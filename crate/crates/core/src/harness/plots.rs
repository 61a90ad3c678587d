use std::collections::BTreeMap;
use std::path::Path;

use super::{ExperimentReport, ExperimentSpec, HarnessError};
use crate::audit::{IoAudit, WriteKind};
use crate::metrics::median;

/// Writes the plot data tables and gnuplot scripts: loss curves, per-batch
/// time, full vs partial data-load time, and cumulative shrink time against
/// node count. Scripts read paths relative to the experiment directory.
pub fn write_plots(spec: &ExperimentSpec, report: &ExperimentReport, dir: &Path, audit: &IoAudit) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let names: Vec<&str> = spec.scenarios.iter().map(|s| s.name.as_str()).collect();

    let mut load = String::from("scenario,nodes,full_load_time_s,partial_load_time_s,full_load_bytes,partial_load_bytes\n");
    let mut shrink = String::from("scenario,nodes,shrinks,shrink_time_s,median_batch_time_s\n");
    let mut by_nodes: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for sc in &spec.scenarios {
        let runs: Vec<_> = report.runs_of(&sc.name).collect();
        let med = |f: &dyn Fn(&super::RunOutcome) -> f64| median(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
        load += &format!(
            "{},{},{:?},{:?},{:?},{:?}\n",
            sc.name,
            sc.nodes,
            med(&|r| r.metrics.summary.full_load_time_s),
            med(&|r| r.metrics.summary.partial_load_time_s),
            med(&|r| r.metrics.summary.full_load_bytes as f64),
            med(&|r| r.metrics.summary.partial_load_bytes as f64),
        );
        let shrink_time = med(&|r| r.metrics.total_shrink_time_s());
        shrink += &format!(
            "{},{},{:?},{:?},{:?}\n",
            sc.name,
            sc.nodes,
            med(&|r| r.metrics.summary.shrinks as f64),
            shrink_time,
            med(&|r| r.median_batch_time_s()),
        );
        if !sc.faults.is_empty() {
            by_nodes.entry(sc.nodes).or_default().push(shrink_time);
        }
    }
    let mut trend = String::from("nodes,shrink_time_s\n");
    for (n, v) in &by_nodes {
        trend += &format!("{n},{:?}\n", median(v));
    }
    audit.write_file(dir.join("dataload.csv"), WriteKind::Plot, load.as_bytes())?;
    audit.write_file(dir.join("shrink.csv"), WriteKind::Plot, shrink.as_bytes())?;
    audit.write_file(dir.join("shrink_trend.csv"), WriteKind::Plot, trend.as_bytes())?;

    let header = "set datafile separator ','\nset key autotitle columnhead\nset grid\n";
    let curves = |col: usize| {
        names
            .iter()
            .map(|n| format!("'{n}/aggregate.csv' using 1:{col} with lines title '{n}'"))
            .collect::<Vec<_>>()
            .join(", \\\n     ")
    };
    let scripts = [
        (
            "loss.gp",
            format!("{header}set title 'Training loss (median over runs)'\nset xlabel 'batch'\nset ylabel 'loss'\nplot {}\n", curves(4)),
        ),
        (
            "batch_time.gp",
            format!("{header}set title 'Per-batch time (median over runs)'\nset xlabel 'batch'\nset ylabel 'seconds'\nplot {}\n", curves(7)),
        ),
        (
            "dataload.gp",
            format!(
                "{header}set title 'Data load time'\nset style data histograms\nset style fill solid\nset ylabel 'seconds'\n\
                 plot 'plots/dataload.csv' using 3:xtic(1) title 'full', '' using 4 title 'partial'\n"
            ),
        ),
        (
            "shrink.gp",
            format!(
                "{header}set title 'Cumulative shrink time'\nset xlabel 'nodes'\nset ylabel 'seconds'\nset logscale x 2\n\
                 plot 'plots/shrink_trend.csv' using 1:2 with linespoints title 'shrink time'\n"
            ),
        ),
    ];
    for (name, body) in scripts {
        audit.write_file(dir.join(name), WriteKind::Plot, body.as_bytes())?;
    }
    Ok(())
}
