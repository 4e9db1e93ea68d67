//! Output formats: metrics CSV, summary text and strategy comparison.

use std::fmt::Write as _;
use std::io;

use crate::engine::{MetricsRecord, RunOutput};

pub const CSV_COLUMNS: [&str; 9] = [
    "event_id",
    "time",
    "primitive",
    "strategy",
    "scale_out_delay",
    "replication_delay",
    "hidden_delay",
    "cluster_idle_time",
    "policy_version",
];

fn ms(x: f64) -> String {
    format!("{x:.3}")
}

fn row(r: &MetricsRecord) -> [String; 9] {
    [
        r.event_id.to_string(),
        ms(r.time),
        r.primitive.clone(),
        r.strategy.to_string(),
        ms(r.scale_out_delay),
        ms(r.replication_delay),
        ms(r.hidden_delay),
        ms(r.cluster_idle_time),
        r.policy_version.to_string(),
    ]
}

/// Writes rows from one or more runs. Rows are ordered by event id, then by
/// the order of `runs`, so a comparison lines up strategies per event.
pub fn write_metrics_csv<W: io::Write>(runs: &[&RunOutput], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    let mut rows: Vec<(u64, usize, usize, &MetricsRecord)> = Vec::new();
    for (ri, run) in runs.iter().enumerate() {
        for (k, r) in run.records.iter().enumerate() {
            rows.push((r.event_id, ri, k, r));
        }
    }
    rows.sort_by_key(|x| (x.0, x.1, x.2));
    for (_, _, _, r) in rows {
        w.write_record(row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn metrics_csv(runs: &[&RunOutput]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(runs, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summary_text(run: &RunOutput) -> String {
    let mut s = String::new();
    let its = &run.iterations;
    let _ = writeln!(s, "strategy: {}", run.strategy);
    let _ = writeln!(s, "iterations: {}", its.len());
    let _ = writeln!(s, "end_time_ms: {}", ms(run.end_time));
    let _ = writeln!(s, "mean_iteration_ms: {}", ms(mean(its.iter().map(|i| i.duration()))));
    let _ = writeln!(s, "restarts: {}", its.iter().map(|i| i.restarts as u64).sum::<u64>());
    let _ = writeln!(s, "scaling_events: {}", run.records.len());
    let _ = writeln!(s, "final_policy_version: {}", run.final_policy.version);
    let _ = writeln!(s, "active_nodes: {}", run.final_topology.active_nodes().len());
    let _ = writeln!(s, "cluster_scaling_idle_ms: {}", ms(run.idle.cluster_scaling_idle()));
    let _ = writeln!(s, "cluster_barrier_wait_ms: {}", ms(run.idle.cluster_barrier_wait()));
    let _ = writeln!(s, "control_messages: {}", run.trace.len());
    for e in &run.monitor_log {
        let _ = writeln!(s, "monitor: {e}");
    }
    s
}

/// Per-strategy means over scale-out rows, one line per run.
pub fn comparison_text(runs: &[&RunOutput]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16}{:>10}{:>18}{:>18}{:>16}{:>18}",
        "strategy", "scale_outs", "mean_scale_out", "mean_replication", "mean_hidden", "total_idle"
    );
    for run in runs {
        let outs: Vec<&MetricsRecord> = run.records.iter().filter(|r| r.primitive == "scale-out").collect();
        let _ = writeln!(
            s,
            "{:<16}{:>10}{:>18}{:>18}{:>16}{:>18}",
            run.strategy.to_string(),
            outs.len(),
            ms(mean(outs.iter().map(|r| r.scale_out_delay))),
            ms(mean(outs.iter().map(|r| r.replication_delay))),
            ms(mean(outs.iter().map(|r| r.hidden_delay))),
            ms(run.records.iter().map(|r| r.cluster_idle_time).sum()),
        );
    }
    s
}
