//! Standalone scheduler runs on a text instance.
//!
//! ```text
//! [input]
//! v_new = 9
//! shard_size = 1      # optional; defaults to the size picked by the search
//!
//! [tensors]
//! w = 4
//!
//! [neighbors]
//! 1 prop=0 trans=1 sync=0
//! 2 prop=0 trans=3 sync=0
//! ```

use std::fmt;

use crate::model::{split_state, NodeId, ReplicationPlan, Tensor, Time, TrainingState};
use crate::scenario::{LineError, ScenarioErrors};
use crate::scheduler::{
    binary_search_assign, brute_force_assign, even_assign, evaluate_on, greedy_assign, NeighborLink, SchedulerInput,
    DEFAULT_ENUMERATION_CAP,
};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveInput {
    pub input: SchedulerInput,
    pub shard_size: Option<u64>,
    pub cap: u64,
}

pub fn parse_solve_input(text: &str) -> Result<SolveInput, ScenarioErrors> {
    let mut errors = Vec::new();
    let mut err = |line: usize, msg: String| errors.push(LineError { line, msg });
    let mut v_new = None;
    let mut shard_size = None;
    let mut cap = DEFAULT_ENUMERATION_CAP;
    let mut tensors = Vec::new();
    let mut neighbors = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if !matches!(section.as_str(), "input" | "tensors" | "neighbors") {
                err(ln, format!("unknown section [{section}]"));
            }
            continue;
        }
        match section.as_str() {
            "input" | "tensors" => {
                let Some((k, v)) = line.split_once('=') else {
                    err(ln, format!("expected `key = value`, got `{line}`"));
                    continue;
                };
                let (k, v) = (k.trim(), v.trim());
                let Ok(x) = v.parse::<u64>() else {
                    err(ln, format!("invalid integer `{v}`"));
                    continue;
                };
                match (section.as_str(), k) {
                    ("input", "v_new") => v_new = Some(NodeId(x as u32)),
                    ("input", "shard_size") if x > 0 => shard_size = Some(x),
                    ("input", "shard_size") => err(ln, "shard_size must be positive".into()),
                    ("input", "brute_force_cap") => cap = x,
                    ("input", _) => err(ln, format!("unknown input key `{k}`")),
                    _ if x == 0 => err(ln, format!("tensor `{k}` must have positive size")),
                    _ => tensors.push(Tensor { name: k.to_string(), size: x }),
                }
            }
            "neighbors" => match parse_neighbor(line) {
                Ok(n) => neighbors.push(n),
                Err(m) => err(ln, m),
            },
            _ => err(ln, "content outside of a section".into()),
        }
    }
    let Some(v_new) = v_new else {
        err(0, "[input] needs v_new".into());
        return Err(ScenarioErrors(errors));
    };
    if !errors.is_empty() {
        return Err(ScenarioErrors(errors));
    }
    let built = TrainingState::new(tensors).and_then(|state| SchedulerInput::new(v_new, neighbors, state));
    match built {
        Ok(input) => Ok(SolveInput { input, shard_size, cap }),
        Err(e) => Err(ScenarioErrors(vec![LineError { line: 0, msg: e.to_string() }])),
    }
}

fn parse_neighbor(line: &str) -> Result<NeighborLink, String> {
    let mut words = line.split_whitespace();
    let id: u32 = words
        .next()
        .and_then(|w| w.parse().ok())
        .ok_or_else(|| format!("expected `<id> prop=<x> trans=<y> sync=<z>`, got `{line}`"))?;
    let (mut prop, mut trans, mut sync) = (0.0, None, 0.0);
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| format!("expected key=value, got `{w}`"))?;
        let x: f64 = v.parse().map_err(|_| format!("invalid number `{v}`"))?;
        match k {
            "prop" => prop = x,
            "trans" => trans = Some(x),
            "sync" => sync = x,
            _ => return Err(format!("unknown neighbor attribute `{k}`")),
        }
    }
    let trans = trans.ok_or("neighbor needs trans")?;
    NeighborLink::new(NodeId(id), prop, trans, sync).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveRow {
    pub method: &'static str,
    pub shard_size: u64,
    pub shards: usize,
    /// `None` when the method was skipped.
    pub makespan: Option<Time>,
    pub plan: Option<ReplicationPlan>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub rows: Vec<SolveRow>,
    pub probes: Vec<(u64, Time)>,
}

impl SolveReport {
    pub fn row(&self, method: &str) -> Option<&SolveRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Reference makespan for gaps: brute force when it ran, else the best row.
    pub fn reference(&self) -> Time {
        self.row("brute-force")
            .and_then(|r| r.makespan)
            .unwrap_or_else(|| self.rows.iter().filter_map(|r| r.makespan).fold(f64::INFINITY, f64::min))
    }

    pub fn gap(&self, method: &str) -> Option<f64> {
        let m = self.row(method)?.makespan?;
        let r = self.reference();
        Some(if r > 0.0 { (m / r - 1.0) * 100.0 } else { 0.0 })
    }
}

pub fn solve(si: &SolveInput) -> crate::Result<SolveReport> {
    let input = &si.input;
    let search = binary_search_assign(input)?;
    let s = si.shard_size.unwrap_or(search.plan.shard_size);
    let shards = split_state(&input.state, s)?;
    let row = |method, plan: ReplicationPlan| -> crate::Result<SolveRow> {
        let theta = evaluate_on(&plan, &shards, input)?;
        Ok(SolveRow { method, shard_size: s, shards: shards.count(), makespan: Some(theta), plan: Some(plan), note: String::new() })
    };
    let mut rows = vec![row("greedy", greedy_assign(&shards, input)?)?];
    let bs_shards = split_state(&input.state, search.plan.shard_size)?;
    rows.push(SolveRow {
        method: "binary-search",
        shard_size: search.plan.shard_size,
        shards: bs_shards.count(),
        makespan: Some(search.plan.predicted_makespan),
        note: format!("{} probes", search.probes.len()),
        plan: Some(search.plan.clone()),
    });
    rows.push(row("even", even_assign(&shards, input)?)?);
    match brute_force_assign(&shards, input, si.cap) {
        Ok(plan) => rows.push(row("brute-force", plan)?),
        Err(Error::EnumerationCap { needed, cap }) => rows.push(SolveRow {
            method: "brute-force",
            shard_size: s,
            shards: shards.count(),
            makespan: None,
            plan: None,
            note: format!("skipped: {needed} assignments exceed cap {cap}"),
        }),
        Err(e) => return Err(e),
    }
    Ok(SolveReport { rows, probes: search.probes })
}

fn plan_text(plan: &ReplicationPlan) -> String {
    plan.assignment
        .iter()
        .map(|(n, v)| {
            let ix: Vec<String> = v.iter().map(|i| i.to_string()).collect();
            format!("{n}:[{}]", ix.join(","))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl fmt::Display for SolveReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>11}{:>8}{:>14}{:>10}  plan", "method", "shard_size", "shards", "makespan", "gap")?;
        for r in &self.rows {
            match (r.makespan, &r.plan) {
                (Some(m), Some(p)) => {
                    let gap = self.gap(r.method).unwrap_or(0.0);
                    write!(f, "{:<14}{:>11}{:>8}{:>14.3}{:>9.2}%  {}", r.method, r.shard_size, r.shards, m, gap, plan_text(p))?;
                }
                _ => write!(f, "{:<14}{:>11}{:>8}{:>14}{:>10}", r.method, r.shard_size, r.shards, "-", "-")?,
            }
            if r.note.is_empty() {
                writeln!(f)?;
            } else {
                writeln!(f, "  ({})", r.note)?;
            }
        }
        Ok(())
    }
}
