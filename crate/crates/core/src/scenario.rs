//! Text scenario format.
//!
//! ```text
//! [engine]
//! iterations = 20
//! strategy = multi-neighbor
//!
//! [model]
//! preset = vgg11
//!
//! [nodes]
//! node 1 compute_ms=800
//! node 7 compute_ms=800 standby
//!
//! [links]
//! link 1 2 bandwidth_mbps=200 prop_ms=0.5
//! link 1 7 bandwidth_mbps=200 prop_ms=0.5 latent
//!
//! [events]
//! at 1000 join 7 neighbors=1,2
//! at 9000 leave 7
//! ```
//!
//! Times are milliseconds, sizes MiB and bandwidths Mbps. `latent` links are
//! physically present but not part of the initial overlay.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::engine::{ComputeProfile, EngineConfig, EventKind, SimInput, Strategy, TimedEvent};
use crate::model::{LinkMetrics, NodeId, NodeInfo, NodeState, OverlayTopology, Tensor, Time, TrainingState};
use crate::monitor::HeartbeatConfig;
use crate::units;

/// Per-layer sizes in MiB for the built-in models.
pub fn preset_layers(name: &str) -> Option<Vec<f64>> {
    let mut v: Vec<f64> = match name {
        "resnet101" => vec![1.0, 4.0, 10.0, 20.0, 30.0, 30.0, 30.0, 30.0, 23.0],
        "alexnet" => vec![1.0, 1.0, 3.0, 5.0, 3.0, 144.0, 64.0, 12.0],
        "vgg11" => vec![2.0, 4.0, 8.0, 16.0, 18.0, 18.0, 18.0, 392.0, 48.0, 4.0],
        "gpt2" => vec![144.0],
        "gpt2-medium" => vec![196.0],
        "gpt2-large" => vec![242.0],
        _ => return None,
    };
    let blocks = match name {
        "gpt2" => vec![27.0; 12],
        "gpt2-medium" => {
            let mut b = vec![48.0; 24];
            b.push(32.0);
            b
        }
        "gpt2-large" => vec![78.0; 36],
        _ => Vec::new(),
    };
    v.extend(blocks);
    Some(v)
}

pub const PRESETS: [&str; 6] = ["resnet101", "alexnet", "vgg11", "gpt2", "gpt2-medium", "gpt2-large"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.msg)
        } else {
            write!(f, "line {}: {}", self.line, self.msg)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioErrors(pub Vec<LineError>);

impl fmt::Display for ScenarioErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ScenarioErrors {}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub compute_ms: Time,
    pub standby: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    pub bandwidth_mbps: f64,
    pub prop_ms: Time,
    pub latent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChurnSpec {
    /// Mean arrivals per second.
    pub rate_per_s: f64,
    pub start_ms: Time,
    pub end_ms: Time,
    /// Relative weight of joins against leaves.
    pub join_weight: f64,
    pub leave_weight: f64,
    pub neighbors: usize,
    pub seed: u64,
}

impl Default for ChurnSpec {
    fn default() -> Self {
        Self {
            rate_per_s: 0.1,
            start_ms: 0.0,
            end_ms: 60_000.0,
            join_weight: 1.0,
            leave_weight: 1.0,
            neighbors: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub config: EngineConfig,
    pub tensors: Vec<(String, f64)>,
    /// Per-peer all-reduce payload in MiB; `None` means a quarter of the state.
    pub payload_mib: Option<f64>,
    pub checkpoint_write_mibps: f64,
    pub checkpoint_read_mibps: f64,
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    /// Explicit events plus the expanded churn, sorted by time.
    pub events: Vec<TimedEvent>,
    pub churn: Option<ChurnSpec>,
}

impl ScenarioFile {
    pub fn total_mib(&self) -> f64 {
        self.tensors.iter().map(|t| t.1).sum()
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        let mut s = self.clone();
        s.config.strategy = strategy;
        s
    }

    /// Re-seeds the engine and regenerates churn.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.config.seed = seed;
        if let Some(c) = &mut s.churn {
            c.seed = seed;
            s.events.retain(|e| e.id < CHURN_ID_BASE);
            let mut churn = expand_churn(c, &s.nodes, &s.links);
            s.events.append(&mut churn);
            sort_events(&mut s.events);
        }
        s
    }

    pub fn to_sim_input(&self) -> SimInput {
        let ub = self.config.unit_bytes;
        let mut topo = OverlayTopology::new();
        let mut compute = BTreeMap::new();
        for n in &self.nodes {
            let st = if n.standby { NodeState::Standby } else { NodeState::Active };
            topo.add_node(NodeInfo::new(n.id, st, 0.0));
            compute.insert(n.id, n.compute_ms);
        }
        let mut physical = Vec::new();
        for l in &self.links {
            let m = LinkMetrics {
                prop_delay: l.prop_ms,
                trans_delay_per_unit: units::trans_delay_per_unit(l.bandwidth_mbps, ub),
            };
            physical.push((l.a, l.b, m));
            if !l.latent {
                topo.add_link(l.a, l.b, m);
            }
        }
        let tensors = self
            .tensors
            .iter()
            .map(|(name, mib)| Tensor {
                name: name.clone(),
                size: units::mib_to_whole_units(*mib, ub).max(1),
            })
            .collect();
        let state = TrainingState::new(tensors).expect("validated at parse time");
        let payload = units::mib_to_units(self.payload_mib.unwrap_or(0.25 * self.total_mib()), ub);
        SimInput {
            topology: topo,
            physical_links: physical,
            state,
            profile: ComputeProfile {
                compute,
                payload,
                checkpoint_write: units::mibps_to_units_per_ms(self.checkpoint_write_mibps, ub),
                checkpoint_read: units::mibps_to_units_per_ms(self.checkpoint_read_mibps, ub),
            },
            events: self.events.clone(),
            config: self.config.clone(),
        }
    }
}

const CHURN_ID_BASE: u64 = 1_000_000;

fn sort_events(events: &mut [TimedEvent]) {
    events.sort_by(|x, y| x.at.total_cmp(&y.at).then(x.id.cmp(&y.id)));
}

pub fn parse_scenario(text: &str) -> Result<ScenarioFile, ScenarioErrors> {
    Parser::default().parse(text)
}

pub fn load_scenario(path: &std::path::Path) -> Result<ScenarioFile, ScenarioErrors> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ScenarioErrors(vec![LineError {
            line: 0,
            msg: format!("cannot read {}: {e}", path.display()),
        }])
    })?;
    parse_scenario(&text)
}

#[derive(Default)]
struct Parser {
    errors: Vec<LineError>,
}

/// Splits `key=value` words; bare words come back with an empty value.
fn split_kv(word: &str) -> (&str, &str) {
    match word.split_once('=') {
        Some((k, v)) => (k.trim(), v.trim()),
        None => (word, ""),
    }
}

impl Parser {
    fn err(&mut self, line: usize, msg: impl Into<String>) {
        self.errors.push(LineError { line, msg: msg.into() });
    }

    fn num<T: FromStr>(&mut self, line: usize, what: &str, s: &str) -> Option<T> {
        match s.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.err(line, format!("invalid {what} `{s}`"));
                None
            }
        }
    }

    fn time(&mut self, line: usize, what: &str, s: &str) -> Option<f64> {
        let v: f64 = self.num(line, what, s)?;
        if !v.is_finite() || v < 0.0 {
            self.err(line, format!("{what} must be a non-negative number"));
            return None;
        }
        Some(v)
    }

    fn node(&mut self, line: usize, s: &str) -> Option<NodeId> {
        self.num::<u32>(line, "node id", s).map(NodeId)
    }

    fn parse(mut self, text: &str) -> Result<ScenarioFile, ScenarioErrors> {
        let mut cfg = EngineConfig::default();
        let mut hb = HeartbeatConfig::default();
        let mut tensors = Vec::new();
        let mut payload_mib = None;
        let mut ck_write = 50.0;
        let mut ck_read = 50.0;
        let mut nodes: Vec<(usize, NodeSpec)> = Vec::new();
        let mut links: Vec<(usize, LinkSpec)> = Vec::new();
        let mut events: Vec<(usize, TimedEvent)> = Vec::new();
        let mut churn: Option<(usize, ChurnSpec)> = None;
        let mut section = String::new();

        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                match section.as_str() {
                    "engine" | "model" | "nodes" | "links" | "events" => {}
                    "churn" => churn = Some((ln, ChurnSpec::default())),
                    _ => self.err(ln, format!("unknown section [{section}]")),
                }
                continue;
            }
            match section.as_str() {
                "engine" => self.engine_line(ln, line, &mut cfg, &mut hb, &mut payload_mib, &mut ck_write, &mut ck_read),
                "model" => {
                    let (k, v) = split_kv(line);
                    if k == "preset" {
                        match preset_layers(v) {
                            Some(layers) => {
                                tensors.extend(layers.into_iter().enumerate().map(|(j, s)| (format!("{v}.{j}"), s)));
                            }
                            None => self.err(ln, format!("unknown preset `{v}` (known: {})", PRESETS.join(", "))),
                        }
                    } else if let Some(name) = k.strip_prefix("tensor ") {
                        if let Some(mib) = self.num::<f64>(ln, "tensor size", v) {
                            if mib > 0.0 && mib.is_finite() {
                                tensors.push((name.trim().to_string(), mib));
                            } else {
                                self.err(ln, "tensor size must be positive");
                            }
                        }
                    } else {
                        self.err(ln, format!("expected `preset = <name>` or `tensor <name> = <MiB>`, got `{line}`"));
                    }
                }
                "nodes" => {
                    if let Some(n) = self.node_line(ln, line) {
                        nodes.push((ln, n));
                    }
                }
                "links" => {
                    if let Some(l) = self.link_line(ln, line) {
                        links.push((ln, l));
                    }
                }
                "events" => {
                    if let Some(kind_at) = self.event_line(ln, line) {
                        let id = events.len() as u64;
                        events.push((ln, TimedEvent { id, at: kind_at.0, kind: kind_at.1 }));
                    }
                }
                "churn" => {
                    if let Some((_, c)) = churn.as_mut() {
                        let mut spec = c.clone();
                        self.churn_line(ln, line, &mut spec);
                        *c = spec;
                    }
                }
                _ => self.err(ln, "content outside of a section"),
            }
        }
        cfg.heartbeat = hb;
        if tensors.is_empty() {
            self.err(0, "[model] declares no tensors");
        }

        self.check_references(&nodes, &links, &events);
        if let Some((ln, c)) = &churn {
            if c.end_ms < c.start_ms || c.rate_per_s <= 0.0 {
                self.err(*ln, "[churn] needs rate_per_s > 0 and end_ms >= start_ms");
            }
            if !nodes.iter().any(|(_, n)| n.standby) {
                self.err(*ln, "[churn] needs at least one standby node");
            }
        }
        if !self.errors.is_empty() {
            return Err(ScenarioErrors(self.errors));
        }

        let nodes: Vec<NodeSpec> = nodes.into_iter().map(|x| x.1).collect();
        let links: Vec<LinkSpec> = links.into_iter().map(|x| x.1).collect();
        let mut events: Vec<TimedEvent> = events.into_iter().map(|x| x.1).collect();
        let churn = churn.map(|c| {
            let mut c = c.1;
            if c.seed == 0 {
                c.seed = cfg.seed;
            }
            c
        });
        if let Some(c) = &churn {
            events.extend(expand_churn(c, &nodes, &links));
            sort_events(&mut events);
        }
        Ok(ScenarioFile {
            config: cfg,
            tensors,
            payload_mib,
            checkpoint_write_mibps: ck_write,
            checkpoint_read_mibps: ck_read,
            nodes,
            links,
            events,
            churn,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn engine_line(
        &mut self,
        ln: usize,
        line: &str,
        cfg: &mut EngineConfig,
        hb: &mut HeartbeatConfig,
        payload: &mut Option<f64>,
        ck_write: &mut f64,
        ck_read: &mut f64,
    ) {
        let (k, v) = split_kv(line);
        if v.is_empty() {
            self.err(ln, format!("expected `key = value`, got `{line}`"));
            return;
        }
        let pos = |p: &mut Self, x: Option<f64>| -> Option<f64> {
            match x {
                Some(x) if x > 0.0 && x.is_finite() => Some(x),
                Some(_) => {
                    p.err(ln, format!("{k} must be positive"));
                    None
                }
                None => None,
            }
        };
        match k {
            "iterations" => {
                if let Some(x) = self.num(ln, k, v) {
                    cfg.iterations = x;
                }
            }
            "unit_bytes" => match self.num::<u64>(ln, k, v) {
                Some(0) => self.err(ln, "unit_bytes must be positive"),
                Some(x) => cfg.unit_bytes = x,
                None => {}
            },
            "seed" => {
                if let Some(x) = self.num(ln, k, v) {
                    cfg.seed = x;
                }
            }
            "strategy" => match v.parse() {
                Ok(s) => cfg.strategy = s,
                Err(e) => self.err(ln, e),
            },
            "single_source_barrier" => match v {
                "true" => cfg.single_source_barrier = true,
                "false" => cfg.single_source_barrier = false,
                _ => self.err(ln, format!("expected true or false, got `{v}`")),
            },
            "control_latency_ms" => {
                if let Some(x) = self.time(ln, k, v) {
                    cfg.control_latency = x;
                }
            }
            "restart_cost_ms" => {
                if let Some(x) = self.time(ln, k, v) {
                    cfg.restart_cost = x;
                }
            }
            "probe_ms" => {
                if let Some(x) = self.time(ln, k, v) {
                    cfg.probe_duration = x;
                }
            }
            "noise" => match self.num::<f64>(ln, k, v) {
                Some(x) if (0.0..1.0).contains(&x) => cfg.noise = x,
                Some(_) => self.err(ln, "noise must be in [0, 1)"),
                None => {}
            },
            "heartbeat_interval_ms" => {
                let x = self.num(ln, k, v);
                if let Some(x) = pos(self, x) {
                    hb.interval = x;
                }
            }
            "heartbeat_miss_threshold" => match self.num::<u32>(ln, k, v) {
                Some(0) => self.err(ln, "heartbeat_miss_threshold must be positive"),
                Some(x) => hb.miss_threshold = x,
                None => {}
            },
            "payload_mib" => {
                if let Some(x) = self.time(ln, k, v) {
                    *payload = Some(x);
                }
            }
            "checkpoint_write_mibps" => {
                let x = self.num(ln, k, v);
                if let Some(x) = pos(self, x) {
                    *ck_write = x;
                }
            }
            "checkpoint_read_mibps" => {
                let x = self.num(ln, k, v);
                if let Some(x) = pos(self, x) {
                    *ck_read = x;
                }
            }
            _ => self.err(ln, format!("unknown engine key `{k}`")),
        }
    }

    fn node_line(&mut self, ln: usize, line: &str) -> Option<NodeSpec> {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() < 2 || words[0] != "node" {
            self.err(ln, format!("expected `node <id> compute_ms=<ms> [standby]`, got `{line}`"));
            return None;
        }
        let id = self.node(ln, words[1])?;
        let mut spec = NodeSpec { id, compute_ms: 0.0, standby: false };
        let mut has_compute = false;
        for w in &words[2..] {
            match split_kv(w) {
                ("compute_ms", v) => {
                    spec.compute_ms = self.time(ln, "compute_ms", v)?;
                    has_compute = true;
                }
                ("standby", "") => spec.standby = true,
                (k, _) => self.err(ln, format!("unknown node attribute `{k}`")),
            }
        }
        if !has_compute {
            self.err(ln, "node needs compute_ms");
            return None;
        }
        Some(spec)
    }

    fn link_line(&mut self, ln: usize, line: &str) -> Option<LinkSpec> {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() < 3 || words[0] != "link" {
            self.err(ln, format!("expected `link <a> <b> bandwidth_mbps=<x> prop_ms=<y>`, got `{line}`"));
            return None;
        }
        let a = self.node(ln, words[1])?;
        let b = self.node(ln, words[2])?;
        if a == b {
            self.err(ln, "self-loop link");
            return None;
        }
        let mut bw = None;
        let mut prop = 0.0;
        let mut latent = false;
        for w in &words[3..] {
            match split_kv(w) {
                ("bandwidth_mbps", v) => match self.num::<f64>(ln, "bandwidth", v) {
                    Some(x) if x > 0.0 && x.is_finite() => bw = Some(x),
                    Some(_) => self.err(ln, "bandwidth must be positive"),
                    None => {}
                },
                ("prop_ms", v) => prop = self.time(ln, "prop_ms", v)?,
                ("latent", "") => latent = true,
                (k, _) => self.err(ln, format!("unknown link attribute `{k}`")),
            }
        }
        let Some(bandwidth_mbps) = bw else {
            self.err(ln, "link needs bandwidth_mbps");
            return None;
        };
        Some(LinkSpec { a, b, bandwidth_mbps, prop_ms: prop, latent })
    }

    fn event_line(&mut self, ln: usize, line: &str) -> Option<(Time, EventKind)> {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() < 3 || words[0] != "at" {
            self.err(ln, format!("expected `at <ms> <primitive> <args>`, got `{line}`"));
            return None;
        }
        let at = self.time(ln, "event time", words[1])?;
        let args = &words[3..];
        let arity = |p: &mut Self, n: usize| -> bool {
            if args.len() != n {
                p.err(ln, format!("`{}` takes {n} argument(s)", words[2]));
                false
            } else {
                true
            }
        };
        let kind = match words[2] {
            "join" => {
                if args.is_empty() || args.len() > 2 {
                    self.err(ln, "expected `join <node> neighbors=<a,b,..>`");
                    return None;
                }
                let node = self.node(ln, args[0])?;
                let mut neighbors = Vec::new();
                if let Some(w) = args.get(1) {
                    let (k, v) = split_kv(w);
                    if k != "neighbors" {
                        self.err(ln, format!("unknown join attribute `{k}`"));
                        return None;
                    }
                    for x in v.split(',').filter(|x| !x.is_empty()) {
                        neighbors.push(self.node(ln, x)?);
                    }
                }
                if neighbors.is_empty() {
                    self.err(ln, "join needs at least one neighbor");
                    return None;
                }
                EventKind::Join { node, neighbors }
            }
            "leave" | "fail-node" => {
                if !arity(self, 1) {
                    return None;
                }
                let node = self.node(ln, args[0])?;
                if words[2] == "leave" {
                    EventKind::Leave { node }
                } else {
                    EventKind::FailNode { node }
                }
            }
            p @ ("connect-link" | "disconnect-link" | "fail-link") => {
                if !arity(self, 2) {
                    return None;
                }
                let a = self.node(ln, args[0])?;
                let b = self.node(ln, args[1])?;
                match p {
                    "connect-link" => EventKind::ConnectLink { a, b },
                    "disconnect-link" => EventKind::DisconnectLink { a, b },
                    _ => EventKind::FailLink { a, b },
                }
            }
            "rerandomize-bandwidth" => {
                if !arity(self, 2) {
                    return None;
                }
                let min_mbps: f64 = self.num(ln, "bandwidth", args[0])?;
                let max_mbps: f64 = self.num(ln, "bandwidth", args[1])?;
                if !(min_mbps > 0.0 && max_mbps >= min_mbps && max_mbps.is_finite()) {
                    self.err(ln, "need 0 < min <= max bandwidth");
                    return None;
                }
                EventKind::RerandomizeBandwidth { min_mbps, max_mbps }
            }
            other => {
                self.err(ln, format!("unknown primitive `{other}`"));
                return None;
            }
        };
        Some((at, kind))
    }

    fn churn_line(&mut self, ln: usize, line: &str, c: &mut ChurnSpec) {
        let (k, v) = split_kv(line);
        match k {
            "rate_per_s" => {
                if let Some(x) = self.num(ln, k, v) {
                    c.rate_per_s = x;
                }
            }
            "start_ms" => {
                if let Some(x) = self.time(ln, k, v) {
                    c.start_ms = x;
                }
            }
            "end_ms" => {
                if let Some(x) = self.time(ln, k, v) {
                    c.end_ms = x;
                }
            }
            "join_weight" => {
                if let Some(x) = self.time(ln, k, v) {
                    c.join_weight = x;
                }
            }
            "leave_weight" => {
                if let Some(x) = self.time(ln, k, v) {
                    c.leave_weight = x;
                }
            }
            "neighbors" => match self.num::<usize>(ln, k, v) {
                Some(0) => self.err(ln, "neighbors must be positive"),
                Some(x) => c.neighbors = x,
                None => {}
            },
            "seed" => {
                if let Some(x) = self.num(ln, k, v) {
                    c.seed = x;
                }
            }
            _ => self.err(ln, format!("unknown churn key `{k}`")),
        }
    }

    fn check_references(&mut self, nodes: &[(usize, NodeSpec)], links: &[(usize, LinkSpec)], events: &[(usize, TimedEvent)]) {
        let mut ids = BTreeSet::new();
        for (ln, n) in nodes {
            if !ids.insert(n.id) {
                self.err(*ln, format!("duplicate node {}", n.id));
            }
        }
        if nodes.iter().all(|(_, n)| n.standby) {
            self.err(0, "[nodes] declares no active node");
        }
        let mut keys = BTreeSet::new();
        for (ln, l) in links {
            for x in [l.a, l.b] {
                if !ids.contains(&x) {
                    self.err(*ln, format!("link references unknown node {x}"));
                }
            }
            if !keys.insert((l.a.min(l.b), l.a.max(l.b))) {
                self.err(*ln, format!("duplicate link {}-{}", l.a, l.b));
            }
        }
        let mut last = 0.0;
        for (ln, e) in events {
            if e.at < last {
                self.err(*ln, format!("event at {} is earlier than the previous event at {last}", e.at));
            }
            last = e.at;
            let (subjects, pair) = match &e.kind {
                EventKind::Join { node, neighbors } => {
                    let mut s = vec![*node];
                    s.extend(neighbors);
                    for &u in neighbors {
                        if !keys.contains(&((*node).min(u), (*node).max(u))) {
                            self.err(*ln, format!("no link declared between {} and {}", (*node).min(u), (*node).max(u)));
                        }
                    }
                    (s, None)
                }
                EventKind::Leave { node } | EventKind::FailNode { node } => (vec![*node], None),
                EventKind::ConnectLink { a, b } | EventKind::DisconnectLink { a, b } | EventKind::FailLink { a, b } => {
                    (vec![*a, *b], Some((*a.min(b), *a.max(b))))
                }
                EventKind::RerandomizeBandwidth { .. } => (Vec::new(), None),
            };
            for x in subjects {
                if !ids.contains(&x) {
                    self.err(*ln, format!("event references unknown node {x}"));
                }
            }
            if let Some(k) = pair {
                if !keys.contains(&k) {
                    self.err(*ln, format!("no link declared between {} and {}", k.0, k.1));
                }
            }
        }
    }
}

/// Expands a churn spec into join and leave events. Candidates come from the
/// standby pool; each join picks neighbors among initially active nodes that
/// share a declared link with the candidate, and leaves only target nodes
/// that joined through churn.
pub fn expand_churn(c: &ChurnSpec, nodes: &[NodeSpec], links: &[LinkSpec]) -> Vec<TimedEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0xc4a5);
    let exp = Exp::new(c.rate_per_s / 1000.0).expect("positive rate");
    let active: BTreeSet<NodeId> = nodes.iter().filter(|n| !n.standby).map(|n| n.id).collect();
    let mut pool: Vec<NodeId> = nodes.iter().filter(|n| n.standby).map(|n| n.id).collect();
    let mut joined: Vec<NodeId> = Vec::new();
    let mut out = Vec::new();
    let mut t = c.start_ms;
    let total = c.join_weight + c.leave_weight;
    loop {
        t += exp.sample(&mut rng);
        if t > c.end_ms {
            break;
        }
        let want_join = total <= 0.0 || rng.random::<f64>() * total < c.join_weight;
        let id = CHURN_ID_BASE + out.len() as u64;
        let at = (t * 1000.0).round() / 1000.0;
        if (want_join || joined.is_empty()) && !pool.is_empty() {
            let v = pool.remove(rng.random_range(0..pool.len()));
            let cands: Vec<NodeId> = links
                .iter()
                .filter_map(|l| match (l.a == v, l.b == v) {
                    (true, _) if active.contains(&l.b) => Some(l.b),
                    (_, true) if active.contains(&l.a) => Some(l.a),
                    _ => None,
                })
                .collect();
            if cands.is_empty() {
                continue;
            }
            let mut neighbors: Vec<NodeId> = cands.choose_multiple(&mut rng, c.neighbors.min(cands.len())).copied().collect();
            neighbors.sort();
            joined.push(v);
            out.push(TimedEvent { id, at, kind: EventKind::Join { node: v, neighbors } });
        } else if !joined.is_empty() {
            let v = joined.remove(rng.random_range(0..joined.len()));
            pool.push(v);
            out.push(TimedEvent { id, at, kind: EventKind::Leave { node: v } });
        }
    }
    out
}

#[cfg(test)]
mod tests;
