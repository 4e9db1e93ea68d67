use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::model::{NodeId, Time};
use crate::monitor::HeartbeatConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    MultiNeighbor,
    SingleSource,
    MultiSource,
    StopResume,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::MultiNeighbor,
        Strategy::SingleSource,
        Strategy::MultiSource,
        Strategy::StopResume,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::MultiNeighbor => "multi-neighbor",
            Strategy::SingleSource => "single-source",
            Strategy::MultiSource => "multi-source",
            Strategy::StopResume => "stop-resume",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multi-neighbor" => Ok(Strategy::MultiNeighbor),
            "single-source" => Ok(Strategy::SingleSource),
            "multi-source" => Ok(Strategy::MultiSource),
            "stop-resume" => Ok(Strategy::StopResume),
            _ => Err(format!(
                "unknown strategy `{s}` (expected multi-neighbor, single-source, multi-source or stop-resume)"
            )),
        }
    }
}

/// Per-node compute cost and the data volumes of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeProfile {
    pub compute: BTreeMap<NodeId, Time>,
    /// All-reduce payload each node sends to each policy peer, in data units.
    pub payload: f64,
    /// Checkpoint throughput in data units per time unit.
    pub checkpoint_write: f64,
    pub checkpoint_read: f64,
}

impl ComputeProfile {
    pub fn compute_of(&self, node: NodeId) -> Time {
        self.compute.get(&node).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub strategy: Strategy,
    /// Minimum number of iterations; the run continues while events remain.
    pub iterations: u64,
    pub control_latency: Time,
    pub heartbeat: HeartbeatConfig,
    pub noise: f64,
    pub seed: u64,
    /// SingleSource stalls every node until the new node holds the state.
    pub single_source_barrier: bool,
    pub restart_cost: Time,
    pub probe_size: f64,
    pub probe_duration: Time,
    pub unit_bytes: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::MultiNeighbor,
            iterations: 10,
            control_latency: 1.0,
            heartbeat: HeartbeatConfig::default(),
            noise: 0.0,
            seed: 0,
            single_source_barrier: true,
            restart_cost: 10_000.0,
            probe_size: 1.0,
            probe_duration: 100.0,
            unit_bytes: crate::units::DEFAULT_UNIT_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Join { node: NodeId, neighbors: Vec<NodeId> },
    Leave { node: NodeId },
    ConnectLink { a: NodeId, b: NodeId },
    DisconnectLink { a: NodeId, b: NodeId },
    FailNode { node: NodeId },
    FailLink { a: NodeId, b: NodeId },
    RerandomizeBandwidth { min_mbps: f64, max_mbps: f64 },
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::Join { .. } => "scale-out",
            EventKind::Leave { .. } => "scale-in",
            EventKind::ConnectLink { .. } => "connect-link",
            EventKind::DisconnectLink { .. } => "disconnect-link",
            EventKind::FailNode { .. } => "fail-node",
            EventKind::FailLink { .. } => "fail-link",
            EventKind::RerandomizeBandwidth { .. } => "rerandomize-bandwidth",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedEvent {
    pub id: u64,
    pub at: Time,
    pub kind: EventKind,
}
