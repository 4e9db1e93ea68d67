//! Scheduler-side view of the cluster: liveness, link probes and the
//! measurements handed to the replication scheduler.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{LinkMetrics, NodeId, NodeState, OverlayTopology, Time, TrainingState};
use crate::scheduler::{NeighborLink, SchedulerInput};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeartbeatConfig {
    pub interval: Time,
    pub miss_threshold: u32,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self {
            interval: 2000.0,
            miss_threshold: 3,
        }
    }
}

impl HeartbeatConfig {
    pub fn new(interval: Time, miss_threshold: u32) -> Result<Self> {
        if !interval.is_finite() || interval <= 0.0 {
            return Err(Error::InvalidHeartbeat(format!("interval must be > 0 (got {interval})")));
        }
        if miss_threshold == 0 {
            return Err(Error::InvalidHeartbeat("miss_threshold must be at least 1".into()));
        }
        Ok(Self { interval, miss_threshold })
    }

    pub fn deadline(&self) -> Time {
        self.interval * self.miss_threshold as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementReport {
    pub link: (NodeId, NodeId),
    pub prop_delay: Time,
    pub trans_delay_per_unit: Time,
    pub measured_at: Time,
    pub sync_finish_time: BTreeMap<NodeId, Time>,
}

impl MeasurementReport {
    pub fn metrics(&self) -> LinkMetrics {
        LinkMetrics {
            prop_delay: self.prop_delay,
            trans_delay_per_unit: self.trans_delay_per_unit,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MonitorEvent {
    NodeFailure { node: NodeId, at: Time },
    LinkFailure { a: NodeId, b: NodeId, at: Time },
    MeasurementReady { v_new: NodeId, at: Time },
    Warning { at: Time, msg: String },
}

impl fmt::Display for MonitorEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MonitorEvent::NodeFailure { node, at } => write!(f, "{at:.3} NodeFailure node={node}"),
            MonitorEvent::LinkFailure { a, b, at } => write!(f, "{at:.3} LinkFailure link={a}-{b}"),
            MonitorEvent::MeasurementReady { v_new, at } => {
                write!(f, "{at:.3} MeasurementReady v_new={v_new}")
            }
            MonitorEvent::Warning { at, msg } => write!(f, "{at:.3} Warning {msg}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeResult {
    Report(MeasurementReport),
    LinkFailure(NodeId, NodeId),
}

#[derive(Debug, Clone)]
pub struct ClusterMonitor {
    topo: OverlayTopology,
    heartbeat: HeartbeatConfig,
    truth: BTreeMap<(NodeId, NodeId), LinkMetrics>,
    failed_links: BTreeSet<(NodeId, NodeId)>,
    noise: f64,
    rng: ChaCha8Rng,
    events: Vec<MonitorEvent>,
    now: Time,
}

fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    (a.min(b), a.max(b))
}

impl ClusterMonitor {
    /// `noise` is the half-width of the multiplicative probe error.
    pub fn new(topo: OverlayTopology, heartbeat: HeartbeatConfig, noise: f64, seed: u64) -> Self {
        let truth = topo.links.clone();
        Self {
            topo,
            heartbeat,
            truth,
            failed_links: BTreeSet::new(),
            noise: noise.clamp(0.0, 0.99),
            rng: ChaCha8Rng::seed_from_u64(seed),
            events: Vec::new(),
            now: 0.0,
        }
    }

    pub fn heartbeat_config(&self) -> HeartbeatConfig {
        self.heartbeat
    }

    pub fn topology(&self) -> &OverlayTopology {
        &self.topo
    }

    pub fn topology_mut(&mut self) -> &mut OverlayTopology {
        &mut self.topo
    }

    pub fn drain_events(&mut self) -> Vec<MonitorEvent> {
        std::mem::take(&mut self.events)
    }

    fn tick(&mut self, at: Time) {
        self.now = self.now.max(at);
    }

    /// Ground-truth metrics for a physical link (both directions).
    pub fn set_truth(&mut self, a: NodeId, b: NodeId, metrics: LinkMetrics) {
        self.truth.insert((a, b), metrics);
        self.truth.insert((b, a), metrics);
    }

    pub fn truth(&self, a: NodeId, b: NodeId) -> Option<LinkMetrics> {
        self.truth.get(&(a, b)).copied()
    }

    pub fn mark_link_failed(&mut self, a: NodeId, b: NodeId) {
        self.failed_links.insert(key(a, b));
    }

    pub fn link_failed(&self, a: NodeId, b: NodeId) -> bool {
        self.failed_links.contains(&key(a, b))
    }

    pub fn record_heartbeat(&mut self, node: NodeId, at: Time) {
        self.tick(at);
        match self.topo.node_mut(node) {
            Some(info) => info.last_heartbeat = info.last_heartbeat.max(at),
            None => self.events.push(MonitorEvent::Warning {
                at,
                msg: format!("heartbeat from unknown node {node}"),
            }),
        }
    }

    /// Flags nodes silent for longer than the heartbeat deadline. A node is
    /// reported once; it is marked Failed in the monitor's topology.
    pub fn check_liveness(&mut self, now: Time) -> BTreeSet<NodeId> {
        self.tick(now);
        let deadline = self.heartbeat.deadline();
        let lost: BTreeSet<NodeId> = self
            .topo
            .nodes
            .values()
            .filter(|n| matches!(n.state, NodeState::Active | NodeState::Joining | NodeState::Leaving))
            .filter(|n| now - n.last_heartbeat > deadline)
            .map(|n| n.id)
            .collect();
        for &id in &lost {
            self.topo.node_mut(id).unwrap().state = NodeState::Failed;
            self.events.push(MonitorEvent::NodeFailure { node: id, at: now });
        }
        lost
    }

    fn perturb(&mut self, v: f64) -> f64 {
        if self.noise == 0.0 {
            return v;
        }
        v * self.rng.random_range(1.0 - self.noise..=1.0 + self.noise)
    }

    pub fn probe_link(&mut self, a: NodeId, b: NodeId, at: Time) -> Result<ProbeResult> {
        self.tick(at);
        let Some(truth) = self.truth.get(&(a, b)).copied() else {
            return Err(Error::UnknownLink(a, b));
        };
        if self.link_failed(a, b) {
            self.events.push(MonitorEvent::LinkFailure { a, b, at });
            return Ok(ProbeResult::LinkFailure(a, b));
        }
        let prop_delay = self.perturb(truth.prop_delay);
        let trans_delay_per_unit = self.perturb(truth.trans_delay_per_unit);
        Ok(ProbeResult::Report(MeasurementReport {
            link: (a, b),
            prop_delay,
            trans_delay_per_unit,
            measured_at: at,
            sync_finish_time: BTreeMap::new(),
        }))
    }

    /// Probes `neighbor -> v_new` for each neighbor and assembles the
    /// scheduler input. The first failing link aborts the measurement.
    pub fn measure_for_scaleout(
        &mut self,
        v_new: NodeId,
        neighbors: &BTreeSet<NodeId>,
        sync_finish: &BTreeMap<NodeId, Time>,
        state: &TrainingState,
        at: Time,
    ) -> Result<std::result::Result<SchedulerInput, (NodeId, NodeId)>> {
        let mut links = Vec::with_capacity(neighbors.len());
        for &u in neighbors {
            match self.probe_link(u, v_new, at)? {
                ProbeResult::LinkFailure(a, b) => return Ok(Err((a, b))),
                ProbeResult::Report(r) => {
                    let sync = sync_finish.get(&u).copied().unwrap_or(0.0);
                    links.push(NeighborLink::new(u, r.prop_delay, r.trans_delay_per_unit, sync)?);
                }
            }
        }
        let input = SchedulerInput::new(v_new, links, state.clone())?;
        self.events.push(MonitorEvent::MeasurementReady { v_new, at });
        Ok(Ok(input))
    }

    /// Copy of the current view. Links of failed or removed nodes are never
    /// included.
    pub fn topology_snapshot(&self, _now: Time) -> OverlayTopology {
        let mut snap = self.topo.clone();
        let dead: Vec<NodeId> = snap
            .nodes
            .values()
            .filter(|n| matches!(n.state, NodeState::Failed | NodeState::Standby))
            .map(|n| n.id)
            .collect();
        for id in dead {
            snap.detach_node(id);
        }
        snap
    }
}
