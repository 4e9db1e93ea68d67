//! Synchronous training loop driven by a single discrete-event queue.
//!
//! Every iteration each participant computes its gradient, then exchanges
//! its all-reduce payload with its sync-policy peers over the simulated
//! network. The iteration boundary is reached when every exchange has
//! landed. Scaling sessions run alongside and commit either at a boundary
//! (graceful primitives) or immediately (failures).

mod config;
mod metrics;
mod primitives;
mod scaleout;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ComputeProfile, EngineConfig, EventKind, Strategy, TimedEvent};
pub use metrics::{account_idle_time, IdleTotals, IterationRecord, MetricsRecord};

use crate::error::{Error, Result};
use crate::model::{LinkMetrics, NodeId, NodeState, OverlayTopology, SyncPolicy, Time, TrainingState};
use crate::monitor::{ClusterMonitor, MonitorEvent};
use crate::negotiator::{ControlMessage, MessageKind, Negotiator, Party, Payload, SessionId};
use crate::network::{NetOutcome, Network, TransferId, TransferRequest, TransferTag};
use crate::queue::EventQueue;

use scaleout::ScaleOut;

/// Everything a run needs.
#[derive(Debug, Clone)]
pub struct SimInput {
    /// Overlay at t=0. Standby nodes are present but unlinked.
    pub topology: OverlayTopology,
    /// Every physical link, including ones not yet part of the overlay.
    pub physical_links: Vec<(NodeId, NodeId, LinkMetrics)>,
    pub state: TrainingState,
    pub profile: ComputeProfile,
    pub events: Vec<TimedEvent>,
    pub config: EngineConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: Strategy,
    pub records: Vec<MetricsRecord>,
    pub iterations: Vec<IterationRecord>,
    pub trace: Vec<ControlMessage>,
    pub monitor_log: Vec<MonitorEvent>,
    pub idle: IdleTotals,
    pub final_topology: OverlayTopology,
    pub final_policy: SyncPolicy,
    pub end_time: Time,
}

impl RunOutput {
    pub fn trace_text(&self) -> String {
        self.trace.iter().map(|m| m.trace_line() + "\n").collect()
    }

    pub fn events_text(&self) -> String {
        self.monitor_log.iter().map(|e| e.to_string() + "\n").collect()
    }
}

#[derive(Debug, Clone)]
enum Ev {
    Scenario(usize),
    Deliver(usize),
    ComputeDone { node: NodeId, iter: u64 },
    HeartbeatTick,
    SocketUp { session: SessionId, node: NodeId, peer: NodeId },
    ProbesDone { session: SessionId },
    Reassign { session: SessionId, shards: Vec<usize> },
    Resume { session: SessionId },
}

#[derive(Debug, Clone, Default)]
struct NodeIter {
    compute_done: Option<Time>,
    /// Waiting for replicated state before computing.
    blocked_on: Option<SessionId>,
    ready_wo_version: Option<Time>,
    exchange_started: Option<Time>,
    pending: BTreeSet<(NodeId, NodeId)>,
    done: Option<Time>,
    stall: Time,
}

#[derive(Debug, Clone, Default)]
struct Iteration {
    k: u64,
    start: Time,
    epoch: u64,
    version: u64,
    participants: BTreeSet<NodeId>,
    nodes: BTreeMap<NodeId, NodeIter>,
    delivered: BTreeSet<(NodeId, NodeId)>,
    restarts: u32,
}

impl Iteration {
    fn in_flight(&self) -> bool {
        self.nodes.values().any(|n| n.exchange_started.is_some())
    }
}

#[derive(Debug, Clone)]
struct StateXfer {
    session: SessionId,
    path: Vec<NodeId>,
    shard: usize,
    next_hop: usize,
}

/// Non-scale-out session context.
#[derive(Debug, Clone)]
struct Pending {
    event_id: u64,
    t0: Time,
    label: &'static str,
    acks: BTreeSet<NodeId>,
    measured: Option<LinkMetrics>,
}

/// A committed row whose visible delay is known once the iteration running
/// under `version` finishes.
#[derive(Debug, Clone, Copy)]
struct Watch {
    record: usize,
    version: u64,
}

pub struct Engine {
    cfg: EngineConfig,
    profile: ComputeProfile,
    state: TrainingState,
    monitor: ClusterMonitor,
    net: Network,
    negotiator: Negotiator,
    events: Vec<TimedEvent>,
    queue: EventQueue<Ev>,
    now: Time,
    rng: ChaCha8Rng,
    alive: BTreeSet<NodeId>,
    policy: SyncPolicy,
    known_version: BTreeMap<NodeId, u64>,
    iter: Iteration,
    hold_until: Time,
    trace: Vec<ControlMessage>,
    monitor_log: Vec<MonitorEvent>,
    records: Vec<MetricsRecord>,
    iterations: Vec<IterationRecord>,
    scaleouts: BTreeMap<SessionId, ScaleOut>,
    pending: BTreeMap<SessionId, Pending>,
    allreduce: BTreeMap<TransferId, (NodeId, NodeId, u64)>,
    state_xfers: BTreeMap<TransferId, StateXfer>,
    out_hops: BTreeMap<NodeId, usize>,
    reported_links: BTreeSet<(NodeId, NodeId)>,
    watches: Vec<Watch>,
    scenario_left: usize,
    tick_scheduled: bool,
    undetected: BTreeMap<NodeId, (u64, Time)>,
    link_failures: BTreeMap<(NodeId, NodeId), (u64, Time)>,
    barrier_wait: BTreeMap<NodeId, Time>,
    requests: BTreeMap<(&'static str, NodeId), VecDeque<(u64, Time)>>,
    ack_routes: BTreeMap<usize, SessionId>,
    finished: bool,
}

fn ukey(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    (a.min(b), a.max(b))
}

const ITERATION_GUARD: u64 = 1_000_000;

impl Engine {
    pub fn new(input: SimInput) -> Result<Self> {
        let SimInput {
            topology,
            physical_links,
            state,
            profile,
            mut events,
            config,
        } = input;
        let mut net = Network::new();
        for &(a, b, m) in &physical_links {
            net.add_link(a, b, m);
        }
        for (&(a, b), &m) in &topology.links {
            net.add_directed(a, b, m);
        }
        let mut monitor = ClusterMonitor::new(topology.clone(), config.heartbeat, config.noise, config.seed);
        for &(a, b, m) in &physical_links {
            monitor.set_truth(a, b, m);
        }
        events.sort_by(|x, y| x.at.total_cmp(&y.at).then(x.id.cmp(&y.id)));
        let alive = topology.nodes.keys().copied().collect();
        let active = topology.active_nodes();
        let policy = SyncPolicy::from_topology(&topology, &active, 0);
        let known_version = topology.nodes.keys().map(|&n| (n, 0)).collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed),
            cfg: config,
            profile,
            state,
            monitor,
            net,
            negotiator: Negotiator::new(),
            scenario_left: events.len(),
            events,
            queue: EventQueue::new(),
            now: 0.0,
            alive,
            policy,
            known_version,
            iter: Iteration::default(),
            hold_until: 0.0,
            trace: Vec::new(),
            monitor_log: Vec::new(),
            records: Vec::new(),
            iterations: Vec::new(),
            scaleouts: BTreeMap::new(),
            pending: BTreeMap::new(),
            allreduce: BTreeMap::new(),
            state_xfers: BTreeMap::new(),
            out_hops: BTreeMap::new(),
            reported_links: BTreeSet::new(),
            watches: Vec::new(),
            tick_scheduled: false,
            undetected: BTreeMap::new(),
            link_failures: BTreeMap::new(),
            barrier_wait: BTreeMap::new(),
            requests: BTreeMap::new(),
            ack_routes: BTreeMap::new(),
            finished: false,
        })
    }

    fn topo(&self) -> &OverlayTopology {
        self.monitor.topology()
    }

    fn c(&self) -> Time {
        self.cfg.control_latency
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Engine {
            time: self.now,
            msg: msg.into(),
        }
    }

    fn send(&mut self, src: Party, dst: Party, kind: MessageKind, payload: Payload) -> usize {
        let idx = self.trace.len();
        self.trace.push(ControlMessage::new(self.now, src, dst, kind, payload));
        self.queue.push(self.now + self.c(), Ev::Deliver(idx));
        idx
    }

    fn remember_request(&mut self, label: &'static str, node: NodeId, event_id: u64) {
        let now = self.now;
        self.requests.entry((label, node)).or_default().push_back((event_id, now));
    }

    /// Event id and send time of the oldest request of this kind from `node`.
    fn take_request(&mut self, label: &'static str, node: NodeId) -> Option<(u64, Time)> {
        self.requests.get_mut(&(label, node)).and_then(VecDeque::pop_front)
    }

    fn note(&mut self, msg: String) {
        self.monitor_log.push(MonitorEvent::Warning { at: self.now, msg });
    }

    fn drain_monitor(&mut self) {
        let evs = self.monitor.drain_events();
        self.monitor_log.extend(evs);
    }

    pub fn run(mut self) -> Result<RunOutput> {
        if self.topo().active_nodes().is_empty() {
            return Err(self.err("no active nodes at start"));
        }
        for i in 0..self.events.len() {
            let at = self.events[i].at;
            self.queue.push(at, Ev::Scenario(i));
        }
        self.start_iteration()?;
        while !self.finished {
            let tn = self.net.next_time();
            let te = self.queue.peek_time();
            match (tn, te) {
                (None, None) => return Err(self.err("simulation stalled with work outstanding")),
                (Some(a), b) if b.is_none_or(|b| a <= b) => {
                    let outs = self.net.step();
                    self.now = self.now.max(a);
                    for o in outs {
                        self.on_net(o)?;
                    }
                }
                _ => {
                    let (t, ev) = self.queue.pop().unwrap();
                    self.now = self.now.max(t);
                    self.on_event(ev)?;
                }
            }
            self.release_queued()?;
            self.drain_monitor();
        }
        let idle = account_idle_time(&self.records, &self.barrier_wait);
        let mut records = self.records;
        records.sort_by(|a, b| a.event_id.cmp(&b.event_id).then(a.time.total_cmp(&b.time)));
        Ok(RunOutput {
            strategy: self.cfg.strategy,
            records,
            iterations: self.iterations,
            trace: self.trace,
            monitor_log: self.monitor_log,
            idle,
            final_topology: self.monitor.topology_snapshot(self.now),
            final_policy: self.policy,
            end_time: self.now,
        })
    }

    fn on_event(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::Scenario(i) => {
                self.scenario_left -= 1;
                let e = self.events[i].clone();
                self.on_scenario(e)
            }
            Ev::Deliver(idx) => {
                let msg = self.trace[idx].clone();
                if let Some(sid) = self.ack_routes.remove(&idx) {
                    let Party::Node(u) = msg.src else { unreachable!() };
                    return self.on_connect_ack(sid, u);
                }
                self.on_message(msg)
            }
            Ev::ComputeDone { node, iter } => {
                if iter == self.iter.k && self.iter.participants.contains(&node) && self.alive.contains(&node) {
                    if let Some(ni) = self.iter.nodes.get_mut(&node) {
                        if ni.compute_done.is_none() {
                            ni.compute_done = Some(self.now);
                        }
                    }
                    self.try_exchange(node)?;
                }
                Ok(())
            }
            Ev::HeartbeatTick => self.on_heartbeat_tick(),
            Ev::SocketUp { session, node, peer } => self.on_socket_up(session, node, peer),
            Ev::ProbesDone { session } => self.on_probes_done(session),
            Ev::Reassign { session, shards } => self.on_reassign(session, shards),
            Ev::Resume { session } => self.on_resume(session),
        }
    }

    fn on_scenario(&mut self, e: TimedEvent) -> Result<()> {
        let node = |n: NodeId| Party::Node(n);
        match e.kind {
            EventKind::Join { node: v, ref neighbors } => {
                let payload = Payload::Join {
                    endpoint: format!("node-{v}"),
                    neighbors: neighbors.clone(),
                };
                self.remember_request("scale-out", v, e.id);
                self.send(node(v), Party::Scheduler, MessageKind::JoinRequest, payload);
            }
            EventKind::Leave { node: x } => {
                self.remember_request("scale-in", x, e.id);
                self.send(node(x), Party::Scheduler, MessageKind::LeaveRequest, Payload::Leave { node: x });
            }
            EventKind::ConnectLink { a, b } => {
                self.remember_request("connect-link", a, e.id);
                self.send(node(a), Party::Scheduler, MessageKind::LinkJoinRequest, Payload::Link { a, b });
            }
            EventKind::DisconnectLink { a, b } => {
                self.remember_request("disconnect-link", a, e.id);
                self.send(node(a), Party::Scheduler, MessageKind::LinkLeaveRequest, Payload::Link { a, b });
            }
            EventKind::FailNode { node: x } => self.crash_node(e.id, x)?,
            EventKind::FailLink { a, b } => {
                self.link_failures.insert(ukey(a, b), (e.id, self.now));
                self.monitor.mark_link_failed(a, b);
                let outs = self.net.fail_link(a, b, self.now);
                for o in outs {
                    self.on_net(o)?;
                }
            }
            EventKind::RerandomizeBandwidth { min_mbps, max_mbps } => self.rerandomize(min_mbps, max_mbps),
        }
        Ok(())
    }

    fn rerandomize(&mut self, min_mbps: f64, max_mbps: f64) {
        use rand::Rng;
        let keys: BTreeSet<(NodeId, NodeId)> = self.net.link_keys().into_iter().map(|(a, b)| ukey(a, b)).collect();
        for (a, b) in keys {
            let old = self.net.metrics(a, b).unwrap();
            let mbps = if max_mbps > min_mbps {
                self.rng.random_range(min_mbps..=max_mbps)
            } else {
                min_mbps
            };
            let m = LinkMetrics {
                prop_delay: old.prop_delay,
                trans_delay_per_unit: crate::units::trans_delay_per_unit(mbps, self.cfg.unit_bytes),
            };
            self.net.set_metrics(a, b, m);
            self.net.set_metrics(b, a, m);
            self.monitor.set_truth(a, b, m);
            if self.topo().has_link(a, b) {
                self.monitor.topology_mut().add_link(a, b, m);
            }
        }
    }

    fn on_message(&mut self, msg: ControlMessage) -> Result<()> {
        match (msg.kind, &msg.payload) {
            (MessageKind::JoinRequest, Payload::Join { neighbors, .. }) => {
                let Party::Node(v) = msg.src else { unreachable!() };
                self.on_join_request(v, neighbors.clone())
            }
            (MessageKind::LeaveRequest, &Payload::Leave { node }) => self.on_leave_request(node),
            (MessageKind::LinkJoinRequest, &Payload::Link { a, b }) => self.on_connect_request(a, b),
            (MessageKind::LinkLeaveRequest, &Payload::Link { a, b }) => self.on_disconnect_request(a, b),
            (MessageKind::ConnectCmd, &Payload::Connect { peer }) => {
                let Party::Node(u) = msg.dst else { unreachable!() };
                self.on_connect_cmd(u, peer)
            }
            (MessageKind::DisconnectCmd, _) => {
                let Party::Node(u) = msg.dst else { unreachable!() };
                if self.alive.contains(&u) {
                    self.send(Party::Node(u), Party::Scheduler, MessageKind::Ack, Payload::Ack { of: MessageKind::DisconnectCmd });
                }
                Ok(())
            }
            (MessageKind::Ack, _) => Ok(()),
            (MessageKind::ReplicationPolicy, Payload::Replication { target, shards, .. }) => {
                let Party::Node(u) = msg.dst else { unreachable!() };
                if u != *target {
                    self.start_shard_sends(u, *target, shards.clone())?;
                }
                Ok(())
            }
            (MessageKind::SyncPolicyUpdate, &Payload::Sync { version, .. })
            | (MessageKind::RestartAllReduce, &Payload::Restart { version, .. }) => {
                let Party::Node(w) = msg.dst else { unreachable!() };
                let k = self.known_version.entry(w).or_default();
                *k = (*k).max(version);
                if self.iter.participants.contains(&w) {
                    self.try_exchange(w)?;
                }
                Ok(())
            }
            (kind, p) => Err(self.err(format!("malformed {kind} message: {p}"))),
        }
    }

    fn on_net(&mut self, o: NetOutcome) -> Result<()> {
        match o {
            NetOutcome::HopSent { id, from, .. } => {
                if let Some(x) = self.state_xfers.get_mut(&id) {
                    x.next_hop += 1;
                    let session = x.session;
                    self.dec_hop(from);
                    if let Some(so) = self.scaleouts.get_mut(&session) {
                        so.senders.insert(from, self.now);
                    }
                    if self.iter.participants.contains(&from) {
                        self.try_exchange(from)?;
                    }
                }
                Ok(())
            }
            NetOutcome::Delivered { id, .. } => {
                if let Some((a, b, epoch)) = self.allreduce.remove(&id) {
                    if epoch == self.iter.epoch {
                        self.on_pair_delivered(a, b)?;
                    }
                } else if let Some(x) = self.state_xfers.remove(&id) {
                    self.on_shard_delivered(x)?;
                }
                Ok(())
            }
            NetOutcome::Failed { id, link, .. } => {
                let link_down = !self.net.is_up(link.0, link.1);
                if let Some((_, _, epoch)) = self.allreduce.remove(&id) {
                    if link_down && epoch == self.iter.epoch {
                        self.report_link_failure(link.0, link.1);
                    }
                } else if let Some(x) = self.state_xfers.remove(&id) {
                    for i in x.next_hop..x.path.len() - 1 {
                        self.dec_hop(x.path[i]);
                    }
                    if link_down {
                        self.report_link_failure(link.0, link.1);
                    }
                    let ev = Ev::Reassign { session: x.session, shards: vec![x.shard] };
                    self.queue.push(self.now + self.c(), ev);
                    for n in [link.0, link.1] {
                        if self.iter.participants.contains(&n) {
                            self.try_exchange(n)?;
                        }
                    }
                }
                Ok(())
            }
        }
    }

    fn dec_hop(&mut self, n: NodeId) {
        if let Some(c) = self.out_hops.get_mut(&n) {
            *c = c.saturating_sub(1);
        }
    }

    /// The sender of a failed transfer tells the scheduler the link is gone.
    fn report_link_failure(&mut self, a: NodeId, b: NodeId) {
        if !self.reported_links.insert(ukey(a, b)) || !self.alive.contains(&a) {
            return;
        }
        self.monitor_log.push(MonitorEvent::LinkFailure { a, b, at: self.now });
        self.send(Party::Node(a), Party::Scheduler, MessageKind::LinkLeaveRequest, Payload::Link { a, b });
    }

    // ---- iterations -------------------------------------------------------

    fn start_iteration(&mut self) -> Result<()> {
        let participants = self.topo().active_nodes();
        if participants.is_empty() {
            return Err(self.err("no active nodes left"));
        }
        let k = self.iterations.len() as u64;
        let blocked: BTreeMap<NodeId, SessionId> = self
            .scaleouts
            .iter()
            .flat_map(|(&sid, so)| so.blocks_compute().into_iter().map(move |n| (n, sid)))
            .collect();
        self.iter = Iteration {
            k,
            start: self.now,
            epoch: self.iter.epoch + 1,
            version: self.policy.version,
            participants: participants.clone(),
            nodes: BTreeMap::new(),
            delivered: BTreeSet::new(),
            restarts: 0,
        };
        for &u in &participants {
            let mut ni = NodeIter::default();
            if let Some(&sid) = blocked.get(&u) {
                ni.blocked_on = Some(sid);
            } else {
                let begin = self.now.max(self.hold_until);
                self.queue.push(begin + self.profile.compute_of(u), Ev::ComputeDone { node: u, iter: k });
            }
            self.iter.nodes.insert(u, ni);
        }
        Ok(())
    }

    /// Lets a node blocked on `session` start computing now.
    fn unblock(&mut self, session: SessionId) {
        let k = self.iter.k;
        let now = self.now;
        let mut started = Vec::new();
        for (&u, ni) in self.iter.nodes.iter_mut() {
            if ni.blocked_on == Some(session) {
                ni.blocked_on = None;
                started.push(u);
            }
        }
        for u in started {
            self.queue.push(now + self.profile.compute_of(u), Ev::ComputeDone { node: u, iter: k });
        }
    }

    fn try_exchange(&mut self, u: NodeId) -> Result<()> {
        let now = self.now;
        let Some(ni) = self.iter.nodes.get_mut(&u) else { return Ok(()) };
        if ni.exchange_started.is_some() || ni.compute_done.is_none() || !self.alive.contains(&u) {
            return Ok(());
        }
        if self.out_hops.get(&u).copied().unwrap_or(0) > 0 {
            return Ok(());
        }
        let ready = *ni.ready_wo_version.get_or_insert(now);
        if self.known_version.get(&u).copied().unwrap_or(0) < self.iter.version {
            return Ok(());
        }
        ni.stall = ni.stall.max(now - ready);
        ni.exchange_started = Some(now);
        let peers: Vec<NodeId> = self
            .policy
            .peers(u)
            .iter()
            .copied()
            .filter(|p| self.iter.participants.contains(p))
            .collect();
        let mut pending = BTreeSet::new();
        for &p in &peers {
            for pair in [(u, p), (p, u)] {
                if !self.iter.delivered.contains(&pair) {
                    pending.insert(pair);
                }
            }
        }
        self.iter.nodes.get_mut(&u).unwrap().pending = pending;
        for &p in &peers {
            let req = TransferRequest::direct(u, p, self.profile.payload, TransferTag::AllReduceChunk);
            let id = self.net.submit(req, now)?;
            self.allreduce.insert(id, (u, p, self.iter.epoch));
        }
        self.on_exchange_started(u)?;
        self.check_node_done(u)
    }

    fn on_pair_delivered(&mut self, a: NodeId, b: NodeId) -> Result<()> {
        self.iter.delivered.insert((a, b));
        for n in [a, b] {
            if let Some(ni) = self.iter.nodes.get_mut(&n) {
                ni.pending.remove(&(a, b));
            }
            self.check_node_done(n)?;
        }
        Ok(())
    }

    fn check_node_done(&mut self, u: NodeId) -> Result<()> {
        let now = self.now;
        let Some(ni) = self.iter.nodes.get_mut(&u) else { return Ok(()) };
        if ni.exchange_started.is_some() && ni.done.is_none() && ni.pending.is_empty() {
            ni.done = Some(now);
            if self.iter.participants.iter().all(|p| self.iter.nodes[p].done.is_some()) {
                self.boundary()?;
            }
        }
        Ok(())
    }

    /// Discards this iteration's exchanges; nodes redo them once they hold
    /// policy `version`.
    fn restart_allreduce(&mut self) -> Result<()> {
        let stale: Vec<TransferId> = self
            .allreduce
            .iter()
            .filter(|(_, &(_, _, e))| e == self.iter.epoch)
            .map(|(&id, _)| id)
            .collect();
        self.iter.epoch += 1;
        for id in stale {
            self.allreduce.remove(&id);
            let outs = self.net.cancel(id, self.now);
            debug_assert!(outs.iter().all(|o| !matches!(o, NetOutcome::Delivered { .. })));
        }
        self.iter.delivered.clear();
        self.iter.restarts += 1;
        for ni in self.iter.nodes.values_mut() {
            ni.exchange_started = None;
            ni.pending.clear();
            ni.done = None;
        }
        Ok(())
    }

    /// Applies a policy change to the running iteration (failure commits).
    fn apply_policy_now(&mut self, restart: bool) -> Result<()> {
        self.iter.participants = self.topo().active_nodes();
        self.iter.nodes.retain(|n, _| self.iter.participants.contains(n));
        self.iter.version = self.policy.version;
        if restart {
            self.restart_allreduce()?;
        } else {
            // nodes that already finished keep their result; the others wait
            let parts: Vec<NodeId> = self.iter.participants.iter().copied().collect();
            for u in parts {
                self.check_node_done(u)?;
            }
        }
        Ok(())
    }

    fn boundary(&mut self) -> Result<()> {
        let b = self.now;
        for (&u, ni) in &self.iter.nodes {
            let done = ni.done.unwrap_or(b);
            *self.barrier_wait.entry(u).or_default() += b - done;
        }
        self.iterations.push(IterationRecord {
            index: self.iter.k,
            start: self.iter.start,
            boundary: b,
            policy_version: self.iter.version,
            participants: self.iter.participants.len(),
            restarts: self.iter.restarts,
        });
        self.finalize_watches();
        self.check_finished();
        if self.finished {
            return Ok(());
        }
        if self.iterations.len() as u64 > self.cfg.iterations + ITERATION_GUARD {
            return Err(self.err("iteration guard exceeded"));
        }
        self.commit_at_boundary()?;
        self.start_iteration()
    }

    fn finalize_watches(&mut self) {
        let version = self.iter.version;
        let stall_max = self.iter.nodes.values().map(|n| n.stall).fold(0.0, f64::max);
        let stalls: Vec<(NodeId, Time)> = self.iter.nodes.iter().map(|(&u, n)| (u, n.stall)).collect();
        let (ready, rest): (Vec<Watch>, Vec<Watch>) = self.watches.iter().partition(|w| w.version <= version);
        self.watches = rest;
        for w in ready {
            let r = &mut self.records[w.record];
            r.scale_out_delay = stall_max;
            for &(u, s) in &stalls {
                r.add_idle(u, s);
            }
        }
    }

    fn check_finished(&mut self) {
        self.finished = self.iterations.len() as u64 >= self.cfg.iterations
            && self.scenario_left == 0
            && self.watches.is_empty()
            && self.scaleouts.is_empty()
            && self.pending.is_empty()
            && self.undetected.is_empty()
            && self.requests.values().all(VecDeque::is_empty);
    }

    fn bump_policy(&mut self) {
        let active = self.topo().active_nodes();
        self.policy = SyncPolicy::from_topology(self.topo(), &active, self.policy.version + 1);
    }

    fn broadcast_policy(&mut self, restart: bool) {
        let version = self.policy.version;
        let targets: Vec<NodeId> = self.policy.schedule.keys().copied().collect();
        for &w in &targets {
            let peers = self.policy.peers(w).to_vec();
            self.send(Party::Scheduler, Party::Node(w), MessageKind::SyncPolicyUpdate, Payload::Sync { version, peers });
        }
        if restart {
            let iteration = self.iter.k;
            for &w in &targets {
                self.send(
                    Party::Scheduler,
                    Party::Node(w),
                    MessageKind::RestartAllReduce,
                    Payload::Restart { version, iteration },
                );
            }
        }
    }

    fn commit_at_boundary(&mut self) -> Result<()> {
        let ids: Vec<SessionId> = self
            .negotiator
            .sessions()
            .filter(|s| s.phase == crate::negotiator::Phase::AwaitingBoundary)
            .map(|s| s.id)
            .collect();
        if ids.is_empty() {
            return Ok(());
        }
        let mut rows = Vec::new();
        let mut changed = false;
        for id in ids {
            if let Some(row) = self.commit_session(id)? {
                changed = true;
                if let Some(r) = row {
                    rows.push(r);
                }
            }
        }
        if changed {
            self.broadcast_policy(false);
            let version = self.policy.version;
            for r in rows {
                self.records[r].policy_version = version;
                self.watches.push(Watch { record: r, version });
            }
            for so in self.scaleouts.values_mut() {
                if so.committed_at == Some(self.now) {
                    so.version = version;
                }
            }
        }
        Ok(())
    }

    /// Commits one session. `None` if nothing changed; `Some(row)` carries
    /// the record index still waiting for its visible delay.
    fn commit_session(&mut self, id: SessionId) -> Result<Option<Option<usize>>> {
        if self.scaleouts.contains_key(&id) {
            return self.commit_scaleout(id).map(|c| c.then_some(None));
        }
        self.commit_graceful(id)
    }

    fn on_heartbeat_tick(&mut self) -> Result<()> {
        self.tick_scheduled = false;
        let live: Vec<NodeId> = self
            .topo()
            .nodes
            .values()
            .filter(|n| n.state.is_live() && self.alive.contains(&n.id))
            .map(|n| n.id)
            .collect();
        for u in live {
            self.monitor.record_heartbeat(u, self.now);
        }
        let before: BTreeMap<NodeId, NodeState> =
            self.topo().nodes.values().map(|n| (n.id, n.state)).collect();
        let lost = self.monitor.check_liveness(self.now);
        self.drain_monitor();
        for x in lost {
            // restore the pre-check state; the failure session makes the change
            self.monitor.topology_mut().node_mut(x).unwrap().state = before[&x];
            self.on_node_failure_detected(x)?;
        }
        if !self.undetected.is_empty() {
            self.schedule_tick();
        }
        Ok(())
    }

    fn schedule_tick(&mut self) {
        if self.tick_scheduled {
            return;
        }
        let i = self.cfg.heartbeat.interval;
        let next = ((self.now / i).floor() + 1.0) * i;
        self.queue.push(next, Ev::HeartbeatTick);
        self.tick_scheduled = true;
    }
}
