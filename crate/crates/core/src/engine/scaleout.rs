//! Scale-out sessions under the four replication strategies.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::Result;
use crate::model::{split_state, NodeId, NodeState, ShardSet, Time};
use crate::negotiator::{MessageKind, Party, Payload, Phase, SessionId};
use crate::network::{shortest_path, TransferRequest, TransferTag};
use crate::scheduler::{
    binary_search_assign, greedy_assign, greedy_sweep, single_source_makespan, GreedyLoadTable, NeighborLink,
    SchedulerInput,
};

use super::metrics::MetricsRecord;
use super::{Engine, Ev, StateXfer, Strategy};

#[derive(Debug, Clone)]
pub(super) struct ScaleOut {
    pub event_id: u64,
    pub v: NodeId,
    pub t0: Time,
    pub neighbors: BTreeSet<NodeId>,
    pub acks: BTreeSet<NodeId>,
    pub input: Option<SchedulerInput>,
    pub shard_size: u64,
    pub planned: BTreeMap<NodeId, Vec<usize>>,
    pub single: Option<NodeId>,
    pub shards: Option<ShardSet>,
    pub committed_at: Option<Time>,
    pub delivered: BTreeSet<usize>,
    pub ready: Option<Time>,
    /// Last time each node finished sending a hop of this session's state.
    pub senders: BTreeMap<NodeId, Time>,
    pub resume: Option<Time>,
    pub version: u64,
    pub barrier: bool,
    /// Participants of the first iteration after the commit.
    pub cohort: BTreeSet<NodeId>,
}

impl ScaleOut {
    /// Nodes whose next compute must wait for this session, and whether
    /// that is every participant.
    pub fn blocks_compute(&self) -> Vec<NodeId> {
        if self.committed_at.is_none() || self.ready.is_some() || self.resume.is_some() {
            return Vec::new();
        }
        if self.barrier {
            self.cohort.iter().copied().collect()
        } else {
            vec![self.v]
        }
    }
}

impl Engine {
    pub(super) fn on_join_request(&mut self, v: NodeId, neighbors: Vec<NodeId>) -> Result<()> {
        let (event_id, t0) = self.take_request("scale-out", v).unwrap_or((u64::MAX, self.now));
        let mut s = self.negotiator.handle_join(self.monitor.topology(), v, &neighbors, self.now);
        s.neighbors.retain(|&u| self.net.metrics(u, v).is_some());
        if let Phase::Rejected(reason) = &s.phase {
            let msg = format!("join of {v} rejected: {reason}");
            self.note(msg);
            return Ok(());
        }
        if s.neighbors.is_empty() || !self.alive.contains(&v) {
            s.advance(Phase::Rejected("no usable neighbor link".into()))?;
            self.negotiator.update(&s);
            self.note(format!("join of {v} rejected: no usable neighbor link"));
            return Ok(());
        }
        let now = self.now;
        let topo = self.monitor.topology_mut();
        if topo.node(v).is_none() {
            topo.add_node(crate::model::NodeInfo::new(v, NodeState::Standby, now));
        }
        let info = topo.node_mut(v).unwrap();
        info.state = NodeState::Joining;
        info.last_heartbeat = now;
        self.known_version.insert(v, 0);
        let so = ScaleOut {
            event_id,
            v,
            t0,
            neighbors: s.neighbors.clone(),
            acks: BTreeSet::new(),
            input: None,
            shard_size: 0,
            planned: BTreeMap::new(),
            single: None,
            shards: None,
            committed_at: None,
            delivered: BTreeSet::new(),
            ready: None,
            senders: BTreeMap::new(),
            resume: None,
            version: 0,
            barrier: false,
            cohort: BTreeSet::new(),
        };
        self.scaleouts.insert(s.id, so);
        self.negotiator.update(&s);
        if s.phase == Phase::Connecting {
            self.begin_scaleout(s.id)?;
        }
        Ok(())
    }

    pub(super) fn begin_scaleout(&mut self, sid: SessionId) -> Result<()> {
        let mut s = self.negotiator.session(sid).unwrap().clone();
        if self.cfg.strategy == Strategy::StopResume {
            s.advance(Phase::AwaitingBoundary)?;
            self.negotiator.update(&s);
            return Ok(());
        }
        let so = self.scaleouts.get_mut(&sid).unwrap();
        so.acks = so.neighbors.clone();
        let (v, targets) = (so.v, so.neighbors.clone());
        for u in targets {
            self.send(Party::Scheduler, Party::Node(u), MessageKind::ConnectCmd, Payload::Connect { peer: v });
        }
        Ok(())
    }

    /// A neighbor can no longer take part in the scale-out.
    pub(super) fn drop_neighbor(&mut self, sid: SessionId, u: NodeId) -> Result<()> {
        let Some(so) = self.scaleouts.get_mut(&sid) else { return Ok(()) };
        so.neighbors.remove(&u);
        let was_waiting = so.acks.remove(&u);
        if so.neighbors.is_empty() && so.committed_at.is_none() {
            return self.abort_scaleout(sid, "every neighbor became unreachable");
        }
        if was_waiting && so.acks.is_empty() {
            self.begin_probes(sid)?;
        }
        Ok(())
    }

    pub(super) fn on_connect_cmd(&mut self, u: NodeId, peer: NodeId) -> Result<()> {
        let sid = self
            .scaleouts
            .iter()
            .find(|(_, so)| so.v == peer && so.acks.contains(&u))
            .map(|(&id, _)| id)
            .or_else(|| self.find_link_session(u, peer));
        let Some(sid) = sid else { return Ok(()) };
        if !self.alive.contains(&u) {
            // no ack ever comes back; the scheduler gives up on it
            return if self.scaleouts.contains_key(&sid) {
                self.drop_neighbor(sid, u)
            } else {
                self.reject_pending(sid, &format!("endpoint {u} unreachable"));
                Ok(())
            };
        }
        let prop = self.net.metrics(u, peer).map_or(0.0, |m| m.prop_delay);
        self.queue.push(self.now + 2.0 * prop, Ev::SocketUp { session: sid, node: u, peer });
        Ok(())
    }

    pub(super) fn on_socket_up(&mut self, sid: SessionId, u: NodeId, _peer: NodeId) -> Result<()> {
        if !self.alive.contains(&u) {
            if self.scaleouts.contains_key(&sid) {
                return self.drop_neighbor(sid, u);
            }
            return Ok(());
        }
        let idx = self.send(Party::Node(u), Party::Scheduler, MessageKind::Ack, Payload::Ack { of: MessageKind::ConnectCmd });
        self.ack_routes.insert(idx, sid);
        Ok(())
    }

    pub(super) fn on_connect_ack(&mut self, sid: SessionId, u: NodeId) -> Result<()> {
        if let Some(so) = self.scaleouts.get_mut(&sid) {
            if so.acks.remove(&u) && so.acks.is_empty() {
                self.begin_probes(sid)?;
            }
            return Ok(());
        }
        if let Some(p) = self.pending.get_mut(&sid) {
            if p.acks.remove(&u) && p.acks.is_empty() {
                self.begin_link_probe(sid)?;
            }
        }
        Ok(())
    }

    fn probe_time(&self, a: NodeId, b: NodeId) -> Time {
        let m = self.net.metrics(a, b).unwrap_or_default();
        2.0 * (m.prop_delay + self.cfg.probe_size * m.trans_delay_per_unit) + self.cfg.probe_duration
    }

    fn begin_probes(&mut self, sid: SessionId) -> Result<()> {
        let so = &self.scaleouts[&sid];
        let v = so.v;
        let dur = so.neighbors.iter().map(|&u| self.probe_time(u, v)).fold(0.0, f64::max);
        let mut s = self.negotiator.session(sid).unwrap().clone();
        s.advance(Phase::Measuring)?;
        self.negotiator.update(&s);
        self.queue.push(self.now + dur, Ev::ProbesDone { session: sid });
        Ok(())
    }

    pub(super) fn on_probes_done(&mut self, sid: SessionId) -> Result<()> {
        if !self.scaleouts.contains_key(&sid) {
            return self.on_link_probe_done(sid);
        }
        let v = self.scaleouts[&sid].v;
        let input = loop {
            let neighbors = self.scaleouts[&sid].neighbors.clone();
            if neighbors.is_empty() {
                return self.abort_scaleout(sid, "every neighbor link failed its probe");
            }
            let sync: BTreeMap<NodeId, Time> = neighbors
                .iter()
                .map(|&u| (u, (self.net.backlog_until(u, v) - self.now).max(0.0)))
                .collect();
            match self.monitor.measure_for_scaleout(v, &neighbors, &sync, &self.state, self.now)? {
                Ok(input) => break input,
                Err((a, b)) => {
                    let u = if a == v { b } else { a };
                    self.note(format!("probe of link {a}-{b} failed; dropping neighbor {u}"));
                    self.scaleouts.get_mut(&sid).unwrap().neighbors.remove(&u);
                }
            }
        };
        let mut s = self.negotiator.session(sid).unwrap().clone();
        s.advance(Phase::Solving)?;
        let so = self.scaleouts.get_mut(&sid).unwrap();
        match self.cfg.strategy {
            Strategy::MultiNeighbor => {
                let out = binary_search_assign(&input)?;
                so.shard_size = out.plan.shard_size;
                so.planned = out.plan.assignment;
            }
            Strategy::SingleSource => {
                let best = input
                    .neighbors
                    .iter()
                    .min_by(|x, y| {
                        single_source_makespan(x, &input.state)
                            .total_cmp(&single_source_makespan(y, &input.state))
                            .then(x.id.cmp(&y.id))
                    })
                    .unwrap();
                so.single = Some(best.id);
            }
            Strategy::MultiSource | Strategy::StopResume => {}
        }
        so.input = Some(input);
        s.advance(Phase::AwaitingBoundary)?;
        self.negotiator.update(&s);
        Ok(())
    }

    pub(super) fn abort_scaleout(&mut self, sid: SessionId, reason: &str) -> Result<()> {
        let Some(so) = self.scaleouts.remove(&sid) else { return Ok(()) };
        self.note(format!("scale-out of {} aborted: {reason}", so.v));
        if let Some(mut s) = self.negotiator.session(sid).cloned() {
            if !s.phase.is_terminal() {
                s.advance(Phase::Rejected(reason.to_string()))?;
                self.negotiator.update(&s);
            }
        }
        if so.committed_at.is_none() && self.alive.contains(&so.v) {
            if let Some(info) = self.monitor.topology_mut().node_mut(so.v) {
                info.state = NodeState::Standby;
            }
        }
        self.unblock(sid);
        self.release_queued()
    }

    /// Barrier commit: adds the node and its links, picks the sources and
    /// sends the replication policy. Returns false if the session died.
    pub(super) fn commit_scaleout(&mut self, sid: SessionId) -> Result<bool> {
        let so = self.scaleouts[&sid].clone();
        let v = so.v;
        if !self.alive.contains(&v) {
            self.abort_scaleout(sid, "new node is gone")?;
            return Ok(false);
        }
        let usable: BTreeSet<NodeId> = so
            .neighbors
            .iter()
            .copied()
            .filter(|&u| {
                self.alive.contains(&u)
                    && self.monitor.topology().node(u).is_some_and(|i| i.state == NodeState::Active)
                    && self.net.is_up(u, v)
            })
            .collect();
        if usable.is_empty() {
            self.abort_scaleout(sid, "no neighbor left at commit")?;
            return Ok(false);
        }
        let b = self.now;
        let cohort_before = self.monitor.topology().active_nodes();
        {
            let measured: BTreeMap<NodeId, _> = so
                .input
                .as_ref()
                .map(|i| i.neighbors.iter().map(|n| (n.id, n.metrics)).collect())
                .unwrap_or_default();
            let truth: Vec<_> = usable.iter().map(|&u| (u, self.monitor.truth(u, v).unwrap())).collect();
            let topo = self.monitor.topology_mut();
            let info = topo.node_mut(v).unwrap();
            info.state = NodeState::Active;
            info.join_time = b;
            for (u, t) in truth {
                topo.add_link(u, v, measured.get(&u).copied().unwrap_or(t));
            }
        }
        self.bump_policy();
        let total = self.state.total_size();
        let (shards, assignment): (ShardSet, BTreeMap<NodeId, Vec<usize>>) = match self.cfg.strategy {
            Strategy::MultiNeighbor => {
                let shards = split_state(&self.state, so.shard_size)?;
                let assignment = if so.planned.keys().all(|u| usable.contains(u)) {
                    so.planned.clone()
                } else {
                    let input = self.survivor_input(v, &usable)?;
                    greedy_assign(&shards, &input)?.assignment
                };
                (shards, assignment)
            }
            Strategy::SingleSource => {
                let src = match so.single.filter(|u| usable.contains(u)) {
                    Some(u) => u,
                    None => {
                        let input = self.survivor_input(v, &usable)?;
                        input
                            .neighbors
                            .iter()
                            .min_by(|x, y| {
                                single_source_makespan(x, &input.state).total_cmp(&single_source_makespan(y, &input.state))
                            })
                            .unwrap()
                            .id
                    }
                };
                (split_state(&self.state, total)?, BTreeMap::from([(src, vec![0])]))
            }
            Strategy::MultiSource => {
                let sources: Vec<NodeId> = cohort_before.iter().copied().filter(|&u| self.alive.contains(&u)).collect();
                let s = total.div_ceil(sources.len() as u64).max(1);
                let shards = split_state(&self.state, s)?;
                let mut assignment: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
                for sh in &shards.shards {
                    assignment.entry(sources[sh.index]).or_default().push(sh.index);
                }
                (shards, assignment)
            }
            Strategy::StopResume => {
                let w = total as f64;
                let resume = b + w / self.profile.checkpoint_write + self.cfg.restart_cost + w / self.profile.checkpoint_read;
                self.hold_until = self.hold_until.max(resume);
                self.queue.push(resume, Ev::Resume { session: sid });
                let so = self.scaleouts.get_mut(&sid).unwrap();
                so.committed_at = Some(b);
                so.resume = Some(resume);
                so.cohort = self.monitor.topology().active_nodes();
                let mut s = self.negotiator.session(sid).unwrap().clone();
                s.advance(Phase::Replicating)?;
                self.negotiator.update(&s);
                return Ok(true);
            }
        };
        let version = self.policy.version;
        let all: Vec<usize> = (0..shards.count()).collect();
        self.send(
            Party::Scheduler,
            Party::Node(v),
            MessageKind::ReplicationPolicy,
            Payload::Replication { version, target: v, shard_size: shards.shard_size, shards: all },
        );
        let mut recipients: BTreeSet<NodeId> = assignment.keys().copied().collect();
        if self.cfg.strategy == Strategy::MultiNeighbor {
            recipients.extend(usable.iter().copied());
        }
        for u in recipients {
            let list = assignment.get(&u).cloned().unwrap_or_default();
            self.send(
                Party::Scheduler,
                Party::Node(u),
                MessageKind::ReplicationPolicy,
                Payload::Replication { version, target: v, shard_size: shards.shard_size, shards: list },
            );
        }
        let barrier = self.cfg.strategy == Strategy::SingleSource && self.cfg.single_source_barrier;
        let cohort = self.monitor.topology().active_nodes();
        let so = self.scaleouts.get_mut(&sid).unwrap();
        so.neighbors = usable;
        so.shards = Some(shards);
        so.planned = assignment;
        so.committed_at = Some(b);
        so.barrier = barrier;
        so.cohort = cohort;
        let mut s = self.negotiator.session(sid).unwrap().clone();
        s.advance(Phase::Replicating)?;
        s.barrier = Some(self.iter.k);
        self.negotiator.update(&s);
        Ok(true)
    }

    /// Scheduler input over `nodes` using the links now in the overlay.
    fn survivor_input(&self, v: NodeId, nodes: &BTreeSet<NodeId>) -> Result<SchedulerInput> {
        let links = nodes
            .iter()
            .map(|&u| {
                let m = self
                    .monitor
                    .topology()
                    .link(u, v)
                    .copied()
                    .or_else(|| self.monitor.truth(u, v))
                    .unwrap_or_default();
                let sync = (self.net.backlog_until(u, v) - self.now).max(0.0);
                NeighborLink::new(u, m.prop_delay, m.trans_delay_per_unit, sync)
            })
            .collect::<Result<Vec<_>>>()?;
        SchedulerInput::new(v, links, self.state.clone())
    }

    /// A source received its replication policy: queue its shards.
    pub(super) fn start_shard_sends(&mut self, u: NodeId, v: NodeId, list: Vec<usize>) -> Result<()> {
        let Some((&sid, so)) = self.scaleouts.iter().find(|(_, so)| so.v == v && so.committed_at.is_some()) else {
            return Ok(());
        };
        if list.is_empty() {
            return Ok(());
        }
        let shards = so.shards.clone().unwrap();
        let pending: Vec<usize> = list.into_iter().filter(|i| !so.delivered.contains(i)).collect();
        if !self.alive.contains(&u) {
            self.queue.push(self.now, Ev::Reassign { session: sid, shards: pending });
            return Ok(());
        }
        for i in pending {
            let size = shards.shards[i].size as f64;
            let path = if self.cfg.strategy == Strategy::MultiSource {
                match shortest_path(self.monitor.topology(), u, v, size) {
                    Ok((p, _)) => p,
                    Err(_) => vec![u, v],
                }
            } else {
                vec![u, v]
            };
            let req = TransferRequest::routed(path.clone(), size, TransferTag::StateShard);
            let id = match self.net.submit(req, self.now) {
                Ok(id) => id,
                Err(_) => {
                    self.queue.push(self.now, Ev::Reassign { session: sid, shards: vec![i] });
                    continue;
                }
            };
            for &hop in &path[..path.len() - 1] {
                *self.out_hops.entry(hop).or_default() += 1;
            }
            self.state_xfers.insert(id, StateXfer { session: sid, path, shard: i, next_hop: 0 });
        }
        Ok(())
    }

    pub(super) fn on_shard_delivered(&mut self, x: StateXfer) -> Result<()> {
        let now = self.now;
        let Some(so) = self.scaleouts.get_mut(&x.session) else { return Ok(()) };
        so.delivered.insert(x.shard);
        if so.ready.is_none() && so.delivered.len() == so.shards.as_ref().map_or(0, ShardSet::count) {
            so.ready = Some(now);
            self.unblock(x.session);
        }
        Ok(())
    }

    /// Re-plans undelivered shards of a lost transfer over the surviving
    /// direct neighbors, taking their current backlog into account.
    pub(super) fn on_reassign(&mut self, sid: SessionId, lost: Vec<usize>) -> Result<()> {
        let Some(so) = self.scaleouts.get(&sid) else { return Ok(()) };
        let v = so.v;
        if !self.alive.contains(&v) {
            return Ok(());
        }
        let lost: Vec<usize> = lost.into_iter().filter(|i| !so.delivered.contains(i)).collect();
        if lost.is_empty() {
            return Ok(());
        }
        let shards = so.shards.clone().unwrap();
        let survivors: BTreeSet<NodeId> = self
            .monitor
            .topology()
            .neighbors(v)
            .into_iter()
            .filter(|&u| self.alive.contains(&u) && self.net.is_up(u, v))
            .collect();
        if survivors.is_empty() {
            return Err(self.err(format!("no surviving replication source for node {v}")));
        }
        let input = self.survivor_input(v, &survivors)?;
        let items: Vec<(usize, u64)> = lost.iter().map(|&i| (i, shards.shards[i].size)).collect();
        let mut table = GreedyLoadTable::new(&input.neighbors);
        let slots = greedy_sweep(&items, &input.neighbors, &mut table);
        let mut by_source: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (&(i, _), slot) in items.iter().zip(slots) {
            by_source.entry(input.neighbors[slot].id).or_default().push(i);
        }
        let version = self.scaleouts[&sid].version.max(self.policy.version);
        for (u, list) in by_source {
            self.send(
                Party::Scheduler,
                Party::Node(u),
                MessageKind::ReplicationPolicy,
                Payload::Replication { version, target: v, shard_size: shards.shard_size, shards: list },
            );
        }
        Ok(())
    }

    pub(super) fn on_resume(&mut self, sid: SessionId) -> Result<()> {
        if let Some(so) = self.scaleouts.get_mut(&sid) {
            so.ready = so.resume;
        }
        Ok(())
    }

    /// Closes the scale-out row once the new node starts its first exchange.
    pub(super) fn on_exchange_started(&mut self, u: NodeId) -> Result<()> {
        let Some((&sid, _)) = self
            .scaleouts
            .iter()
            .find(|(_, so)| so.v == u && so.ready.is_some() && so.committed_at.is_some())
        else {
            return Ok(());
        };
        let so = self.scaleouts.remove(&sid).unwrap();
        let x = self.now;
        let b = so.committed_at.unwrap();
        let c = self.c();
        let r = so.ready.unwrap();
        let mut row = MetricsRecord::new(so.event_id, so.t0, "scale-out", self.cfg.strategy);
        row.scale_out_delay = x - so.t0;
        row.policy_version = so.version;
        row.subject = Some(so.v);
        row.sources = so.senders.keys().copied().filter(|&n| n != so.v).collect();
        if self.cfg.strategy == Strategy::StopResume {
            row.replication_delay = r - b;
            for &n in &so.cohort {
                row.add_idle(n, r - b);
            }
        } else {
            let start = b + c;
            row.replication_delay = (r - start).max(0.0);
            if so.barrier {
                for &n in &so.cohort {
                    row.add_idle(n, r - b);
                }
            } else {
                let busy = row
                    .sources
                    .iter()
                    .map(|&n| self.profile.compute_of(n))
                    .fold(0.0, f64::max);
                row.hidden_delay = ((r.min(b + busy) - start).max(0.0)).min(row.replication_delay);
                row.add_idle(so.v, r - b);
                for (&n, &sent) in &so.senders {
                    if n != so.v {
                        row.add_idle(n, sent - (b + self.profile.compute_of(n)));
                    }
                }
            }
        }
        self.records.push(row);
        if let Some(mut s) = self.negotiator.session(sid).cloned() {
            s.advance(Phase::Committed)?;
            self.negotiator.update(&s);
        }
        self.release_queued()
    }
}
