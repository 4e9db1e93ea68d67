//! Scale-in, link changes and the failure variants.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{NodeId, NodeState};
use crate::monitor::ProbeResult;
use crate::negotiator::{Cause, MessageKind, NegotiationSession, Party, Payload, Phase, Primitive, SessionId, Subject};

use super::metrics::MetricsRecord;
use super::{ukey, Engine, Ev, Pending, Watch};

impl Engine {
    fn open_pending(&mut self, s: &NegotiationSession, event: Option<(u64, f64)>, label: &'static str) {
        let (event_id, t0) = event.unwrap_or((u64::MAX, self.now));
        self.pending.insert(
            s.id,
            Pending {
                event_id,
                t0,
                label,
                acks: BTreeSet::new(),
                measured: None,
            },
        );
    }

    pub(super) fn reject_pending(&mut self, sid: SessionId, reason: &str) {
        self.pending.remove(&sid);
        if let Some(mut s) = self.negotiator.session(sid).cloned() {
            if !s.phase.is_terminal() {
                s.phase = Phase::Rejected(reason.to_string());
                self.negotiator.update(&s);
            }
        }
        self.note(format!("session {sid} rejected: {reason}"));
    }

    pub(super) fn find_link_session(&self, u: NodeId, peer: NodeId) -> Option<SessionId> {
        let subject = Subject::Link(u.min(peer), u.max(peer));
        self.negotiator
            .sessions()
            .find(|s| s.subject == subject && s.primitive == Primitive::ConnectLink && !s.phase.is_terminal())
            .map(|s| s.id)
    }

    /// Starts a session that was just opened or released from the queue.
    fn begin_session(&mut self, mut s: NegotiationSession) -> Result<()> {
        match s.primitive {
            Primitive::ScaleOut => self.begin_scaleout(s.id),
            Primitive::ScaleIn | Primitive::DisconnectLink => {
                if let (Primitive::ScaleIn, Subject::Node(x)) = (s.primitive, s.subject) {
                    if let Some(info) = self.monitor.topology_mut().node_mut(x) {
                        info.state = NodeState::Leaving;
                    }
                }
                s.advance(Phase::AwaitingBoundary)?;
                self.negotiator.update(&s);
                Ok(())
            }
            Primitive::ConnectLink => {
                let Subject::Link(a, b) = s.subject else { unreachable!() };
                if let Some(p) = self.pending.get_mut(&s.id) {
                    p.acks = BTreeSet::from([a, b]);
                }
                self.send(Party::Scheduler, Party::Node(a), MessageKind::ConnectCmd, Payload::Connect { peer: b });
                self.send(Party::Scheduler, Party::Node(b), MessageKind::ConnectCmd, Payload::Connect { peer: a });
                Ok(())
            }
        }
    }

    pub(super) fn release_queued(&mut self) -> Result<()> {
        for s in self.negotiator.release_ready() {
            self.begin_session(s)?;
        }
        Ok(())
    }

    pub(super) fn on_leave_request(&mut self, x: NodeId) -> Result<()> {
        let req = self.take_request("scale-in", x);
        match self.negotiator.handle_leave(self.monitor.topology(), x, self.now) {
            Ok(s) => {
                self.open_pending(&s, req, "scale-in");
                if s.phase == Phase::Connecting {
                    self.begin_session(s)?;
                }
            }
            Err(e) => self.note(format!("leave of {x} rejected: {e}")),
        }
        Ok(())
    }

    pub(super) fn on_connect_request(&mut self, a: NodeId, b: NodeId) -> Result<()> {
        let req = self.take_request("connect-link", a);
        if self.net.metrics(a, b).is_none() {
            self.note(format!("connect-link {a}-{b} rejected: no physical link"));
            return Ok(());
        }
        match self.negotiator.handle_connect_link(self.monitor.topology(), a, b, self.now) {
            Ok(s) if s.noop => {
                self.send(Party::Scheduler, Party::Node(a), MessageKind::Ack, Payload::Ack { of: MessageKind::LinkJoinRequest });
                if let Some((event_id, t0)) = req {
                    let mut row = MetricsRecord::new(event_id, t0, "connect-link", self.cfg.strategy);
                    row.policy_version = self.policy.version;
                    self.records.push(row);
                }
            }
            Ok(s) => {
                self.open_pending(&s, req, "connect-link");
                if s.phase == Phase::Connecting {
                    self.begin_session(s)?;
                }
            }
            Err(e) => self.note(format!("connect-link {a}-{b} rejected: {e}")),
        }
        Ok(())
    }

    pub(super) fn begin_link_probe(&mut self, sid: SessionId) -> Result<()> {
        let mut s = self.negotiator.session(sid).unwrap().clone();
        let Subject::Link(a, b) = s.subject else { unreachable!() };
        s.advance(Phase::Measuring)?;
        self.negotiator.update(&s);
        let m = self.net.metrics(a, b).unwrap_or_default();
        let dur = 2.0 * (m.prop_delay + self.cfg.probe_size * m.trans_delay_per_unit) + self.cfg.probe_duration;
        self.queue.push(self.now + dur, Ev::ProbesDone { session: sid });
        Ok(())
    }

    pub(super) fn on_link_probe_done(&mut self, sid: SessionId) -> Result<()> {
        let Some(mut s) = self.negotiator.session(sid).cloned() else { return Ok(()) };
        if s.phase.is_terminal() {
            return Ok(());
        }
        let Subject::Link(a, b) = s.subject else { unreachable!() };
        match self.monitor.probe_link(a, b, self.now)? {
            ProbeResult::LinkFailure(..) => {
                // one end reports the dead link; the connect session ends here
                self.send(Party::Node(a), Party::Scheduler, MessageKind::LinkLeaveRequest, Payload::Link { a, b });
            }
            ProbeResult::Report(r) => {
                if let Some(p) = self.pending.get_mut(&sid) {
                    p.measured = Some(r.metrics());
                }
                self.monitor_log.push(crate::monitor::MonitorEvent::MeasurementReady { v_new: b, at: self.now });
                s.advance(Phase::AwaitingBoundary)?;
                self.negotiator.update(&s);
            }
        }
        Ok(())
    }

    pub(super) fn on_disconnect_request(&mut self, a: NodeId, b: NodeId) -> Result<()> {
        let failed = !self.net.is_up(a, b);
        if let Some(sid) = self.find_link_session(a, b) {
            if failed {
                // the link never came up: close both half-open sockets
                self.take_request("disconnect-link", a);
                self.reject_pending(sid, &format!("probe of {a}-{b} failed"));
                self.send(Party::Scheduler, Party::Node(a), MessageKind::DisconnectCmd, Payload::Disconnect { peer: b });
                self.send(Party::Scheduler, Party::Node(b), MessageKind::DisconnectCmd, Payload::Disconnect { peer: a });
                return self.release_queued();
            }
        }
        if failed {
            return self.commit_link_failure(a, b);
        }
        let req = self.take_request("disconnect-link", a);
        let in_flight = self.iter.in_flight();
        match self
            .negotiator
            .handle_disconnect_link(self.monitor.topology(), a, b, self.now, Cause::Graceful, in_flight)
        {
            Ok(s) => self.open_pending(&s, req, "disconnect-link"),
            Err(e) => self.note(format!("disconnect-link {a}-{b} rejected: {e}")),
        }
        Ok(())
    }

    /// Barrier commit of a scale-in or link change. Returns `None` if the
    /// session was rejected on re-validation.
    pub(super) fn commit_graceful(&mut self, sid: SessionId) -> Result<Option<Option<usize>>> {
        let Some(p) = self.pending.get(&sid).cloned() else { return Ok(None) };
        let mut s = self.negotiator.session(sid).unwrap().clone();
        let active = self.monitor.topology().active_nodes();
        let leaving: BTreeSet<NodeId> = self.monitor.topology().nodes_in_state(NodeState::Leaving);
        let members: BTreeSet<NodeId> = active.union(&leaving).copied().collect();
        match (s.primitive, s.subject) {
            (Primitive::ScaleIn, Subject::Node(x)) => {
                let mut rest = members.clone();
                rest.remove(&x);
                if !self.alive.contains(&x) || !members.contains(&x) {
                    self.reject_pending(sid, "node is no longer a member");
                    return Ok(None);
                }
                if rest.is_empty() {
                    if let Some(info) = self.monitor.topology_mut().node_mut(x) {
                        info.state = NodeState::Active;
                    }
                    self.reject_pending(sid, "cannot remove the last node");
                    return Ok(None);
                }
                if !self.monitor.topology().is_connected_within(&rest) {
                    if let Some(info) = self.monitor.topology_mut().node_mut(x) {
                        info.state = NodeState::Active;
                    }
                    self.reject_pending(sid, &Error::ClusterPartition(x, x).to_string());
                    return Ok(None);
                }
                let topo = self.monitor.topology_mut();
                let peers = topo.detach_node(x);
                topo.node_mut(x).unwrap().state = NodeState::Standby;
                for u in peers {
                    self.send(Party::Scheduler, Party::Node(u), MessageKind::DisconnectCmd, Payload::Disconnect { peer: x });
                }
            }
            (Primitive::ConnectLink, Subject::Link(a, b)) => {
                let ok = [a, b].iter().all(|n| active.contains(n) && self.alive.contains(n));
                if !ok {
                    self.reject_pending(sid, "endpoint left before commit");
                    return Ok(None);
                }
                let m = p.measured.or_else(|| self.monitor.truth(a, b)).unwrap_or_default();
                self.monitor.topology_mut().add_link(a, b, m);
            }
            (Primitive::DisconnectLink, Subject::Link(a, b)) => {
                let topo = self.monitor.topology();
                if !topo.has_link(a, b) {
                    self.reject_pending(sid, "link already gone");
                    return Ok(None);
                }
                if topo.removal_partitions(a, b, &active) {
                    self.reject_pending(sid, &Error::ClusterPartition(a, b).to_string());
                    return Ok(None);
                }
                self.send(Party::Scheduler, Party::Node(a), MessageKind::DisconnectCmd, Payload::Disconnect { peer: b });
                self.send(Party::Scheduler, Party::Node(b), MessageKind::DisconnectCmd, Payload::Disconnect { peer: a });
                self.monitor.topology_mut().remove_link(a, b);
            }
            _ => return Err(self.err(format!("session {sid} has no barrier commit"))),
        }
        self.pending.remove(&sid);
        self.bump_policy();
        s.advance(Phase::Committed)?;
        s.barrier = Some(self.iter.k);
        self.negotiator.update(&s);
        self.release_queued()?;
        let row = MetricsRecord::new(p.event_id, p.t0, p.label, self.cfg.strategy);
        self.records.push(row);
        Ok(Some(Some(self.records.len() - 1)))
    }

    /// Ground-truth crash. Detection comes later through missed heartbeats.
    pub(super) fn crash_node(&mut self, event_id: u64, x: NodeId) -> Result<()> {
        if !self.alive.remove(&x) {
            return Ok(());
        }
        let i = self.cfg.heartbeat.interval;
        let last_beat = (self.now / i).floor() * i;
        let live: Vec<NodeId> = self
            .monitor
            .topology()
            .nodes
            .values()
            .filter(|n| n.state.is_live())
            .map(|n| n.id)
            .collect();
        for u in live {
            self.monitor.record_heartbeat(u, last_beat);
        }
        let is_member = self.monitor.topology().node(x).is_some_and(|n| n.state.is_live());
        if is_member {
            self.undetected.insert(x, (event_id, self.now));
            self.schedule_tick();
        }
        let outs = self.net.kill_node(x, self.now);
        for o in outs {
            self.on_net(o)?;
        }
        Ok(())
    }

    pub(super) fn on_node_failure_detected(&mut self, x: NodeId) -> Result<()> {
        let (event_id, t_fail) = self.undetected.remove(&x).unwrap_or((u64::MAX, self.now));
        let in_flight = self.iter.in_flight();
        let Some(mut s) = self.negotiator.handle_node_failure(self.monitor.topology(), x, self.now, in_flight) else {
            return Ok(());
        };
        let sessions: Vec<SessionId> = self.scaleouts.iter().filter(|(_, so)| so.v == x).map(|(&id, _)| id).collect();
        for sid in sessions {
            self.abort_scaleout(sid, "new node failed")?;
        }
        let touching: Vec<SessionId> = self
            .scaleouts
            .iter()
            .filter(|(_, so)| so.neighbors.contains(&x) && so.committed_at.is_none())
            .map(|(&id, _)| id)
            .collect();
        for sid in touching {
            self.drop_neighbor(sid, x)?;
        }
        let stale: Vec<SessionId> = self
            .pending
            .keys()
            .copied()
            .filter(|id| {
                self.negotiator
                    .session(*id)
                    .is_some_and(|s| matches!(s.subject, Subject::Node(n) if n == x) || matches!(s.subject, Subject::Link(a, b) if a == x || b == x))
            })
            .collect();
        for sid in stale {
            self.reject_pending(sid, "subject failed");
        }
        let topo = self.monitor.topology_mut();
        let peers = topo.detach_node(x);
        topo.node_mut(x).unwrap().state = NodeState::Failed;
        let active = self.monitor.topology().active_nodes();
        if active.is_empty() {
            return Err(self.err("every node has failed"));
        }
        if !self.monitor.topology().is_connected_within(&active) {
            return Err(self.err(format!("failure of node {x} partitions the cluster")));
        }
        for u in peers {
            if self.alive.contains(&u) {
                self.send(Party::Scheduler, Party::Node(u), MessageKind::DisconnectCmd, Payload::Disconnect { peer: x });
            }
        }
        s.barrier = Some(self.iter.k);
        self.negotiator.update(&s);
        self.commit_immediate(event_id, t_fail, "fail-node", in_flight)
    }

    fn commit_link_failure(&mut self, a: NodeId, b: NodeId) -> Result<()> {
        let key = ukey(a, b);
        let (event_id, t_fail) = self.link_failures.get(&key).copied().unwrap_or((u64::MAX, self.now));
        if !self.monitor.topology().has_link(a, b) {
            return Ok(());
        }
        let in_flight = self.iter.in_flight();
        match self.negotiator.handle_disconnect_link(self.monitor.topology(), a, b, self.now, Cause::Failure, in_flight) {
            Ok(_) => {}
            Err(e @ Error::ClusterPartition(..)) => return Err(self.err(format!("link failure: {e}"))),
            Err(e) => return Err(self.err(e.to_string())),
        }
        self.monitor.topology_mut().remove_link(a, b);
        self.commit_immediate(event_id, t_fail, "fail-link", in_flight)
    }

    /// Failure commits take effect in the running iteration.
    fn commit_immediate(&mut self, event_id: u64, t_fail: f64, label: &str, restart: bool) -> Result<()> {
        self.bump_policy();
        self.broadcast_policy(restart);
        self.apply_policy_now(restart)?;
        let mut row = MetricsRecord::new(event_id, t_fail, label, self.cfg.strategy);
        let version = self.policy.version;
        row.policy_version = version;
        self.records.push(row);
        self.watches.push(Watch { record: self.records.len() - 1, version });
        Ok(())
    }
}
