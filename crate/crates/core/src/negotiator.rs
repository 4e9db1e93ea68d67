//! Control messages and the session state machines of the four scaling
//! primitives. Timing lives in the engine; this module validates requests,
//! tracks phases and produces the messages that go on the trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{NodeId, NodeState, OverlayTopology, Time};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Party {
    Scheduler,
    Node(NodeId),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Scheduler => f.write_str("S"),
            Party::Node(n) => write!(f, "n{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    JoinRequest,
    LeaveRequest,
    LinkJoinRequest,
    LinkLeaveRequest,
    ConnectCmd,
    DisconnectCmd,
    ReplicationPolicy,
    SyncPolicyUpdate,
    RestartAllReduce,
    Ack,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Join {
        endpoint: String,
        neighbors: Vec<NodeId>,
    },
    Leave {
        node: NodeId,
    },
    Link {
        a: NodeId,
        b: NodeId,
    },
    Connect {
        peer: NodeId,
    },
    Disconnect {
        peer: NodeId,
    },
    Replication {
        version: u64,
        target: NodeId,
        shard_size: u64,
        shards: Vec<usize>,
    },
    Sync {
        version: u64,
        peers: Vec<NodeId>,
    },
    Restart {
        version: u64,
        iteration: u64,
    },
    Ack {
        of: MessageKind,
    },
}

fn ids(v: &[NodeId]) -> String {
    v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Join { endpoint, neighbors } => {
                write!(f, "endpoint={endpoint} neighbors=[{}]", ids(neighbors))
            }
            Payload::Leave { node } => write!(f, "node={node}"),
            Payload::Link { a, b } => write!(f, "link={a}-{b}"),
            Payload::Connect { peer } | Payload::Disconnect { peer } => write!(f, "peer={peer}"),
            Payload::Replication { version, target, shard_size, shards } => {
                let list = shards.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
                write!(f, "v={version} target={target} s={shard_size} shards=[{list}]")
            }
            Payload::Sync { version, peers } => write!(f, "v={version} peers=[{}]", ids(peers)),
            Payload::Restart { version, iteration } => write!(f, "v={version} iter={iteration}"),
            Payload::Ack { of } => write!(f, "of={of}"),
        }
    }
}

impl Payload {
    /// Policy version carried by the payload, if any.
    pub fn version(&self) -> Option<u64> {
        match self {
            Payload::Replication { version, .. }
            | Payload::Sync { version, .. }
            | Payload::Restart { version, .. } => Some(*version),
            _ => None,
        }
    }

    /// First 8 hex digits of the SHA-256 of the rendered payload.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_string().as_bytes());
        hex::encode(&h[..4])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlMessage {
    pub at: Time,
    pub src: Party,
    pub dst: Party,
    pub kind: MessageKind,
    pub payload: Payload,
}

impl ControlMessage {
    pub fn new(at: Time, src: Party, dst: Party, kind: MessageKind, payload: Payload) -> Self {
        Self { at, src, dst, kind, payload }
    }

    pub fn trace_line(&self) -> String {
        format!(
            "{:.3} {} -> {} {} {} #{}",
            self.at,
            self.src,
            self.dst,
            self.kind,
            self.payload,
            self.payload.digest()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Primitive {
    ScaleOut,
    ScaleIn,
    ConnectLink,
    DisconnectLink,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Primitive::ScaleOut => "scale-out",
            Primitive::ScaleIn => "scale-in",
            Primitive::ConnectLink => "connect-link",
            Primitive::DisconnectLink => "disconnect-link",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cause {
    Graceful,
    Failure,
}

/// Phases in the order every session walks them; some primitives skip a few.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Queued,
    Connecting,
    Measuring,
    Solving,
    AwaitingBoundary,
    Replicating,
    Committed,
    Rejected(String),
}

impl Phase {
    fn rank(&self) -> u8 {
        match self {
            Phase::Queued => 0,
            Phase::Connecting => 1,
            Phase::Measuring => 2,
            Phase::Solving => 3,
            Phase::AwaitingBoundary => 4,
            Phase::Replicating => 5,
            Phase::Committed | Phase::Rejected(_) => 6,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.rank() == 6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Subject {
    Node(NodeId),
    Link(NodeId, NodeId),
}

impl Subject {
    fn touches(&self, n: NodeId) -> bool {
        match *self {
            Subject::Node(x) => x == n,
            Subject::Link(a, b) => a == n || b == n,
        }
    }
}

pub type SessionId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct NegotiationSession {
    pub id: SessionId,
    pub primitive: Primitive,
    pub cause: Cause,
    pub phase: Phase,
    pub subject: Subject,
    pub started_at: Time,
    /// Iteration whose all-reduce boundary gates the commit.
    pub barrier: Option<u64>,
    /// Intended neighbors (scale-out) after dropping unreachable ones.
    pub neighbors: BTreeSet<NodeId>,
    /// Set when a failure interrupts an in-flight all-reduce.
    pub restart_allreduce: bool,
    /// Duplicate connect-link requests are acknowledged without change.
    pub noop: bool,
}

impl NegotiationSession {
    fn new(id: SessionId, primitive: Primitive, cause: Cause, subject: Subject, now: Time) -> Self {
        Self {
            id,
            primitive,
            cause,
            phase: Phase::Connecting,
            subject,
            started_at: now,
            barrier: None,
            neighbors: BTreeSet::new(),
            restart_allreduce: false,
            noop: false,
        }
    }

    /// Moves to `next`; phases never go backwards.
    pub fn advance(&mut self, next: Phase) -> Result<()> {
        if next.rank() < self.phase.rank() || self.phase.is_terminal() {
            return Err(Error::Engine {
                time: self.started_at,
                msg: format!("session {} cannot move from {:?} to {:?}", self.id, self.phase, next),
            });
        }
        self.phase = next;
        Ok(())
    }

    pub fn is_graceful(&self) -> bool {
        self.cause == Cause::Graceful
    }
}

/// Session bookkeeping: request validation, per-subject serialization and
/// FIFO queuing of requests on busy nodes.
#[derive(Debug, Default)]
pub struct Negotiator {
    sessions: BTreeMap<SessionId, NegotiationSession>,
    queued: VecDeque<SessionId>,
    next_id: SessionId,
}

fn require_active(topo: &OverlayTopology, n: NodeId) -> Result<()> {
    match topo.node(n) {
        Some(i) if i.state == NodeState::Active => Ok(()),
        _ => Err(Error::UnknownNode(n)),
    }
}

impl Negotiator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn session(&self, id: SessionId) -> Option<&NegotiationSession> {
        self.sessions.get(&id)
    }

    pub fn session_mut(&mut self, id: SessionId) -> Option<&mut NegotiationSession> {
        self.sessions.get_mut(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &NegotiationSession> {
        self.sessions.values()
    }

    fn open(&mut self, mut s: NegotiationSession) -> NegotiationSession {
        s.id = self.next_id;
        self.next_id += 1;
        if s.phase == Phase::Connecting && self.busy(&s.subject) {
            s.phase = Phase::Queued;
            self.queued.push_back(s.id);
        }
        self.sessions.insert(s.id, s.clone());
        s
    }

    /// True if a live session already involves a node of `subject`.
    fn busy(&self, subject: &Subject) -> bool {
        let nodes: Vec<NodeId> = match *subject {
            Subject::Node(n) => vec![n],
            Subject::Link(a, b) => vec![a, b],
        };
        self.sessions.values().any(|s| {
            !s.phase.is_terminal() && s.phase != Phase::Queued && nodes.iter().any(|&n| s.subject.touches(n))
        })
    }

    /// Records a phase change made by the engine.
    pub fn update(&mut self, s: &NegotiationSession) {
        self.sessions.insert(s.id, s.clone());
    }

    /// Queued sessions whose subject is no longer busy, in arrival order.
    pub fn release_ready(&mut self) -> Vec<NegotiationSession> {
        let mut out = Vec::new();
        let mut keep = VecDeque::new();
        while let Some(id) = self.queued.pop_front() {
            let subj = self.sessions[&id].subject;
            if self.busy(&subj) {
                keep.push_back(id);
            } else {
                let s = self.sessions.get_mut(&id).unwrap();
                s.phase = Phase::Connecting;
                out.push(s.clone());
            }
        }
        self.queued = keep;
        out
    }

    /// Opens a scale-out session. Neighbors that are not Active are dropped;
    /// with none left the session is rejected.
    pub fn handle_join(
        &mut self,
        topo: &OverlayTopology,
        v_new: NodeId,
        neighbors: &[NodeId],
        now: Time,
    ) -> NegotiationSession {
        let mut s = NegotiationSession::new(0, Primitive::ScaleOut, Cause::Graceful, Subject::Node(v_new), now);
        s.neighbors = neighbors
            .iter()
            .copied()
            .filter(|&u| u != v_new && require_active(topo, u).is_ok())
            .collect();
        if topo.node(v_new).is_some_and(|i| i.state.is_live()) {
            s.phase = Phase::Rejected(format!("node {v_new} is already a member"));
        } else if s.neighbors.is_empty() {
            s.phase = Phase::Rejected(Error::NoNeighbors.to_string());
        }
        self.open(s)
    }

    pub fn handle_leave(&mut self, topo: &OverlayTopology, node: NodeId, now: Time) -> Result<NegotiationSession> {
        require_active(topo, node)?;
        let s = NegotiationSession::new(0, Primitive::ScaleIn, Cause::Graceful, Subject::Node(node), now);
        Ok(self.open(s))
    }

    /// Returns `None` for nodes that are already gone.
    pub fn handle_node_failure(
        &mut self,
        topo: &OverlayTopology,
        node: NodeId,
        now: Time,
        allreduce_in_flight: bool,
    ) -> Option<NegotiationSession> {
        let info = topo.node(node)?;
        if !info.state.is_live() {
            return None;
        }
        let mut s = NegotiationSession::new(0, Primitive::ScaleIn, Cause::Failure, Subject::Node(node), now);
        s.restart_allreduce = allreduce_in_flight;
        s.phase = Phase::Committed;
        Some(self.open(s))
    }

    pub fn handle_connect_link(
        &mut self,
        topo: &OverlayTopology,
        a: NodeId,
        b: NodeId,
        now: Time,
    ) -> Result<NegotiationSession> {
        require_active(topo, a)?;
        require_active(topo, b)?;
        if a == b {
            return Err(Error::InvalidPath(format!("self link {a}-{b}")));
        }
        let (a, b) = (a.min(b), a.max(b));
        let mut s = NegotiationSession::new(0, Primitive::ConnectLink, Cause::Graceful, Subject::Link(a, b), now);
        if topo.has_link(a, b) {
            s.noop = true;
            s.phase = Phase::Committed;
        }
        Ok(self.open(s))
    }

    /// Graceful requests wait for the boundary; failures commit at once.
    /// Either way a removal that would split the active nodes is refused.
    pub fn handle_disconnect_link(
        &mut self,
        topo: &OverlayTopology,
        a: NodeId,
        b: NodeId,
        now: Time,
        cause: Cause,
        allreduce_in_flight: bool,
    ) -> Result<NegotiationSession> {
        if !topo.has_link(a, b) {
            return Err(Error::UnknownLink(a, b));
        }
        let (a, b) = (a.min(b), a.max(b));
        if topo.removal_partitions(a, b, &topo.active_nodes()) {
            return Err(Error::ClusterPartition(a, b));
        }
        let mut s = NegotiationSession::new(0, Primitive::DisconnectLink, cause, Subject::Link(a, b), now);
        if cause == Cause::Failure {
            s.restart_allreduce = allreduce_in_flight;
            s.phase = Phase::Committed;
        } else {
            s.phase = Phase::AwaitingBoundary;
        }
        Ok(self.open(s))
    }
}
