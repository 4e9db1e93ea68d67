//! Domain types shared by the scheduler, the network model, the monitor and
//! the training engine.
//!
//! Sizes are counted in abstract data units (see [`crate::units`]) and all
//! times are unitless `f64` values; the CLI fixes one time unit to 1 ms.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::error::{Error, Result};

/// Simulation time in engine units.
pub type Time = f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeState {
    Active,
    Joining,
    Leaving,
    Failed,
    Standby,
}

impl NodeState {
    /// Whether the node takes part in training (or is about to).
    pub fn is_live(self) -> bool {
        matches!(self, NodeState::Active | NodeState::Joining | NodeState::Leaving)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeInfo {
    pub id: NodeId,
    pub state: NodeState,
    pub neighbors: BTreeSet<NodeId>,
    pub join_time: Time,
    pub last_heartbeat: Time,
}

impl NodeInfo {
    pub fn new(id: NodeId, state: NodeState, join_time: Time) -> Self {
        Self {
            id,
            state,
            neighbors: BTreeSet::new(),
            join_time,
            last_heartbeat: join_time,
        }
    }
}

/// Per-direction link cost: `prop_delay + size * trans_delay_per_unit`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkMetrics {
    pub prop_delay: Time,
    pub trans_delay_per_unit: Time,
}

impl LinkMetrics {
    pub fn new(prop_delay: Time, trans_delay_per_unit: Time) -> Result<Self> {
        let m = Self {
            prop_delay,
            trans_delay_per_unit,
        };
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<()> {
        if !self.prop_delay.is_finite() || self.prop_delay < 0.0 {
            return Err(Error::InvalidLinkMetrics(format!(
                "prop_delay {} must be >= 0",
                self.prop_delay
            )));
        }
        if !self.trans_delay_per_unit.is_finite() || self.trans_delay_per_unit <= 0.0 {
            return Err(Error::InvalidLinkMetrics(format!(
                "trans_delay_per_unit {} must be > 0",
                self.trans_delay_per_unit
            )));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_ok()
    }
}

/// The overlay graph. Links are keyed by direction; [`OverlayTopology::add_link`]
/// inserts both directions with the same metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OverlayTopology {
    pub nodes: BTreeMap<NodeId, NodeInfo>,
    pub links: BTreeMap<(NodeId, NodeId), LinkMetrics>,
}

impl OverlayTopology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, info: NodeInfo) {
        self.nodes.insert(info.id, info);
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeInfo> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeInfo> {
        self.nodes.get_mut(&id)
    }

    pub fn add_link(&mut self, a: NodeId, b: NodeId, metrics: LinkMetrics) {
        self.add_directed(a, b, metrics);
        self.add_directed(b, a, metrics);
    }

    /// Inserts a single direction. Scenarios use this to model asymmetric links.
    pub fn add_directed(&mut self, a: NodeId, b: NodeId, metrics: LinkMetrics) {
        self.links.insert((a, b), metrics);
        if let Some(n) = self.nodes.get_mut(&a) {
            n.neighbors.insert(b);
        }
        if let Some(n) = self.nodes.get_mut(&b) {
            n.neighbors.insert(a);
        }
    }

    pub fn remove_link(&mut self, a: NodeId, b: NodeId) -> bool {
        let removed = self.links.remove(&(a, b)).is_some() | self.links.remove(&(b, a)).is_some();
        if let Some(n) = self.nodes.get_mut(&a) {
            n.neighbors.remove(&b);
        }
        if let Some(n) = self.nodes.get_mut(&b) {
            n.neighbors.remove(&a);
        }
        removed
    }

    /// Drops every link incident to `id` and returns the former neighbors.
    pub fn detach_node(&mut self, id: NodeId) -> BTreeSet<NodeId> {
        let peers = self
            .nodes
            .get(&id)
            .map(|n| n.neighbors.clone())
            .unwrap_or_default();
        for &p in &peers {
            self.remove_link(id, p);
        }
        // catch one-directional leftovers
        let stray: Vec<_> = self
            .links
            .keys()
            .filter(|(a, b)| *a == id || *b == id)
            .copied()
            .collect();
        for (a, b) in stray {
            self.remove_link(a, b);
        }
        peers
    }

    pub fn link(&self, a: NodeId, b: NodeId) -> Option<&LinkMetrics> {
        self.links.get(&(a, b))
    }

    pub fn has_link(&self, a: NodeId, b: NodeId) -> bool {
        self.links.contains_key(&(a, b)) || self.links.contains_key(&(b, a))
    }

    pub fn neighbors(&self, id: NodeId) -> BTreeSet<NodeId> {
        self.nodes
            .get(&id)
            .map(|n| n.neighbors.clone())
            .unwrap_or_default()
    }

    pub fn nodes_in_state(&self, state: NodeState) -> BTreeSet<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.state == state)
            .map(|n| n.id)
            .collect()
    }

    pub fn active_nodes(&self) -> BTreeSet<NodeId> {
        self.nodes_in_state(NodeState::Active)
    }

    /// Undirected connectivity of the subgraph induced by `set`.
    pub fn is_connected_within(&self, set: &BTreeSet<NodeId>) -> bool {
        let Some(&start) = set.iter().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for (&(a, b), _) in self.links.range((u, NodeId(0))..=(u, NodeId(u32::MAX))) {
                debug_assert_eq!(a, u);
                if set.contains(&b) && seen.insert(b) {
                    queue.push_back(b);
                }
            }
            // incoming-only links still connect
            for &(a, b) in self.links.keys() {
                if b == u && set.contains(&a) && seen.insert(a) {
                    queue.push_back(a);
                }
            }
        }
        seen.len() == set.len()
    }

    /// Would dropping link a-b disconnect the nodes in `set`?
    pub fn removal_partitions(&self, a: NodeId, b: NodeId, set: &BTreeSet<NodeId>) -> bool {
        let mut probe = self.clone();
        probe.remove_link(a, b);
        !probe.is_connected_within(set)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    DanglingLink(NodeId, NodeId),
    InvalidMetrics(NodeId, NodeId),
    NeighborWithoutLink(NodeId, NodeId),
    AsymmetricNeighbors(NodeId, NodeId),
    FailedNodeLinked(NodeId, NodeId),
    Disconnected,
}

/// Checks every topology invariant; an empty list means the graph is valid.
pub fn validate_topology(topo: &OverlayTopology) -> Vec<Violation> {
    let mut out = Vec::new();
    for (&(a, b), m) in &topo.links {
        if !topo.nodes.contains_key(&a) || !topo.nodes.contains_key(&b) {
            out.push(Violation::DanglingLink(a, b));
        } else if !m.is_valid() {
            out.push(Violation::InvalidMetrics(a, b));
        }
    }
    for n in topo.nodes.values() {
        for &p in &n.neighbors {
            if !topo.has_link(n.id, p) {
                out.push(Violation::NeighborWithoutLink(n.id, p));
            }
            match topo.nodes.get(&p) {
                Some(peer) if !peer.neighbors.contains(&n.id) => {
                    out.push(Violation::AsymmetricNeighbors(n.id, p));
                }
                Some(peer) if n.state == NodeState::Active && peer.state == NodeState::Failed => {
                    out.push(Violation::FailedNodeLinked(n.id, p));
                }
                _ => {}
            }
        }
    }
    let active = topo.active_nodes();
    if active.len() > 1 && !topo.is_connected_within(&active) {
        out.push(Violation::Disconnected);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: String,
    pub size: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuntimeInfo {
    pub epoch: u64,
    pub iteration: u64,
    pub hyperparameters: Vec<u8>,
}

/// Ordered tensors that a new node must replicate before training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingState {
    tensors: Vec<Tensor>,
    total_size: u64,
    pub runtime_info: RuntimeInfo,
}

impl TrainingState {
    pub fn new(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::EmptyState);
        }
        if let Some(t) = tensors.iter().find(|t| t.size == 0) {
            return Err(Error::EmptyTensor(t.name.clone()));
        }
        let total_size = tensors.iter().map(|t| t.size).sum();
        Ok(Self {
            tensors,
            total_size,
            runtime_info: RuntimeInfo::default(),
        })
    }

    /// Convenience constructor naming tensors `t0`, `t1`, ...
    pub fn from_sizes(sizes: &[u64]) -> Result<Self> {
        Self::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &size)| Tensor {
                    name: format!("t{i}"),
                    size,
                })
                .collect(),
        )
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn total_size(&self) -> u64 {
        self.total_size
    }

    pub fn min_tensor_size(&self) -> u64 {
        self.tensors.iter().map(|t| t.size).min().unwrap_or(0)
    }

    pub fn max_tensor_size(&self) -> u64 {
        self.tensors.iter().map(|t| t.size).max().unwrap_or(0)
    }
}

/// Half-open slice `[start, end)` of one tensor, in tensor-local offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRange {
    pub tensor: usize,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub index: usize,
    pub size: u64,
    pub ranges: Vec<TensorRange>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardSet {
    pub shard_size: u64,
    pub shards: Vec<Shard>,
}

impl ShardSet {
    pub fn count(&self) -> usize {
        self.shards.len()
    }

    pub fn total_size(&self) -> u64 {
        self.shards.iter().map(|s| s.size).sum()
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.shards.iter().map(|s| s.size).collect()
    }
}

/// Cuts the flattened tensor sequence into `ceil(total / s)` shards. Shards
/// cross tensor boundaries; only the last one may be shorter than `s`.
pub fn split_state(state: &TrainingState, s: u64) -> Result<ShardSet> {
    if s == 0 {
        return Err(Error::InvalidShardSize(s));
    }
    let total = state.total_size();
    let count = total.div_ceil(s) as usize;
    let mut shards = Vec::with_capacity(count);
    let mut tensor = 0usize;
    let mut offset = 0u64;
    for index in 0..count {
        let size = s.min(total - index as u64 * s);
        let mut need = size;
        let mut ranges = Vec::new();
        while need > 0 {
            let len = state.tensors[tensor].size;
            let take = need.min(len - offset);
            ranges.push(TensorRange {
                tensor,
                start: offset,
                end: offset + take,
            });
            offset += take;
            need -= take;
            if offset == len {
                tensor += 1;
                offset = 0;
            }
        }
        shards.push(Shard {
            index,
            size,
            ranges,
        });
    }
    Ok(ShardSet {
        shard_size: s,
        shards,
    })
}

/// Solved assignment: which neighbor sends which shard indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationPlan {
    pub shard_size: u64,
    pub assignment: BTreeMap<NodeId, Vec<usize>>,
    pub predicted_makespan: Time,
}

impl ReplicationPlan {
    pub fn shards_of(&self, node: NodeId) -> &[usize] {
        self.assignment.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of shards per neighbor, in neighbor-id order.
    pub fn counts(&self) -> Vec<(NodeId, usize)> {
        self.assignment.iter().map(|(&n, v)| (n, v.len())).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NodeRuntimeStats {
    pub sync_finish_time: Time,
    pub grad_compute_time: Time,
    pub allreduce_busy: bool,
}

/// Versioned all-reduce schedule: for each node, the neighbors it exchanges
/// its payload with.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncPolicy {
    pub version: u64,
    pub schedule: BTreeMap<NodeId, Vec<NodeId>>,
}

impl SyncPolicy {
    /// Default neighbor-exchange policy over `participants`.
    pub fn from_topology(
        topo: &OverlayTopology,
        participants: &BTreeSet<NodeId>,
        version: u64,
    ) -> Self {
        let schedule = participants
            .iter()
            .map(|&u| {
                let peers = topo
                    .neighbors(u)
                    .into_iter()
                    .filter(|p| participants.contains(p) && topo.has_link(u, *p))
                    .collect();
                (u, peers)
            })
            .collect();
        Self { version, schedule }
    }

    pub fn peers(&self, node: NodeId) -> &[NodeId] {
        self.schedule.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// True if every scheduled exchange uses a link present in `topo`.
    pub fn consistent_with(&self, topo: &OverlayTopology) -> bool {
        self.schedule
            .iter()
            .all(|(&u, peers)| peers.iter().all(|&p| topo.has_link(u, p)))
    }
}
