use thiserror::Error;

use crate::model::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shard size must be at least 1 (got {0})")]
    InvalidShardSize(u64),
    #[error("training state has no tensors")]
    EmptyState,
    #[error("tensor `{0}` has zero size")]
    EmptyTensor(String),
    #[error("scheduler input has no neighbors")]
    NoNeighbors,
    #[error("invalid link metrics: {0}")]
    InvalidLinkMetrics(String),
    #[error("plan does not cover shard {0}")]
    UncoveredShard(usize),
    #[error("shard {0} is assigned more than once")]
    DuplicateShard(usize),
    #[error("shard index {index} out of range (count {count})")]
    ShardOutOfRange { index: usize, count: usize },
    #[error("plan assigns shards to {0}, which is not a neighbor")]
    UnknownNeighbor(NodeId),
    #[error("brute force needs {needed} assignments, above the cap of {cap}")]
    EnumerationCap { needed: u128, cap: u64 },
    #[error("no route from {src} to {dst}")]
    NoRoute { src: NodeId, dst: NodeId },
    #[error("invalid transfer path: {0}")]
    InvalidPath(String),
    #[error("transfer {id} failed on link {a}-{b} at t={at:.3}")]
    TransferFailed { id: u64, a: NodeId, b: NodeId, at: f64 },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown link {0}-{1}")]
    UnknownLink(NodeId, NodeId),
    #[error("removing link {0}-{1} would partition the cluster")]
    ClusterPartition(NodeId, NodeId),
    #[error("invalid heartbeat config: {0}")]
    InvalidHeartbeat(String),
    #[error("engine error at t={time:.3}: {msg}")]
    Engine { time: f64, msg: String },
}
