use std::collections::BTreeMap;

use crate::model::{NodeId, Time};

use super::config::Strategy;

/// One row per scaling event.
///
/// For scale-out rows `scale_out_delay` runs from the join request to the
/// new node's first all-reduce exchange. For every other primitive the
/// column holds the training-visible delay: the longest time any node sat
/// ready to exchange while waiting for the new sync policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub event_id: u64,
    pub time: Time,
    pub primitive: String,
    pub strategy: Strategy,
    pub scale_out_delay: Time,
    pub replication_delay: Time,
    pub hidden_delay: Time,
    pub cluster_idle_time: Time,
    pub policy_version: u64,
    /// Idle attributed to each node; only nodes with nonzero idle appear.
    pub idle_by_node: BTreeMap<NodeId, Time>,
    /// Subject node of scale-out rows.
    pub subject: Option<NodeId>,
    /// Replication sources of scale-out rows.
    pub sources: Vec<NodeId>,
}

impl MetricsRecord {
    pub(crate) fn new(event_id: u64, time: Time, primitive: &str, strategy: Strategy) -> Self {
        Self {
            event_id,
            time,
            primitive: primitive.to_string(),
            strategy,
            scale_out_delay: 0.0,
            replication_delay: 0.0,
            hidden_delay: 0.0,
            cluster_idle_time: 0.0,
            policy_version: 0,
            idle_by_node: BTreeMap::new(),
            subject: None,
            sources: Vec::new(),
        }
    }

    pub(crate) fn add_idle(&mut self, node: NodeId, t: Time) {
        if t > 0.0 {
            *self.idle_by_node.entry(node).or_default() += t;
            self.cluster_idle_time += t;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub index: u64,
    pub start: Time,
    pub boundary: Time,
    pub policy_version: u64,
    pub participants: usize,
    pub restarts: u32,
}

impl IterationRecord {
    pub fn duration(&self) -> Time {
        self.boundary - self.start
    }
}

/// Per-node totals over a whole run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdleTotals {
    pub scaling_idle: BTreeMap<NodeId, Time>,
    pub barrier_wait: BTreeMap<NodeId, Time>,
}

impl IdleTotals {
    pub fn cluster_scaling_idle(&self) -> Time {
        self.scaling_idle.values().sum()
    }

    pub fn cluster_barrier_wait(&self) -> Time {
        self.barrier_wait.values().sum()
    }
}

/// Sums per-node idle over all rows and keeps barrier waits apart.
pub fn account_idle_time(records: &[MetricsRecord], barrier_wait: &BTreeMap<NodeId, Time>) -> IdleTotals {
    let mut scaling_idle: BTreeMap<NodeId, Time> = BTreeMap::new();
    for r in records {
        for (&n, &t) in &r.idle_by_node {
            *scaling_idle.entry(n).or_default() += t;
        }
    }
    IdleTotals {
        scaling_idle,
        barrier_wait: barrier_wait.clone(),
    }
}
