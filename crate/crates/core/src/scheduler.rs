//! State-replication shard scheduling.
//!
//! A new node pulls a disjoint cover of the training-state shards from its
//! direct neighbors. Neighbor `u` finishes at
//! `sync_finish_u + prop_u + trans_u * (units assigned to u)` and the plan's
//! makespan is the latest such finish over all neighbors, including those
//! that end up sending nothing.
//!
//! [`binary_search_assign`] searches the shard size between the smallest and
//! the largest tensor, solving each probe with [`greedy_assign`].
//! [`brute_force_assign`] and [`even_assign`] are the exact and naive
//! references used to judge the greedy solver.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::{
    split_state, LinkMetrics, NodeId, ReplicationPlan, ShardSet, Time, TrainingState,
};

/// Comparison tolerance for makespans.
pub const EPS: f64 = 1e-9;

pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// One candidate source for the new node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborLink {
    pub id: NodeId,
    /// Metrics of the direction neighbor -> new node.
    pub metrics: LinkMetrics,
    /// Time (relative to plan dispatch) at which the neighbor is free to send.
    pub sync_finish: Time,
}

impl NeighborLink {
    pub fn new(id: NodeId, prop: Time, trans: Time, sync_finish: Time) -> Result<Self> {
        Ok(Self {
            id,
            metrics: LinkMetrics::new(prop, trans)?,
            sync_finish,
        })
    }

    /// Fixed part of the finish time, paid even with nothing assigned.
    pub fn base_load(&self) -> Time {
        self.metrics.prop_delay + self.sync_finish
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerInput {
    pub v_new: NodeId,
    pub neighbors: Vec<NeighborLink>,
    pub state: TrainingState,
}

impl SchedulerInput {
    pub fn new(v_new: NodeId, neighbors: Vec<NeighborLink>, state: TrainingState) -> Result<Self> {
        let input = Self {
            v_new,
            neighbors,
            state,
        };
        input.check()?;
        Ok(input)
    }

    pub fn check(&self) -> Result<()> {
        if self.neighbors.is_empty() {
            return Err(Error::NoNeighbors);
        }
        let mut seen = BTreeSet::new();
        for n in &self.neighbors {
            n.metrics.check()?;
            if n.sync_finish.is_nan() || n.sync_finish < 0.0 {
                return Err(Error::InvalidLinkMetrics(format!(
                    "sync finish of {} must be >= 0",
                    n.id
                )));
            }
            if !seen.insert(n.id) {
                return Err(Error::InvalidLinkMetrics(format!("duplicate neighbor {}", n.id)));
            }
        }
        Ok(())
    }
}

/// Completion time of one neighbor sending `assigned_units` in total.
pub fn neighbor_finish_time(n: &NeighborLink, assigned_units: u64) -> Time {
    n.sync_finish + n.metrics.prop_delay + n.metrics.trans_delay_per_unit * assigned_units as f64
}

fn makespan_of_units(neighbors: &[NeighborLink], units: &[u64]) -> Time {
    neighbors
        .iter()
        .zip(units)
        .map(|(n, &u)| neighbor_finish_time(n, u))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Sum of shard sizes per neighbor, after checking the plan is a disjoint
/// cover of `shards`.
fn units_per_neighbor(
    plan: &ReplicationPlan,
    shards: &ShardSet,
    neighbors: &[NeighborLink],
) -> Result<Vec<u64>> {
    let count = shards.count();
    let mut owner = vec![false; count];
    let mut units = vec![0u64; neighbors.len()];
    let pos: BTreeMap<NodeId, usize> = neighbors.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    for (node, idxs) in &plan.assignment {
        let &slot = pos.get(node).ok_or(Error::UnknownNeighbor(*node))?;
        for &j in idxs {
            if j >= count {
                return Err(Error::ShardOutOfRange { index: j, count });
            }
            if std::mem::replace(&mut owner[j], true) {
                return Err(Error::DuplicateShard(j));
            }
            units[slot] += shards.shards[j].size;
        }
    }
    if let Some(j) = owner.iter().position(|o| !o) {
        return Err(Error::UncoveredShard(j));
    }
    Ok(units)
}

/// Makespan of `plan` against the shards of `input.state` at the plan's
/// shard size.
pub fn evaluate_makespan(plan: &ReplicationPlan, input: &SchedulerInput) -> Result<Time> {
    input.check()?;
    let shards = split_state(&input.state, plan.shard_size)?;
    evaluate_on(plan, &shards, input)
}

/// As [`evaluate_makespan`], with the shard set already materialized.
pub fn evaluate_on(plan: &ReplicationPlan, shards: &ShardSet, input: &SchedulerInput) -> Result<Time> {
    let units = units_per_neighbor(plan, shards, &input.neighbors)?;
    Ok(makespan_of_units(&input.neighbors, &units))
}

fn plan_from_owner(
    shards: &ShardSet,
    neighbors: &[NeighborLink],
    owner: &[usize],
) -> ReplicationPlan {
    let mut assignment: BTreeMap<NodeId, Vec<usize>> =
        neighbors.iter().map(|n| (n.id, Vec::new())).collect();
    let mut units = vec![0u64; neighbors.len()];
    for (j, &u) in owner.iter().enumerate() {
        assignment.get_mut(&neighbors[u].id).unwrap().push(j);
        units[u] += shards.shards[j].size;
    }
    ReplicationPlan {
        shard_size: shards.shard_size,
        assignment,
        predicted_makespan: makespan_of_units(neighbors, &units),
    }
}

/// Running per-neighbor load estimates of the greedy sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyLoadTable {
    pub load: Vec<Time>,
    pub assigned_units: Vec<u64>,
}

impl GreedyLoadTable {
    pub fn new(neighbors: &[NeighborLink]) -> Self {
        Self::with_loads(neighbors.iter().map(NeighborLink::base_load).collect())
    }

    pub fn with_loads(load: Vec<Time>) -> Self {
        let n = load.len();
        Self {
            load,
            assigned_units: vec![0; n],
        }
    }

    /// Least estimated completion for a shard of `size`; lowest index wins ties.
    pub fn pick(&self, neighbors: &[NeighborLink], size: u64) -> usize {
        let mut best = 0;
        let mut best_val = f64::INFINITY;
        for (i, n) in neighbors.iter().enumerate() {
            let v = self.load[i] + size as f64 * n.metrics.trans_delay_per_unit;
            if v < best_val {
                best = i;
                best_val = v;
            }
        }
        best
    }

    pub fn place(&mut self, neighbors: &[NeighborLink], slot: usize, size: u64) {
        self.load[slot] += size as f64 * neighbors[slot].metrics.trans_delay_per_unit;
        self.assigned_units[slot] += size;
    }
}

/// Greedy list assignment over `(shard index, size)` pairs in the given
/// order, starting from `table`. Returns the owning neighbor slot per pair.
pub fn greedy_sweep(
    items: &[(usize, u64)],
    neighbors: &[NeighborLink],
    table: &mut GreedyLoadTable,
) -> Vec<usize> {
    items
        .iter()
        .map(|&(_, size)| {
            let slot = table.pick(neighbors, size);
            table.place(neighbors, slot, size);
            slot
        })
        .collect()
}

/// Assigns shards in index order, each to the neighbor with the least
/// estimated load after taking it.
pub fn greedy_assign(shards: &ShardSet, input: &SchedulerInput) -> Result<ReplicationPlan> {
    input.check()?;
    if shards.count() == 0 {
        return Err(Error::EmptyState);
    }
    let items: Vec<(usize, u64)> = shards.shards.iter().map(|s| (s.index, s.size)).collect();
    let mut table = GreedyLoadTable::new(&input.neighbors);
    let owner = greedy_sweep(&items, &input.neighbors, &mut table);
    Ok(plan_from_owner(shards, &input.neighbors, &owner))
}

/// Result of the shard-size search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub plan: ReplicationPlan,
    /// `(shard size, makespan)` of every probe, in probe order.
    pub probes: Vec<(u64, Time)>,
}

impl SearchOutcome {
    pub fn probe_count(&self) -> usize {
        self.probes.len()
    }
}

/// Binary search over the shard size in `[min tensor, max tensor]`. A probe
/// that strictly improves the best makespan moves the search to smaller
/// sizes; anything else moves it to larger sizes.
pub fn binary_search_assign(input: &SchedulerInput) -> Result<SearchOutcome> {
    input.check()?;
    let mut lo = input.state.min_tensor_size();
    let mut hi = input.state.max_tensor_size();
    let mut best: Option<ReplicationPlan> = None;
    let mut best_theta = f64::INFINITY;
    let mut probes = Vec::new();
    while lo <= hi {
        let s = lo + (hi - lo) / 2;
        let shards = split_state(&input.state, s)?;
        let plan = greedy_assign(&shards, input)?;
        let theta = evaluate_on(&plan, &shards, input)?;
        probes.push((s, theta));
        if theta < best_theta {
            best_theta = theta;
            best = Some(plan);
            if s == 0 {
                break;
            }
            hi = s - 1;
        } else {
            lo = s + 1;
        }
    }
    let plan = best.ok_or(Error::EmptyState)?;
    Ok(SearchOutcome { plan, probes })
}

/// Upper bound on the probes made by [`binary_search_assign`] for a search
/// range holding `range` candidate sizes.
pub fn probe_bound(range: u64) -> usize {
    if range <= 1 {
        return 1;
    }
    (64 - (range - 1).leading_zeros()) as usize + 1
}

/// Exact minimum over all `|U|^K` assignments. Among equal makespans the
/// lexicographically smallest owner vector wins.
pub fn brute_force_assign(
    shards: &ShardSet,
    input: &SchedulerInput,
    cap: u64,
) -> Result<ReplicationPlan> {
    input.check()?;
    let k = shards.count();
    let m = input.neighbors.len();
    let needed = (m as u128).checked_pow(k as u32).unwrap_or(u128::MAX);
    if needed > cap as u128 {
        return Err(Error::EnumerationCap { needed, cap });
    }
    let sizes = shards.sizes();
    let trans: Vec<f64> = input
        .neighbors
        .iter()
        .map(|n| n.metrics.trans_delay_per_unit)
        .collect();
    let mut search = BruteForce {
        sizes: &sizes,
        trans: &trans,
        owner: vec![0; k],
        best_owner: None,
        best: f64::INFINITY,
    };
    let mut loads: Vec<f64> = input.neighbors.iter().map(NeighborLink::base_load).collect();
    let start_max = loads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    search.descend(0, &mut loads, start_max);
    let owner = search.best_owner.expect("at least one assignment exists");
    Ok(plan_from_owner(shards, &input.neighbors, &owner))
}

struct BruteForce<'a> {
    sizes: &'a [u64],
    trans: &'a [f64],
    owner: Vec<usize>,
    best_owner: Option<Vec<usize>>,
    best: f64,
}

impl BruteForce<'_> {
    fn descend(&mut self, j: usize, loads: &mut [f64], cur_max: f64) {
        if j == self.sizes.len() {
            if self.best_owner.is_none() || cur_max < self.best - EPS {
                self.best = cur_max;
                self.best_owner = Some(self.owner.clone());
            }
            return;
        }
        for u in 0..loads.len() {
            let add = self.sizes[j] as f64 * self.trans[u];
            let next_max = cur_max.max(loads[u] + add);
            // loads only grow, so this branch cannot beat the incumbent
            if self.best_owner.is_some() && next_max >= self.best - EPS {
                continue;
            }
            loads[u] += add;
            self.owner[j] = u;
            self.descend(j + 1, loads, next_max);
            loads[u] -= add;
        }
    }
}

/// Round-robin over neighbors in input order.
pub fn even_assign(shards: &ShardSet, input: &SchedulerInput) -> Result<ReplicationPlan> {
    input.check()?;
    let m = input.neighbors.len();
    let owner: Vec<usize> = (0..shards.count()).map(|j| j % m).collect();
    Ok(plan_from_owner(shards, &input.neighbors, &owner))
}

/// Makespan if a single neighbor sends everything.
pub fn single_source_makespan(n: &NeighborLink, state: &TrainingState) -> Time {
    neighbor_finish_time(n, state.total_size())
}
