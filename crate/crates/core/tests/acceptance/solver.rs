use std::time::Instant;

use chaos_core::model::{split_state, NodeId, Shard, ShardSet, TensorRange, TrainingState};
use chaos_core::scheduler::{binary_search_assign, greedy_assign, NeighborLink, SchedulerInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles::{self, Nb};
use crate::Outcome;

const GREEDY_INSTANCES: usize = 1000;
const MAX_GAP: f64 = 0.33;
const GREEDY_BUDGET_S: f64 = 30.0;

const SEARCH_INSTANCES: usize = 200;
const SEARCH_TOLERANCE: f64 = 0.10;
const SEARCH_BUDGET_S: f64 = 60.0;

const COMPLEXITY_BUDGET_S: f64 = 1.0;

fn input(nbs: &[Nb], sizes: &[u64]) -> SchedulerInput {
    let links = nbs
        .iter()
        .enumerate()
        .map(|(i, &(p, t, s))| NeighborLink::new(NodeId(i as u32 + 1), p, t, s).unwrap())
        .collect();
    SchedulerInput::new(NodeId(0), links, TrainingState::from_sizes(sizes).unwrap()).unwrap()
}

fn random_nbs(rng: &mut ChaCha8Rng, m: usize) -> Vec<Nb> {
    (0..m)
        .map(|_| (rng.random_range(0.0..=5.0), rng.random_range(0.1..=10.0), rng.random_range(0.0..=5.0)))
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

/// Contiguous shards of the given sizes over a single tensor.
fn shard_set(sizes: &[u64]) -> ShardSet {
    let mut start = 0;
    let shards = sizes
        .iter()
        .enumerate()
        .map(|(index, &size)| {
            let range = TensorRange { tensor: 0, start, end: start + size };
            start += size;
            Shard { index, size, ranges: vec![range] }
        })
        .collect();
    ShardSet { shard_size: sizes.iter().copied().max().unwrap_or(0), shards }
}

#[derive(Default)]
struct GapStats {
    gaps: Vec<f64>,
    bound_violations: usize,
    worst_ratio_to_bound: f64,
    mismatches: usize,
}

impl GapStats {
    fn record(&mut self, nbs: &[Nb], sizes: &[u64], got: f64) {
        if (got - oracles::greedy(nbs, sizes)).abs() > 1e-9 {
            self.mismatches += 1;
        }
        let ratio = got / oracles::brute_force(nbs, sizes);
        let bound = 4.0 / 3.0 - 1.0 / (3.0 * nbs.len() as f64);
        self.worst_ratio_to_bound = self.worst_ratio_to_bound.max(ratio / bound);
        if ratio > bound + 1e-9 {
            self.bound_violations += 1;
        }
        self.gaps.push(ratio - 1.0);
    }

    fn max(&self) -> f64 {
        self.gaps.iter().copied().fold(0.0, f64::max)
    }

    fn ok(&self) -> bool {
        self.bound_violations == 0 && self.max() <= MAX_GAP && self.mismatches == 0
    }

    fn summary(&mut self, label: &str) -> String {
        self.gaps.sort_by(f64::total_cmp);
        let g = &self.gaps;
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let zero = g.iter().filter(|&&x| x < 1e-9).count();
        format!(
            "{label}: {} instances, bound violations {}, worst ratio/bound {:.4}, gap mean {:.2}% p50 {:.2}% \
             p90 {:.2}% p99 {:.2}% max {:.2}% (optimal on {zero}), oracle mismatches {}",
            g.len(),
            self.bound_violations,
            self.worst_ratio_to_bound,
            mean * 100.0,
            quantile(g, 0.5) * 100.0,
            quantile(g, 0.9) * 100.0,
            quantile(g, 0.99) * 100.0,
            self.max() * 100.0,
            self.mismatches,
        )
    }
}

/// Two families: shards cut from the state at a random shard size (equal
/// sizes except the tail), and shard sets with independent random sizes.
pub fn greedy_gap() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut split_stats = GapStats::default();
    for _ in 0..GREEDY_INSTANCES {
        let m = rng.random_range(2..=4usize);
        let k = rng.random_range(2..=8u64);
        let s = rng.random_range(1..=10u64);
        let total = s * (k - 1) + rng.random_range(1..=s);
        let nbs = random_nbs(&mut rng, m);
        let inp = input(&nbs, &[total]);
        let shards = split_state(&inp.state, s).unwrap();
        assert_eq!(shards.count() as u64, k);
        let plan = greedy_assign(&shards, &inp).unwrap();
        split_stats.record(&nbs, &oracles::split(total, s), plan.predicted_makespan);
    }
    let mut mixed_stats = GapStats::default();
    for _ in 0..GREEDY_INSTANCES {
        let m = rng.random_range(2..=4usize);
        let k = rng.random_range(2..=8usize);
        let sizes: Vec<u64> = (0..k).map(|_| rng.random_range(1..=20u64)).collect();
        let nbs = random_nbs(&mut rng, m);
        let inp = input(&nbs, &[sizes.iter().sum()]);
        let plan = greedy_assign(&shard_set(&sizes), &inp).unwrap();
        mixed_stats.record(&nbs, &sizes, plan.predicted_makespan);
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = split_stats.ok() && mixed_stats.ok() && secs < GREEDY_BUDGET_S;
    let detail = format!("{}; {}", split_stats.summary("split"), mixed_stats.summary("mixed sizes"));
    Outcome::new(pass, detail)
}

pub fn binary_vs_exhaustive() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    let mut within = 0;
    let mut exact = 0;
    for i in 0..SEARCH_INSTANCES {
        let m = rng.random_range(2..=4usize);
        let n_tensors = rng.random_range(2..=10usize);
        let sizes: Vec<u64> = (0..n_tensors).map(|_| rng.random_range(1..=64u64)).collect();
        let nbs = random_nbs(&mut rng, m);
        let inp = input(&nbs, &sizes);
        let got = binary_search_assign(&inp).unwrap().plan;
        let total: u64 = sizes.iter().sum();
        let lo = *sizes.iter().min().unwrap();
        let hi = *sizes.iter().max().unwrap();
        let (best_s, best) = oracles::exhaustive_s(&nbs, total, lo, hi);
        let ratio = got.predicted_makespan / best - 1.0;
        if ratio <= SEARCH_TOLERANCE + 1e-12 {
            within += 1;
        }
        if ratio < 1e-9 {
            exact += 1;
        }
        if ratio > worst {
            worst = ratio;
            worst_case = format!(
                "instance {i}: s={} gives {:.3}, best s={best_s} gives {best:.3}",
                got.shard_size, got.predicted_makespan
            );
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "{within}/{SEARCH_INSTANCES} within {:.0}%, {exact} exact, worst excess {:.2}% ({worst_case})",
        SEARCH_TOLERANCE * 100.0,
        worst * 100.0
    );
    Outcome::new(within == SEARCH_INSTANCES && secs < SEARCH_BUDGET_S, detail)
}

pub fn complexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let range: u64 = 1_000_000;
    let mut sizes: Vec<u64> = (0..10_000 - 1).map(|_| rng.random_range(1..=100u64)).collect();
    sizes[0] = 1;
    sizes.push(range);
    let nbs: Vec<Nb> = (0..8)
        .map(|_| (rng.random_range(0.0..=5.0), rng.random_range(0.01..=1.0), rng.random_range(0.0..=5.0)))
        .collect();
    let inp = input(&nbs, &sizes);
    let t = Instant::now();
    let out = binary_search_assign(&inp).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let bound = (range as f64).log2().ceil() as usize + 1;
    let detail = format!(
        "K=10000 tensors, |U|=8, S={range}: {secs:.3}s, {} probes (bound {bound}), chosen s={}",
        out.probes.len(),
        out.plan.shard_size
    );
    Outcome::new(secs < COMPLEXITY_BUDGET_S && out.probes.len() <= bound, detail)
}
