//! Test-side reference implementations, written independently of the
//! scheduler module.

/// Neighbor as `(prop, trans, sync)`.
pub type Nb = (f64, f64, f64);

fn finish(n: &Nb, units: u64) -> f64 {
    n.2 + n.0 + n.1 * units as f64
}

pub fn makespan(nbs: &[Nb], owner: &[usize], sizes: &[u64]) -> f64 {
    let mut units = vec![0u64; nbs.len()];
    for (j, &u) in owner.iter().enumerate() {
        units[u] += sizes[j];
    }
    nbs.iter().zip(&units).map(|(n, &u)| finish(n, u)).fold(f64::NEG_INFINITY, f64::max)
}

/// Every owner vector, by odometer enumeration.
pub fn brute_force(nbs: &[Nb], sizes: &[u64]) -> f64 {
    let m = nbs.len();
    let mut owner = vec![0usize; sizes.len()];
    let mut best = f64::INFINITY;
    loop {
        best = best.min(makespan(nbs, &owner, sizes));
        let mut j = 0;
        loop {
            if j == owner.len() {
                return best;
            }
            owner[j] += 1;
            if owner[j] < m {
                break;
            }
            owner[j] = 0;
            j += 1;
        }
    }
}

/// Shard sizes for shard size `s` over a flattened state of `total` units.
pub fn split(total: u64, s: u64) -> Vec<u64> {
    let mut out = vec![s; (total / s) as usize];
    if !total.is_multiple_of(s) {
        out.push(total % s);
    }
    out
}

/// Index-order list scheduling onto the least resulting finish time.
pub fn greedy(nbs: &[Nb], sizes: &[u64]) -> f64 {
    let mut load: Vec<f64> = nbs.iter().map(|n| n.2 + n.0).collect();
    for &sz in sizes {
        let mut best = 0;
        for u in 1..nbs.len() {
            if load[u] + sz as f64 * nbs[u].1 < load[best] + sz as f64 * nbs[best].1 {
                best = u;
            }
        }
        load[best] += sz as f64 * nbs[best].1;
    }
    load.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Best greedy makespan over every shard size in `[lo, hi]`.
pub fn exhaustive_s(nbs: &[Nb], total: u64, lo: u64, hi: u64) -> (u64, f64) {
    (lo..=hi)
        .map(|s| (s, greedy(nbs, &split(total, s))))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
}
