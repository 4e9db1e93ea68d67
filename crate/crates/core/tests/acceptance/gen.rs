//! Seeded random clusters rendered as scenario text.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const V: u32 = 100;

pub struct Cluster {
    pub active: Vec<u32>,
    /// Overlay edges among active nodes with `(bandwidth, prop)`.
    pub edges: Vec<(u32, u32, f64, f64)>,
    /// Latent links from the joining node.
    pub v_links: Vec<(u32, f64, f64)>,
}

/// Ring over a shuffled order plus random chords; every degree is at least 2.
pub fn random_cluster(rng: &mut ChaCha8Rng, nodes: usize, v_degree: usize, extra_v_links: usize) -> Cluster {
    let active: Vec<u32> = (1..=nodes as u32).collect();
    let mut order = active.clone();
    order.shuffle(rng);
    let mut seen = BTreeSet::new();
    let mut edges = Vec::new();
    let mut add = |a: u32, b: u32, rng: &mut ChaCha8Rng, edges: &mut Vec<_>| {
        if a != b && seen.insert((a.min(b), a.max(b))) {
            edges.push((a, b, rng.random_range(100.0..=1000.0), rng.random_range(0.1..=1.0)));
        }
    };
    for i in 0..nodes {
        add(order[i], order[(i + 1) % nodes], rng, &mut edges);
    }
    for _ in 0..rng.random_range(0..=nodes / 2) {
        let a = *active.choose(rng).unwrap();
        let b = *active.choose(rng).unwrap();
        add(a, b, rng, &mut edges);
    }
    let mut targets = active.clone();
    targets.shuffle(rng);
    let v_links = targets[..v_degree + extra_v_links]
        .iter()
        .map(|&u| (u, rng.random_range(100.0..=1000.0), rng.random_range(0.1..=1.0)))
        .collect();
    Cluster { active, edges, v_links }
}

impl Cluster {
    pub fn neighbors(&self, k: usize) -> Vec<u32> {
        self.v_links[..k].iter().map(|l| l.0).collect()
    }

    /// Scenario text; `events` lines go under `[events]` verbatim.
    pub fn scenario(&self, engine: &str, model: &str, compute_ms: f64, events: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[engine]\n{engine}\n[model]\n{model}\n[nodes]");
        for &n in &self.active {
            let _ = writeln!(s, "node {n} compute_ms={compute_ms}");
        }
        let _ = writeln!(s, "node {V} compute_ms={compute_ms} standby\n[links]");
        for &(a, b, bw, p) in &self.edges {
            let _ = writeln!(s, "link {a} {b} bandwidth_mbps={bw} prop_ms={p}");
        }
        for &(u, bw, p) in &self.v_links {
            let _ = writeln!(s, "link {V} {u} bandwidth_mbps={bw} prop_ms={p} latent");
        }
        let _ = writeln!(s, "[events]");
        for e in events {
            let _ = writeln!(s, "{e}");
        }
        s
    }
}

pub fn join_line(at: f64, neighbors: &[u32]) -> String {
    let ns: Vec<String> = neighbors.iter().map(|n| n.to_string()).collect();
    format!("at {at} join {V} neighbors={}", ns.join(","))
}
