//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod cluster;
mod gen;
mod oracles;
mod protocol;
mod solver;

use std::time::Instant;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 10] = [
        (1, "greedy optimality gap", solver::greedy_gap),
        (2, "binary search vs exhaustive shard size", solver::binary_vs_exhaustive),
        (3, "strategy ordering of replication makespan", cluster::strategy_ordering),
        (4, "idle-time ordering", cluster::idle_ordering),
        (5, "hidden-delay contract", cluster::hidden_delay),
        (6, "scalability with neighbor count", cluster::scalability),
        (7, "protocol conformance", protocol::conformance),
        (8, "determinism", cluster::determinism),
        (9, "search complexity", solver::complexity),
        (10, "bandwidth arithmetic", cluster::bandwidth_arithmetic),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        let id = format!("criterion_{n:02}");
        if !filter.is_empty() && !filter.iter().any(|x| id.contains(x.as_str())) {
            continue;
        }
        let t = Instant::now();
        let out = f();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("{id} {verdict} {name} ({:.2}s): {}", t.elapsed().as_secs_f64(), out.detail);
        if !out.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
