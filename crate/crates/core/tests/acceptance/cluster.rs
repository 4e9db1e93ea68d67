use std::collections::BTreeSet;
use std::sync::OnceLock;

use chaos_core::engine::{Engine, RunOutput, Strategy};
use chaos_core::model::{LinkMetrics, NodeId, NodeInfo, NodeState, OverlayTopology};
use chaos_core::network::{shortest_path, Network, TransferRequest, TransferTag};
use chaos_core::report::metrics_csv;
use chaos_core::scenario::{parse_scenario, ScenarioFile};
use chaos_core::units::{trans_delay_per_unit, DEFAULT_UNIT_BYTES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gen::{join_line, random_cluster, Cluster, V};
use crate::Outcome;

const ORDERING_INSTANCES: usize = 100;
const MS_WIN_SHARE: f64 = 0.90;
const ORDERING_BUDGET_S: f64 = 120.0;
const HIDDEN_INSTANCES: usize = 20;
const SCALING_INSTANCES: usize = 30;
const HOP_GRAPHS: usize = 30;
const EPS: f64 = 1e-6;
const BANDWIDTH_TARGET_MS: f64 = 22_100.0;
const BANDWIDTH_TOLERANCE: f64 = 0.01;

pub fn run(sc: &ScenarioFile, strategy: Strategy) -> RunOutput {
    Engine::new(sc.with_strategy(strategy).to_sim_input())
        .and_then(Engine::run)
        .unwrap_or_else(|e| panic!("{strategy}: {e}"))
}

fn parse(text: &str) -> ScenarioFile {
    parse_scenario(text).unwrap_or_else(|e| panic!("{e}\n{text}"))
}

fn scale_out(out: &RunOutput) -> &chaos_core::engine::MetricsRecord {
    out.records.iter().find(|r| r.primitive == "scale-out").expect("scale-out row")
}

struct Instance {
    cluster: Cluster,
    degree: usize,
    /// One run per strategy, in `Strategy::ALL` order.
    runs: Vec<RunOutput>,
}

const MODEL: &str = "preset = resnet101";
const MAX_TENSOR_UNITS: f64 = 30.0;

/// Shared random instances for the ordering criteria.
fn ordering_instances() -> &'static (Vec<Instance>, f64) {
    static CELL: OnceLock<(Vec<Instance>, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = std::time::Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut out = Vec::new();
        for _ in 0..ORDERING_INSTANCES {
            let nodes = rng.random_range(6..=12usize);
            let degree = rng.random_range(2..=4usize);
            let cluster = random_cluster(&mut rng, nodes, degree, 0);
            let text = cluster.scenario(
                "iterations = 3\npayload_mib = 8",
                MODEL,
                2000.0,
                &[join_line(100.0, &cluster.neighbors(degree))],
            );
            let sc = parse(&text);
            let runs = Strategy::ALL.iter().map(|&s| run(&sc, s)).collect();
            out.push(Instance { cluster, degree, runs });
        }
        (out, t.elapsed().as_secs_f64())
    })
}

pub fn strategy_ordering() -> Outcome {
    let (instances, secs) = ordering_instances();
    let mut ss_ok = 0;
    let mut ms_ok = 0;
    let (mut sp_ss, mut sp_ms) = (0.0, 0.0);
    let mut worst_ss = String::new();
    for (i, inst) in instances.iter().enumerate() {
        let rep: Vec<f64> = inst.runs.iter().map(|r| scale_out(r).replication_delay).collect();
        let max_trans = inst.cluster.v_links[..inst.degree]
            .iter()
            .map(|l| trans_delay_per_unit(l.1, DEFAULT_UNIT_BYTES))
            .fold(0.0, f64::max);
        let slack = MAX_TENSOR_UNITS * max_trans;
        if rep[0] <= rep[1] + slack + EPS {
            ss_ok += 1;
        } else {
            worst_ss = format!("; instance {i}: mn {:.1} > ss {:.1} + slack {slack:.1}", rep[0], rep[1]);
        }
        if rep[0] <= rep[2] + EPS {
            ms_ok += 1;
        }
        sp_ss += rep[1] / rep[0];
        sp_ms += rep[2] / rep[0];
    }
    let n = instances.len();
    let (sp_ss, sp_ms) = (sp_ss / n as f64, sp_ms / n as f64);
    let share = ms_ok as f64 / n as f64;
    let detail = format!(
        "{n} topologies: mn<=ss(+1 shard) {ss_ok}/{n}, mn<=ms {ms_ok}/{n} ({:.0}%), mean speedup vs ss {sp_ss:.2}x vs ms {sp_ms:.2}x, \
         4 strategies simulated in {secs:.1}s{worst_ss}",
        share * 100.0
    );
    let pass = ss_ok == n && share >= MS_WIN_SHARE && sp_ss > 1.0 && sp_ms > 1.0 && *secs < ORDERING_BUDGET_S;
    Outcome::new(pass, detail)
}

pub fn idle_ordering() -> Outcome {
    let (instances, _) = ordering_instances();
    let n = instances.len() as f64;
    let mut means = [0.0; 4];
    let mut confined = 0;
    for inst in instances {
        for (k, run) in inst.runs.iter().enumerate() {
            means[k] += scale_out(run).cluster_idle_time / n;
        }
        let allowed: BTreeSet<NodeId> = inst
            .cluster
            .neighbors(inst.degree)
            .into_iter()
            .chain([V])
            .map(NodeId)
            .collect();
        if scale_out(&inst.runs[0]).idle_by_node.keys().all(|k| allowed.contains(k)) {
            confined += 1;
        }
    }
    let [mn, ss, ms, sr] = means;
    let detail = format!(
        "mean idle ms: stop-resume {sr:.0} > single-source(barrier) {ss:.0} >= multi-source {ms:.0} >= multi-neighbor {mn:.0}; \
         multi-neighbor idle confined to v_new+neighbors in {confined}/{}",
        instances.len()
    );
    Outcome::new(sr > ss && ss >= ms && ms >= mn && confined == instances.len(), detail)
}

pub fn hidden_delay() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    let mut min_hidden = f64::INFINITY;
    let mut graceful_rows = 0;
    let mut overlapped = 0;
    for i in 0..HIDDEN_INSTANCES {
        let nodes = rng.random_range(6..=10usize);
        let cluster = random_cluster(&mut rng, nodes, 2, 1);
        let ns = cluster.neighbors(2);
        let extra = cluster.v_links[2].0;
        let engine = "iterations = 25\npayload_mib = 8\ncontrol_latency_ms = 1";
        let events = [
            join_line(100.0, &ns),
            format!("at 15000 connect-link {V} {extra}"),
            format!("at 25000 disconnect-link {V} {}", ns[0]),
            format!("at 35000 leave {V}"),
        ];
        let sc = parse(&cluster.scenario(engine, MODEL, 2000.0, &events));
        let base = run(&parse(&cluster.scenario(engine, MODEL, 2000.0, &[])), Strategy::MultiNeighbor);
        let out = run(&sc, Strategy::MultiNeighbor);
        let so = scale_out(&out);
        min_hidden = min_hidden.min(so.hidden_delay);
        if so.hidden_delay <= 0.0 {
            failures.push(format!("instance {i}: hidden_delay {}", so.hidden_delay));
        }
        for prim in ["connect-link", "disconnect-link", "scale-in"] {
            match out.records.iter().find(|r| r.primitive == prim) {
                Some(r) if r.scale_out_delay == 0.0 && r.cluster_idle_time == 0.0 => graceful_rows += 1,
                Some(r) => failures.push(format!("instance {i}: {prim} visible {} idle {}", r.scale_out_delay, r.cluster_idle_time)),
                None => failures.push(format!("instance {i}: no {prim} row ({:?})", out.monitor_log)),
            }
        }
        // iterations that end by the commit boundary run exactly as without the join
        let commit = out
            .trace
            .iter()
            .find(|m| m.kind == chaos_core::negotiator::MessageKind::ReplicationPolicy)
            .map(|m| m.at)
            .unwrap();
        let before: Vec<_> = out.iterations.iter().filter(|it| it.boundary <= commit).collect();
        let same = before
            .iter()
            .all(|it| (it.duration() - base.iterations[it.index as usize].duration()).abs() < 1e-9);
        if same && before.iter().any(|it| it.start < commit && it.boundary > so.time) {
            overlapped += 1;
        } else {
            failures.push(format!("instance {i}: measurement window disturbed training"));
        }
    }
    let detail = format!(
        "{HIDDEN_INSTANCES} clusters, compute 2000ms vs control 1ms: {graceful_rows}/{} graceful rows with zero visible delay, \
         measurement overlapped unchanged iterations in {overlapped}/{HIDDEN_INSTANCES}, min scale-out hidden {min_hidden:.1}ms{}",
        HIDDEN_INSTANCES * 3,
        failures.first().map(|f| format!("; {f}")).unwrap_or_default()
    );
    Outcome::new(failures.is_empty(), detail)
}

fn uniform_star(rng: &mut ChaCha8Rng) -> (String, Cluster) {
    let bw = rng.random_range(100.0..=1000.0);
    let p = rng.random_range(0.1..=1.0);
    let active: Vec<u32> = (1..=8).collect();
    let edges = (1..=8).map(|a| (a, a % 8 + 1, bw, p)).collect();
    let v_links = [1, 3, 5, 7].iter().map(|&u| (u, bw, p)).collect();
    let model = ["resnet101", "alexnet", "vgg11"][rng.random_range(0..3)];
    (format!("preset = {model}"), Cluster { active, edges, v_links })
}

pub fn scalability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mn_ok = 0;
    let mut ss_ok = 0;
    let mut example = String::new();
    for i in 0..SCALING_INSTANCES {
        let (model, cluster) = uniform_star(&mut rng);
        let mut mn = Vec::new();
        let mut ss = Vec::new();
        for k in [1, 2, 4] {
            let text = cluster.scenario("iterations = 3\npayload_mib = 4", &model, 2000.0, &[join_line(100.0, &cluster.neighbors(k))]);
            let sc = parse(&text);
            mn.push(scale_out(&run(&sc, Strategy::MultiNeighbor)).replication_delay);
            ss.push(scale_out(&run(&sc, Strategy::SingleSource)).replication_delay);
        }
        if mn.windows(2).all(|w| w[1] <= w[0] + EPS) {
            mn_ok += 1;
        } else {
            example = format!("; instance {i} mn {mn:?}");
        }
        if ss.iter().all(|&x| (x - ss[0]).abs() < EPS) {
            ss_ok += 1;
        }
        if i == 0 {
            example = format!("; e.g. {model}: mn {:.0}/{:.0}/{:.0} ms, ss {:.0} ms{example}", mn[0], mn[1], mn[2], ss[0]);
        }
    }
    let (hop_ok, hop_detail) = multi_source_hops();
    let n = SCALING_INSTANCES;
    let detail = format!(
        "mn non-increasing over 1/2/4 neighbors {mn_ok}/{n}, ss invariant {ss_ok}/{n}, ms per-hop delivery non-decreasing {hop_ok}/{HOP_GRAPHS} \
         ({hop_detail}){example}"
    );
    Outcome::new(mn_ok == n && ss_ok == n && hop_ok == HOP_GRAPHS, detail)
}

/// Multi-source pulls over random sparse trees with uniform links: the
/// latest delivery among sources at hop distance `h` never decreases in `h`.
fn multi_source_hops() -> (usize, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = 0;
    let mut deepest = 0;
    let mut counterexample = String::new();
    for _ in 0..HOP_GRAPHS {
        let n = rng.random_range(6..=14u32);
        let m = LinkMetrics::new(rng.random_range(0.1..=1.0), trans_delay_per_unit(rng.random_range(100.0..=1000.0), DEFAULT_UNIT_BYTES)).unwrap();
        let mut topo = OverlayTopology::new();
        for id in 1..=n + 1 {
            topo.add_node(NodeInfo::new(NodeId(id), NodeState::Active, 0.0));
        }
        for id in 2..=n {
            topo.add_link(NodeId(id), NodeId(rng.random_range(1..id)), m);
        }
        let v = NodeId(n + 1);
        topo.add_link(v, NodeId(rng.random_range(1..=n)), m);
        let shard = rng.random_range(4..=32) as f64;
        let mut net = Network::from_topology(&topo);
        let mut by_hops: Vec<(usize, u64)> = Vec::new();
        for src in 1..=n {
            let (path, _) = shortest_path(&topo, NodeId(src), v, shard).unwrap();
            let hops = path.len() - 1;
            let id = net.submit(TransferRequest::routed(path, shard, TransferTag::StateShard), 0.0).unwrap();
            by_hops.push((hops, id));
        }
        net.run_until_idle();
        let max_h = by_hops.iter().map(|x| x.0).max().unwrap();
        deepest = deepest.max(max_h);
        let latest: Vec<f64> = (1..=max_h)
            .map(|h| {
                by_hops
                    .iter()
                    .filter(|x| x.0 == h)
                    .map(|x| net.delivered_at(x.1).unwrap())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .filter(|t| t.is_finite())
            .collect();
        if latest.windows(2).all(|w| w[1] >= w[0] - EPS) {
            ok += 1;
        } else if counterexample.is_empty() {
            let shown: Vec<String> = latest.iter().map(|t| format!("{t:.0}")).collect();
            counterexample = format!("; {n}-node tree latest per hop [{}] ms", shown.join(", "));
        }
    }
    (ok, format!("up to {deepest} hops{counterexample}"))
}

pub fn determinism() -> Outcome {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    files.sort();
    let mut runs = 0;
    let mut diffs = Vec::new();
    for f in &files {
        let sc = chaos_core::scenario::load_scenario(f).unwrap();
        for seed in [sc.config.seed, 12345] {
            let sc = sc.with_seed(seed);
            for s in Strategy::ALL {
                let a = run(&sc, s);
                let b = run(&sc, s);
                runs += 2;
                if metrics_csv(&[&a]) != metrics_csv(&[&b]) || a.trace_text() != b.trace_text() {
                    diffs.push(format!("{} {s} seed {seed}", f.display()));
                }
            }
        }
    }
    let detail = format!("{} scenario files x 2 seeds x 4 strategies, {runs} runs, {} mismatches", files.len(), diffs.len());
    Outcome::new(diffs.is_empty() && !files.is_empty(), detail)
}

pub fn bandwidth_arithmetic() -> Outcome {
    let text = "[engine]\niterations = 3\npayload_mib = 1\n[model]\npreset = vgg11\n[nodes]\nnode 1 compute_ms=1000\n\
                node 2 compute_ms=1000 standby\n[links]\nlink 1 2 bandwidth_mbps=200 prop_ms=0 latent\n[events]\nat 10 join 2 neighbors=1\n";
    let sc = parse(text);
    let mut vals = Vec::new();
    for s in Strategy::ALL[..3].iter() {
        vals.push((*s, scale_out(&run(&sc, *s)).replication_delay));
    }
    let ok = vals.iter().all(|(_, d)| ((d - BANDWIDTH_TARGET_MS) / BANDWIDTH_TARGET_MS).abs() <= BANDWIDTH_TOLERANCE);
    let shown: Vec<String> = vals.iter().map(|(s, d)| format!("{s} {:.1}ms", d)).collect();
    Outcome::new(ok, format!("528 MiB over 200 Mbps: {} (target {BANDWIDTH_TARGET_MS}ms ±1%)", shown.join(", ")))
}
