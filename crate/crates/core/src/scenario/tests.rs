use super::*;

const MINIMAL: &str = "
[engine]
iterations = 4

[model]
tensor a = 2
tensor b = 2

[nodes]
node 1 compute_ms=10
node 2 compute_ms=10

[links]
link 1 2 bandwidth_mbps=200 prop_ms=0.5
";

fn errors(text: &str) -> Vec<LineError> {
    parse_scenario(text).unwrap_err().0
}

#[test]
fn minimal_scenario_runs_requested_iterations() {
    let s = parse_scenario(MINIMAL).unwrap();
    assert!(s.events.is_empty());
    let out = crate::engine::Engine::new(s.to_sim_input()).unwrap().run().unwrap();
    assert_eq!(out.iterations.len(), 4);
    assert!(out.records.is_empty());
}

#[test]
fn presets_sum_to_their_sizes() {
    let expected = [
        ("resnet101", 178.0),
        ("alexnet", 233.0),
        ("vgg11", 528.0),
        ("gpt2", 468.0),
        ("gpt2-medium", 1380.0),
        ("gpt2-large", 3050.0),
    ];
    for (name, mib) in expected {
        let total: f64 = preset_layers(name).unwrap().iter().sum();
        assert_eq!(total, mib, "{name}");
        assert!(preset_layers(name).unwrap().len() > 1);
    }
    assert!(preset_layers("bert").is_none());
}

#[test]
fn vgg11_preset_converts_to_units() {
    let text = MINIMAL.replace("tensor a = 2\ntensor b = 2", "preset = vgg11");
    let s = parse_scenario(&text).unwrap();
    assert_eq!(s.to_sim_input().state.total_size(), 528);
    let quarter = parse_scenario(&text.replace("iterations = 4", "iterations = 4\nunit_bytes = 262144")).unwrap();
    assert_eq!(quarter.to_sim_input().state.total_size(), 528 * 4);
}

#[test]
fn unknown_node_in_event_is_line_anchored() {
    let text = format!("{MINIMAL}\n[events]\nat 5 leave 99\n");
    let errs = errors(&text);
    assert_eq!(errs.len(), 1);
    assert!(errs[0].msg.contains("99"));
    assert_eq!(text.lines().nth(errs[0].line - 1).unwrap(), "at 5 leave 99");
}

#[test]
fn syntax_errors_are_collected() {
    let text = "[engine]\niterations = many\nbogus = 1\n[model]\npreset = bert\n[nodes]\nnode x\n[weird]\n";
    let errs = errors(text);
    let lines: Vec<usize> = errs.iter().map(|e| e.line).collect();
    assert!(lines.contains(&2) && lines.contains(&3) && lines.contains(&5));
    assert!(lines.contains(&7) && lines.contains(&8));
    let msg = ScenarioErrors(errs).to_string();
    assert!(msg.contains("line 5: unknown preset `bert`"));
}

#[test]
fn unsorted_events_are_rejected() {
    let text = format!("{MINIMAL}\n[events]\nat 50 connect-link 1 2\nat 10 connect-link 1 2\n");
    let errs = errors(&text);
    assert_eq!(errs.len(), 1);
    assert!(errs[0].msg.contains("earlier"));
}

#[test]
fn join_requires_declared_links() {
    let text = MINIMAL.replace("node 2 compute_ms=10", "node 2 compute_ms=10\nnode 3 compute_ms=10 standby")
        + "\n[events]\nat 5 join 3 neighbors=1\n";
    assert!(errors(&text)[0].msg.contains("no link declared between 1 and 3"));
    let ok = text.replace("[events]", "link 1 3 bandwidth_mbps=100 prop_ms=0 latent\n[events]");
    let s = parse_scenario(&ok).unwrap();
    assert_eq!(s.events[0].kind, EventKind::Join { node: NodeId(3), neighbors: vec![NodeId(1)] });
    assert!(!s.to_sim_input().topology.has_link(NodeId(1), NodeId(3)));
}

#[test]
fn engine_keys_apply() {
    let text = MINIMAL.replace(
        "iterations = 4",
        "iterations = 4\nstrategy = stop-resume\nseed = 9\nheartbeat_interval_ms = 500\nsingle_source_barrier = false\npayload_mib = 1",
    );
    let s = parse_scenario(&text).unwrap();
    assert_eq!(s.config.strategy, Strategy::StopResume);
    assert_eq!(s.config.seed, 9);
    assert_eq!(s.config.heartbeat.interval, 500.0);
    assert!(!s.config.single_source_barrier);
    assert_eq!(s.to_sim_input().profile.payload, 1.0);
}

fn churn_text(seed: u64) -> String {
    let mut t = MINIMAL.replace("node 2 compute_ms=10", "node 2 compute_ms=10\nnode 3 compute_ms=10 standby\nnode 4 compute_ms=10 standby");
    t.push_str("link 1 3 bandwidth_mbps=100 prop_ms=0 latent\nlink 2 3 bandwidth_mbps=100 prop_ms=0 latent\n");
    t.push_str("link 2 4 bandwidth_mbps=100 prop_ms=0 latent\n");
    t.push_str(&format!("[churn]\nrate_per_s = 1\nend_ms = 20000\nseed = {seed}\n"));
    t
}

#[test]
fn churn_expands_deterministically_from_the_pool() {
    let a = parse_scenario(&churn_text(3)).unwrap();
    let b = parse_scenario(&churn_text(3)).unwrap();
    assert_eq!(a.events, b.events);
    assert!(!a.events.is_empty());
    let mut live: BTreeSet<NodeId> = BTreeSet::new();
    for e in &a.events {
        match &e.kind {
            EventKind::Join { node, neighbors } => {
                assert!(live.insert(*node), "{node} joined twice");
                assert!(neighbors.iter().all(|u| u.0 <= 2));
            }
            EventKind::Leave { node } => assert!(live.remove(node)),
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(a.events.windows(2).all(|w| w[0].at <= w[1].at));
    assert_ne!(a.with_seed(4).events, a.events);
    assert_eq!(a.with_seed(3).events, a.events);
}
