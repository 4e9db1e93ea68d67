use chaos_core::engine::{RunOutput, Strategy};
use chaos_core::monitor::MonitorEvent;
use chaos_core::negotiator::MessageKind;
use chaos_core::scenario::parse_scenario;

use crate::cluster::run;
use crate::Outcome;

const BASE: &str = "[engine]
iterations = 6
payload_mib = 1
[model]
tensor a = 4
tensor b = 4
[nodes]
node 1 compute_ms=100
node 2 compute_ms=100
node 3 compute_ms=100
node 4 compute_ms=100 standby
[links]
link 1 2 bandwidth_mbps=800 prop_ms=0.5
link 2 3 bandwidth_mbps=800 prop_ms=0.5
link 1 3 bandwidth_mbps=800 prop_ms=0.5
link 1 4 bandwidth_mbps=800 prop_ms=0.5 latent
link 2 4 bandwidth_mbps=800 prop_ms=0.5 latent
[events]
";

fn simulate(events: &str) -> RunOutput {
    run(&parse_scenario(&format!("{BASE}{events}")).unwrap(), Strategy::MultiNeighbor)
}

/// `src -> dst Kind` per message.
fn flow(out: &RunOutput) -> Vec<String> {
    out.trace
        .iter()
        .map(|m| {
            let line = m.trace_line();
            line.split(' ').skip(1).take(4).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

fn at_boundary(out: &RunOutput, t: f64) -> bool {
    out.iterations.iter().any(|it| it.boundary == t)
}

fn times_of(out: &RunOutput, kind: MessageKind) -> Vec<f64> {
    out.trace.iter().filter(|m| m.kind == kind).map(|m| m.at).collect()
}

const JOIN_VIA_1_2: [&str; 12] = [
    "n4 -> S JoinRequest",
    "S -> n1 ConnectCmd",
    "S -> n2 ConnectCmd",
    "n1 -> S Ack",
    "n2 -> S Ack",
    "S -> n4 ReplicationPolicy",
    "S -> n1 ReplicationPolicy",
    "S -> n2 ReplicationPolicy",
    "S -> n1 SyncPolicyUpdate",
    "S -> n2 SyncPolicyUpdate",
    "S -> n3 SyncPolicyUpdate",
    "S -> n4 SyncPolicyUpdate",
];

struct Check {
    failures: Vec<String>,
    passed: usize,
}

impl Check {
    fn expect(&mut self, what: &str, ok: bool) {
        if ok {
            self.passed += 1;
        } else {
            self.failures.push(what.to_string());
        }
    }

    fn sequence(&mut self, what: &str, got: &[String], want: &[&str]) {
        let ok = got.len() == want.len() && got.iter().zip(want).all(|(g, w)| g == w);
        if !ok {
            self.failures.push(format!("{what}: got {got:?}"));
        } else {
            self.passed += 1;
        }
    }
}

pub fn conformance() -> Outcome {
    let mut c = Check { failures: Vec::new(), passed: 0 };

    // add node 4 then remove it
    let a = simulate("at 10 join 4 neighbors=1,2\nat 400 leave 4\n");
    let mut want: Vec<&str> = JOIN_VIA_1_2.to_vec();
    want.extend([
        "n4 -> S LeaveRequest",
        "S -> n1 DisconnectCmd",
        "S -> n2 DisconnectCmd",
        "S -> n1 SyncPolicyUpdate",
        "S -> n2 SyncPolicyUpdate",
        "S -> n3 SyncPolicyUpdate",
        "n1 -> S Ack",
        "n2 -> S Ack",
    ]);
    c.sequence("add/remove node", &flow(&a), &want);
    let commits: Vec<f64> = times_of(&a, MessageKind::SyncPolicyUpdate);
    c.expect("add/remove node: policy updates at iteration boundaries", commits.iter().all(|&t| at_boundary(&a, t)));
    c.expect(
        "add/remove node: replication policy dispatched at the commit boundary",
        times_of(&a, MessageKind::ReplicationPolicy).iter().all(|&t| at_boundary(&a, t)),
    );

    // add link (1,4) then remove link (2,4)
    let b = simulate("at 10 join 4 neighbors=2\nat 400 connect-link 1 4\nat 700 disconnect-link 2 4\n");
    let want = [
        "n4 -> S JoinRequest",
        "S -> n2 ConnectCmd",
        "n2 -> S Ack",
        "S -> n4 ReplicationPolicy",
        "S -> n2 ReplicationPolicy",
        "S -> n1 SyncPolicyUpdate",
        "S -> n2 SyncPolicyUpdate",
        "S -> n3 SyncPolicyUpdate",
        "S -> n4 SyncPolicyUpdate",
        "n1 -> S LinkJoinRequest",
        "S -> n1 ConnectCmd",
        "S -> n4 ConnectCmd",
        "n1 -> S Ack",
        "n4 -> S Ack",
        "S -> n1 SyncPolicyUpdate",
        "S -> n2 SyncPolicyUpdate",
        "S -> n3 SyncPolicyUpdate",
        "S -> n4 SyncPolicyUpdate",
        "n2 -> S LinkLeaveRequest",
        "S -> n2 DisconnectCmd",
        "S -> n4 DisconnectCmd",
        "S -> n1 SyncPolicyUpdate",
        "S -> n2 SyncPolicyUpdate",
        "S -> n3 SyncPolicyUpdate",
        "S -> n4 SyncPolicyUpdate",
        "n2 -> S Ack",
        "n4 -> S Ack",
    ];
    c.sequence("add/remove link", &flow(&b), &want);
    c.expect(
        "add/remove link: every policy update at a boundary",
        times_of(&b, MessageKind::SyncPolicyUpdate).iter().all(|&t| at_boundary(&b, t)),
    );
    c.expect(
        "add/remove link: disconnect at a boundary",
        times_of(&b, MessageKind::DisconnectCmd).iter().all(|&t| at_boundary(&b, t)),
    );
    c.expect(
        "add/remove link: final overlay has 1-4 and not 2-4",
        b.final_topology.has_link(chaos_core::model::NodeId(1), chaos_core::model::NodeId(4))
            && !b.final_topology.has_link(chaos_core::model::NodeId(2), chaos_core::model::NodeId(4)),
    );

    // node 3 crashes mid-iteration; heartbeats (2000ms, 3 misses) detect it
    let f = simulate("at 10 join 4 neighbors=1,2\nat 405 fail-node 3\n");
    let mut want: Vec<&str> = JOIN_VIA_1_2.to_vec();
    want.extend([
        "S -> n1 DisconnectCmd",
        "S -> n2 DisconnectCmd",
        "S -> n1 SyncPolicyUpdate",
        "S -> n2 SyncPolicyUpdate",
        "S -> n4 SyncPolicyUpdate",
        "S -> n1 RestartAllReduce",
        "S -> n2 RestartAllReduce",
        "S -> n4 RestartAllReduce",
        "n1 -> S Ack",
        "n2 -> S Ack",
    ]);
    c.sequence("node failure", &flow(&f), &want);
    let detections: Vec<f64> = f
        .monitor_log
        .iter()
        .filter_map(|e| match e {
            MonitorEvent::NodeFailure { at, .. } => Some(*at),
            _ => None,
        })
        .collect();
    c.expect("node failure: detected exactly once at 8000ms", detections == [8000.0]);
    c.expect(
        "node failure: restart broadcast at detection, not at a boundary",
        times_of(&f, MessageKind::RestartAllReduce).iter().all(|&t| t == 8000.0),
    );
    c.expect("node failure: one restarted iteration", f.iterations.iter().map(|i| i.restarts).sum::<u32>() == 1);
    let row = f.records.iter().find(|r| r.primitive == "fail-node");
    c.expect("node failure: scale-in row recorded", row.is_some_and(|r| r.time == 405.0));
    c.expect(
        "node failure: survivors share one policy version",
        f.final_policy.consistent_with(&f.final_topology) && f.final_policy.version == 2,
    );

    let detail = format!(
        "{} checks passed over add/remove node, add/remove link and heartbeat-detected failure{}",
        c.passed,
        if c.failures.is_empty() { String::new() } else { format!("; failed: {}", c.failures.join(" | ")) }
    );
    Outcome::new(c.failures.is_empty(), detail)
}
