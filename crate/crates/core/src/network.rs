//! Discrete-event model of the overlay network.
//!
//! Every directed link transmits one transfer at a time in FIFO order; the
//! link is busy for `size * trans_delay_per_unit` and the data lands
//! `prop_delay` later. Distinct links run fully in parallel. Multi-hop
//! transfers are store-and-forward: a hop only starts once the previous hop
//! has fully arrived.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::cmp::Reverse;

use crate::error::{Error, Result};
use crate::model::{LinkMetrics, NodeId, NodeState, OverlayTopology, Time};
use crate::queue::EventQueue;

pub type TransferId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransferTag {
    StateShard,
    ControlMessage,
    AllReduceChunk,
    Probe,
    Heartbeat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRequest {
    pub src: NodeId,
    pub dst: NodeId,
    pub size: f64,
    pub path: Vec<NodeId>,
    pub tag: TransferTag,
}

impl TransferRequest {
    pub fn direct(src: NodeId, dst: NodeId, size: f64, tag: TransferTag) -> Self {
        Self {
            src,
            dst,
            size,
            path: vec![src, dst],
            tag,
        }
    }

    pub fn routed(path: Vec<NodeId>, size: f64, tag: TransferTag) -> Self {
        Self {
            src: path[0],
            dst: *path.last().unwrap(),
            size,
            path,
            tag,
        }
    }
}

/// Monotonic simulation clock.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now: Time,
}

impl SimClock {
    pub fn now(&self) -> Time {
        self.now
    }

    pub fn advance(&mut self, to: Time) {
        assert!(to >= self.now, "clock moved backwards: {} -> {}", self.now, to);
        self.now = to;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NetOutcome {
    /// The hop `from -> to` finished transmitting (the sender's part is done).
    HopSent {
        id: TransferId,
        from: NodeId,
        to: NodeId,
        at: Time,
    },
    Delivered {
        id: TransferId,
        at: Time,
    },
    Failed {
        id: TransferId,
        at: Time,
        link: (NodeId, NodeId),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FlightState {
    Moving,
    Delivered,
    Failed,
}

#[derive(Debug, Clone)]
struct Flight {
    req: TransferRequest,
    state: FlightState,
    delivered_at: Option<Time>,
}

#[derive(Debug, Clone)]
struct LinkState {
    metrics: LinkMetrics,
    up: bool,
    current: Option<(TransferId, usize, Time)>,
    queue: VecDeque<(TransferId, usize)>,
}

#[derive(Debug, Clone, Copy)]
enum NetEvent {
    Arrive { id: TransferId, hop: usize },
    TxDone { id: TransferId, hop: usize },
    Land { id: TransferId },
}

/// Link-level transfer simulator. The engine interleaves [`Network::step`]
/// with its own events by comparing [`Network::next_time`].
#[derive(Debug, Default)]
pub struct Network {
    links: BTreeMap<(NodeId, NodeId), LinkState>,
    flights: BTreeMap<TransferId, Flight>,
    events: EventQueue<NetEvent>,
    clock: SimClock,
    next_id: TransferId,
    down_nodes: BTreeSet<NodeId>,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    /// Network with every link of `topo`.
    pub fn from_topology(topo: &OverlayTopology) -> Self {
        let mut net = Self::new();
        for (&(a, b), &m) in &topo.links {
            net.add_directed(a, b, m);
        }
        net
    }

    pub fn now(&self) -> Time {
        self.clock.now()
    }

    pub fn add_link(&mut self, a: NodeId, b: NodeId, metrics: LinkMetrics) {
        self.add_directed(a, b, metrics);
        self.add_directed(b, a, metrics);
    }

    pub fn add_directed(&mut self, a: NodeId, b: NodeId, metrics: LinkMetrics) {
        match self.links.get_mut(&(a, b)) {
            Some(l) => {
                l.metrics = metrics;
                l.up = true;
            }
            None => {
                self.links.insert(
                    (a, b),
                    LinkState {
                        metrics,
                        up: true,
                        current: None,
                        queue: VecDeque::new(),
                    },
                );
            }
        }
    }

    /// Changes ground-truth metrics; transfers already on the wire keep
    /// their old timing.
    pub fn set_metrics(&mut self, a: NodeId, b: NodeId, metrics: LinkMetrics) {
        if let Some(l) = self.links.get_mut(&(a, b)) {
            l.metrics = metrics;
        }
    }

    pub fn metrics(&self, a: NodeId, b: NodeId) -> Option<LinkMetrics> {
        self.links.get(&(a, b)).map(|l| l.metrics)
    }

    pub fn is_up(&self, a: NodeId, b: NodeId) -> bool {
        self.links.get(&(a, b)).is_some_and(|l| l.up)
    }

    pub fn link_keys(&self) -> Vec<(NodeId, NodeId)> {
        self.links.keys().copied().collect()
    }

    pub fn submit(&mut self, req: TransferRequest, at: Time) -> Result<TransferId> {
        if req.path.len() < 2 {
            return Err(Error::InvalidPath("path needs at least two nodes".into()));
        }
        if req.path[0] != req.src || *req.path.last().unwrap() != req.dst {
            return Err(Error::InvalidPath("src/dst must be the path endpoints".into()));
        }
        for w in req.path.windows(2) {
            if !self.links.contains_key(&(w[0], w[1])) {
                return Err(Error::UnknownLink(w[0], w[1]));
            }
        }
        if req.size.is_nan() || req.size < 0.0 {
            return Err(Error::InvalidPath(format!("negative size {}", req.size)));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.flights.insert(
            id,
            Flight {
                req,
                state: FlightState::Moving,
                delivered_at: None,
            },
        );
        self.events.push(at.max(self.now()), NetEvent::Arrive { id, hop: 0 });
        Ok(id)
    }

    pub fn next_time(&self) -> Option<Time> {
        self.events.peek_time()
    }

    pub fn is_idle(&self) -> bool {
        self.events.is_empty()
    }

    /// Processes the earliest pending event.
    pub fn step(&mut self) -> Vec<NetOutcome> {
        let Some((t, ev)) = self.events.pop() else {
            return Vec::new();
        };
        self.clock.advance(t);
        let mut out = Vec::new();
        match ev {
            NetEvent::Arrive { id, hop } => self.on_arrive(id, hop, t, &mut out),
            NetEvent::TxDone { id, hop } => self.on_tx_done(id, hop, t, &mut out),
            NetEvent::Land { id } => {
                if let Some(f) = self.flights.get_mut(&id) {
                    if f.state == FlightState::Moving {
                        f.state = FlightState::Delivered;
                        f.delivered_at = Some(t);
                        out.push(NetOutcome::Delivered { id, at: t });
                    }
                }
            }
        }
        out
    }

    /// Steps until every event up to and including `t` is processed.
    pub fn advance_to(&mut self, t: Time) -> Vec<NetOutcome> {
        let mut out = Vec::new();
        while self.next_time().is_some_and(|n| n <= t) {
            out.extend(self.step());
        }
        if t > self.now() {
            self.clock.advance(t);
        }
        out
    }

    pub fn run_until_idle(&mut self) -> Vec<NetOutcome> {
        let mut out = Vec::new();
        while !self.is_idle() {
            out.extend(self.step());
        }
        out
    }

    fn on_arrive(&mut self, id: TransferId, hop: usize, t: Time, out: &mut Vec<NetOutcome>) {
        let Some(f) = self.flights.get(&id) else { return };
        if f.state != FlightState::Moving {
            return;
        }
        let key = (f.req.path[hop], f.req.path[hop + 1]);
        let up = self.links.get(&key).is_some_and(|l| l.up)
            && !self.down_nodes.contains(&key.0)
            && !self.down_nodes.contains(&key.1);
        if !up {
            self.fail_flight(id, t, key, out);
            return;
        }
        let link = self.links.get_mut(&key).unwrap();
        link.queue.push_back((id, hop));
        if link.current.is_none() {
            self.start_next(key, t);
        }
    }

    fn start_next(&mut self, key: (NodeId, NodeId), t: Time) {
        let link = self.links.get_mut(&key).unwrap();
        while let Some((id, hop)) = link.queue.pop_front() {
            let Some(f) = self.flights.get(&id) else { continue };
            if f.state != FlightState::Moving {
                continue;
            }
            let end = t + f.req.size * link.metrics.trans_delay_per_unit;
            link.current = Some((id, hop, end));
            self.events.push(end, NetEvent::TxDone { id, hop });
            return;
        }
    }

    fn on_tx_done(&mut self, id: TransferId, hop: usize, t: Time, out: &mut Vec<NetOutcome>) {
        let Some(f) = self.flights.get(&id) else { return };
        let key = (f.req.path[hop], f.req.path[hop + 1]);
        let Some(link) = self.links.get_mut(&key) else { return };
        if !matches!(link.current, Some((cid, chop, _)) if cid == id && chop == hop) {
            // stale completion of a cancelled transmission
            return;
        }
        link.current = None;
        let prop = link.metrics.prop_delay;
        let last = hop + 2 == f.req.path.len();
        if f.state == FlightState::Moving {
            out.push(NetOutcome::HopSent {
                id,
                from: key.0,
                to: key.1,
                at: t,
            });
            if last {
                self.events.push(t + prop, NetEvent::Land { id });
            } else {
                self.events.push(t + prop, NetEvent::Arrive { id, hop: hop + 1 });
            }
        }
        self.start_next(key, t);
    }

    fn fail_flight(
        &mut self,
        id: TransferId,
        t: Time,
        link: (NodeId, NodeId),
        out: &mut Vec<NetOutcome>,
    ) {
        if let Some(f) = self.flights.get_mut(&id) {
            if f.state == FlightState::Moving {
                f.state = FlightState::Failed;
                out.push(NetOutcome::Failed { id, at: t, link });
            }
        }
    }

    /// Drops whatever is transmitting or queued on `key` and frees the link.
    fn flush_link(&mut self, key: (NodeId, NodeId), t: Time, out: &mut Vec<NetOutcome>) {
        let Some(link) = self.links.get_mut(&key) else { return };
        let mut victims: Vec<TransferId> = link.queue.drain(..).map(|(id, _)| id).collect();
        if let Some((id, _, _)) = link.current.take() {
            victims.insert(0, id);
        }
        for id in victims {
            self.fail_flight(id, t, key, out);
        }
    }

    /// Marks both directions down. Transmitting and queued transfers fail
    /// now; later arrivals fail when they reach the link.
    pub fn fail_link(&mut self, a: NodeId, b: NodeId, at: Time) -> Vec<NetOutcome> {
        let mut out = self.advance_to(at);
        for key in [(a, b), (b, a)] {
            if let Some(l) = self.links.get_mut(&key) {
                l.up = false;
            }
            self.flush_link(key, at, &mut out);
        }
        out
    }

    /// Removes the link entirely (graceful disconnect).
    pub fn remove_link(&mut self, a: NodeId, b: NodeId, at: Time) -> Vec<NetOutcome> {
        let out = self.fail_link(a, b, at);
        self.links.remove(&(a, b));
        self.links.remove(&(b, a));
        out
    }

    /// Fails every undelivered transfer whose path touches `node`.
    pub fn cancel_node(&mut self, node: NodeId, at: Time) -> Vec<NetOutcome> {
        let mut out = self.advance_to(at);
        let ids: Vec<TransferId> = self
            .flights
            .iter()
            .filter(|(_, f)| f.state == FlightState::Moving && f.req.path.contains(&node))
            .map(|(&id, _)| id)
            .collect();
        for id in ids {
            let link = {
                let p = &self.flights[&id].req.path;
                let i = p.iter().position(|&n| n == node).unwrap();
                if i + 1 < p.len() { (p[i], p[i + 1]) } else { (p[i - 1], p[i]) }
            };
            self.cancel_one(id, at, link, &mut out);
        }
        out
    }

    /// Crashes `node`: its transfers fail now and later arrivals at or from
    /// it fail too.
    pub fn kill_node(&mut self, node: NodeId, at: Time) -> Vec<NetOutcome> {
        self.down_nodes.insert(node);
        self.cancel_node(node, at)
    }

    pub fn is_node_down(&self, node: NodeId) -> bool {
        self.down_nodes.contains(&node)
    }

    /// Fails one transfer (used to discard in-flight all-reduce traffic).
    pub fn cancel(&mut self, id: TransferId, at: Time) -> Vec<NetOutcome> {
        let mut out = self.advance_to(at);
        if let Some(f) = self.flights.get(&id) {
            let link = (f.req.path[0], f.req.path[1]);
            self.cancel_one(id, at, link, &mut out);
        }
        out
    }

    fn cancel_one(&mut self, id: TransferId, at: Time, link: (NodeId, NodeId), out: &mut Vec<NetOutcome>) {
        let mut freed = Vec::new();
        for (&key, l) in self.links.iter_mut() {
            l.queue.retain(|&(q, _)| q != id);
            if matches!(l.current, Some((c, _, _)) if c == id) {
                l.current = None;
                freed.push(key);
            }
        }
        self.fail_flight(id, at, link, out);
        for key in freed {
            self.start_next(key, at);
        }
    }

    pub fn request(&self, id: TransferId) -> Option<&TransferRequest> {
        self.flights.get(&id).map(|f| &f.req)
    }

    pub fn delivered_at(&self, id: TransferId) -> Option<Time> {
        self.flights.get(&id).and_then(|f| f.delivered_at)
    }

    /// Time at which the directed link would finish everything already
    /// handed to it, ignoring transfers still upstream.
    pub fn backlog_until(&self, a: NodeId, b: NodeId) -> Time {
        let Some(l) = self.links.get(&(a, b)) else {
            return self.now();
        };
        let mut t = l.current.map_or(self.now(), |(_, _, end)| end);
        for &(id, _) in &l.queue {
            if let Some(f) = self.flights.get(&id) {
                t += f.req.size * l.metrics.trans_delay_per_unit;
            }
        }
        t
    }

    /// Transfers currently transmitting on some link.
    pub fn busy_links(&self) -> BTreeSet<(NodeId, NodeId)> {
        self.links
            .iter()
            .filter(|(_, l)| l.current.is_some())
            .map(|(&k, _)| k)
            .collect()
    }

    /// Queue lengths per link, for work-conservation checks.
    pub fn has_waiting_on_idle_link(&self) -> bool {
        self.links
            .values()
            .any(|l| l.current.is_none() && !l.queue.is_empty())
    }
}

/// `prop + size * trans` over one direct link.
pub fn direct_transfer_delay(link: &LinkMetrics, size: f64) -> Time {
    link.prop_delay + size * link.trans_delay_per_unit
}

/// Store-and-forward delay of `size` along `path` on idle links.
pub fn path_delay(topo: &OverlayTopology, path: &[NodeId], size: f64) -> Option<Time> {
    path.windows(2)
        .map(|w| topo.link(w[0], w[1]).map(|m| direct_transfer_delay(m, size)))
        .sum()
}

/// Minimum store-and-forward route for `size` units. Intermediate hops must
/// be Active nodes. Equal-delay routes resolve to the lexicographically
/// smallest path.
pub fn shortest_path(
    topo: &OverlayTopology,
    src: NodeId,
    dst: NodeId,
    size: f64,
) -> Result<(Vec<NodeId>, Time)> {
    if !topo.nodes.contains_key(&src) {
        return Err(Error::UnknownNode(src));
    }
    if !topo.nodes.contains_key(&dst) {
        return Err(Error::UnknownNode(dst));
    }
    if src == dst {
        return Err(Error::InvalidPath("src equals dst".into()));
    }
    let relay_ok = |n: NodeId| {
        n == dst || topo.node(n).is_some_and(|i| i.state == NodeState::Active)
    };
    let tol = |d: f64| 1e-9 * d.abs().max(1.0);
    let mut best: BTreeMap<NodeId, (Time, Vec<NodeId>)> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    best.insert(src, (0.0, vec![src]));
    heap.push(Reverse((OrdTime(0.0), vec![src])));
    while let Some(Reverse((OrdTime(d), path))) = heap.pop() {
        let u = *path.last().unwrap();
        if best.get(&u).is_some_and(|(bd, bp)| *bd < d - tol(d) || (*bd <= d + tol(d) && *bp < path)) {
            continue;
        }
        if u == dst {
            return Ok((path, d));
        }
        for (&(a, b), m) in topo.links.range((u, NodeId(0))..=(u, NodeId(u32::MAX))) {
            debug_assert_eq!(a, u);
            if path.contains(&b) || !relay_ok(b) {
                continue;
            }
            let nd = d + direct_transfer_delay(m, size);
            let mut np = path.clone();
            np.push(b);
            let better = match best.get(&b) {
                None => true,
                Some((bd, bp)) => nd < *bd - tol(nd) || (nd <= *bd + tol(nd) && np < *bp),
            };
            if better {
                best.insert(b, (nd, np.clone()));
                heap.push(Reverse((OrdTime(nd), np)));
            }
        }
    }
    Err(Error::NoRoute { src, dst })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdTime(f64);

impl Eq for OrdTime {}

impl PartialOrd for OrdTime {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdTime {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Submits one transfer and runs the network until it lands.
pub fn schedule_transfer(net: &mut Network, req: TransferRequest, start: Time) -> Result<Time> {
    let id = net.submit(req, start)?;
    loop {
        if net.is_idle() {
            return Err(Error::Engine {
                time: net.now(),
                msg: format!("transfer {id} never completed"),
            });
        }
        for o in net.step() {
            match o {
                NetOutcome::Delivered { id: d, at } if d == id => return Ok(at),
                NetOutcome::Failed { id: d, at, link } if d == id => {
                    return Err(Error::TransferFailed { id, a: link.0, b: link.1, at })
                }
                _ => {}
            }
        }
    }
}

/// Completion time of the slowest transfer in the set.
pub fn coflow_completion(net: &mut Network, transfers: Vec<TransferRequest>, start: Time) -> Result<Time> {
    let ids: BTreeSet<TransferId> = transfers
        .into_iter()
        .map(|r| net.submit(r, start))
        .collect::<Result<_>>()?;
    let mut pending = ids.clone();
    let mut last = start;
    while !pending.is_empty() {
        if net.is_idle() {
            return Err(Error::Engine {
                time: net.now(),
                msg: "coflow stalled".into(),
            });
        }
        for o in net.step() {
            match o {
                NetOutcome::Delivered { id, at } if pending.remove(&id) => last = last.max(at),
                NetOutcome::Failed { id, at, link } if ids.contains(&id) => {
                    return Err(Error::TransferFailed { id, a: link.0, b: link.1, at })
                }
                _ => {}
            }
        }
    }
    Ok(last)
}
