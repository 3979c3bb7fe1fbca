//! Greedy best-first routing over the hierarchical tables.
//!
//! A hop is scored `f = g + h`: `g` is the measured latency to the candidate
//! and `h` estimates the remaining latency from the candidate to the
//! target's cell using the adjacency matrices. Only candidates that strictly
//! reduce `(levels unshared with the target, clockwise distance)` are
//! eligible, which makes every delivered path loop-free.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{cluster_path, ClusterPath};
use crate::dht::{candidates, FingerEntry, NodeId, NodeState, Overlay};
use crate::geokey::{GeoPoint, RingKey};

/// Epochs an adjacency or cache entry stays usable.
pub const STALENESS_WINDOW: u64 = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouteError {
    #[error("no delivery within {0} hops")]
    TtlExceeded(usize),
    #[error("node {0} has no live candidate")]
    RoutingStuck(usize),
    #[error("node {0} is not live")]
    DeadSource(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub g: f64,
    pub h: f64,
}

impl PathEstimate {
    pub fn f(&self) -> f64 {
        self.g + self.h
    }
}

/// Precomputed facts about a lookup target.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub key: RingKey,
    pub path: ClusterPath,
    pub center: GeoPoint,
}

impl Target {
    pub fn new(ov: &Overlay, key: RingKey) -> Self {
        let center = key.cell_center(ov.config.side);
        Self {
            key,
            path: cluster_path(&ov.tree, &center),
            center,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub hop: usize,
    pub key: RingKey,
    pub g: f64,
    pub h: f64,
    pub f: f64,
    pub link_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub hops: Vec<NodeId>,
    /// `link_latencies[i]` is the latency from `hops[i]` to `hops[i+1]`.
    pub link_latencies: Vec<f64>,
    pub total_latency: f64,
    pub trace: Vec<TraceRecord>,
}

impl Path {
    pub fn hop_count(&self) -> usize {
        self.hops.len() - 1
    }

    pub fn destination(&self) -> &NodeId {
        self.hops.last().expect("paths are nonempty")
    }

    /// Trace as CSV: `hop,key,g,h,f,link_latency`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("hop,key,g,h,f,link_latency\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.hop,
                r.key.to_hex(),
                r.g,
                r.h,
                r.f,
                r.link_latency
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteOptions {
    /// Hop limit; `None` means `4·ceil(log₂N)`.
    pub ttl: Option<usize>,
    /// Cost per level still unshared with the target, added to `f`.
    pub path_weight: f64,
    /// Fold link samples into indicators and matrices.
    pub record: bool,
    pub trace: bool,
}

impl Default for RouteOptions {
    fn default() -> Self {
        Self {
            ttl: None,
            path_weight: 0.0,
            record: true,
            trace: false,
        }
    }
}

pub fn default_ttl(n: usize) -> usize {
    let lg = if n <= 1 { 0 } else { (n as f64).log2().ceil() as usize };
    (4 * lg).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hop {
    Terminal,
    Next { entry: FingerEntry, estimate: PathEstimate },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopDecision {
    pub hop: Hop,
    /// Entries found dead while choosing.
    pub dead: Vec<u64>,
}

/// Whether `node` is responsible for `key`: `key ∈ (predecessor, self]`.
pub fn owns(node: &NodeState, key: &RingKey) -> bool {
    let own = node.id.key;
    if *key == own {
        return true;
    }
    if node.table.successors.is_empty() && node.table.predecessor.is_none() {
        return true;
    }
    match &node.table.predecessor {
        Some(p) => p.peer.key != own && key.in_arc(&p.peer.key, &own),
        None => false,
    }
}

fn unshared(path: &ClusterPath, target: &ClusterPath) -> usize {
    target.depth() - path.shared_prefix_len(target).min(target.depth())
}

/// Remaining-latency estimate from `candidate` to the target cell.
pub fn heuristic(ov: &Overlay, node: &NodeState, candidate: &FingerEntry, target: &Target) -> f64 {
    if candidate.peer.key == target.key {
        return 0.0;
    }
    let dist = candidate.peer.position.distance(&target.center);
    dist / effective_velocity(ov, node, &candidate.peer.cluster_path, &target.path)
}

/// Velocity implied by the adjacency entry between two clusters at the
/// deepest level both resolve to, or the global mean when unknown.
pub fn effective_velocity(ov: &Overlay, node: &NodeState, a: &ClusterPath, b: &ClusterPath) -> f64 {
    let fallback = ov.link.field.mean_velocity();
    let depth = a.depth().min(b.depth());
    if depth == 0 || a.truncated(depth) == b.truncated(depth) {
        return fallback;
    }
    let Some(matrix) = node.matrices.get(depth) else {
        return fallback;
    };
    let k = ov.config.k;
    let (p, q) = (a.index_at(depth, k), b.index_at(depth, k));
    match matrix.get(p, q) {
        Some(e) if ov.epoch.saturating_sub(e.epoch) <= STALENESS_WINDOW && e.latency > 0.0 => {
            let ca = ov.tree.centroid(&a.truncated(depth));
            let cb = ov.tree.centroid(&b.truncated(depth));
            let d = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
            if d > 0.0 {
                d / e.latency
            } else {
                fallback
            }
        }
        _ => fallback,
    }
}

/// Choose the next hop from `at` toward `target`.
pub fn next_hop(ov: &Overlay, at: usize, target: &Target, opts: &RouteOptions) -> Result<HopDecision, RouteError> {
    let node = &ov.nodes[at];
    if !node.alive {
        return Err(RouteError::DeadSource(at));
    }
    if owns(node, &target.key) {
        return Ok(HopDecision {
            hop: Hop::Terminal,
            dead: Vec::new(),
        });
    }
    let here = (unshared(&node.id.cluster_path, &target.path), node.id.key.clockwise_to(&target.key));
    let mut dead = Vec::new();
    // Candidates arrive deepest tier first; only the deepest reachable tier
    // competes on f.
    let mut eligible: Vec<(FingerEntry, (usize, u64))> = Vec::new();
    for c in candidates(&node.table, &target.key, &target.path) {
        if !ov.is_alive(c.peer.addr) {
            dead.push(c.peer.key.value());
            continue;
        }
        let there = (unshared(&c.peer.cluster_path, &target.path), c.peer.key.clockwise_to(&target.key));
        if there >= here || eligible.first().is_some_and(|(_, t)| there.0 > t.0) {
            continue;
        }
        eligible.push((c, there));
    }
    // Inside the target's cluster, insist on halving the remaining arc when
    // the table allows it, so the final approach is logarithmic.
    if eligible.first().is_some_and(|(_, t)| t.0 == here.0) && eligible.iter().any(|(_, t)| t.1 <= here.1 / 2) {
        eligible.retain(|(_, t)| t.1 <= here.1 / 2);
    }
    let mut best: Option<(f64, f64, u64, FingerEntry, PathEstimate)> = None;
    for (c, there) in eligible {
        let estimate = PathEstimate {
            g: c.indicators.latency_ewma,
            h: heuristic(ov, node, &c, target),
        };
        let f = estimate.f() + opts.path_weight * there.0 as f64;
        let tau = ov.pheromone.get(node.id.key.value(), c.peer.key.value());
        let better = match &best {
            None => true,
            Some((bf, btau, bkey, _, _)) => {
                f < *bf || (f == *bf && (tau > *btau || (tau == *btau && c.peer.key.value() < *bkey)))
            }
        };
        if better {
            best = Some((f, tau, c.peer.key.value(), c, estimate));
        }
    }
    if let Some((_, _, _, entry, estimate)) = best {
        return Ok(HopDecision {
            hop: Hop::Next { entry, estimate },
            dead,
        });
    }
    for s in &node.table.successors {
        if ov.is_alive(s.peer.addr) {
            let estimate = PathEstimate {
                g: s.indicators.latency_ewma,
                h: heuristic(ov, node, s, target),
            };
            return Ok(HopDecision {
                hop: Hop::Next {
                    entry: s.clone(),
                    estimate,
                },
                dead,
            });
        }
        dead.push(s.peer.key.value());
    }
    Err(RouteError::RoutingStuck(at))
}

/// Addresses visited by a side-effect-free lookup.
pub fn lookup(ov: &Overlay, src: usize, key: &RingKey) -> Result<Vec<usize>, RouteError> {
    let target = Target::new(ov, *key);
    let opts = RouteOptions {
        record: false,
        ..RouteOptions::default()
    };
    let ttl = default_ttl(ov.live_count().max(1));
    let mut hops = vec![src];
    let mut at = src;
    loop {
        match next_hop(ov, at, &target, &opts)?.hop {
            Hop::Terminal => return Ok(hops),
            Hop::Next { entry, .. } => {
                if hops.len() > ttl {
                    return Err(RouteError::TtlExceeded(ttl));
                }
                at = entry.peer.addr;
                hops.push(at);
            }
        }
    }
}

/// Route from `src` to the owner of `key`, sampling real link latencies.
pub fn route<R: Rng + ?Sized>(
    ov: &mut Overlay,
    src: usize,
    key: &RingKey,
    opts: &RouteOptions,
    rng: &mut R,
) -> Result<Path, RouteError> {
    if !ov.is_alive(src) {
        return Err(RouteError::DeadSource(src));
    }
    let target = Target::new(ov, *key);
    let ttl = opts.ttl.unwrap_or_else(|| default_ttl(ov.live_count()));
    let mut path = Path {
        hops: vec![ov.nodes[src].id.clone()],
        link_latencies: Vec::new(),
        total_latency: 0.0,
        trace: Vec::new(),
    };
    if opts.record {
        let flow = crate::dht::FlowRecord {
            target: *key,
            target_point: target.center,
            weight: 1.0,
        };
        ov.nodes[src].record_flow(flow);
    }
    let mut at = src;
    let mut g_total = 0.0;
    loop {
        let decision = next_hop(ov, at, &target, opts)?;
        if opts.record {
            for k in &decision.dead {
                ov.nodes[at].table.for_peer(*k, |e| e.indicators.update(0.0, false));
            }
        }
        let (entry, estimate) = match decision.hop {
            Hop::Terminal => break,
            Hop::Next { entry, estimate } => (entry, estimate),
        };
        if path.link_latencies.len() >= ttl {
            return Err(RouteError::TtlExceeded(ttl));
        }
        let next = entry.peer.addr;
        let (a, b) = (ov.nodes[at].id.position, ov.nodes[next].id.position);
        let lat = ov.link.latency(&a, &b, rng);
        if opts.record {
            record_sample(ov, at, next, lat);
        }
        if opts.trace {
            path.trace.push(TraceRecord {
                hop: path.link_latencies.len() + 1,
                key: entry.peer.key,
                g: g_total + estimate.g,
                h: estimate.h,
                f: g_total + estimate.f(),
                link_latency: lat,
            });
        }
        g_total += lat;
        path.link_latencies.push(lat);
        path.total_latency += lat;
        debug_assert!(path.hops.iter().all(|h| h.addr != next), "routing loop");
        path.hops.push(ov.nodes[next].id.clone());
        at = next;
    }
    if opts.record && path.hop_count() > 0 && path.total_latency > 0.0 {
        let keys: Vec<u64> = path.hops.iter().map(|h| h.key.value()).collect();
        ov.pheromone.reinforce(&keys, path.total_latency);
        let src_path = ov.nodes[src].id.cluster_path.clone();
        let dst_path = path.destination().cluster_path.clone();
        let level = src_path.shared_prefix_len(&dst_path) + 1;
        if level <= src_path.depth().min(dst_path.depth()) {
            let k = ov.config.k;
            let epoch = ov.epoch;
            let (p, q) = (src_path.index_at(level, k), dst_path.index_at(level, k));
            ov.nodes[src].cache.put(p, q, level, path.total_latency, epoch);
        }
    }
    Ok(path)
}

/// Fold one observed link latency into `at`'s indicators and matrices.
///
/// Matrix samples are rescaled to centroid distance so that
/// `centroid distance / c_pq` recovers the observed velocity.
pub fn record_sample(ov: &mut Overlay, at: usize, peer: usize, latency: f64) {
    let epoch = ov.epoch;
    let k = ov.config.k;
    let peer_key = ov.nodes[peer].id.key.value();
    let (pa, pb) = (ov.nodes[at].id.position, ov.nodes[peer].id.position);
    let a = ov.nodes[at].id.cluster_path.clone();
    let b = ov.nodes[peer].id.cluster_path.clone();
    ov.nodes[at].table.for_peer(peer_key, |e| e.indicators.update(latency, true));
    let span = pa.distance(&pb);
    if span <= 1e-9 {
        return;
    }
    let shared = a.shared_prefix_len(&b);
    for depth in (shared + 1)..=a.depth().min(b.depth()) {
        let ca = ov.tree.centroid(&a.truncated(depth));
        let cb = ov.tree.centroid(&b.truncated(depth));
        let d = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
        let sample = latency * d / span;
        let (p, q) = (a.index_at(depth, k), b.index_at(depth, k));
        if let Some(m) = ov.nodes[at].matrices.get_mut(depth) {
            m.update(p, q, sample, epoch);
        }
    }
}

/// Trail strengths on directed overlay edges, keyed by peer keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PheromoneTable {
    pub rho: f64,
    pub q: f64,
    trails: BTreeMap<(u64, u64), f64>,
}

impl Default for PheromoneTable {
    fn default() -> Self {
        Self::new(0.1, 100.0)
    }
}

impl PheromoneTable {
    pub fn new(rho: f64, q: f64) -> Self {
        Self {
            rho,
            q,
            trails: BTreeMap::new(),
        }
    }

    pub fn get(&self, from: u64, to: u64) -> f64 {
        self.trails.get(&(from, to)).copied().unwrap_or(0.0)
    }

    /// `τ ← (1−ρ)·τ + Q/L` on every edge of `path`.
    pub fn reinforce(&mut self, path: &[u64], observed_latency: f64) {
        if !(observed_latency > 0.0) {
            return;
        }
        let deposit = self.q / observed_latency;
        for w in path.windows(2) {
            let t = self.trails.entry((w[0], w[1])).or_insert(0.0);
            *t = (1.0 - self.rho) * *t + deposit;
        }
    }

    /// Once per epoch.
    pub fn evaporate(&mut self) {
        let keep = 1.0 - self.rho;
        self.trails.retain(|_, t| {
            *t *= keep;
            *t > 1e-12
        });
    }

    pub fn len(&self) -> usize {
        self.trails.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trails.is_empty()
    }
}

/// `reinforce` in free-function form.
pub fn reinforce(pheromone: &mut PheromoneTable, path: &Path, observed_latency: f64) {
    let keys: Vec<u64> = path.hops.iter().map(|h| h.key.value()).collect();
    pheromone.reinforce(&keys, observed_latency);
}

/// Estimated path weights between cluster pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteCache {
    pub window: u64,
    #[serde(skip)]
    entries: HashMap<(u64, u64, usize), (f64, u64)>,
}

impl Default for RouteCache {
    fn default() -> Self {
        Self::new(STALENESS_WINDOW)
    }
}

impl RouteCache {
    pub fn new(window: u64) -> Self {
        Self {
            window,
            entries: HashMap::new(),
        }
    }

    pub fn put(&mut self, src_cluster: u64, dst_cluster: u64, level: usize, value: f64, epoch: u64) {
        self.entries.insert((src_cluster, dst_cluster, level), (value, epoch));
    }

    pub fn get(&self, src_cluster: u64, dst_cluster: u64, level: usize, now: u64) -> Option<f64> {
        let &(value, epoch) = self.entries.get(&(src_cluster, dst_cluster, level))?;
        (now >= epoch && now - epoch <= self.window).then_some(value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Expected latency along a hop sequence.
pub fn path_expected_latency(ov: &Overlay, hops: &[usize]) -> f64 {
    hops.windows(2)
        .map(|w| ov.link.expected_latency(&ov.nodes[w[0]].id.position, &ov.nodes[w[1]].id.position))
        .sum()
}

/// Shortest expected latency from `src` to every node over the directed
/// graph of live routing-table links. Unreachable nodes get `INFINITY`.
pub fn optimal_latencies(ov: &Overlay, src: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; ov.nodes.len()];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Reverse((OrdF64(0.0), src)));
    while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        let from = &ov.nodes[u];
        for e in from.table.entries() {
            let v = e.peer.addr;
            if !ov.is_alive(v) {
                continue;
            }
            let nd = d + ov.link.expected_latency(&from.id.position, &ov.nodes[v].id.position);
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse((OrdF64(nd), v)));
            }
        }
    }
    dist
}

#[derive(PartialEq)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
