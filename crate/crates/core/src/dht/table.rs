use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FingerEntry, NodeId};
use crate::cluster::ClusterPath;
use crate::geokey::{GeoPoint, RingKey};
use crate::nettest::LinkModel;

/// Fingers allowed in bucket `i`: `ceil(i·log₂k)`.
pub fn level_capacity(k: usize, i: usize) -> usize {
    if i == 0 || k < 2 {
        return 0;
    }
    let exact = i as f64 * (k as f64).log2();
    (exact - 1e-9).ceil().max(0.0) as usize
}

/// Total finger bound `Σ_{i=0}^{h} ceil(i·log₂k)`.
pub fn finger_capacity(k: usize, h: usize) -> usize {
    (0..=h).map(|i| level_capacity(k, i)).sum()
}

/// Structural sizes of a routing table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableShape {
    pub k: usize,
    pub h: usize,
    /// Neighborhood size `M`.
    pub neighborhood: usize,
    /// Successor list length `s`.
    pub successors: usize,
}

impl TableShape {
    /// Successor list length for a network of `n` nodes: `max(3, ceil(log₂n))`.
    pub fn successors_for(n: usize) -> usize {
        let lg = if n <= 1 { 0 } else { (n as f64).log2().ceil() as usize };
        lg.max(3)
    }

    pub fn finger_bound(&self) -> usize {
        finger_capacity(self.k, self.h)
    }

    pub fn entry_bound(&self) -> usize {
        self.finger_bound() + self.neighborhood + self.successors
    }

    /// Number of finger slots in the widest bucket.
    pub fn max_slots(&self) -> usize {
        level_capacity(self.k, self.h)
    }

    /// Leading slots of each bucket that point into sibling clusters:
    /// `ceil(log₂k)`, the whole of bucket 1.
    pub fn sibling_slots(&self) -> usize {
        level_capacity(self.k, 1).max(1)
    }
}

/// Tunable knobs of table construction; this is what the swarm optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableParams {
    /// Ring fraction of slot `j` inside every bucket, each in `[0, 1)`.
    pub slot_fractions: Vec<f64>,
    /// Pull of the neighborhood toward `neighbor_bias`, in latency units per
    /// latency unit of distance.
    pub neighbor_weight: f64,
    pub neighbor_bias: Option<GeoPoint>,
}

impl TableParams {
    /// Sibling slots evenly spread over the sibling ring starting at the
    /// first sibling clockwise; the remaining slots at `1/2, 1/4, …` of the
    /// owner's own cluster ring.
    pub fn geographic(slots: usize, sibling_slots: usize) -> Self {
        let b = sibling_slots.max(1);
        let slot_fractions = (0..slots)
            .map(|j| {
                if j < b {
                    j as f64 / b as f64
                } else {
                    0.5f64.powi((j - b + 1) as i32)
                }
            })
            .collect();
        Self {
            slot_fractions,
            neighbor_weight: 0.0,
            neighbor_bias: None,
        }
    }

    pub fn for_shape(shape: &TableShape) -> Self {
        Self::geographic(shape.max_slots(), shape.sibling_slots())
    }
}

/// Live-membership view used when building tables.
#[derive(Debug, Clone, Default)]
pub struct Directory {
    entries: Vec<NodeId>,
    keys: Vec<u64>,
    by_prefix: HashMap<ClusterPath, Vec<usize>>,
    by_addr: HashMap<usize, usize>,
}

impl Directory {
    pub fn new(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        let mut entries: Vec<NodeId> = nodes.into_iter().collect();
        entries.sort_by_key(|n| (n.key.value(), n.addr));
        entries.dedup_by_key(|n| n.key.value());
        let keys = entries.iter().map(|n| n.key.value()).collect();
        let mut by_prefix: HashMap<ClusterPath, Vec<usize>> = HashMap::new();
        let mut by_addr = HashMap::with_capacity(entries.len());
        for (i, n) in entries.iter().enumerate() {
            by_addr.insert(n.addr, i);
            for d in 0..=n.cluster_path.depth() {
                by_prefix.entry(n.cluster_path.truncated(d)).or_default().push(i);
            }
        }
        Self {
            entries,
            keys,
            by_prefix,
            by_addr,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Live nodes in key order.
    pub fn entries(&self) -> &[NodeId] {
        &self.entries
    }

    pub fn get(&self, addr: usize) -> Option<&NodeId> {
        self.by_addr.get(&addr).map(|&i| &self.entries[i])
    }

    /// Indices (key order) of the members of cluster `prefix`.
    pub fn members(&self, prefix: &ClusterPath) -> &[usize] {
        self.by_prefix.get(prefix).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Index of the first entry at or clockwise after `key`.
    pub fn owner_index(&self, key: u64) -> Option<usize> {
        if self.entries.is_empty() {
            return None;
        }
        let i = self.keys.partition_point(|&k| k < key);
        Some(if i == self.keys.len() { 0 } else { i })
    }

    /// The node responsible for `key`: first live key clockwise, inclusive.
    pub fn owner(&self, key: &RingKey) -> Option<&NodeId> {
        self.owner_index(key.value()).map(|i| &self.entries[i])
    }

    /// Members of `C_{i-1}(x)` outside `C_i(x)`, in key order.
    pub(crate) fn sibling_ring(&self, own: &ClusterPath, level: usize) -> Vec<usize> {
        if own.depth() < level {
            return Vec::new();
        }
        let digit = own.digits()[level - 1];
        self.members(&own.truncated(level - 1))
            .iter()
            .copied()
            .filter(|&i| {
                let p = &self.entries[i].cluster_path;
                p.depth() < level || p.digits()[level - 1] != digit
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub owner: NodeId,
    pub shape: TableShape,
    pub params: TableParams,
    /// `h + 1` buckets; bucket 0 stays empty.
    pub levels: Vec<Vec<FingerEntry>>,
    pub neighbors: Vec<FingerEntry>,
    /// Sorted by clockwise distance from the owner.
    pub successors: Vec<FingerEntry>,
    pub predecessor: Option<FingerEntry>,
    /// Next bucket refreshed by stabilization.
    pub refresh_cursor: usize,
}

impl RoutingTable {
    pub fn empty(owner: NodeId, shape: TableShape, params: TableParams) -> Self {
        Self {
            owner,
            shape,
            params,
            levels: vec![Vec::new(); shape.h + 1],
            neighbors: Vec::new(),
            successors: Vec::new(),
            predecessor: None,
            refresh_cursor: 1,
        }
    }

    pub fn finger_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn total_entries(&self) -> usize {
        self.finger_count() + self.neighbors.len() + self.successors.len()
    }

    /// First successor, or the owner itself in a one-node ring.
    pub fn successor(&self) -> &NodeId {
        self.successors.first().map(|e| &e.peer).unwrap_or(&self.owner)
    }

    /// Fingers, then neighbors, then successors.
    pub fn entries(&self) -> impl Iterator<Item = &FingerEntry> {
        self.levels
            .iter()
            .flatten()
            .chain(&self.neighbors)
            .chain(&self.successors)
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut FingerEntry> {
        self.levels
            .iter_mut()
            .flatten()
            .chain(self.neighbors.iter_mut())
            .chain(self.successors.iter_mut())
            .chain(self.predecessor.iter_mut())
    }

    /// Apply `f` to every copy of the entry for `peer_key`.
    pub fn for_peer(&mut self, peer_key: u64, mut f: impl FnMut(&mut FingerEntry)) {
        for e in self.entries_mut() {
            if e.peer.key.value() == peer_key {
                f(e);
            }
        }
    }

    pub fn contains(&self, peer_key: u64) -> bool {
        self.entries().any(|e| e.peer.key.value() == peer_key)
    }

    /// Distinct peers referenced by the table (excluding the predecessor).
    pub fn distinct_peers(&self) -> Vec<&NodeId> {
        let mut seen: Vec<&NodeId> = self.entries().map(|e| &e.peer).collect();
        seen.sort_by_key(|p| p.key.value());
        seen.dedup_by_key(|p| p.key.value());
        seen
    }

    /// One line per entry: `level,key,latency_ewma,availability,load,usage_count`.
    /// Fingers use their bucket number, neighbors `n`, successors `s`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut line = |tag: &str, e: &FingerEntry| {
            let ind = &e.indicators;
            out.push_str(&format!(
                "{tag},{},{},{},{},{}\n",
                e.peer.key.to_hex(),
                ind.latency_ewma,
                ind.availability,
                ind.load,
                ind.usage_count
            ));
        };
        for (i, bucket) in self.levels.iter().enumerate() {
            for e in bucket {
                line(&i.to_string(), e);
            }
        }
        for e in &self.neighbors {
            line("n", e);
        }
        for e in &self.successors {
            line("s", e);
        }
        out
    }
}

fn probe(owner: &NodeId, peer: &NodeId, link: &LinkModel) -> FingerEntry {
    FingerEntry::new(peer.clone(), link.expected_latency(&owner.position, &peer.position))
}

/// Resolve bucket `level` for `owner`.
///
/// The first `ceil(log₂k)` slots enter the sibling clusters: each takes the
/// sibling at its fraction of the sibling ring, counted from the first sibling
/// clockwise of the owner. Later slots are Chord-style shortcuts inside the owner's own cluster
/// `C_level`, counted from the owner's rank, so the final approach inside a
/// cluster needs only logarithmically many hops.
pub(crate) fn build_bucket(
    owner: &NodeId,
    level: usize,
    shape: &TableShape,
    params: &TableParams,
    dir: &Directory,
    link: &LinkModel,
) -> Vec<FingerEntry> {
    let siblings = dir.sibling_ring(&owner.cluster_path, level);
    if siblings.is_empty() {
        return Vec::new();
    }
    let own_ring = dir.members(&owner.cluster_path.truncated(level));
    let own = owner.key.value();
    let clamp = |f: f64| if f.is_finite() { f.clamp(0.0, 1.0 - f64::EPSILON) } else { 0.0 };
    let mut chosen: Vec<usize> = Vec::new();
    for (slot, &frac) in params
        .slot_fractions
        .iter()
        .take(level_capacity(shape.k, level))
        .enumerate()
    {
        let (ring, start) = if slot < shape.sibling_slots() {
            (siblings.as_slice(), siblings.partition_point(|&i| dir.entries[i].key.value() <= own))
        } else {
            (own_ring, own_ring.partition_point(|&i| dir.entries[i].key.value() < own))
        };
        let n = ring.len();
        let idx = ring[(start + (clamp(frac) * n as f64).floor() as usize) % n];
        if dir.entries[idx].key != owner.key && !chosen.contains(&idx) {
            chosen.push(idx);
        }
    }
    chosen.into_iter().map(|i| probe(owner, &dir.entries[i], link)).collect()
}

/// Latency-nearest `M` peers from a sample of the owner's deepest cluster
/// that still has `4M + 1` members.
pub(crate) fn build_neighbors<R: Rng + ?Sized>(
    owner: &NodeId,
    shape: &TableShape,
    params: &TableParams,
    dir: &Directory,
    link: &LinkModel,
    rng: &mut R,
) -> Vec<FingerEntry> {
    const SAMPLE: usize = 256;
    let m = shape.neighborhood;
    if m == 0 {
        return Vec::new();
    }
    let mut pool: &[usize] = &[];
    for d in (0..=owner.cluster_path.depth()).rev() {
        let members = dir.members(&owner.cluster_path.truncated(d));
        if members.len() > 4 * m || d == 0 {
            pool = members;
            break;
        }
    }
    let mut pool: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&i| dir.entries[i].key != owner.key)
        .collect();
    if pool.len() > SAMPLE {
        let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), SAMPLE).into_vec();
        picked.sort_unstable();
        pool = picked.into_iter().map(|j| pool[j]).collect();
    }
    let v = link.field.mean_velocity();
    let mut scored: Vec<(f64, u64, usize)> = pool
        .into_iter()
        .map(|i| {
            let peer = &dir.entries[i];
            let mut score = link.expected_latency(&owner.position, &peer.position);
            if let Some(bias) = params.neighbor_bias {
                score += params.neighbor_weight.max(0.0) * peer.position.distance(&bias) / v;
            }
            (score, peer.key.value(), i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(m)
        .map(|(_, _, i)| probe(owner, &dir.entries[i], link))
        .collect()
}

/// Next `s` live keys clockwise, plus the predecessor.
pub(crate) fn build_ring_links(
    owner: &NodeId,
    shape: &TableShape,
    dir: &Directory,
    link: &LinkModel,
) -> (Vec<FingerEntry>, Option<FingerEntry>) {
    let n = dir.len();
    if n == 0 {
        return (Vec::new(), None);
    }
    let own = owner.key.value();
    let start = dir.keys.partition_point(|&k| k <= own);
    let successors: Vec<FingerEntry> = (0..n)
        .map(|j| &dir.entries[(start + j) % n])
        .filter(|p| p.key != owner.key)
        .take(shape.successors)
        .map(|p| probe(owner, p, link))
        .collect();
    let before = dir.keys.partition_point(|&k| k < own);
    let predecessor = (1..=n)
        .map(|j| &dir.entries[(before + n - j) % n])
        .find(|p| p.key != owner.key)
        .map(|p| probe(owner, p, link));
    (successors, predecessor)
}

/// Build a fresh routing table for `owner` from a live-membership view.
pub fn build_routing_table<R: Rng + ?Sized>(
    owner: &NodeId,
    shape: TableShape,
    params: TableParams,
    dir: &Directory,
    link: &LinkModel,
    rng: &mut R,
) -> RoutingTable {
    let mut table = RoutingTable::empty(owner.clone(), shape, params);
    for level in 1..=shape.h {
        table.levels[level] = build_bucket(owner, level, &shape, &table.params, dir, link);
    }
    table.neighbors = build_neighbors(owner, &shape, &table.params, dir, link, rng);
    let (succ, pred) = build_ring_links(owner, &shape, dir, link);
    table.successors = succ;
    table.predecessor = pred;
    table
}

/// Entries lying on the clockwise arc `(owner, target]`, deduplicated by key
/// and ordered by shared cluster depth with `target_path` (deepest first),
/// clockwise distance to the target, then key.
pub fn candidates(table: &RoutingTable, target: &RingKey, target_path: &ClusterPath) -> Vec<FingerEntry> {
    let own = table.owner.key;
    if *target == own {
        return Vec::new();
    }
    let mut out: Vec<FingerEntry> = Vec::new();
    for e in table.entries() {
        if e.peer.key == own || !e.peer.key.in_arc(&own, target) {
            continue;
        }
        if out.iter().any(|o| o.peer.key == e.peer.key) {
            continue;
        }
        out.push(e.clone());
    }
    out.sort_by(|a, b| candidate_order(a, b, target, target_path));
    out
}

pub(crate) fn candidate_order(
    a: &FingerEntry,
    b: &FingerEntry,
    target: &RingKey,
    target_path: &ClusterPath,
) -> std::cmp::Ordering {
    let sa = a.peer.cluster_path.shared_prefix_len(target_path);
    let sb = b.peer.cluster_path.shared_prefix_len(target_path);
    sb.cmp(&sa)
        .then(a.peer.key.clockwise_to(target).cmp(&b.peer.key.clockwise_to(target)))
        .then(a.peer.key.value().cmp(&b.peer.key.value()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nettest::VelocityField;
    use crate::rng::seeded;

    fn node(addr: usize, key: u64, x: f64, y: f64, path: &[u8]) -> NodeId {
        NodeId {
            key: RingKey::new(key, 32).unwrap(),
            addr,
            position: GeoPoint::new(x, y),
            cluster_path: ClusterPath(path.to_vec()),
        }
    }

    fn link() -> LinkModel {
        LinkModel::new(VelocityField::uniform(1000.0, 1.0), 0.0)
    }

    fn shape(k: usize, h: usize) -> TableShape {
        TableShape {
            k,
            h,
            neighborhood: 4,
            successors: 3,
        }
    }

    #[test]
    fn capacity_sums() {
        assert_eq!(finger_capacity(2, 3), 6);
        assert_eq!(finger_capacity(2, 5), 15);
        assert_eq!(finger_capacity(4, 2), 2 + 4);
        assert_eq!(level_capacity(3, 2), 4);
        assert_eq!(level_capacity(2, 0), 0);
    }

    #[test]
    fn single_node_self_loop() {
        let me = node(0, 5, 1.0, 1.0, &[0, 0]);
        let dir = Directory::new([me.clone()]);
        let t = build_routing_table(&me, shape(2, 2), TableParams::geographic(2, 1), &dir, &link(), &mut seeded(1));
        assert_eq!(t.finger_count(), 0);
        assert!(t.successors.is_empty());
        assert_eq!(t.successor().key, me.key);
        assert!(t.predecessor.is_none());
    }

    #[test]
    fn equidistant_neighbors_tie_break_by_key() {
        let me = node(0, 1000, 500.0, 500.0, &[]);
        let mut peers = vec![me.clone()];
        // Eight peers on a circle of radius 100.
        for j in 0..8u64 {
            let a = std::f64::consts::TAU * j as f64 / 8.0;
            peers.push(node(
                j as usize + 1,
                5000 - j * 100,
                500.0 + 100.0 * a.cos(),
                500.0 + 100.0 * a.sin(),
                &[],
            ));
        }
        let dir = Directory::new(peers);
        let shp = TableShape {
            k: 2,
            h: 0,
            neighborhood: 4,
            successors: 3,
        };
        let l = link();
        let t = build_routing_table(&me, shp, TableParams::geographic(0, 1), &dir, &l, &mut seeded(3));
        // Distances only agree up to rounding here; exact ties are covered below.
        assert_eq!(t.neighbors.len(), 4);
        assert!(t.neighbors.iter().all(|e| (e.indicators.latency_ewma - 100.0).abs() < 1e-9));
    }

    #[test]
    fn exact_tie_break_on_coincident_latency() {
        let me = node(0, 0, 0.0, 0.0, &[]);
        let mut peers = vec![me.clone()];
        for j in 0..6u64 {
            peers.push(node(j as usize + 1, 600 - j * 100, 30.0, 40.0, &[]));
        }
        let dir = Directory::new(peers);
        let shp = TableShape {
            k: 2,
            h: 0,
            neighborhood: 4,
            successors: 3,
        };
        let t = build_routing_table(&me, shp, TableParams::geographic(0, 1), &dir, &link(), &mut seeded(3));
        let keys: Vec<u64> = t.neighbors.iter().map(|e| e.peer.key.value()).collect();
        assert_eq!(keys, vec![100, 200, 300, 400]);
    }

    #[test]
    fn buckets_draw_from_sibling_clusters() {
        // Depth-2 tree, k=2: 4 leaves of 4 nodes, keys by leaf.
        let mut peers = Vec::new();
        let mut addr = 0;
        for leaf in 0..4u8 {
            for j in 0..4u64 {
                let key = (leaf as u64) << 28 | (j << 20);
                peers.push(node(addr, key, leaf as f64 * 100.0 + j as f64, 0.0, &[leaf / 2, leaf % 2]));
                addr += 1;
            }
        }
        let dir = Directory::new(peers.clone());
        let me = &peers[1];
        let t = build_routing_table(me, shape(2, 2), TableParams::geographic(2, 1), &dir, &link(), &mut seeded(0));
        assert!(t.levels[0].is_empty());
        assert_eq!(t.levels[1].len(), 1);
        assert!(t.levels[1].iter().all(|e| e.peer.cluster_path.digits()[0] == 1));
        // Sibling ring at level 1 is the 8 nodes of cluster 1; slot 0 is the
        // first clockwise, i.e. the lowest key of leaf 2.
        assert_eq!(t.levels[1][0].peer.key.value(), 2 << 28);
        assert_eq!(t.levels[2].len(), 2);
        // Bucket 2: slot 0 enters sibling leaf 01 at its first key clockwise,
        // slot 1 jumps half way round the owner's own leaf.
        let l2: Vec<u64> = t.levels[2].iter().map(|e| e.peer.key.value()).collect();
        assert_eq!(l2, vec![1 << 28, 3 << 20]);
        assert!(t.finger_count() <= finger_capacity(2, 2));
        // Successors in key order.
        let succ: Vec<u64> = t.successors.iter().map(|e| e.peer.key.value()).collect();
        assert_eq!(succ, vec![2 << 20, 3 << 20, 1 << 28]);
        assert_eq!(t.predecessor.as_ref().unwrap().peer.key.value(), 0);
    }

    #[test]
    fn candidates_handcrafted_order() {
        let me = node(0, 0, 0.0, 0.0, &[0, 0]);
        let target = RingKey::new(1000, 32).unwrap();
        let tpath = ClusterPath(vec![1, 1]);
        let mut t = RoutingTable::empty(me, shape(2, 2), TableParams::geographic(2, 1));
        let a = node(1, 900, 0.0, 0.0, &[1, 0]); // shared 1, dist 100
        let b = node(2, 500, 0.0, 0.0, &[1, 1]); // shared 2, dist 500
        let c = node(3, 990, 0.0, 0.0, &[0, 1]); // shared 0, dist 10
        let d = node(4, 1500, 0.0, 0.0, &[1, 1]); // off-arc
        let e = node(5, 800, 0.0, 0.0, &[1, 1]); // shared 2, dist 200
        t.levels[1] = vec![FingerEntry::new(a, 1.0), FingerEntry::new(d, 1.0)];
        t.levels[2] = vec![FingerEntry::new(c, 1.0)];
        t.neighbors = vec![FingerEntry::new(b.clone(), 1.0), FingerEntry::new(e, 1.0)];
        t.successors = vec![FingerEntry::new(b, 1.0)];
        let keys: Vec<u64> = candidates(&t, &target, &tpath)
            .iter()
            .map(|e| e.peer.key.value())
            .collect();
        assert_eq!(keys, vec![800, 500, 900, 990]);
        assert!(candidates(&t, &t.owner.key.clone(), &tpath).is_empty());
    }

    #[test]
    fn dump_lines() {
        let me = node(0, 0, 0.0, 0.0, &[0]);
        let mut t = RoutingTable::empty(me, shape(2, 1), TableParams::geographic(1, 1));
        t.levels[1].push(FingerEntry::new(node(1, 0xab, 3.0, 4.0, &[1]), 5.0));
        t.successors.push(FingerEntry::new(node(1, 0xab, 3.0, 4.0, &[1]), 5.0));
        assert_eq!(t.dump(), "1,000000ab,5,1,0,0\ns,000000ab,5,1,0,0\n");
    }
}
