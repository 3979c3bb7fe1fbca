use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::table::{build_bucket, build_neighbors, build_ring_links};
use super::{
    build_routing_table, AdjacencyMatrix, DhtError, Directory, FingerEntry, NodeId, RoutingTable,
    TableParams, TableShape,
};
use crate::cluster::{build_hierarchy_with, cluster_path, ClusterTree, HierarchyConfig};
use crate::geokey::{point_to_key, GeoPoint, RingKey};
use crate::nettest::LinkModel;
use crate::route::{self, PheromoneTable, RouteCache};

/// How many recent lookup targets a node remembers for optimization.
const TRAFFIC_MEMORY: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayConfig {
    pub side: f64,
    pub bits: u32,
    pub k: usize,
    pub h: usize,
    pub neighborhood: usize,
    /// Successor list length; `None` picks `max(3, ceil(log₂N))` at build time.
    pub successors: Option<usize>,
    pub seed: u64,
    pub hierarchy: HierarchyConfig,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            side: 1000.0,
            bits: 32,
            k: 2,
            h: 3,
            neighborhood: 4,
            successors: None,
            seed: 0,
            hierarchy: HierarchyConfig::default(),
        }
    }
}

/// A recorded lookup: where the node sent, and the position it aimed at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub target: RingKey,
    pub target_point: GeoPoint,
    pub weight: f64,
}

/// Everything one node owns.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub table: RoutingTable,
    pub alive: bool,
    /// One per level, index 0 unused.
    pub matrices: Vec<AdjacencyMatrix>,
    pub cache: RouteCache,
    pub traffic: Vec<FlowRecord>,
}

impl NodeState {
    pub fn record_flow(&mut self, flow: FlowRecord) {
        if self.traffic.len() == TRAFFIC_MEMORY {
            self.traffic.remove(0);
        }
        self.traffic.push(flow);
    }
}

/// The full simulated overlay: every node's state plus the shared cluster
/// hierarchy and link model.
#[derive(Debug, Clone)]
pub struct Overlay {
    pub config: OverlayConfig,
    pub shape: TableShape,
    pub tree: ClusterTree,
    pub link: LinkModel,
    pub nodes: Vec<NodeState>,
    pub pheromone: PheromoneTable,
    pub epoch: u64,
    ring: BTreeMap<u64, usize>,
    directory: Option<Directory>,
}

impl Overlay {
    /// An overlay with a hierarchy but no members yet.
    pub fn with_tree(config: OverlayConfig, link: LinkModel, tree: ClusterTree, expected_nodes: usize) -> Self {
        let shape = TableShape {
            k: config.k,
            h: config.h,
            neighborhood: config.neighborhood,
            successors: config
                .successors
                .unwrap_or_else(|| TableShape::successors_for(expected_nodes)),
        };
        Self {
            config,
            shape,
            tree,
            link,
            nodes: Vec::new(),
            pheromone: PheromoneTable::default(),
            epoch: 0,
            ring: BTreeMap::new(),
            directory: None,
        }
    }

    /// Cluster the given positions and build every table from a complete view.
    pub fn build<R: Rng + ?Sized>(
        config: OverlayConfig,
        link: LinkModel,
        positions: &[GeoPoint],
        rng: &mut R,
    ) -> Result<Self, DhtError> {
        let tree = build_hierarchy_with(positions, config.k, config.h, config.seed, config.hierarchy);
        let mut ov = Self::with_tree(config, link, tree, positions.len());
        for &p in positions {
            let id = ov.make_id(p)?;
            if ov.ring.contains_key(&id.key.value()) {
                return Err(DhtError::DuplicateKey(id.key));
            }
            ov.insert(id);
        }
        ov.rebuild_all(rng);
        Ok(ov)
    }

    /// Uniform random positions, redrawn on key collision.
    pub fn random<R: Rng + ?Sized>(config: OverlayConfig, link: LinkModel, n: usize, rng: &mut R) -> Self {
        let positions = uniform_positions(n, config.side, config.bits, rng);
        Self::build(config, link, &positions, rng).expect("positions have distinct keys")
    }

    fn insert(&mut self, id: NodeId) -> usize {
        let addr = self.nodes.len();
        let id = NodeId { addr, ..id };
        let params = TableParams::for_shape(&self.shape);
        self.ring.insert(id.key.value(), addr);
        self.nodes.push(NodeState {
            table: RoutingTable::empty(id.clone(), self.shape, params),
            id,
            alive: true,
            matrices: (0..=self.shape.h).map(AdjacencyMatrix::new).collect(),
            cache: RouteCache::default(),
            traffic: Vec::new(),
        });
        self.directory = None;
        addr
    }

    /// Rebuild every live table from the current membership.
    pub fn rebuild_all<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.refresh_directory();
        let dir = self.directory.as_ref().expect("fresh");
        for node in self.nodes.iter_mut().filter(|n| n.alive) {
            let params = node.table.params.clone();
            node.table = build_routing_table(&node.id, self.shape, params, dir, &self.link, rng);
        }
    }

    /// Rebuild one node's table with new parameters.
    pub fn rebuild_table<R: Rng + ?Sized>(&mut self, addr: usize, params: TableParams, rng: &mut R) {
        self.refresh_directory();
        let dir = self.directory.as_ref().expect("fresh");
        let node = &mut self.nodes[addr];
        node.table = build_routing_table(&node.id, self.shape, params, dir, &self.link, rng);
    }

    /// The table `addr` would have under `params`, ring links unchanged.
    pub fn candidate_table<R: Rng + ?Sized>(&mut self, addr: usize, params: TableParams, rng: &mut R) -> RoutingTable {
        self.refresh_directory();
        let dir = self.directory.as_ref().expect("fresh");
        let node = &self.nodes[addr];
        let mut table = node.table.clone();
        table.params = params;
        for level in 1..=self.shape.h {
            let fresh = build_bucket(&node.id, level, &self.shape, &table.params, dir, &self.link);
            table.levels[level] = keep_indicators(&node.table.levels[level], fresh);
        }
        let fresh = build_neighbors(&node.id, &self.shape, &table.params, dir, &self.link, rng);
        table.neighbors = keep_indicators(&node.table.neighbors, fresh);
        table
    }

    /// Levels at which `addr` has at least one live sibling cluster member.
    pub fn populated_levels(&mut self, addr: usize) -> Vec<usize> {
        self.refresh_directory();
        let dir = self.directory.as_ref().expect("fresh");
        let path = &self.nodes[addr].id.cluster_path;
        (1..=self.shape.h)
            .filter(|&l| !dir.sibling_ring(path, l).is_empty())
            .collect()
    }

    pub fn make_id(&self, position: GeoPoint) -> Result<NodeId, DhtError> {
        let key = point_to_key(position, self.config.side, self.config.bits)?;
        Ok(NodeId {
            key,
            addr: usize::MAX,
            position,
            cluster_path: cluster_path(&self.tree, &position),
        })
    }

    pub fn refresh_directory(&mut self) {
        if self.directory.is_none() {
            let live = self.ring.values().map(|&a| self.nodes[a].id.clone());
            self.directory = Some(Directory::new(live));
        }
    }

    /// Live-membership view; rebuilt lazily after membership changes.
    pub fn directory(&mut self) -> &Directory {
        self.refresh_directory();
        self.directory.as_ref().expect("fresh")
    }

    pub fn live_count(&self) -> usize {
        self.ring.len()
    }

    pub fn is_alive(&self, addr: usize) -> bool {
        self.nodes.get(addr).is_some_and(|n| n.alive)
    }

    pub fn node(&self, addr: usize) -> &NodeState {
        &self.nodes[addr]
    }

    pub fn node_mut(&mut self, addr: usize) -> &mut NodeState {
        &mut self.nodes[addr]
    }

    /// Live addresses in key order.
    pub fn live_addrs(&self) -> Vec<usize> {
        self.ring.values().copied().collect()
    }

    pub fn addr_of_key(&self, key: &RingKey) -> Option<usize> {
        self.ring.get(&key.value()).copied()
    }

    /// Ground-truth owner of `key` among live nodes.
    pub fn owner_of(&self, key: &RingKey) -> Option<usize> {
        self.ring
            .range(key.value()..)
            .next()
            .or_else(|| self.ring.iter().next())
            .map(|(_, &a)| a)
    }

    /// Follow first successors from `start` until returning or `limit` steps.
    pub fn successor_walk(&self, start: usize, limit: usize) -> Vec<usize> {
        let mut out = vec![start];
        let mut cur = start;
        for _ in 0..limit {
            let next = self.nodes[cur].table.successor().addr;
            if next == start {
                break;
            }
            out.push(next);
            cur = next;
        }
        out
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
        self.pheromone.evaporate();
    }

    fn entry_for(&self, owner: usize, peer: usize) -> FingerEntry {
        let a = &self.nodes[owner];
        let b = &self.nodes[peer];
        if let Some(e) = a.table.entries().find(|e| e.peer.addr == peer) {
            return e.clone();
        }
        FingerEntry::new(b.id.clone(), self.link.expected_latency(&a.id.position, &b.id.position))
    }

    /// Add a node at `position`, locating its successor by routing from
    /// `bootstrap` (any live node).
    pub fn join<R: Rng + ?Sized>(
        &mut self,
        position: GeoPoint,
        bootstrap: Option<usize>,
        rng: &mut R,
    ) -> Result<usize, DhtError> {
        let id = self.make_id(position)?;
        if self.ring.contains_key(&id.key.value()) {
            return Err(DhtError::DuplicateKey(id.key));
        }
        let successor = match bootstrap.filter(|&b| self.is_alive(b)).or_else(|| self.ring.values().next().copied()) {
            None => None,
            Some(b) => Some(
                route::lookup(self, b, &id.key)
                    .ok()
                    .and_then(|hops| hops.last().copied())
                    .or_else(|| self.owner_of(&id.key))
                    .expect("ring is non-empty"),
            ),
        };
        let addr = self.insert(id);
        let params = self.nodes[addr].table.params.clone();
        self.rebuild_table(addr, params, rng);
        if let Some(succ) = successor {
            self.notify(succ, addr);
            // The old predecessor of our successor now precedes us.
            if let Some(pred) = self.nodes[addr].table.predecessor.as_ref().map(|p| p.peer.addr) {
                if self.is_alive(pred) {
                    let entry = self.entry_for(pred, addr);
                    let s = self.shape.successors;
                    let list = &mut self.nodes[pred].table.successors;
                    list.retain(|e| e.peer.addr != addr);
                    list.insert(0, entry);
                    list.truncate(s);
                }
            }
        }
        Ok(addr)
    }

    /// `candidate` claims to precede `addr`.
    fn notify(&mut self, addr: usize, candidate: usize) {
        if addr == candidate {
            return;
        }
        let own = self.nodes[addr].id.key;
        let cand_key = self.nodes[candidate].id.key;
        let replace = match &self.nodes[addr].table.predecessor {
            None => true,
            Some(p) => !self.is_alive(p.peer.addr) || (cand_key.in_arc(&p.peer.key, &own) && cand_key != own),
        };
        if replace {
            let entry = self.entry_for(addr, candidate);
            self.nodes[addr].table.predecessor = Some(entry);
        }
    }

    fn check_live(&self, addr: usize) -> Result<(), DhtError> {
        if self.is_alive(addr) {
            Ok(())
        } else {
            Err(DhtError::UnknownNode(addr))
        }
    }

    /// Graceful departure: hand the ring links over, then go.
    pub fn leave(&mut self, addr: usize) -> Result<(), DhtError> {
        self.check_live(addr)?;
        let pred = self.nodes[addr]
            .table
            .predecessor
            .as_ref()
            .map(|p| p.peer.addr)
            .filter(|&p| self.is_alive(p) && p != addr);
        let succs: Vec<usize> = self.nodes[addr]
            .table
            .successors
            .iter()
            .map(|e| e.peer.addr)
            .filter(|&s| self.is_alive(s) && s != addr)
            .collect();
        if let Some(p) = pred {
            let s = self.shape.successors;
            let mut list: Vec<FingerEntry> = self.nodes[p]
                .table
                .successors
                .iter()
                .filter(|e| e.peer.addr != addr)
                .cloned()
                .collect();
            for &q in &succs {
                if q != p && !list.iter().any(|e| e.peer.addr == q) {
                    list.push(self.entry_for(p, q));
                }
            }
            let pk = self.nodes[p].id.key;
            list.sort_by_key(|e| pk.clockwise_to(&e.peer.key));
            list.truncate(s);
            self.nodes[p].table.successors = list;
        }
        if let Some(&u) = succs.first() {
            self.nodes[u].table.predecessor = match pred {
                Some(p) if p != u => Some(self.entry_for(u, p)),
                _ => None,
            };
        }
        self.remove(addr);
        Ok(())
    }

    /// Silent crash; neighbors find out through stabilization.
    pub fn fail(&mut self, addr: usize) -> Result<(), DhtError> {
        self.check_live(addr)?;
        self.remove(addr);
        Ok(())
    }

    fn remove(&mut self, addr: usize) {
        let key = self.nodes[addr].id.key.value();
        self.ring.remove(&key);
        self.nodes[addr].alive = false;
        self.directory = None;
    }

    /// One round of periodic repair at `addr`.
    pub fn stabilize<R: Rng + ?Sized>(&mut self, addr: usize, rng: &mut R) {
        if !self.is_alive(addr) {
            return;
        }
        let own = self.nodes[addr].id.key;
        let s = self.shape.successors;

        // First live successor, else rejoin through the membership view.
        let mut succ = self.nodes[addr]
            .table
            .successors
            .iter()
            .map(|e| e.peer.addr)
            .find(|&a| self.is_alive(a) && a != addr);
        if succ.is_none() && self.live_count() > 1 {
            succ = self
                .owner_of(&own.add(1))
                .filter(|&a| a != addr);
        }

        if let Some(mut u) = succ {
            if let Some(x) = self.nodes[u].table.predecessor.as_ref().map(|p| p.peer.addr) {
                let xk = self.nodes[x].id.key;
                if self.is_alive(x) && x != addr && xk.in_arc(&own, &self.nodes[u].id.key) && x != u {
                    u = x;
                }
            }
            self.notify(u, addr);
            let mut list = vec![self.entry_for(addr, u)];
            let tail: Vec<usize> = self.nodes[u]
                .table
                .successors
                .iter()
                .map(|e| e.peer.addr)
                .filter(|&a| a != addr && a != u && self.is_alive(a))
                .collect();
            for a in tail {
                if list.len() >= s {
                    break;
                }
                if !list.iter().any(|e| e.peer.addr == a) {
                    list.push(self.entry_for(addr, a));
                }
            }
            list.truncate(s);
            self.nodes[addr].table.successors = list;
        } else {
            self.nodes[addr].table.successors.clear();
        }

        if let Some(p) = self.nodes[addr].table.predecessor.as_ref().map(|p| p.peer.addr) {
            if !self.is_alive(p) {
                self.nodes[addr].table.predecessor = None;
            }
        }
        if self.live_count() == 1 {
            self.nodes[addr].table.predecessor = None;
        }

        // Round-robin bucket refresh, keeping indicators of surviving peers.
        self.refresh_directory();
        let h = self.shape.h;
        if h > 0 {
            let level = self.nodes[addr].table.refresh_cursor.clamp(1, h);
            let dir = self.directory.as_ref().expect("fresh");
            let node = &self.nodes[addr];
            let fresh = build_bucket(&node.id, level, &self.shape, &node.table.params, dir, &self.link);
            let merged = keep_indicators(&node.table.levels[level], fresh);
            let node = &mut self.nodes[addr];
            node.table.levels[level] = merged;
            node.table.refresh_cursor = level % h + 1;
        }

        // Replace departed neighbors.
        let stale = self.nodes[addr]
            .table
            .neighbors
            .iter()
            .any(|e| !self.is_alive(e.peer.addr));
        if stale {
            let dir = self.directory.as_ref().expect("fresh");
            let node = &self.nodes[addr];
            let fresh = build_neighbors(&node.id, &self.shape, &node.table.params, dir, &self.link, rng);
            let merged = keep_indicators(&node.table.neighbors, fresh);
            self.nodes[addr].table.neighbors = merged;
        }
    }

    /// One stabilization round at every live node, in key order.
    pub fn stabilize_round<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for addr in self.live_addrs() {
            self.stabilize(addr, rng);
        }
    }

    /// Replace successors and predecessor from the membership view, as a
    /// freshly built table would have them.
    pub fn reset_ring_links(&mut self, addr: usize) {
        self.refresh_directory();
        let dir = self.directory.as_ref().expect("fresh");
        let (succ, pred) = build_ring_links(&self.nodes[addr].id, &self.shape, dir, &self.link);
        let t = &mut self.nodes[addr].table;
        t.successors = keep_indicators(&t.successors, succ);
        t.predecessor = pred;
    }
}

fn keep_indicators(old: &[FingerEntry], fresh: Vec<FingerEntry>) -> Vec<FingerEntry> {
    fresh
        .into_iter()
        .map(|f| old.iter().find(|o| o.peer.key == f.peer.key).cloned().unwrap_or(f))
        .collect()
}

/// `n` uniform positions over the square with pairwise distinct keys.
pub fn uniform_positions<R: Rng + ?Sized>(n: usize, side: f64, bits: u32, rng: &mut R) -> Vec<GeoPoint> {
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = GeoPoint::new(rng.random::<f64>() * side, rng.random::<f64>() * side);
        let Ok(key) = point_to_key(p, side, bits) else {
            continue;
        };
        if seen.insert(key.value()) {
            out.push(p);
        }
    }
    out
}
