//! Node state and hierarchical ring routing tables.
//!
//! Every level of the cluster hierarchy acts as a ring. A node keeps one
//! finger bucket per level (bucket `i` holds `ceil(i·log₂k)` contacts in the
//! sibling clusters at depth `i`), a latency-nearest neighborhood of size
//! `M`, and a successor list on the global key ring.

mod overlay;
mod table;

pub use overlay::{uniform_positions, FlowRecord, NodeState, Overlay, OverlayConfig};
pub use table::{
    build_routing_table, candidates, finger_capacity, level_capacity, Directory, RoutingTable,
    TableParams, TableShape,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterPath;
use crate::geokey::{GeoKeyError, GeoPoint, RingKey};

/// Smoothing factor for every indicator and matrix EWMA.
pub const EWMA_ALPHA: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DhtError {
    #[error("key {0} is already present")]
    DuplicateKey(RingKey),
    #[error("unknown or departed node {0}")]
    UnknownNode(usize),
    #[error(transparent)]
    GeoKey(#[from] GeoKeyError),
}

/// Identity of a peer as seen by other peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeId {
    pub key: RingKey,
    /// Simulator handle.
    pub addr: usize,
    pub position: GeoPoint,
    pub cluster_path: ClusterPath,
}

/// Measured quality of a routing-table entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicIndicators {
    pub latency_ewma: f64,
    pub latency_samples: u64,
    pub availability: f64,
    pub load: f64,
    pub usage_count: u64,
}

impl Default for HeuristicIndicators {
    fn default() -> Self {
        Self {
            latency_ewma: 0.0,
            latency_samples: 0,
            availability: 1.0,
            load: 0.0,
            usage_count: 0,
        }
    }
}

impl HeuristicIndicators {
    pub fn with_latency(sample: f64) -> Self {
        Self {
            latency_ewma: sample.max(0.0),
            latency_samples: 1,
            ..Self::default()
        }
    }

    /// Fold one exchange into the indicators.
    ///
    /// Latency only moves on success; the first latency sample replaces the
    /// prior outright.
    pub fn update(&mut self, latency_sample: f64, success: bool) {
        if success {
            let s = latency_sample.max(0.0);
            if self.latency_samples == 0 {
                self.latency_ewma = s;
            } else {
                self.latency_ewma = EWMA_ALPHA * s + (1.0 - EWMA_ALPHA) * self.latency_ewma;
            }
            self.latency_samples += 1;
        }
        let hit = if success { 1.0 } else { 0.0 };
        self.availability = (EWMA_ALPHA * hit + (1.0 - EWMA_ALPHA) * self.availability).clamp(0.0, 1.0);
        self.usage_count += 1;
    }

    pub fn update_load(&mut self, sample: f64) {
        self.load = (EWMA_ALPHA * sample.clamp(0.0, 1.0) + (1.0 - EWMA_ALPHA) * self.load).clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerEntry {
    pub peer: NodeId,
    pub indicators: HeuristicIndicators,
}

impl FingerEntry {
    pub fn new(peer: NodeId, latency: f64) -> Self {
        Self {
            peer,
            indicators: HeuristicIndicators::with_latency(latency),
        }
    }

    pub fn key(&self) -> RingKey {
        self.peer.key
    }
}

/// `update_indicator` in free-function form.
pub fn update_indicator(entry: &mut FingerEntry, latency_sample: f64, success: bool) {
    entry.indicators.update(latency_sample, success);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyEntry {
    pub latency: f64,
    /// Epoch of the most recent sample.
    pub epoch: u64,
}

/// EWMA path latency between clusters at one level, indexed by the base-k
/// value of the cluster prefix. Populated lazily; the diagonal is pinned at 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    pub level: usize,
    entries: BTreeMap<(u64, u64), AdjacencyEntry>,
}

impl AdjacencyMatrix {
    pub fn new(level: usize) -> Self {
        Self {
            level,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, p: u64, q: u64) -> Option<AdjacencyEntry> {
        if p == q {
            return Some(AdjacencyEntry {
                latency: 0.0,
                epoch: u64::MAX,
            });
        }
        self.entries.get(&(p, q)).copied()
    }

    pub fn update(&mut self, p: u64, q: u64, sample: f64, epoch: u64) {
        if p == q || !(sample >= 0.0) {
            return;
        }
        for key in [(p, q), (q, p)] {
            self.entries
                .entry(key)
                .and_modify(|e| {
                    e.latency = EWMA_ALPHA * sample + (1.0 - EWMA_ALPHA) * e.latency;
                    e.epoch = epoch;
                })
                .or_insert(AdjacencyEntry {
                    latency: sample,
                    epoch,
                });
        }
    }

    /// Overwrite an entry pair, as when adopting a row diffused by a peer.
    pub fn merge_entry(&mut self, p: u64, q: u64, entry: AdjacencyEntry) {
        if p == q {
            return;
        }
        for key in [(p, q), (q, p)] {
            let slot = self.entries.entry(key).or_insert(entry);
            if entry.epoch > slot.epoch {
                *slot = entry;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(u64, u64), &AdjacencyEntry)> {
        self.entries.iter()
    }

    /// Row `p` (all entries with `p` as source).
    pub fn row(&self, p: u64) -> Vec<(u64, AdjacencyEntry)> {
        self.entries
            .range((p, 0)..=(p, u64::MAX))
            .map(|(&(_, q), e)| (q, *e))
            .collect()
    }
}

/// `update_adjacency` in free-function form.
pub fn update_adjacency(matrix: &mut AdjacencyMatrix, p: u64, q: u64, sample: f64, epoch: u64) {
    matrix.update(p, q, sample, epoch);
}
