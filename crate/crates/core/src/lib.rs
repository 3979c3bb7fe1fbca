//! Geography-keyed hierarchical Chord overlay.
//!
//! Node keys are Z-order projections of planar grid cells, nodes are grouped
//! into a k-way hierarchy of Gaussian clusters, and every level of the
//! hierarchy acts as its own ring with a small bucket of fingers. Routing is
//! greedy best-first over measured latency plus a geographic heuristic, and
//! routing tables are tuned in the background by per-node particle swarms.
//!
//! The [`nettest`] module is a deterministic discrete-event simulator used to
//! evaluate all of the above against flat Chord and XOR-metric baselines, and
//! [`experiment`] turns simulations into reproducible metric reports.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod dht;
pub mod experiment;
pub mod geokey;
pub mod nettest;
pub mod rng;
pub mod route;
pub mod swarm;

pub use cluster::{ClusterNode, ClusterPath, ClusterTree, Gaussian, Gmm};
pub use dht::{FingerEntry, HeuristicIndicators, NodeId, Overlay, OverlayConfig, RoutingTable};
pub use geokey::{GeoPoint, GridCode, RingKey};
pub use nettest::LinkModel;
pub use route::{Path, PheromoneTable, RouteCache};
pub use nettest::{SimConfig, Simulator};
pub use swarm::{NetworkEstimate, Particle, SwarmState};
pub use experiment::{Experiment, ExperimentKind, MetricsReport};

