//! Per-node particle-swarm refinement of routing-table parameters.
//!
//! A position is one ring fraction per finger slot followed by the
//! neighborhood's pull toward the dominant traffic region. Each node runs a
//! small swarm, validates candidates on fresh traffic before installing them,
//! and diffuses accepted positions to nearby peers. Every rejected cycle
//! doubles the node's update interval; at the ceiling the node goes quiet.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{em_fit_weighted, gmm_from_kmeans, kmeans_restarts, to_xy, Gmm};
use crate::dht::{AdjacencyEntry, FlowRecord, NodeState, Overlay, RoutingTable, TableParams, TableShape};
use crate::geokey::{GeoPoint, RingKey};
use crate::nettest::{SimError, Simulator};
use crate::route;

pub const OMEGA: f64 = 0.729;
pub const C1: f64 = 1.494_45;
pub const C2: f64 = 1.494_45;
pub const PENALTY: f64 = 1e6;
/// Upper bound of the neighborhood-pull dimension.
pub const MAX_NEIGHBOR_WEIGHT: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SwarmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionError { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsoParams {
    pub omega: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for PsoParams {
    fn default() -> Self {
        Self {
            omega: OMEGA,
            c1: C1,
            c2: C2,
        }
    }
}

/// Per-dimension box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    pub fn uniform(dims: usize, lo: f64, hi: f64) -> Self {
        Self::new(vec![lo; dims], vec![hi; dims])
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, &lo), &hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub position: Vec<f64>,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub pbest: Vec<f64>,
    pub pbest_fitness: f64,
}

impl Particle {
    pub fn new(position: Vec<f64>, velocity: Vec<f64>) -> Self {
        Self {
            pbest: position.clone(),
            position,
            velocity,
            pbest_fitness: f64::INFINITY,
        }
    }

    /// Record the fitness of the current position.
    pub fn observe(&mut self, fitness: f64) {
        if fitness < self.pbest_fitness {
            self.pbest_fitness = fitness;
            self.pbest.clone_from(&self.position);
        }
    }
}

/// One velocity/position update with explicit per-dimension random factors.
pub fn pso_step_with(
    particle: &mut Particle,
    gbest: &[f64],
    params: &PsoParams,
    bounds: Option<&Bounds>,
    r1: &[f64],
    r2: &[f64],
) -> Result<(), SwarmError> {
    let d = particle.position.len();
    for got in [particle.velocity.len(), particle.pbest.len(), gbest.len(), r1.len(), r2.len()] {
        if got != d {
            return Err(SwarmError::DimensionError { expected: d, got });
        }
    }
    if let Some(b) = bounds {
        if b.dims() != d {
            return Err(SwarmError::DimensionError {
                expected: d,
                got: b.dims(),
            });
        }
    }
    for i in 0..d {
        let x = particle.position[i];
        particle.velocity[i] = params.omega * particle.velocity[i]
            + params.c1 * r1[i] * (particle.pbest[i] - x)
            + params.c2 * r2[i] * (gbest[i] - x);
        particle.position[i] = x + particle.velocity[i];
    }
    if let Some(b) = bounds {
        b.clamp(&mut particle.position);
    }
    Ok(())
}

/// `v ← ω·v + c1·r1⊙(pbest−x) + c2·r2⊙(gbest−x)`, `x ← x + v`, with fresh
/// uniform `r1`, `r2`.
pub fn pso_step<R: Rng + ?Sized>(
    particle: &mut Particle,
    gbest: &[f64],
    params: &PsoParams,
    bounds: Option<&Bounds>,
    rng: &mut R,
) -> Result<(), SwarmError> {
    let d = particle.position.len();
    let r1: Vec<f64> = (0..d).map(|_| rng.random()).collect();
    let r2: Vec<f64> = (0..d).map(|_| rng.random()).collect();
    pso_step_with(particle, gbest, params, bounds, &r1, &r2)
}

/// Plain global-best PSO over a box.
pub fn minimize<F, R>(mut f: F, bounds: &Bounds, particles: usize, iterations: usize, params: &PsoParams, rng: &mut R) -> Best
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let span: Vec<f64> = bounds.lo.iter().zip(&bounds.hi).map(|(l, h)| h - l).collect();
    let mut swarm: Vec<Particle> = (0..particles.max(1))
        .map(|_| {
            let x = bounds.sample(rng);
            let v = span.iter().map(|s| (rng.random::<f64>() - 0.5) * s * 0.2).collect();
            Particle::new(x, v)
        })
        .collect();
    let mut best = Best {
        position: swarm[0].position.clone(),
        fitness: f64::INFINITY,
    };
    for p in &mut swarm {
        let v = f(&p.position);
        p.observe(v);
        if v < best.fitness {
            best = Best {
                position: p.position.clone(),
                fitness: v,
            };
        }
    }
    for _ in 0..iterations {
        let g = best.position.clone();
        for p in &mut swarm {
            pso_step(p, &g, params, Some(bounds), rng).expect("dimensions agree");
            let v = f(&p.position);
            p.observe(v);
            if v < best.fitness {
                best = Best {
                    position: p.position.clone(),
                    fitness: v,
                };
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Exploration,
    Validation,
    Diffusion,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Exploration => "exploration",
            Phase::Validation => "validation",
            Phase::Diffusion => "diffusion",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwarmConfig {
    pub particles: usize,
    /// Peers whose tables are sampled per exploration.
    pub peers: usize,
    /// Flows per exploration and per validation sample.
    pub samples: usize,
    /// Minimum relative improvement for acceptance.
    pub threshold: f64,
    pub max_interval: u64,
    pub pso: PsoParams,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self {
            particles: 6,
            peers: 8,
            samples: 30,
            threshold: 0.01,
            max_interval: 64,
            pso: PsoParams::default(),
        }
    }
}

/// Swarm state of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmState {
    pub particles: Vec<Particle>,
    pub gbest: Option<Best>,
    /// Position of the installed table.
    pub active: Vec<f64>,
    pub phase: Phase,
    pub stall_count: u32,
    pub interval: u64,
    pub next_due: u64,
    pub accepted: u64,
    pub estimate: Option<NetworkEstimate>,
}

impl SwarmState {
    /// Particle 0 starts on `initial`; the rest are spread over the box.
    pub fn new<R: Rng + ?Sized>(initial: Vec<f64>, bounds: &Bounds, cfg: &SwarmConfig, rng: &mut R) -> Self {
        let span: Vec<f64> = bounds.lo.iter().zip(&bounds.hi).map(|(l, h)| h - l).collect();
        let particles = (0..cfg.particles.max(1))
            .map(|i| {
                let x = if i == 0 { initial.clone() } else { bounds.sample(rng) };
                let v = span.iter().map(|s| (rng.random::<f64>() - 0.5) * s * 0.2).collect();
                Particle::new(x, v)
            })
            .collect();
        Self {
            particles,
            gbest: None,
            active: initial,
            phase: Phase::Exploration,
            stall_count: 0,
            interval: 1,
            next_due: 0,
            accepted: 0,
            estimate: None,
        }
    }

    pub fn gbest_fitness(&self) -> f64 {
        self.gbest.as_ref().map_or(f64::INFINITY, |b| b.fitness)
    }

    /// At the interval ceiling the node no longer runs or sends anything.
    pub fn is_saturated(&self, cfg: &SwarmConfig) -> bool {
        self.interval >= cfg.max_interval
    }

    pub fn is_due(&self, epoch: u64, cfg: &SwarmConfig) -> bool {
        !self.is_saturated(cfg) && epoch >= self.next_due
    }

    /// Move every particle once; returns a candidate if one beat gbest.
    pub fn explore<F, R>(&mut self, bounds: &Bounds, cfg: &SwarmConfig, mut f: F, rng: &mut R) -> Option<Vec<f64>>
    where
        F: FnMut(&[f64]) -> f64,
        R: Rng + ?Sized,
    {
        self.phase = Phase::Exploration;
        if self.gbest.is_none() {
            let v = f(&self.active);
            self.gbest = Some(Best {
                position: self.active.clone(),
                fitness: v,
            });
        }
        let g = self.gbest.as_ref().expect("set above").position.clone();
        let mut round: Option<Best> = None;
        for p in &mut self.particles {
            pso_step(p, &g, &cfg.pso, Some(bounds), rng).expect("dimensions agree");
            let v = f(&p.position);
            p.observe(v);
            if round.as_ref().is_none_or(|b| v < b.fitness) {
                round = Some(Best {
                    position: p.position.clone(),
                    fitness: v,
                });
            }
        }
        let round = round?;
        if round.fitness < self.gbest_fitness() {
            let pos = round.position.clone();
            self.gbest = Some(round);
            Some(pos)
        } else {
            None
        }
    }

    /// Accept iff the candidate beats the installed position by more than the
    /// threshold on the same fresh sample.
    pub fn validate(&mut self, candidate_fitness: f64, active_fitness: f64, cfg: &SwarmConfig) -> bool {
        self.phase = Phase::Validation;
        active_fitness.is_finite() && active_fitness - candidate_fitness > cfg.threshold * active_fitness.abs()
    }

    pub fn accept(&mut self, candidate: Vec<f64>, epoch: u64) {
        self.phase = Phase::Diffusion;
        self.active = candidate;
        self.stall_count = 0;
        self.interval = 1;
        self.next_due = epoch + 1;
        self.accepted += 1;
    }

    pub fn stall(&mut self, epoch: u64, cfg: &SwarmConfig) {
        self.stall_count += 1;
        self.interval = (self.interval * 2).min(cfg.max_interval);
        self.next_due = epoch + self.interval;
    }

    /// Adopt a diffused position if it scores better here.
    pub fn receive(&mut self, position: &[f64], fitness_here: f64) -> bool {
        if position.len() != self.active.len() || !(fitness_here < self.gbest_fitness()) {
            return false;
        }
        self.gbest = Some(Best {
            position: position.to_vec(),
            fitness: fitness_here,
        });
        true
    }
}

/// Penalty weights for the table constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Per missing level with live siblings.
    pub missing_level: f64,
    /// Per neighbor below the minimum.
    pub neighbor_deficit: f64,
    /// Per entry above the size bound.
    pub oversize: f64,
    /// Per flow the table cannot deliver.
    pub undeliverable: f64,
    /// Defaults to the configured neighborhood size.
    pub min_neighbors: Option<usize>,
}

impl Default for Objective {
    fn default() -> Self {
        Self::with_penalty(PENALTY)
    }
}

impl Objective {
    pub fn with_penalty(lambda: f64) -> Self {
        Self {
            missing_level: lambda,
            neighbor_deficit: lambda,
            oversize: lambda,
            undeliverable: lambda,
            min_neighbors: None,
        }
    }
}

/// Nonnegative deficits: missing levels, missing neighbors, excess entries.
pub fn violations(ov: &mut Overlay, addr: usize, table: &RoutingTable, objective: &Objective) -> [f64; 3] {
    let missing = ov
        .populated_levels(addr)
        .into_iter()
        .filter(|&l| table.levels.get(l).is_none_or(|b| b.is_empty()))
        .count();
    let want = objective
        .min_neighbors
        .unwrap_or(ov.shape.neighborhood)
        .min(ov.live_count().saturating_sub(1));
    let deficit = want.saturating_sub(table.neighbors.len());
    let excess = table.finger_count().saturating_sub(ov.shape.finger_bound())
        + table.total_entries().saturating_sub(ov.shape.entry_bound());
    [missing as f64, deficit as f64, excess as f64]
}

/// Sum of expected link latencies along the greedy route, if it delivers.
pub fn estimated_path_latency(ov: &Overlay, src: usize, key: &RingKey) -> Option<f64> {
    let hops = route::lookup(ov, src, key).ok()?;
    Some(
        hops.windows(2)
            .map(|w| {
                ov.link
                    .expected_latency(&ov.nodes[w[0]].id.position, &ov.nodes[w[1]].id.position)
            })
            .sum(),
    )
}

/// `Σ w·latency + Σ λ·violation` with `table` standing in for the node's own.
pub fn fitness_of_table(
    ov: &mut Overlay,
    addr: usize,
    table: &RoutingTable,
    sample: &[FlowRecord],
    objective: &Objective,
) -> f64 {
    let v = violations(ov, addr, table, objective);
    let penalty = objective.missing_level * v[0] + objective.neighbor_deficit * v[1] + objective.oversize * v[2];
    let installed = std::mem::replace(&mut ov.nodes[addr].table, table.clone());
    let latency: f64 = sample
        .iter()
        .map(|flow| {
            let w = flow.weight.max(0.0);
            match estimated_path_latency(ov, addr, &flow.target) {
                Some(l) => w * l,
                None => objective.undeliverable,
            }
        })
        .sum();
    ov.nodes[addr].table = installed;
    latency + penalty
}

/// Fitness of the table induced by `position`.
pub fn fitness<R: Rng + ?Sized>(
    position: &[f64],
    ov: &mut Overlay,
    addr: usize,
    sample: &[FlowRecord],
    objective: &Objective,
    bias: Option<GeoPoint>,
    rng: &mut R,
) -> f64 {
    let params = params_from_position(position, &ov.shape, bias);
    let table = ov.candidate_table(addr, params, rng);
    fitness_of_table(ov, addr, &table, sample, objective)
}

pub fn search_bounds(shape: &TableShape) -> Bounds {
    let slots = shape.max_slots();
    let mut hi = vec![1.0 - 1e-9; slots];
    hi.push(MAX_NEIGHBOR_WEIGHT);
    Bounds::new(vec![0.0; slots + 1], hi)
}

pub fn position_of(params: &TableParams, shape: &TableShape) -> Vec<f64> {
    let mut x: Vec<f64> = (0..shape.max_slots())
        .map(|i| params.slot_fractions.get(i).copied().unwrap_or(0.0))
        .collect();
    x.push(params.neighbor_weight);
    x
}

pub fn params_from_position(position: &[f64], shape: &TableShape, bias: Option<GeoPoint>) -> TableParams {
    let slots = shape.max_slots();
    TableParams {
        slot_fractions: position.iter().take(slots).map(|f| f.clamp(0.0, 1.0 - 1e-9)).collect(),
        neighbor_weight: position.get(slots).copied().unwrap_or(0.0).clamp(0.0, MAX_NEIGHBOR_WEIGHT),
        neighbor_bias: bias,
    }
}

/// `n` flows drawn with replacement from the node's recent sends.
pub fn sample_traffic<R: Rng + ?Sized>(node: &NodeState, n: usize, rng: &mut R) -> Vec<FlowRecord> {
    if node.traffic.is_empty() {
        return Vec::new();
    }
    (0..n).map(|_| *node.traffic.choose(rng).expect("non-empty")).collect()
}

/// Have every live node look up `per_node` targets drawn from `targets`,
/// recording the flows it sends.
pub fn record_traffic<R: Rng + ?Sized>(ov: &mut Overlay, per_node: usize, targets: &Gmm, rng: &mut R) -> usize {
    let side = ov.config.side;
    let bits = ov.config.bits;
    let opts = route::RouteOptions::default();
    let mut delivered = 0;
    for addr in ov.live_addrs() {
        for _ in 0..per_node {
            let [x, y] = targets.sample(rng);
            let p = GeoPoint::new(x.clamp(0.0, side * (1.0 - 1e-12)), y.clamp(0.0, side * (1.0 - 1e-12)));
            let key = crate::geokey::point_to_key(p, side, bits).expect("clamped into region");
            if route::route(ov, addr, &key, &opts, rng).is_ok() {
                delivered += 1;
            }
        }
    }
    delivered
}

/// Mean estimated latency over every flow currently recorded in the overlay.
pub fn mean_traffic_latency(ov: &Overlay) -> f64 {
    let mut sum = 0.0;
    let mut weight = 0.0;
    for addr in ov.live_addrs() {
        for f in &ov.nodes[addr].traffic {
            if let Some(l) = estimated_path_latency(ov, addr, &f.target) {
                sum += f.weight * l;
                weight += f.weight;
            }
        }
    }
    if weight > 0.0 {
        sum / weight
    } else {
        0.0
    }
}

/// Population and traffic mixtures as one node sees them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEstimate {
    pub population: Gmm,
    pub traffic: Gmm,
}

impl NetworkEstimate {
    /// Mean of the heaviest traffic component.
    pub fn traffic_focus(&self) -> Option<GeoPoint> {
        self.traffic
            .components
            .iter()
            .max_by(|a, b| a.weight.total_cmp(&b.weight))
            .map(|c| GeoPoint::new(c.gaussian.mean[0], c.gaussian.mean[1]))
    }
}

/// Inputs gathered during exploration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateSamples {
    pub positions: Vec<GeoPoint>,
    /// `(source, destination, weight)`.
    pub flows: Vec<(GeoPoint, GeoPoint, f64)>,
}

fn refit(previous: Option<&Gmm>, points: &[[f64; 2]], weights: &[f64], k: usize, seed: u64) -> Option<Gmm> {
    if points.is_empty() {
        return previous.cloned();
    }
    let k = k.min(points.len()).max(1);
    let init = match previous {
        Some(g) if g.len() == k => g.clone(),
        _ => {
            let km = kmeans_restarts(points, k, seed, 4, 100, 1e-9).ok()?;
            gmm_from_kmeans(points, &km)
        }
    };
    Some(em_fit_weighted(points, weights, init, 1e-6, 50).gmm)
}

/// Incremental EM re-fit of both mixtures, seeded from `previous`.
pub fn update_estimates(
    previous: Option<&NetworkEstimate>,
    samples: &EstimateSamples,
    k: usize,
    seed: u64,
) -> Option<NetworkEstimate> {
    let pos: Vec<[f64; 2]> = samples.positions.iter().map(to_xy).collect();
    let population = refit(previous.map(|e| &e.population), &pos, &vec![1.0; pos.len()], k, seed)?;
    let mids: Vec<[f64; 2]> = samples.flows.iter().map(|(a, b, _)| to_xy(&a.midpoint(b))).collect();
    let weights: Vec<f64> = samples.flows.iter().map(|f| f.2.max(0.0)).collect();
    let traffic = if weights.iter().sum::<f64>() > 0.0 {
        refit(previous.map(|e| &e.traffic), &mids, &weights, k, seed)
    } else {
        None
    }
    .or_else(|| previous.map(|e| e.traffic.clone()))
    .unwrap_or_else(|| population.clone());
    Some(NetworkEstimate { population, traffic })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OverheadCategory {
    Clustering,
    PeerTable,
    Routing,
    Other,
}

impl OverheadCategory {
    pub const ALL: [OverheadCategory; 4] = [Self::Clustering, Self::PeerTable, Self::Routing, Self::Other];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Clustering => "clustering",
            Self::PeerTable => "peer_table",
            Self::Routing => "routing",
            Self::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub messages: [u64; 4],
    pub units: [u64; 4],
}

impl CategoryCounts {
    pub fn messages(&self, c: OverheadCategory) -> u64 {
        self.messages[c.index()]
    }

    pub fn units(&self, c: OverheadCategory) -> u64 {
        self.units[c.index()]
    }

    pub fn total_messages(&self) -> u64 {
        self.messages.iter().sum()
    }
}

/// Message accounting, bucketed by epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverheadCounters {
    pub current: CategoryCounts,
    pub history: Vec<CategoryCounts>,
}

impl OverheadCounters {
    pub fn end_epoch(&mut self) {
        self.history.push(std::mem::take(&mut self.current));
    }

    pub fn totals(&self) -> CategoryCounts {
        let mut t = self.current;
        for e in &self.history {
            for i in 0..4 {
                t.messages[i] += e.messages[i];
                t.units[i] += e.units[i];
            }
        }
        t
    }
}

fn log2_ceil(n: usize) -> u64 {
    if n <= 1 {
        0
    } else {
        (n as f64).log2().ceil() as u64
    }
}

/// Charge one event under the accounting model: clustering updates carry `k`
/// units and peer-table updates `log₂N` units, each to `log₂N` recipients;
/// anything else is one unit to one recipient.
pub fn overhead_account(counters: &mut OverheadCounters, category: OverheadCategory, n: usize, k: usize) {
    let lg = log2_ceil(n);
    let (recipients, units) = match category {
        OverheadCategory::Clustering => (lg, k as u64),
        OverheadCategory::PeerTable => (lg, lg),
        OverheadCategory::Routing | OverheadCategory::Other => (1, 1),
    };
    let i = category.index();
    counters.current.messages[i] += recipients;
    counters.current.units[i] += recipients * units;
}

/// Payload of a diffusion message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMessage {
    pub position: Vec<f64>,
    pub fitness: f64,
    /// `(level, p, q, entry)` rows for the sender's own clusters.
    pub rows: Vec<(usize, u64, u64, AdjacencyEntry)>,
}

/// One line of the convergence log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub epoch: u64,
    pub node: String,
    pub phase: Phase,
    pub gbest_fitness: f64,
    pub interval: u64,
    pub messages: u64,
}

/// Per-epoch aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub stepped: usize,
    pub accepted: usize,
    /// Clustering and peer-table messages per epoch implied by current
    /// intervals; zero once every node is saturated.
    pub t_c: f64,
    pub t_p: f64,
    /// Optimization messages actually charged this epoch.
    pub messages: u64,
    pub saturated: usize,
}

/// Drives every node's swarm on a simulator, one epoch at a time.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: SwarmConfig,
    pub objective: Objective,
    pub bounds: Bounds,
    pub swarms: BTreeMap<usize, SwarmState>,
    pub counters: OverheadCounters,
    pub log: Vec<ConvergenceRow>,
    pub summaries: Vec<EpochSummary>,
    pub epoch: u64,
    sent_this_epoch: BTreeMap<usize, u64>,
}

impl Optimizer {
    pub fn new<R: Rng + ?Sized>(ov: &Overlay, config: SwarmConfig, objective: Objective, rng: &mut R) -> Self {
        let bounds = search_bounds(&ov.shape);
        let mut swarms = BTreeMap::new();
        for addr in ov.live_addrs() {
            let init = position_of(&ov.nodes[addr].table.params, &ov.shape);
            swarms.insert(addr, SwarmState::new(init, &bounds, &config, rng));
        }
        Self {
            config,
            objective,
            bounds,
            swarms,
            counters: OverheadCounters::default(),
            log: Vec::new(),
            summaries: Vec::new(),
            epoch: 0,
            sent_this_epoch: BTreeMap::new(),
        }
    }

    pub fn all_saturated(&self) -> bool {
        self.swarms.values().all(|s| s.is_saturated(&self.config))
    }

    fn charge(&mut self, addr: usize, category: OverheadCategory, n: usize, k: usize) {
        let before = self.counters.current.total_messages();
        overhead_account(&mut self.counters, category, n, k);
        *self.sent_this_epoch.entry(addr).or_insert(0) += self.counters.current.total_messages() - before;
    }

    /// One full cycle at `addr`: explore, validate, diffuse or stall.
    /// Returns the diffusion messages to send.
    pub fn phase_step<R: Rng + ?Sized>(
        &mut self,
        ov: &mut Overlay,
        addr: usize,
        rng: &mut R,
    ) -> Vec<(usize, DiffusionMessage)> {
        let n = ov.live_count();
        let k = ov.config.k;
        let epoch = self.epoch;
        let cfg = self.config;
        let objective = self.objective;

        // Exploration: sample peers' tables and adjacency rows.
        let others: Vec<usize> = ov.live_addrs().into_iter().filter(|&a| a != addr).collect();
        let peers: Vec<usize> = others.choose_multiple(rng, cfg.peers).copied().collect();
        let mut samples = EstimateSamples::default();
        samples.positions.push(ov.nodes[addr].id.position);
        for &p in &peers {
            samples.positions.push(ov.nodes[p].id.position);
            let src = ov.nodes[p].id.position;
            samples
                .flows
                .extend(ov.nodes[p].traffic.iter().map(|f| (src, f.target_point, f.weight)));
            for level in 1..ov.nodes[p].matrices.len() {
                let rows: Vec<((u64, u64), AdjacencyEntry)> =
                    ov.nodes[p].matrices[level].iter().map(|(k, e)| (*k, *e)).collect();
                for ((a, b), e) in rows {
                    ov.nodes[addr].matrices[level].merge_entry(a, b, e);
                }
            }
        }
        let own = ov.nodes[addr].id.position;
        samples
            .flows
            .extend(ov.nodes[addr].traffic.iter().map(|f| (own, f.target_point, f.weight)));
        if !peers.is_empty() {
            self.charge(addr, OverheadCategory::PeerTable, n, k);
        }
        let seed = crate::rng::derive(ov.config.seed, (addr as u64) << 20 | epoch);
        let swarm = self.swarms.get_mut(&addr).expect("swarm exists");
        swarm.estimate = update_estimates(swarm.estimate.as_ref(), &samples, k, seed).or(swarm.estimate.take());
        let bias = swarm.estimate.as_ref().and_then(NetworkEstimate::traffic_focus);

        let explore_sample = sample_traffic(&ov.nodes[addr], cfg.samples, rng);
        if explore_sample.is_empty() {
            swarm.stall(epoch, &cfg);
            return Vec::new();
        }
        let bounds = self.bounds.clone();
        let candidate = {
            let mut r2 = crate::rng::seeded(rng.random());
            let mut eval = |x: &[f64]| fitness(x, ov, addr, &explore_sample, &objective, bias, &mut r2);
            swarm.explore(&bounds, &cfg, &mut eval, rng)
        };
        let Some(candidate) = candidate else {
            swarm.stall(epoch, &cfg);
            return Vec::new();
        };

        // Validation on a fresh sample, paired against the installed table.
        let fresh = sample_traffic(&ov.nodes[addr], cfg.samples, rng);
        let params = params_from_position(&candidate, &ov.shape, bias);
        let cand_table = ov.candidate_table(addr, params, rng);
        let f_cand = fitness_of_table(ov, addr, &cand_table, &fresh, &objective);
        let installed = ov.nodes[addr].table.clone();
        let f_active = fitness_of_table(ov, addr, &installed, &fresh, &objective);
        if !swarm.validate(f_cand, f_active, &cfg) {
            swarm.stall(epoch, &cfg);
            return Vec::new();
        }

        // Diffusion.
        ov.nodes[addr].table = cand_table;
        swarm.accept(candidate.clone(), epoch);
        let fitness_sent = swarm.gbest_fitness();
        self.charge(addr, OverheadCategory::Clustering, n, k);
        self.charge(addr, OverheadCategory::PeerTable, n, k);
        let node = &ov.nodes[addr];
        let mut rows = Vec::new();
        for level in 1..node.matrices.len() {
            let p = node.id.cluster_path.index_at(level, k);
            for (q, e) in node.matrices[level].row(p) {
                rows.push((level, p, q, e));
            }
        }
        let msg = DiffusionMessage {
            position: candidate,
            fitness: fitness_sent,
            rows,
        };
        let mut recipients: Vec<usize> = node.table.neighbors.iter().map(|e| e.peer.addr).collect();
        for bucket in node.table.levels.iter().skip(1) {
            if let Some(first) = bucket.first() {
                recipients.push(first.peer.addr);
            }
        }
        recipients.sort_unstable();
        recipients.dedup();
        recipients
            .into_iter()
            .filter(|&r| r != addr && ov.is_alive(r))
            .map(|r| (r, msg.clone()))
            .collect()
    }

    /// Apply a diffusion message at its recipient.
    pub fn deliver<R: Rng + ?Sized>(&mut self, ov: &mut Overlay, to: usize, msg: &DiffusionMessage, rng: &mut R) {
        if !ov.is_alive(to) {
            return;
        }
        for &(level, p, q, e) in &msg.rows {
            if let Some(m) = ov.nodes[to].matrices.get_mut(level) {
                m.merge_entry(p, q, e);
            }
        }
        let Some(swarm) = self.swarms.get(&to) else {
            return;
        };
        if msg.position.len() != swarm.active.len() {
            return;
        }
        let sample = sample_traffic(&ov.nodes[to], self.config.samples, rng);
        if sample.is_empty() {
            return;
        }
        let bias = swarm.estimate.as_ref().and_then(NetworkEstimate::traffic_focus);
        let here = fitness(&msg.position, ov, to, &sample, &self.objective, bias, rng);
        self.swarms.get_mut(&to).expect("checked").receive(&msg.position, here);
    }

    /// Expected clustering and peer-table messages per epoch.
    pub fn rates(&self, n: usize) -> (f64, f64) {
        let lg = log2_ceil(n) as f64;
        let active: f64 = self
            .swarms
            .values()
            .filter(|s| !s.is_saturated(&self.config))
            .fold(0.0, |acc, s| acc + 1.0 / s.interval as f64);
        // Each cycle explores (peer-table); accepted cycles also diffuse, so
        // the explore cost is the steady floor of both rates.
        let accept_share: f64 = self
            .swarms
            .values()
            .filter(|s| !s.is_saturated(&self.config) && s.stall_count == 0 && s.accepted > 0)
            .fold(0.0, |acc, s| acc + 1.0 / s.interval as f64);
        (accept_share * lg, active * lg + accept_share * lg)
    }

    /// Step every due node, deliver diffusion through the simulator, and
    /// close the epoch.
    pub fn run_epoch(&mut self, sim: &mut Simulator) -> Result<EpochSummary, SimError> {
        let epoch = self.epoch;
        self.sent_this_epoch.clear();
        let live = sim.overlay.live_addrs();
        let mut init_rng = crate::rng::seeded(crate::rng::derive(sim.config.seed, 0x5a_0000 + epoch));
        for &addr in &live {
            if !self.swarms.contains_key(&addr) {
                let init = position_of(&sim.overlay.nodes[addr].table.params, &sim.overlay.shape);
                let state = SwarmState::new(init, &self.bounds, &self.config, &mut init_rng);
                self.swarms.insert(addr, state);
            }
        }
        self.swarms.retain(|a, _| sim.overlay.is_alive(*a));
        let mut stepped = 0;
        let mut accepted = 0;
        for &addr in &live {
            if !self.swarms[&addr].is_due(epoch, &self.config) {
                continue;
            }
            stepped += 1;
            let (ov, rng) = sim.parts();
            let before = self.swarms[&addr].accepted;
            let out = self.phase_step(ov, addr, rng);
            if self.swarms[&addr].accepted > before {
                accepted += 1;
            }
            for (to, msg) in out {
                let bytes = serde_json::to_vec(&msg).expect("serializable");
                sim.send(addr, to, &bytes)?;
            }
        }
        let until = sim.now + sim.config.epoch_length;
        sim.run(until)?;
        sim.now = sim.now.max(until);
        let inbox = std::mem::take(&mut sim.deliveries);
        for d in inbox {
            if let Ok(msg) = serde_json::from_slice::<DiffusionMessage>(&d.payload) {
                let (ov, rng) = sim.parts();
                self.deliver(ov, d.dst, &msg, rng);
            }
        }
        let n = sim.overlay.live_count();
        let (t_c, t_p) = self.rates(n);
        let messages = self.counters.current.messages(OverheadCategory::Clustering)
            + self.counters.current.messages(OverheadCategory::PeerTable);
        for (&addr, s) in &self.swarms {
            self.log.push(ConvergenceRow {
                epoch,
                node: sim.overlay.nodes[addr].id.key.to_hex(),
                phase: s.phase,
                gbest_fitness: s.gbest_fitness(),
                interval: s.interval,
                messages: self.sent_this_epoch.get(&addr).copied().unwrap_or(0),
            });
        }
        self.counters.end_epoch();
        let summary = EpochSummary {
            epoch,
            stepped,
            accepted,
            t_c,
            t_p,
            messages,
            saturated: self.swarms.values().filter(|s| s.is_saturated(&self.config)).count(),
        };
        self.summaries.push(summary);
        self.epoch += 1;
        Ok(summary)
    }

    /// Convergence log as CSV.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,node,phase,gbest_fitness,interval,messages\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{:?},{},{}\n",
                r.epoch, r.node, r.phase, r.gbest_fitness, r.interval, r.messages
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{Component, Gaussian};
    use crate::rng::seeded;

    fn particle_1d() -> Particle {
        Particle {
            position: vec![0.0],
            velocity: vec![1.0],
            pbest: vec![2.0],
            pbest_fitness: 0.0,
        }
    }

    #[test]
    fn hand_evaluated_step() {
        let mut p = particle_1d();
        pso_step_with(&mut p, &[4.0], &PsoParams::default(), None, &[0.5], &[0.5]).unwrap();
        let v: f64 = 0.729 + 1.49445 * 0.5 * 2.0 + 1.49445 * 0.5 * 4.0;
        assert!((v - 5.21235).abs() < 1e-12);
        assert!((p.velocity[0] - v).abs() < 1e-12);
        assert!((p.position[0] - v).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_and_pure_inertia() {
        let mut p = Particle {
            position: vec![1.0, 2.0],
            velocity: vec![0.0, 0.0],
            pbest: vec![1.0, 2.0],
            pbest_fitness: 0.0,
        };
        pso_step(&mut p, &[1.0, 2.0], &PsoParams::default(), None, &mut seeded(1)).unwrap();
        assert_eq!(p.position, vec![1.0, 2.0]);

        let mut q = Particle {
            position: vec![1.0],
            velocity: vec![2.0],
            pbest: vec![9.0],
            pbest_fitness: 0.0,
        };
        let params = PsoParams {
            c1: 0.0,
            c2: 0.0,
            ..PsoParams::default()
        };
        pso_step(&mut q, &[-9.0], &params, None, &mut seeded(2)).unwrap();
        assert_eq!(q.position, vec![1.0 + 0.729 * 2.0]);
    }

    #[test]
    fn dimension_mismatch_and_clamping() {
        let mut p = particle_1d();
        assert_eq!(
            pso_step(&mut p, &[1.0, 2.0], &PsoParams::default(), None, &mut seeded(1)),
            Err(SwarmError::DimensionError { expected: 1, got: 2 })
        );
        let b = Bounds::uniform(1, -1.0, 1.0);
        pso_step_with(&mut p, &[4.0], &PsoParams::default(), Some(&b), &[0.5], &[0.5]).unwrap();
        assert_eq!(p.position, vec![1.0]);
    }

    #[test]
    fn seeded_step_is_reproducible() {
        let run = || {
            let mut p = Particle::new(vec![0.3, -0.2, 0.9], vec![0.1, 0.0, -0.1]);
            let mut rng = seeded(42);
            for _ in 0..10 {
                pso_step(&mut p, &[0.0, 0.0, 0.0], &PsoParams::default(), None, &mut rng).unwrap();
            }
            p.position.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sphere_sanity() {
        let sphere = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let bounds = Bounds::uniform(10, -5.12, 5.12);
        let solved = (0..10u64)
            .filter(|&s| minimize(sphere, &bounds, 20, 2000, &PsoParams::default(), &mut seeded(s)).fitness < 1e-3)
            .count();
        assert!(solved >= 9, "solved {solved}/10");
    }

    #[test]
    fn stall_doubles_until_silent() {
        let cfg = SwarmConfig::default();
        let b = Bounds::uniform(2, 0.0, 1.0);
        let mut s = SwarmState::new(vec![0.5, 0.5], &b, &cfg, &mut seeded(3));
        let mut epoch = 0;
        let mut intervals = Vec::new();
        while s.is_due(epoch, &cfg) || !s.is_saturated(&cfg) {
            if s.is_due(epoch, &cfg) {
                s.stall(epoch, &cfg);
                intervals.push(s.interval);
            }
            epoch += 1;
        }
        assert_eq!(intervals, vec![2, 4, 8, 16, 32, 64]);
        assert!(!s.is_due(epoch + 1000, &cfg));
    }

    #[test]
    fn gbest_never_increases_and_receive_is_min() {
        let cfg = SwarmConfig::default();
        let b = Bounds::uniform(3, -1.0, 1.0);
        let mut rng = seeded(4);
        let mut s = SwarmState::new(vec![0.9, 0.9, 0.9], &b, &cfg, &mut rng);
        let mut noise = seeded(5);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() + noise.random::<f64>() * 0.1;
            s.explore(&b, &cfg, &mut f, &mut rng);
            assert!(s.gbest_fitness() <= last);
            last = s.gbest_fitness();
        }
        assert!(!s.receive(&[0.0, 0.0, 0.0], last + 1.0));
        assert!(s.receive(&[0.0, 0.0, 0.0], last / 2.0));
        assert!(s.gbest_fitness() <= last);
    }

    #[test]
    fn dominant_position_spreads() {
        // Sixteen nodes on a ring share a fitness with a single optimum.
        let target = [0.25, 0.75, 0.5];
        let f = |x: &[f64]| x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let cfg = SwarmConfig::default();
        let b = Bounds::uniform(3, 0.0, 1.0);
        let mut rng = seeded(6);
        let mut nodes: Vec<SwarmState> = (0..16)
            .map(|_| {
                let x = b.sample(&mut rng);
                SwarmState::new(x, &b, &cfg, &mut rng)
            })
            .collect();
        for epoch in 0..50u64 {
            let mut outbox = Vec::new();
            for (i, s) in nodes.iter_mut().enumerate() {
                if !s.is_due(epoch, &cfg) {
                    continue;
                }
                match s.explore(&b, &cfg, f, &mut rng) {
                    Some(c) if s.validate(f(&c), f(&s.active), &cfg) => {
                        s.accept(c.clone(), epoch);
                        outbox.push(((i + 1) % 16, c.clone()));
                        outbox.push(((i + 15) % 16, c));
                    }
                    _ => s.stall(epoch, &cfg),
                }
            }
            for (to, pos) in outbox {
                let here = f(&pos);
                nodes[to].receive(&pos, here);
            }
        }
        for s in &nodes {
            assert!(s.gbest_fitness() < 1e-2, "{}", s.gbest_fitness());
        }
    }

    fn uniform_samples(n: usize, seed: u64) -> Vec<GeoPoint> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| GeoPoint::new(rng.random::<f64>() * 1000.0, rng.random::<f64>() * 1000.0))
            .collect()
    }

    #[test]
    fn uniform_estimate_spans_region() {
        let samples = EstimateSamples {
            positions: uniform_samples(2000, 7),
            flows: Vec::new(),
        };
        let e = update_estimates(None, &samples, 1, 7).unwrap();
        assert_eq!(e.population.len(), 1);
        let g = e.population.components[0].gaussian;
        // Variance of U(0, 1000) is 1000²/12.
        for (i, m) in g.mean.iter().enumerate() {
            assert!((m - 500.0).abs() < 30.0);
            assert!((g.cov[i][i] / (1e6 / 12.0) - 1.0).abs() < 0.1);
        }
        assert!((e.population.weight_sum() - 1.0).abs() < 1e-12);
        assert!((e.traffic.weight_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corner_blob_takes_the_mass() {
        let prior = update_estimates(
            None,
            &EstimateSamples {
                positions: uniform_samples(1000, 8),
                flows: Vec::new(),
            },
            2,
            8,
        )
        .unwrap();
        let blob = Gmm::single(Gaussian::isotropic([100.0, 100.0], 400.0));
        let mut rng = seeded(9);
        let pts: Vec<GeoPoint> = (0..1000)
            .map(|_| {
                let [x, y] = blob.sample(&mut rng);
                GeoPoint::new(x, y)
            })
            .collect();
        let flows = pts.iter().map(|&p| (p, p, 1.0)).collect();
        let e = update_estimates(Some(&prior), &EstimateSamples { positions: pts, flows }, 2, 9).unwrap();
        let near: &Component = e
            .population
            .components
            .iter()
            .min_by(|a, b| {
                let da = (a.gaussian.mean[0] - 100.0).hypot(a.gaussian.mean[1] - 100.0);
                let db = (b.gaussian.mean[0] - 100.0).hypot(b.gaussian.mean[1] - 100.0);
                da.total_cmp(&db)
            })
            .unwrap();
        assert!(near.weight > 0.9, "{}", near.weight);
        assert!((e.population.weight_sum() - 1.0).abs() < 1e-12);
        let focus = e.traffic_focus().unwrap();
        assert!(focus.distance(&GeoPoint::new(100.0, 100.0)) < 50.0);
    }

    #[test]
    fn overhead_model() {
        let mut c = OverheadCounters::default();
        assert_eq!(c.totals(), CategoryCounts::default());
        overhead_account(&mut c, OverheadCategory::Clustering, 16, 2);
        assert_eq!(c.current.messages(OverheadCategory::Clustering), 4);
        assert_eq!(c.current.units(OverheadCategory::Clustering), 8);
        overhead_account(&mut c, OverheadCategory::PeerTable, 16, 2);
        assert_eq!(c.current.units(OverheadCategory::PeerTable), 16);
        c.end_epoch();
        assert_eq!(c.current.total_messages(), 0);
        assert_eq!(c.totals().total_messages(), 8);
    }

    fn small_overlay(n: usize, seed: u64) -> Overlay {
        use crate::dht::OverlayConfig;
        use crate::nettest::{LinkModel, VelocityField};
        let cfg = OverlayConfig {
            h: 3,
            ..OverlayConfig::default()
        };
        Overlay::random(cfg, LinkModel::new(VelocityField::uniform(1000.0, 1.0), 0.0), n, &mut seeded(seed))
    }

    #[test]
    fn empty_sample_scores_zero() {
        let mut ov = small_overlay(32, 10);
        let table = ov.nodes[0].table.clone();
        assert_eq!(fitness_of_table(&mut ov, 0, &table, &[], &Objective::default()), 0.0);
    }

    #[test]
    fn missing_level_costs_the_penalty() {
        let mut ov = small_overlay(32, 11);
        let addr = (0..32).find(|&a| ov.populated_levels(a).contains(&2)).unwrap();
        let mut table = ov.nodes[addr].table.clone();
        table.levels[2].clear();
        let obj = Objective::with_penalty(1000.0);
        assert_eq!(violations(&mut ov, addr, &table, &obj)[0], 1.0);
        assert!(fitness_of_table(&mut ov, addr, &table, &[], &obj) >= 1000.0);
    }

    #[test]
    fn two_flows_sum_route_latencies() {
        let mut ov = small_overlay(8, 12);
        let flows: Vec<FlowRecord> = [3usize, 6]
            .iter()
            .zip([1.0, 2.5])
            .map(|(&dst, w)| FlowRecord {
                target: ov.nodes[dst].id.key,
                target_point: ov.nodes[dst].id.position,
                weight: w,
            })
            .collect();
        let mut expect = 0.0;
        for f in &flows {
            let hops = route::lookup(&ov, 0, &f.target).unwrap();
            let d: f64 = hops
                .windows(2)
                .map(|w| ov.nodes[w[0]].id.position.distance(&ov.nodes[w[1]].id.position))
                .sum();
            expect += f.weight * d;
        }
        let table = ov.nodes[0].table.clone();
        let got = fitness_of_table(&mut ov, 0, &table, &flows, &Objective::default());
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn optimizer_goes_quiet_without_hurting_latency() {
        use crate::cluster::Component;
        use crate::nettest::{SimConfig, Simulator};
        let mut sim = Simulator::new(SimConfig {
            nodes: 32,
            seed: 13,
            ..SimConfig::default()
        })
        .unwrap();
        let targets = Gmm {
            components: vec![
                Component {
                    weight: 0.5,
                    gaussian: Gaussian::isotropic([500.0, 500.0], 1e12),
                },
                Component {
                    weight: 0.5,
                    gaussian: Gaussian::isotropic([200.0, 750.0], 6400.0),
                },
            ],
        };
        let (ov, rng) = sim.parts();
        record_traffic(ov, 20, &targets, rng);
        let before = mean_traffic_latency(&sim.overlay);
        let mut opt = Optimizer::new(&sim.overlay, SwarmConfig::default(), Objective::default(), &mut seeded(13));
        let mut last: BTreeMap<usize, f64> = BTreeMap::new();
        for _ in 0..400 {
            opt.run_epoch(&mut sim).unwrap();
            for (&a, s) in &opt.swarms {
                let g = s.gbest_fitness();
                assert!(g <= *last.get(&a).unwrap_or(&f64::INFINITY));
                last.insert(a, g);
            }
            if opt.all_saturated() {
                break;
            }
        }
        assert!(opt.all_saturated());
        let quiet = opt.run_epoch(&mut sim).unwrap();
        assert_eq!((quiet.messages, quiet.t_c, quiet.t_p), (0, 0.0, 0.0));
        assert!(mean_traffic_latency(&sim.overlay) <= before);
    }
}
