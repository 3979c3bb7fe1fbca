//! Measurement harness: named experiments over seeded simulations, reported
//! as flat rows of `(experiment, point, statistic, value, stderr)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{Component, Gaussian, Gmm};
use crate::dht::Overlay;
use crate::geokey::GeoPoint;
use crate::nettest::{FlatChord, SimConfig, SimError, Simulator, XorOverlay};
use crate::rng::{derive, seeded, SimRng};
use crate::route::{self, RouteOptions};
use crate::swarm::{mean_traffic_latency, record_traffic, Objective, OverheadCategory, Optimizer, SwarmConfig};

pub const FORMAT_VERSION: u32 = 1;
/// Expected distance between two uniform points in the unit square.
pub const UNIT_SQUARE_MEAN_DISTANCE: f64 = 0.521_405_433_164_720_7;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment `{0}`; expected one of {names}", names = ExperimentKind::names().join(", "))]
    UnknownExperiment(String),
    #[error("reports are not comparable: {0}")]
    IncomparableReports(String),
    #[error("malformed report: {0}")]
    Malformed(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    PathLength,
    PeerLatency,
    PathLatency,
    Overhead,
    Storage,
    Convergence,
    Churn,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::PathLength,
        Self::PeerLatency,
        Self::PathLatency,
        Self::Overhead,
        Self::Storage,
        Self::Convergence,
        Self::Churn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PathLength => "path-length",
            Self::PeerLatency => "peer-latency",
            Self::PathLatency => "path-latency",
            Self::Overhead => "overhead",
            Self::Storage => "storage",
            Self::Convergence => "convergence",
            Self::Churn => "churn",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|k| k.name()).collect()
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ExperimentError::UnknownExperiment(s.to_string()))
    }
}

/// A named measurement plus everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub kind: ExperimentKind,
    pub config: SimConfig,
    pub seeds: Vec<u64>,
    /// Also emit a per-hop trace of a few lookups.
    pub trace: bool,
}

impl Experiment {
    /// Seeds `seed, seed+1, …` for `repetitions` runs.
    pub fn new(kind: ExperimentKind, config: SimConfig) -> Self {
        let seeds = (0..config.repetitions as u64).map(|i| config.seed.wrapping_add(i)).collect();
        Self {
            kind,
            config,
            seeds,
            trace: false,
        }
    }
}

pub type Point = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub point: Point,
    pub statistic: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    /// Side outputs such as logs and traces, keyed by file name.
    #[serde(skip)]
    pub artifacts: BTreeMap<String, String>,
}

fn point_string(p: &Point) -> String {
    p.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn parse_point(s: &str) -> Result<Point, ExperimentError> {
    if s.is_empty() {
        return Ok(Point::new());
    }
    s.split(';')
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| ExperimentError::Malformed(format!("point entry `{kv}`")))
        })
        .collect()
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experiment", "point", "statistic", "value", "stderr"])
            .expect("in-memory write");
        for r in &self.rows {
            let value = format!("{:?}", r.value);
            let stderr = r.stderr.map(|s| format!("{s:?}")).unwrap_or_default();
            w.write_record([r.experiment.as_str(), &point_string(&r.point), &r.statistic, &value, &stderr])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flushed")).expect("utf8")
    }

    pub fn from_csv(text: &str, seeds: Vec<u64>) -> Result<Self, ExperimentError> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| ExperimentError::Malformed(e.to_string()))?;
            let num = |s: &str| s.parse::<f64>().map_err(|e| ExperimentError::Malformed(e.to_string()));
            rows.push(ReportRow {
                experiment: rec[0].to_string(),
                point: parse_point(&rec[1])?,
                statistic: rec[2].to_string(),
                value: num(&rec[3])?,
                stderr: if rec[4].is_empty() { None } else { Some(num(&rec[4])?) },
            });
        }
        let experiment = rows.first().map(|r| r.experiment.clone()).unwrap_or_default();
        Ok(Self {
            version: FORMAT_VERSION,
            experiment,
            seeds,
            rows,
            artifacts: BTreeMap::new(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Malformed(e.to_string()))
    }

    /// Rows with this statistic whose point matches every given pair.
    pub fn select<'a>(&'a self, statistic: &'a str, filter: &'a [(&'a str, &'a str)]) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| {
            r.statistic == statistic && filter.iter().all(|(k, v)| r.point.get(*k).map(String::as_str) == Some(*v))
        })
    }

    pub fn value(&self, statistic: &str, filter: &[(&str, &str)]) -> Option<f64> {
        self.select(statistic, filter).next().map(|r| r.value)
    }
}

/// Per-point deltas between two reports of the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub deltas: Vec<PointDelta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointDelta {
    pub point: Point,
    pub statistic: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Comparison {
    pub fn all_pass(&self) -> bool {
        self.deltas.iter().all(|d| d.pass)
    }

    pub fn max_abs_delta(&self) -> f64 {
        self.deltas.iter().fold(0.0, |m, d| m.max(d.delta.abs()))
    }
}

/// Tolerance per point: `absolute + sigmas·(stderr_a + stderr_b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub absolute: f64,
    pub sigmas: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            absolute: 1e-9,
            sigmas: 2.0,
        }
    }
}

pub fn compare_report(a: &MetricsReport, b: &MetricsReport, tol: Tolerance) -> Result<Comparison, ExperimentError> {
    if a.experiment != b.experiment {
        return Err(ExperimentError::IncomparableReports(format!(
            "experiments differ: {} vs {}",
            a.experiment, b.experiment
        )));
    }
    if a.rows.len() != b.rows.len() {
        return Err(ExperimentError::IncomparableReports(format!(
            "row counts differ: {} vs {}",
            a.rows.len(),
            b.rows.len()
        )));
    }
    let mut deltas = Vec::with_capacity(a.rows.len());
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        if ra.point != rb.point || ra.statistic != rb.statistic {
            return Err(ExperimentError::IncomparableReports(format!(
                "grid mismatch at {} {} vs {} {}",
                point_string(&ra.point),
                ra.statistic,
                point_string(&rb.point),
                rb.statistic
            )));
        }
        let delta = rb.value - ra.value;
        let tolerance = tol.absolute + tol.sigmas * (ra.stderr.unwrap_or(0.0) + rb.stderr.unwrap_or(0.0));
        deltas.push(PointDelta {
            point: ra.point.clone(),
            statistic: ra.statistic.clone(),
            a: ra.value,
            b: rb.value,
            delta,
            tolerance,
            pass: delta.abs() <= tolerance || (ra.value == rb.value),
        });
    }
    Ok(Comparison { deltas })
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Standard error of the mean.
pub fn stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Nearest-rank percentile, `q` in `[0, 1]`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Least-squares line `y = a + b·x` and its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (my - b * mx, b, r2)
}

/// Measurements from one seed, in emission order.
#[derive(Debug, Default)]
struct SeedRows {
    rows: Vec<(Point, String, f64)>,
    artifacts: BTreeMap<String, String>,
}

impl SeedRows {
    fn push(&mut self, point: &Point, stat: &str, value: f64) {
        self.rows.push((point.clone(), stat.to_string(), value));
    }
}

fn base_point(cfg: &SimConfig, n: usize) -> Point {
    let mut p = Point::new();
    p.insert("n".into(), n.to_string());
    p.insert("k".into(), cfg.k.to_string());
    p.insert("h".into(), cfg.height_for(n).to_string());
    p.insert("m".into(), cfg.neighborhood.to_string());
    p
}

fn with(p: &Point, key: &str, value: impl ToString) -> Point {
    let mut q = p.clone();
    q.insert(key.to_string(), value.to_string());
    q
}

fn build_overlay(cfg: &SimConfig, n: usize, seed: u64) -> (Overlay, SimRng) {
    let mut rng = seeded(seed);
    let ov = Overlay::random(cfg.overlay_config(n, seed), cfg.link_model(), n, &mut rng);
    (ov, rng)
}

fn distinct_pair<R: Rng + ?Sized>(live: &[usize], rng: &mut R) -> (usize, usize) {
    let a = *live.choose(rng).expect("non-empty");
    if live.len() == 1 {
        return (a, a);
    }
    loop {
        let b = *live.choose(rng).expect("non-empty");
        if b != a {
            return (a, b);
        }
    }
}

fn walk_latency<R: Rng + ?Sized>(ov: &Overlay, hops: &[usize], rng: &mut R) -> f64 {
    hops.windows(2)
        .map(|w| ov.link.latency(&ov.nodes[w[0]].id.position, &ov.nodes[w[1]].id.position, rng))
        .sum()
}

/// Baselines over the overlay's own node positions, indexed by node address.
fn baselines(ov: &Overlay, seed: u64, rng: &mut SimRng) -> (Vec<GeoPoint>, FlatChord, XorOverlay) {
    let positions: Vec<GeoPoint> = ov.nodes.iter().map(|n| n.id.position).collect();
    let chord = FlatChord::hashed(&positions, ov.config.bits, derive(seed, 1));
    let xor = XorOverlay::hashed(&positions, derive(seed, 2), rng);
    (positions, chord, xor)
}

fn series_stats(out: &mut SeedRows, point: &Point, series: &str, stat_prefix: &str, xs: &[f64]) {
    let p = with(point, "series", series);
    out.push(&p, &format!("mean_{stat_prefix}"), mean(xs));
    out.push(&p, &format!("median_{stat_prefix}"), percentile(xs, 0.5));
    out.push(&p, &format!("p95_{stat_prefix}"), percentile(xs, 0.95));
}

fn path_length(cfg: &SimConfig, n: usize, seed: u64, out: &mut SeedRows) -> Result<(), ExperimentError> {
    let (ov, mut rng) = build_overlay(cfg, n, seed);
    let (_, chord, xor) = baselines(&ov, seed, &mut rng);
    let live = ov.live_addrs();
    let point = base_point(cfg, n);
    let (mut ours, mut flat, mut kad) = (Vec::new(), Vec::new(), Vec::new());
    let mut delivered = 0usize;
    for _ in 0..cfg.pairs {
        let (s, d) = distinct_pair(&live, &mut rng);
        let key = ov.nodes[d].id.key;
        if let Ok(h) = route::lookup(&ov, s, &key) {
            if *h.last().expect("non-empty") == d {
                delivered += 1;
            }
            ours.push((h.len() - 1) as f64);
        }
        if let Ok(h) = chord.lookup(s, chord.ids[d]) {
            flat.push((h.len() - 1) as f64);
        }
        if let Ok(h) = xor.lookup(s, &xor.ids[d]) {
            kad.push((h.len() - 1) as f64);
        }
    }
    out.push(&point, "log2_n", (n as f64).log2());
    out.push(&with(&point, "series", "ours"), "delivery_rate", delivered as f64 / cfg.pairs.max(1) as f64);
    series_stats(out, &point, "ours", "hops", &ours);
    series_stats(out, &point, "chord", "hops", &flat);
    series_stats(out, &point, "xor", "hops", &kad);
    Ok(())
}

fn path_latency(cfg: &SimConfig, n: usize, seed: u64, out: &mut SeedRows) -> Result<(), ExperimentError> {
    let (ov, mut rng) = build_overlay(cfg, n, seed);
    let (positions, chord, xor) = baselines(&ov, seed, &mut rng);
    let link = ov.link.clone();
    let live = ov.live_addrs();
    let point = base_point(cfg, n);
    let (mut ours, mut flat, mut kad) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.pairs {
        let (s, d) = distinct_pair(&live, &mut rng);
        if let Ok(h) = route::lookup(&ov, s, &ov.nodes[d].id.key) {
            ours.push(walk_latency(&ov, &h, &mut rng));
        }
        if let Ok(p) = chord.route(s, chord.ids[d], &link, &mut rng) {
            flat.push(p.total_latency);
        }
        if let Ok(p) = xor.route(s, &xor.ids[d], &link, &mut rng) {
            kad.push(p.total_latency);
        }
    }
    let direct: Vec<f64> = (0..cfg.pairs.min(1000))
        .map(|_| {
            let (s, d) = distinct_pair(&live, &mut rng);
            link.expected_latency(&positions[s], &positions[d])
        })
        .collect();
    let mut stretch = Vec::new();
    for _ in 0..cfg.pairs.min(200) {
        let (s, d) = distinct_pair(&live, &mut rng);
        let best = route::optimal_latencies(&ov, s)[d];
        if let Ok(h) = route::lookup(&ov, s, &ov.nodes[d].id.key) {
            if best > 0.0 && best.is_finite() {
                stretch.push(route::path_expected_latency(&ov, &h) / best);
            }
        }
    }
    let ours_point = with(&point, "series", "ours");
    out.push(&ours_point, "median_stretch", percentile(&stretch, 0.5));
    out.push(&ours_point, "p95_stretch", percentile(&stretch, 0.95));
    series_stats(out, &point, "ours", "latency", &ours);
    series_stats(out, &point, "chord", "latency", &flat);
    series_stats(out, &point, "xor", "latency", &kad);
    series_stats(out, &point, "direct", "latency", &direct);
    for (series, xs) in [("ours", &ours), ("chord", &flat), ("xor", &kad)] {
        let p = with(&point, "series", series);
        for q in [10, 25, 75, 90] {
            out.push(&p, &format!("p{q}_latency"), percentile(xs, q as f64 / 100.0));
        }
    }
    Ok(())
}

fn peer_latency(cfg: &SimConfig, n: usize, seed: u64, out: &mut SeedRows) -> Result<(), ExperimentError> {
    let (ov, mut rng) = build_overlay(cfg, n, seed);
    let point = base_point(cfg, n);
    let h = ov.config.h;
    let live = ov.live_addrs();
    let mut prev: Option<f64> = None;
    for level in 0..=h {
        // Group live nodes by their level-`level` cluster.
        let mut groups: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
        for &a in &live {
            let path = &ov.nodes[a].id.cluster_path;
            if path.depth() >= level {
                groups.entry(path.truncated(level).0).or_default().push(a);
            }
        }
        let eligible: Vec<usize> = groups.values().filter(|g| g.len() >= 2).flatten().copied().collect();
        if eligible.is_empty() {
            break;
        }
        let mut xs = Vec::with_capacity(cfg.pairs);
        for _ in 0..cfg.pairs {
            let u = *eligible.choose(&mut rng).expect("non-empty");
            let g = &groups[&ov.nodes[u].id.cluster_path.truncated(level).0];
            let (a, b) = distinct_pair(g, &mut rng);
            let (a, b) = if a == u || b == u { (a, b) } else { (u, b) };
            xs.push(ov.link.latency(&ov.nodes[a].id.position, &ov.nodes[b].id.position, &mut rng));
        }
        let p = with(&point, "level", level);
        let m = mean(&xs);
        out.push(&p, "mean_latency", m);
        out.push(&p, "clusters", groups.values().filter(|g| g.len() >= 2).count() as f64);
        if let Some(pm) = prev {
            out.push(&p, "ratio_to_parent", m / pm);
        }
        prev = Some(m);
    }
    Ok(())
}

fn storage(cfg: &SimConfig, n: usize, seed: u64, out: &mut SeedRows) -> Result<(), ExperimentError> {
    let (ov, _) = build_overlay(cfg, n, seed);
    let point = base_point(cfg, n);
    let shape = ov.shape;
    let live = ov.live_addrs();
    let fingers: Vec<f64> = live.iter().map(|&a| ov.nodes[a].table.finger_count() as f64).collect();
    let entries: Vec<f64> = live.iter().map(|&a| ov.nodes[a].table.total_entries() as f64).collect();
    out.push(&point, "finger_bound", shape.finger_bound() as f64);
    out.push(&point, "entry_bound", shape.entry_bound() as f64);
    out.push(&point, "successors", shape.successors as f64);
    out.push(&point, "max_fingers", fingers.iter().fold(0.0, |m: f64, &x| m.max(x)));
    out.push(&point, "max_entries", entries.iter().fold(0.0, |m: f64, &x| m.max(x)));
    out.push(&point, "mean_fingers", mean(&fingers));
    out.push(&point, "mean_entries", mean(&entries));
    for (rank, (&f, &e)) in fingers.iter().zip(&entries).enumerate() {
        let p = with(&point, "node", rank);
        out.push(&p, "fingers", f);
        out.push(&p, "entries", e);
    }
    Ok(())
}

/// Lookup targets: half uniform, half a hotspot placed by the seed.
pub fn traffic_mixture(side: f64, seed: u64) -> Gmm {
    let mut rng = seeded(derive(seed, 0x7a));
    let c = [side * rng.random_range(0.15..0.85), side * rng.random_range(0.15..0.85)];
    Gmm {
        components: vec![
            Component {
                weight: 0.5,
                gaussian: Gaussian::isotropic([side / 2.0, side / 2.0], 1e6 * side * side),
            },
            Component {
                weight: 0.5,
                gaussian: Gaussian::isotropic(c, (0.08 * side).powi(2)),
            },
        ],
    }
}

fn optimizer_sim(cfg: &SimConfig, n: usize, seed: u64) -> Result<(Simulator, Optimizer), ExperimentError> {
    let sim_cfg = SimConfig {
        nodes: n,
        seed,
        ..cfg.clone()
    };
    let mut sim = Simulator::new(sim_cfg)?;
    let targets = traffic_mixture(cfg.side, seed);
    let (ov, rng) = sim.parts();
    record_traffic(ov, 20, &targets, rng);
    let opt = Optimizer::new(&sim.overlay, SwarmConfig::default(), Objective::default(), &mut seeded(derive(seed, 3)));
    Ok((sim, opt))
}

fn convergence(cfg: &SimConfig, n: usize, seed: u64, out: &mut SeedRows) -> Result<(), ExperimentError> {
    let (mut sim, mut opt) = optimizer_sim(cfg, n, seed)?;
    let point = base_point(cfg, n);
    let initial = mean_traffic_latency(&sim.overlay);
    out.push(&point, "initial_traffic_latency", initial);
    let mut saturated_at = None;
    for e in 0..cfg.epochs {
        let s = opt.run_epoch(&mut sim)?;
        let finite: Vec<f64> = opt
            .swarms
            .values()
            .map(|s| s.gbest_fitness())
            .filter(|f| f.is_finite())
            .collect();
        let p = with(&point, "epoch", e);
        out.push(&p, "gbest_mean", mean(&finite));
        out.push(&p, "t_c", s.t_c);
        out.push(&p, "t_p", s.t_p);
        out.push(&p, "messages", s.messages as f64);
        out.push(&p, "accepted", s.accepted as f64);
        out.push(&p, "saturated", s.saturated as f64);
        if opt.all_saturated() && saturated_at.is_none() {
            saturated_at = Some(e);
        }
    }
    out.push(&point, "final_traffic_latency", mean_traffic_latency(&sim.overlay));
    out.push(
        &point,
        "saturation_epoch",
        saturated_at.map_or(-1.0, |e| e as f64),
    );
    out.artifacts.insert(format!("convergence_log_n{n}_seed{seed}.csv"), opt.log_csv());
    Ok(())
}

fn overhead(cfg: &SimConfig, n: usize, seed: u64, out: &mut SeedRows) -> Result<(), ExperimentError> {
    let (mut sim, mut opt) = optimizer_sim(cfg, n, seed)?;
    let point = base_point(cfg, n);
    let lookups_per_epoch = (n / 4).max(1);
    let mut traffic_rng = seeded(derive(seed, 4));
    for e in 0..cfg.epochs {
        opt.run_epoch(&mut sim)?;
        let counts = *opt.counters.history.last().expect("epoch closed");
        let live = sim.overlay.live_addrs();
        let mut routing = 0u64;
        for _ in 0..lookups_per_epoch {
            let (s, d) = distinct_pair(&live, &mut traffic_rng);
            if let Ok(h) = route::lookup(&sim.overlay, s, &sim.overlay.nodes[d].id.key) {
                routing += (h.len() - 1) as u64;
            }
        }
        // One successor probe and one predecessor check per live node.
        let other = 2 * live.len() as u64;
        let p = with(&point, "epoch", e);
        out.push(&p, OverheadCategory::Clustering.name(), counts.messages(OverheadCategory::Clustering) as f64);
        out.push(&p, OverheadCategory::PeerTable.name(), counts.messages(OverheadCategory::PeerTable) as f64);
        out.push(&p, OverheadCategory::Routing.name(), routing as f64);
        out.push(&p, OverheadCategory::Other.name(), other as f64);
    }
    Ok(())
}

/// Failure fractions the churn experiment visits.
pub fn churn_fractions(cfg: &SimConfig) -> Vec<f64> {
    let mut f = vec![0.0, 0.05, 0.1, 0.2, 0.3, cfg.fail_fraction];
    f.sort_by(f64::total_cmp);
    f.dedup();
    f
}

fn lookup_success<R: Rng + ?Sized>(ov: &Overlay, pairs: usize, rng: &mut R) -> f64 {
    let live = ov.live_addrs();
    let mut ok = 0usize;
    for _ in 0..pairs {
        let (s, d) = distinct_pair(&live, rng);
        let key = ov.nodes[d].id.key;
        if route::lookup(ov, s, &key).is_ok_and(|h| h.last() == ov.owner_of(&key).as_ref()) {
            ok += 1;
        }
    }
    ok as f64 / pairs.max(1) as f64
}

fn churn(cfg: &SimConfig, n: usize, seed: u64, out: &mut SeedRows) -> Result<(), ExperimentError> {
    let point = base_point(cfg, n);
    let rounds = 3 * (n.max(2) as f64).log2().ceil() as usize;
    for frac in churn_fractions(cfg) {
        let sim_cfg = SimConfig {
            nodes: n,
            seed,
            ..cfg.clone()
        };
        let mut sim = Simulator::new(sim_cfg)?;
        let failed = sim.fail_fraction(frac)?;
        let mut rng = seeded(derive(seed, 5));
        let p = with(&point, "fail_fraction", frac);
        out.push(&p, "failed", failed.len() as f64);
        out.push(&p, "success_before", lookup_success(&sim.overlay, cfg.pairs, &mut rng));
        let (ov, srng) = sim.parts();
        for _ in 0..rounds {
            ov.stabilize_round(srng);
        }
        out.push(&p, "stabilize_rounds", rounds as f64);
        out.push(&p, "success_after", lookup_success(&sim.overlay, cfg.pairs, &mut rng));
    }
    Ok(())
}

fn trace_artifact(cfg: &SimConfig, n: usize, seed: u64) -> String {
    let (mut ov, mut rng) = build_overlay(cfg, n, seed);
    let live = ov.live_addrs();
    let opts = RouteOptions {
        trace: true,
        record: false,
        ..RouteOptions::default()
    };
    let mut out = String::from("lookup,hop,key,g,h,f,link_latency\n");
    for i in 0..10.min(cfg.pairs) {
        let (s, d) = distinct_pair(&live, &mut rng);
        let key = ov.nodes[d].id.key;
        if let Ok(path) = route::route(&mut ov, s, &key, &opts, &mut rng) {
            for line in path.trace_csv().lines().skip(1) {
                out.push_str(&format!("{i},{line}\n"));
            }
        }
    }
    out
}

fn run_seed(exp: &Experiment, seed: u64) -> Result<SeedRows, ExperimentError> {
    let mut out = SeedRows::default();
    for n in exp.config.sweep_points() {
        match exp.kind {
            ExperimentKind::PathLength => path_length(&exp.config, n, seed, &mut out)?,
            ExperimentKind::PeerLatency => peer_latency(&exp.config, n, seed, &mut out)?,
            ExperimentKind::PathLatency => path_latency(&exp.config, n, seed, &mut out)?,
            ExperimentKind::Overhead => overhead(&exp.config, n, seed, &mut out)?,
            ExperimentKind::Storage => storage(&exp.config, n, seed, &mut out)?,
            ExperimentKind::Convergence => convergence(&exp.config, n, seed, &mut out)?,
            ExperimentKind::Churn => churn(&exp.config, n, seed, &mut out)?,
        }
        if exp.trace {
            out.artifacts
                .insert(format!("trace_n{n}_seed{seed}.csv"), trace_artifact(&exp.config, n, seed));
        }
    }
    Ok(out)
}

/// Run one simulation per seed in parallel and reduce in seed order.
pub fn run_experiment(exp: &Experiment) -> Result<MetricsReport, ExperimentError> {
    let mut seen = exp.seeds.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != exp.seeds.len() || exp.seeds.is_empty() {
        return Err(ExperimentError::Malformed("seeds must be distinct and non-empty".into()));
    }
    exp.config.validate().map_err(SimError::from)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(exp.seeds.len());
    let mut results: Vec<Option<Result<SeedRows, ExperimentError>>> = (0..exp.seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<usize>> = (0..threads)
            .map(|t| (t..exp.seeds.len()).step_by(threads).collect())
            .collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|idx| {
                scope.spawn(move || {
                    idx.into_iter()
                        .map(|i| (i, run_seed(exp, exp.seeds[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let per_seed: Vec<SeedRows> = results
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<_, _>>()?;

    // Points appear in first-seed order; later seeds may add new ones.
    let mut order: Vec<(Point, String)> = Vec::new();
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut artifacts = BTreeMap::new();
    for s in per_seed {
        for (p, stat, v) in s.rows {
            let key = (point_string(&p), stat.clone());
            let slot = values.entry(key).or_default();
            if slot.is_empty() {
                order.push((p, stat));
            }
            slot.push(v);
        }
        artifacts.extend(s.artifacts);
    }
    let name = exp.kind.name().to_string();
    let rows = order
        .into_iter()
        .map(|(point, statistic)| {
            let xs = &values[&(point_string(&point), statistic.clone())];
            ReportRow {
                experiment: name.clone(),
                point,
                statistic,
                value: mean(xs),
                stderr: (exp.seeds.len() > 1).then(|| stderr(xs)),
            }
        })
        .collect();
    Ok(MetricsReport {
        version: FORMAT_VERSION,
        experiment: name,
        seeds: exp.seeds.clone(),
        rows,
        artifacts,
    })
}

/// Outcome of one tolerance check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        pass,
        detail: detail.into(),
    }
}

/// Evaluate the declared tolerances of an experiment against its report.
pub fn check_report(report: &MetricsReport, cfg: &SimConfig) -> Vec<Check> {
    let kind: ExperimentKind = match report.experiment.parse() {
        Ok(k) => k,
        Err(e) => return vec![check("experiment", false, e.to_string())],
    };
    let mut out = Vec::new();
    let ns: Vec<usize> = cfg.sweep_points();
    match kind {
        ExperimentKind::Storage => {
            for n in &ns {
                let f = [("n", n.to_string())];
                let f: Vec<(&str, &str)> = f.iter().map(|(k, v)| (*k, v.as_str())).collect();
                let get = |s| report.value(s, &f).unwrap_or(f64::NAN);
                out.push(check(
                    format!("storage n={n} fingers"),
                    get("max_fingers") <= get("finger_bound"),
                    format!("max {} bound {}", get("max_fingers"), get("finger_bound")),
                ));
                let worst = report
                    .select("entries", &f)
                    .map(|r| r.value)
                    .fold(0.0, f64::max);
                out.push(check(
                    format!("storage n={n} entries"),
                    worst <= get("entry_bound") && get("max_entries") <= get("entry_bound"),
                    format!("max {} bound {}", get("max_entries"), get("entry_bound")),
                ));
            }
        }
        ExperimentKind::PathLength => {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for n in &ns {
                let ns_ = n.to_string();
                let lg = (*n as f64).log2();
                let ours = report.value("mean_hops", &[("n", &ns_), ("series", "ours")]).unwrap_or(f64::NAN);
                let chord = report.value("mean_hops", &[("n", &ns_), ("series", "chord")]).unwrap_or(f64::NAN);
                out.push(check(
                    format!("path-length n={n} ours <= 1.5 log2 N"),
                    ours <= 1.5 * lg,
                    format!("{ours:.3} vs {:.3}", 1.5 * lg),
                ));
                if *n >= 16 {
                    out.push(check(
                        format!("path-length n={n} chord in [0.4, 0.6] log2 N"),
                        (0.4 * lg..=0.6 * lg).contains(&chord),
                        format!("{:.3} log2 N", chord / lg),
                    ));
                }
                xs.push(lg);
                ys.push(ours);
            }
            if ns.len() >= 3 {
                let (_, _, r2) = linear_fit(&xs, &ys);
                out.push(check("path-length linear fit R2 >= 0.9", r2 >= 0.9, format!("R2 = {r2:.4}")));
            }
        }
        ExperimentKind::PeerLatency => {
            let uniform = cfg.velocity_grid.iter().flatten().all(|&v| v == cfg.velocity_grid[0][0]);
            let v = cfg.velocity * cfg.velocity_grid[0][0];
            let expect0 = UNIT_SQUARE_MEAN_DISTANCE * cfg.side / v + cfg.jitter / 2.0;
            let want_ratio = 1.0 / (cfg.k as f64).sqrt();
            for n in &ns {
                let ns_ = n.to_string();
                if uniform {
                    let l0 = report.value("mean_latency", &[("n", &ns_), ("level", "0")]).unwrap_or(f64::NAN);
                    out.push(check(
                        format!("peer-latency n={n} level 0 within 2%"),
                        (l0 / expect0 - 1.0).abs() <= 0.02,
                        format!("{l0:.2} vs {expect0:.2}"),
                    ));
                }
                for r in report.select("ratio_to_parent", &[("n", &ns_)]) {
                    let lvl = r.point.get("level").cloned().unwrap_or_default();
                    out.push(check(
                        format!("peer-latency n={n} level {lvl} ratio within 15%"),
                        (r.value / want_ratio - 1.0).abs() <= 0.15,
                        format!("{:.4} vs {want_ratio:.4}", r.value),
                    ));
                }
            }
        }
        ExperimentKind::PathLatency => {
            for n in &ns {
                let ns_ = n.to_string();
                let ours = report.value("mean_latency", &[("n", &ns_), ("series", "ours")]).unwrap_or(f64::NAN);
                let chord = report.value("mean_latency", &[("n", &ns_), ("series", "chord")]).unwrap_or(f64::NAN);
                let stretch = report.value("median_stretch", &[("n", &ns_), ("series", "ours")]).unwrap_or(f64::NAN);
                out.push(check(
                    format!("path-latency n={n} median stretch <= 2"),
                    stretch <= 2.0,
                    format!("{stretch:.3}"),
                ));
                out.push(check(
                    format!("path-latency n={n} ours < chord"),
                    ours < chord,
                    format!("{ours:.1} vs {chord:.1}"),
                ));
            }
        }
        ExperimentKind::Convergence => {
            for n in &ns {
                let ns_ = n.to_string();
                let series = |stat: &str| -> Vec<f64> {
                    let mut rows: Vec<(u64, f64)> = report
                        .select(stat, &[("n", &ns_)])
                        .filter_map(|r| r.point.get("epoch").and_then(|e| e.parse().ok()).map(|e| (e, r.value)))
                        .collect();
                    rows.sort_by_key(|r| r.0);
                    rows.into_iter().map(|r| r.1).collect()
                };
                let accepted = series("accepted");
                let last_accept = accepted.iter().rposition(|&a| a > 0.0).map_or(0, |i| i + 1);
                for stat in ["t_c", "t_p"] {
                    let s = series(stat);
                    let tail = &s[last_accept.min(s.len())..];
                    out.push(check(
                        format!("convergence n={n} {stat} non-increasing after last accept"),
                        tail.windows(2).all(|w| w[1] <= w[0] + 1e-12),
                        format!("{} epochs after epoch {last_accept}", tail.len()),
                    ));
                }
                let gbest = series("gbest_mean");
                let sat = report.value("saturation_epoch", &[("n", &ns_)]).unwrap_or(-1.0);
                if sat >= 0.0 && report.seeds.len() == 1 {
                    let tc = series("t_c");
                    let tp = series("t_p");
                    out.push(check(
                        format!("convergence n={n} zero rate after saturation"),
                        tc.last() == Some(&0.0) && tp.last() == Some(&0.0),
                        format!("saturated at epoch {sat}"),
                    ));
                }
                let (l0, l1) = (
                    report.value("initial_traffic_latency", &[("n", &ns_)]).unwrap_or(f64::NAN),
                    report.value("final_traffic_latency", &[("n", &ns_)]).unwrap_or(f64::NAN),
                );
                out.push(check(
                    format!("convergence n={n} traffic latency not degraded"),
                    l1 <= l0,
                    format!("{l0:.1} -> {l1:.1}"),
                ));
                out.push(check(
                    format!("convergence n={n} gbest recorded"),
                    !gbest.is_empty(),
                    format!("{} epochs", gbest.len()),
                ));
            }
        }
        ExperimentKind::Churn => {
            for n in &ns {
                let ns_ = n.to_string();
                for r in report.select("success_after", &[("n", &ns_)]) {
                    let frac: f64 = r.point.get("fail_fraction").and_then(|f| f.parse().ok()).unwrap_or(1.0);
                    if frac <= 0.1 + 1e-12 {
                        out.push(check(
                            format!("churn n={n} fail {frac} all lookups succeed"),
                            r.value == 1.0,
                            format!("success {:.4}", r.value),
                        ));
                    }
                }
            }
        }
        ExperimentKind::Overhead => {
            let neg = report.rows.iter().any(|r| r.value < 0.0);
            out.push(check("overhead counts non-negative", !neg, ""));
        }
    }
    out
}
