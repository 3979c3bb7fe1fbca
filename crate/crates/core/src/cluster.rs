//! Hierarchical Gaussian clustering of node positions.
//!
//! Each level of the hierarchy is produced by k-means (k-means++ seeding)
//! followed by an EM fit of a k-component Gaussian mixture. Members are
//! assigned to the component with the largest weighted density, which is the
//! same rule [`cluster_path`] uses to place an arbitrary point, so the tree's
//! membership and its point-location query always agree.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geokey::{morton, GeoPoint};
use crate::rng;

/// Eigenvalue floor applied to every fitted covariance (meters²).
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("k = {k} exceeds the {distinct} distinct points")]
    DegenerateK { k: usize, distinct: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no points to cluster")]
    Empty,
    #[error("no cluster with prefix {0}")]
    UnknownCluster(String),
    #[error("cluster {0} does not meet the split/merge precondition")]
    NoActionNeeded(String),
    #[error("malformed tree document: {0}")]
    Malformed(String),
}

/// Bivariate normal distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Gaussian {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Self {
        Self { mean, cov }
    }

    pub fn isotropic(mean: [f64; 2], variance: f64) -> Self {
        Self::new(mean, [[variance, 0.0], [0.0, variance]])
    }

    pub fn det(&self) -> f64 {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0]
    }

    fn mahalanobis_sq(&self, x: [f64; 2]) -> f64 {
        let det = self.det();
        let dx = x[0] - self.mean[0];
        let dy = x[1] - self.mean[1];
        (self.cov[1][1] * dx * dx - (self.cov[0][1] + self.cov[1][0]) * dx * dy
            + self.cov[0][0] * dy * dy)
            / det
    }

    pub fn log_pdf(&self, x: [f64; 2]) -> f64 {
        -(2.0 * PI).ln() - 0.5 * self.det().ln() - 0.5 * self.mahalanobis_sq(x)
    }

    pub fn pdf(&self, x: [f64; 2]) -> f64 {
        self.log_pdf(x).exp()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let [[a, b], [_, d]] = self.cov;
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        [mid - rad, mid + rad]
    }

    /// Clip covariance eigenvalues from below at `floor`.
    pub fn floored(mut self, floor: f64) -> Self {
        let [[a, b], [_, d]] = self.cov;
        let b = if b.is_finite() { b } else { 0.0 };
        let [l1, l2] = self.eigenvalues();
        if l1 >= floor && l1.is_finite() {
            self.cov[0][1] = b;
            self.cov[1][0] = b;
            return self;
        }
        // Unit eigenvector of the larger eigenvalue.
        let (vx, vy) = if b.abs() > 1e-300 {
            let (vx, vy) = (l2 - d, b);
            let n = vx.hypot(vy);
            (vx / n, vy / n)
        } else if a >= d {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let big = l2.max(floor);
        let small = l1.max(floor);
        // cov = big·v vᵀ + small·w wᵀ with w ⟂ v
        self.cov = [
            [big * vx * vx + small * vy * vy, (big - small) * vx * vy],
            [(big - small) * vx * vy, big * vy * vy + small * vx * vx],
        ];
        self
    }

    /// Weighted maximum-likelihood fit (1/W normalization), floored.
    pub fn fit_weighted(points: &[[f64; 2]], weights: &[f64], floor: f64) -> Option<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut mean = [0.0; 2];
        for (p, w) in points.iter().zip(weights) {
            mean[0] += w * p[0];
            mean[1] += w * p[1];
        }
        mean[0] /= total;
        mean[1] /= total;
        let mut cov = [[0.0; 2]; 2];
        for (p, w) in points.iter().zip(weights) {
            let d = [p[0] - mean[0], p[1] - mean[1]];
            cov[0][0] += w * d[0] * d[0];
            cov[0][1] += w * d[0] * d[1];
            cov[1][1] += w * d[1] * d[1];
        }
        cov[0][0] /= total;
        cov[0][1] /= total;
        cov[1][1] /= total;
        cov[1][0] = cov[0][1];
        Some(Gaussian::new(mean, cov).floored(floor))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        // Cholesky of the 2x2 covariance.
        let l00 = self.cov[0][0].sqrt();
        let l10 = self.cov[1][0] / l00;
        let l11 = (self.cov[1][1] - l10 * l10).max(0.0).sqrt();
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        [self.mean[0] + l00 * z0, self.mean[1] + l10 * z0 + l11 * z1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub gaussian: Gaussian,
}

/// Finite Gaussian mixture; weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub components: Vec<Component>,
}

impl Gmm {
    pub fn single(gaussian: Gaussian) -> Self {
        Self {
            components: vec![Component {
                weight: 1.0,
                gaussian,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn log_pdf(&self, x: [f64; 2]) -> f64 {
        log_sum_exp(
            self.components
                .iter()
                .map(|c| c.weight.ln() + c.gaussian.log_pdf(x)),
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c.gaussian.sample(rng);
            }
        }
        self.components.last().expect("empty mixture").gaussian.sample(rng)
    }

    fn normalize(&mut self) {
        let total = self.weight_sum();
        for c in &mut self.components {
            c.weight /= total;
        }
    }
}

/// Mixture density `Σ φᵢ N(x; μᵢ, Σᵢ)`.
pub fn gmm_pdf(gmm: &Gmm, x: [f64; 2]) -> f64 {
    gmm.components
        .iter()
        .map(|c| c.weight * c.gaussian.pdf(x))
        .sum()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

pub fn to_xy(p: &GeoPoint) -> [f64; 2] {
    [p.x, p.y]
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<[f64; 2]>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

impl KMeans {
    /// Within-cluster sum of squared distances.
    pub fn sse(&self, points: &[[f64; 2]]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| sq_dist(*p, self.centroids[a]))
            .sum()
    }
}

fn distinct_count(points: &[[f64; 2]]) -> usize {
    let mut keys: Vec<(u64, u64)> = points
        .iter()
        .map(|p| (p[0].to_bits(), p[1].to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, *c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(
    points: &[[f64; 2]],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeans, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if points.is_empty() {
        return Err(ClusterError::Empty);
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(ClusterError::DegenerateK { k, distinct });
    }
    let mut rng = rng::seeded(seed);

    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(*p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("distinct points remain");
        let mut u = rng.random::<f64>() * total;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        let c = points[pick];
        centroids.push(c);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(*p, c));
        }
    }

    let mut assignments = vec![0usize; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(*p, &centroids).0;
        }
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                next[j] = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
            }
        }
        // Empty clusters take the point farthest from its own centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(ia, a), (ib, b)| {
                        sq_dist(**a, next[assignments[*ia]])
                            .total_cmp(&sq_dist(**b, next[assignments[*ib]]))
                            .then(ib.cmp(ia))
                    })
                    .map(|(i, _)| i)
                    .expect("nonempty");
                next[j] = points[far];
                assignments[far] = j;
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(*a, *b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(*p, &centroids).0;
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
    })
}

/// Best of several independently seeded k-means runs (lowest SSE).
pub fn kmeans_restarts(
    points: &[[f64; 2]],
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
    tol: f64,
) -> Result<KMeans, ClusterError> {
    let mut best: Option<(f64, KMeans)> = None;
    for r in 0..restarts.max(1) {
        let km = kmeans(points, k, rng::derive(seed, r as u64), max_iter, tol)?;
        let sse = km.sse(points);
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, km));
        }
    }
    Ok(best.expect("at least one run").1)
}

/// Outcome of an EM run, including the log-likelihood of every iterate.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: Gmm,
    pub log_likelihoods: Vec<f64>,
}

/// Mixture initialized from a k-means partition.
pub fn gmm_from_kmeans(points: &[[f64; 2]], init: &KMeans) -> Gmm {
    let k = init.centroids.len();
    let n = points.len() as f64;
    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        let members: Vec<[f64; 2]> = points
            .iter()
            .zip(&init.assignments)
            .filter(|(_, &a)| a == j)
            .map(|(p, _)| *p)
            .collect();
        let weights = vec![1.0; members.len()];
        let gaussian = Gaussian::fit_weighted(&members, &weights, VARIANCE_FLOOR)
            .unwrap_or_else(|| Gaussian::isotropic(init.centroids[j], VARIANCE_FLOOR));
        components.push(Component {
            weight: (members.len() as f64 / n).max(1e-12),
            gaussian,
        });
    }
    let mut gmm = Gmm { components };
    gmm.normalize();
    gmm
}

/// EM for a k-component mixture seeded from k-means.
pub fn em_fit(points: &[[f64; 2]], init: &KMeans, tol: f64, max_iter: usize) -> Gmm {
    let weights = vec![1.0; points.len()];
    em_fit_weighted(points, &weights, gmm_from_kmeans(points, init), tol, max_iter).gmm
}

/// Weighted EM from an arbitrary starting mixture.
///
/// Each iterate's log-likelihood is recorded before its M-step, and the loop
/// stops once the gain drops below `tol`.
pub fn em_fit_weighted(
    points: &[[f64; 2]],
    weights: &[f64],
    init: Gmm,
    tol: f64,
    max_iter: usize,
) -> EmFit {
    assert_eq!(points.len(), weights.len());
    let k = init.len();
    let total_weight: f64 = weights.iter().sum();
    let mut gmm = init;
    let mut log_likelihoods = Vec::new();
    let mut resp = vec![0.0f64; points.len() * k];
    if points.is_empty() || !(total_weight > 0.0) {
        return EmFit {
            gmm,
            log_likelihoods,
        };
    }
    for _ in 0..max_iter.max(1) {
        // E-step
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            for (j, c) in gmm.components.iter().enumerate() {
                row[j] = c.weight.ln() + c.gaussian.log_pdf(*p);
            }
            let lse = log_sum_exp(row.iter().copied());
            for r in row.iter_mut() {
                *r = (*r - lse).exp();
            }
            ll += weights[i] * lse;
        }
        let converged = log_likelihoods
            .last()
            .is_some_and(|&prev: &f64| ll - prev < tol);
        log_likelihoods.push(ll);
        if converged {
            break;
        }
        // M-step
        let mut next = Vec::with_capacity(k);
        for j in 0..k {
            let wj: Vec<f64> = (0..points.len()).map(|i| weights[i] * resp[i * k + j]).collect();
            let nj: f64 = wj.iter().sum();
            match Gaussian::fit_weighted(points, &wj, VARIANCE_FLOOR) {
                Some(g) if nj > 1e-300 => next.push(Component {
                    weight: nj / total_weight,
                    gaussian: g,
                }),
                _ => next.push(Component {
                    weight: 1e-12,
                    gaussian: gmm.components[j].gaussian,
                }),
            }
        }
        gmm = Gmm { components: next };
        gmm.normalize();
    }
    EmFit {
        gmm,
        log_likelihoods,
    }
}

/// Digit string identifying a cluster; the root has the empty path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct ClusterPath(pub Vec<u8>);

impl ClusterPath {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn digits(&self) -> &[u8] {
        &self.0
    }

    pub fn child(&self, digit: u8) -> Self {
        let mut d = self.0.clone();
        d.push(digit);
        Self(d)
    }

    pub fn truncated(&self, depth: usize) -> Self {
        Self(self.0[..depth.min(self.0.len())].to_vec())
    }

    pub fn shared_prefix_len(&self, other: &ClusterPath) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .take_while(|(a, b)| a == b)
            .count()
    }

    pub fn starts_with(&self, prefix: &ClusterPath) -> bool {
        self.0.starts_with(&prefix.0)
    }

    /// Index of the depth-`depth` ancestor as a base-`k` number.
    pub fn index_at(&self, depth: usize, k: usize) -> u64 {
        self.0[..depth.min(self.0.len())]
            .iter()
            .fold(0u64, |acc, &d| acc * k as u64 + d as u64)
    }
}

impl fmt::Display for ClusterPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &d in &self.0 {
            let c = std::char::from_digit(d as u32, 36).unwrap_or('?');
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for ClusterPath {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| {
                c.to_digit(36)
                    .map(|d| d as u8)
                    .ok_or_else(|| ClusterError::Malformed(format!("bad prefix {s:?}")))
            })
            .collect::<Result<Vec<u8>, _>>()
            .map(ClusterPath)
    }
}

/// Split/merge thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    /// A node is split during construction only if it holds at least
    /// `split_factor · k` members.
    pub split_factor: usize,
    /// Leaves at or above this population may be split later.
    pub n_max: usize,
    /// Internal nodes at or below this population may be merged.
    pub n_min: usize,
    pub kmeans_iter: usize,
    pub kmeans_restarts: usize,
    pub em_iter: usize,
    pub tol: f64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            split_factor: 4,
            n_max: 64,
            n_min: 8,
            kmeans_iter: 100,
            kmeans_restarts: 8,
            em_iter: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode {
    pub prefix: ClusterPath,
    /// Mixture weight within the parent (1 at the root).
    pub weight: f64,
    /// Arithmetic mean of the members.
    pub centroid: [f64; 2],
    pub gaussian: Gaussian,
    pub population: usize,
    /// Indices into [`ClusterTree::points`].
    pub members: Vec<usize>,
    pub children: Vec<ClusterNode>,
}

impl ClusterNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    fn walk<'a>(&'a self, out: &mut Vec<&'a ClusterNode>) {
        out.push(self);
        for c in &self.children {
            c.walk(out);
        }
    }

    /// Index of the child that best explains `x`; ties go to the lower digit.
    pub fn best_child(&self, x: [f64; 2]) -> Option<usize> {
        best_component(&self.children, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    pub root: ClusterNode,
    pub k: usize,
    pub h: usize,
    pub points: Vec<GeoPoint>,
    pub config: HierarchyConfig,
    pub seed: u64,
}

impl ClusterTree {
    pub fn nodes(&self) -> Vec<&ClusterNode> {
        let mut out = Vec::new();
        self.root.walk(&mut out);
        out
    }

    pub fn leaves(&self) -> Vec<&ClusterNode> {
        self.nodes().into_iter().filter(|n| n.is_leaf()).collect()
    }

    pub fn node(&self, prefix: &ClusterPath) -> Option<&ClusterNode> {
        let mut cur = &self.root;
        for &d in prefix.digits() {
            cur = cur.children.get(d as usize)?;
        }
        Some(cur)
    }

    fn node_mut(&mut self, prefix: &ClusterPath) -> Option<&mut ClusterNode> {
        let mut cur = &mut self.root;
        for &d in prefix.digits() {
            cur = cur.children.get_mut(d as usize)?;
        }
        Some(cur)
    }

    /// Deepest leaf depth actually present.
    pub fn depth(&self) -> usize {
        self.nodes().iter().map(|n| n.prefix.depth()).max().unwrap_or(0)
    }

    /// Centroid of the cluster at `prefix`, or of its deepest existing ancestor.
    pub fn centroid(&self, prefix: &ClusterPath) -> [f64; 2] {
        let mut cur = &self.root;
        for &d in prefix.digits() {
            match cur.children.get(d as usize) {
                Some(c) => cur = c,
                None => break,
            }
        }
        cur.centroid
    }

    /// Split a leaf holding at least `n_max` members into `k` children.
    pub fn split_cluster(&mut self, prefix: &ClusterPath) -> Result<(), ClusterError> {
        let (k, h, cfg, seed) = (self.k, self.h, self.config, self.seed);
        let points: Vec<[f64; 2]> = self.points.iter().map(to_xy).collect();
        let node = self
            .node_mut(prefix)
            .ok_or_else(|| ClusterError::UnknownCluster(prefix.to_string()))?;
        if !node.is_leaf() || node.population < cfg.n_max || node.prefix.depth() >= h {
            return Err(ClusterError::NoActionNeeded(prefix.to_string()));
        }
        if !split_node(node, &points, k, seed, &cfg) {
            return Err(ClusterError::NoActionNeeded(prefix.to_string()));
        }
        Ok(())
    }

    /// Collapse the subtree under `prefix` when it holds at most `n_min` members.
    pub fn merge_children(&mut self, prefix: &ClusterPath) -> Result<(), ClusterError> {
        let n_min = self.config.n_min;
        let points: Vec<[f64; 2]> = self.points.iter().map(to_xy).collect();
        let node = self
            .node_mut(prefix)
            .ok_or_else(|| ClusterError::UnknownCluster(prefix.to_string()))?;
        if node.is_leaf() || node.population > n_min {
            return Err(ClusterError::NoActionNeeded(prefix.to_string()));
        }
        node.children.clear();
        let member_points: Vec<[f64; 2]> = node.members.iter().map(|&i| points[i]).collect();
        let ones = vec![1.0; member_points.len()];
        if let Some(g) = Gaussian::fit_weighted(&member_points, &ones, VARIANCE_FLOOR) {
            node.gaussian = g;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TreeDocument::from_tree(self)).expect("tree serializes")
    }

    /// Rebuild a tree (without member lists) from its JSON document.
    pub fn from_json(s: &str) -> Result<Self, ClusterError> {
        let doc: TreeDocument =
            serde_json::from_str(s).map_err(|e| ClusterError::Malformed(e.to_string()))?;
        doc.into_tree()
    }
}

fn best_component(children: &[ClusterNode], x: [f64; 2]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in children.iter().enumerate() {
        let score = c.weight.ln() + c.gaussian.log_pdf(x);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}

fn node_from_members(
    prefix: ClusterPath,
    weight: f64,
    gaussian: Option<Gaussian>,
    members: Vec<usize>,
    points: &[[f64; 2]],
) -> ClusterNode {
    let pts: Vec<[f64; 2]> = members.iter().map(|&i| points[i]).collect();
    let ones = vec![1.0; pts.len()];
    let fitted = Gaussian::fit_weighted(&pts, &ones, VARIANCE_FLOOR);
    let gaussian = gaussian
        .or(fitted)
        .unwrap_or_else(|| Gaussian::isotropic([0.0, 0.0], VARIANCE_FLOOR));
    let centroid = fitted.map(|g| g.mean).unwrap_or(gaussian.mean);
    ClusterNode {
        prefix,
        weight,
        centroid,
        gaussian,
        population: members.len(),
        members,
        children: Vec::new(),
    }
}

/// Partition a node's members into `k` children. Returns false when the
/// members cannot support `k` clusters.
fn split_node(
    node: &mut ClusterNode,
    points: &[[f64; 2]],
    k: usize,
    seed: u64,
    cfg: &HierarchyConfig,
) -> bool {
    let pts: Vec<[f64; 2]> = node.members.iter().map(|&i| points[i]).collect();
    let salt = node
        .prefix
        .digits()
        .iter()
        .fold(node.prefix.depth() as u64, |acc, &d| acc.wrapping_mul(131).wrapping_add(d as u64 + 1));
    let Ok(km) = kmeans_restarts(
        &pts,
        k,
        rng::derive(seed, salt),
        cfg.kmeans_restarts,
        cfg.kmeans_iter,
        cfg.tol,
    ) else {
        return false;
    };
    let mut gmm = em_fit(&pts, &km, cfg.tol, cfg.em_iter);

    // Order digits along the Z-order curve over the node's bounding box so
    // sibling digits follow key order.
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let z = |m: [f64; 2]| {
        let q = |a: usize| {
            let span = (hi[a] - lo[a]).max(1e-12);
            (((m[a] - lo[a]) / span).clamp(0.0, 0.999_999) * 65536.0) as u64
        };
        morton(q(0), q(1), 16)
    };
    gmm.components.sort_by(|a, b| {
        z(a.gaussian.mean)
            .cmp(&z(b.gaussian.mean))
            .then(a.gaussian.mean[0].total_cmp(&b.gaussian.mean[0]))
            .then(a.gaussian.mean[1].total_cmp(&b.gaussian.mean[1]))
    });

    let mut children: Vec<ClusterNode> = gmm
        .components
        .iter()
        .enumerate()
        .map(|(d, c)| ClusterNode {
            prefix: node.prefix.child(d as u8),
            weight: c.weight,
            centroid: c.gaussian.mean,
            gaussian: c.gaussian,
            population: 0,
            members: Vec::new(),
            children: Vec::new(),
        })
        .collect();
    for &i in &node.members {
        let d = best_component(&children, points[i]).expect("k >= 1");
        children[d].members.push(i);
    }
    for c in &mut children {
        c.population = c.members.len();
        if c.population > 0 {
            let pts: Vec<[f64; 2]> = c.members.iter().map(|&i| points[i]).collect();
            let n = pts.len() as f64;
            c.centroid = [
                pts.iter().map(|p| p[0]).sum::<f64>() / n,
                pts.iter().map(|p| p[1]).sum::<f64>() / n,
            ];
        }
    }
    node.children = children;
    true
}

fn grow(
    node: &mut ClusterNode,
    points: &[[f64; 2]],
    k: usize,
    h: usize,
    seed: u64,
    cfg: &HierarchyConfig,
) {
    if node.prefix.depth() >= h || node.population < cfg.split_factor * k {
        return;
    }
    if !split_node(node, points, k, seed, cfg) {
        return;
    }
    for c in &mut node.children {
        grow(c, points, k, h, seed, cfg);
    }
}

/// Recursive k-way hierarchy of height at most `h`.
pub fn build_hierarchy(points: &[GeoPoint], k: usize, h: usize, seed: u64) -> ClusterTree {
    build_hierarchy_with(points, k, h, seed, HierarchyConfig::default())
}

pub fn build_hierarchy_with(
    points: &[GeoPoint],
    k: usize,
    h: usize,
    seed: u64,
    config: HierarchyConfig,
) -> ClusterTree {
    assert!(k >= 2, "branching factor must be at least 2");
    let xy: Vec<[f64; 2]> = points.iter().map(to_xy).collect();
    let mut root = node_from_members(ClusterPath::root(), 1.0, None, (0..xy.len()).collect(), &xy);
    grow(&mut root, &xy, k, h, seed, &config);
    ClusterTree {
        root,
        k,
        h,
        points: points.to_vec(),
        config,
        seed,
    }
}

/// Descend by maximum responsibility `φᵢ·N(p; μᵢ, Σᵢ)`.
pub fn cluster_path(tree: &ClusterTree, p: &GeoPoint) -> ClusterPath {
    let x = to_xy(p);
    let mut cur = &tree.root;
    let mut digits = Vec::new();
    while let Some(i) = cur.best_child(x) {
        digits.push(i as u8);
        cur = &cur.children[i];
    }
    ClusterPath(digits)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeDocument {
    prefix: String,
    weight: f64,
    mean: [f64; 2],
    /// Row-major 2x2.
    covariance: [f64; 4],
    population: usize,
    children: Vec<NodeDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeDocument {
    k: usize,
    h: usize,
    root: NodeDocument,
}

impl TreeDocument {
    fn from_tree(tree: &ClusterTree) -> Self {
        fn conv(n: &ClusterNode) -> NodeDocument {
            let c = n.gaussian.cov;
            NodeDocument {
                prefix: n.prefix.to_string(),
                weight: n.weight,
                mean: n.gaussian.mean,
                covariance: [c[0][0], c[0][1], c[1][0], c[1][1]],
                population: n.population,
                children: n.children.iter().map(conv).collect(),
            }
        }
        Self {
            k: tree.k,
            h: tree.h,
            root: conv(&tree.root),
        }
    }

    fn into_tree(self) -> Result<ClusterTree, ClusterError> {
        fn conv(d: NodeDocument, k: usize) -> Result<ClusterNode, ClusterError> {
            if !d.children.is_empty() && d.children.len() != k {
                return Err(ClusterError::Malformed(format!(
                    "node {:?} has {} children, expected {k}",
                    d.prefix,
                    d.children.len()
                )));
            }
            let gaussian = Gaussian::new(
                d.mean,
                [[d.covariance[0], d.covariance[1]], [d.covariance[2], d.covariance[3]]],
            );
            Ok(ClusterNode {
                prefix: d.prefix.parse()?,
                weight: d.weight,
                centroid: d.mean,
                gaussian,
                population: d.population,
                members: Vec::new(),
                children: d
                    .children
                    .into_iter()
                    .map(|c| conv(c, k))
                    .collect::<Result<_, _>>()?,
            })
        }
        Ok(ClusterTree {
            root: conv(self.root, self.k)?,
            k: self.k,
            h: self.h,
            points: Vec::new(),
            config: HierarchyConfig::default(),
            seed: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blob(rng: &mut rng::SimRng, center: [f64; 2], radius: f64, n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| loop {
                let x = rng.random_range(-radius..radius);
                let y = rng.random_range(-radius..radius);
                if x * x + y * y <= radius * radius {
                    break [center[0] + x, center[1] + y];
                }
            })
            .collect()
    }

    fn mean_of(pts: &[[f64; 2]]) -> [f64; 2] {
        let n = pts.len() as f64;
        [
            pts.iter().map(|p| p[0]).sum::<f64>() / n,
            pts.iter().map(|p| p[1]).sum::<f64>() / n,
        ]
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = vec![[0.0, 0.0], [2.0, 0.0], [4.0, 6.0], [10.0, 2.0]];
        let km = kmeans(&pts, 1, 7, 100, 1e-6).unwrap();
        assert_eq!(km.centroids, vec![[4.0, 2.0]]);
    }

    #[test]
    fn kmeans_one_centroid_per_distinct_point() {
        let pts = vec![[0.0, 0.0], [5.0, 1.0], [5.0, 1.0], [9.0, 9.0], [3.0, 7.0]];
        let km = kmeans(&pts, 4, 3, 100, 1e-6).unwrap();
        assert_eq!(km.sse(&pts), 0.0);
        assert_eq!(
            kmeans(&pts, 5, 3, 100, 1e-6),
            Err(ClusterError::DegenerateK { k: 5, distinct: 4 })
        );
    }

    #[test]
    fn kmeans_two_blobs() {
        let mut rng = rng::seeded(11);
        let a = blob(&mut rng, [0.0, 0.0], 5.0, 100);
        let b = blob(&mut rng, [100.0, 100.0], 5.0, 100);
        let pts: Vec<[f64; 2]> = a.iter().chain(&b).copied().collect();
        let km = kmeans(&pts, 2, 5, 100, 1e-6).unwrap();
        for truth in [mean_of(&a), mean_of(&b)] {
            let best = km
                .centroids
                .iter()
                .map(|c| sq_dist(*c, truth).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 2.0, "centroid off by {best}");
        }
    }

    #[test]
    fn em_single_component_is_closed_form_mle() {
        let pts = vec![[1.0, 2.0], [3.0, 1.0], [4.0, 5.0], [0.0, 0.0], [2.0, 2.0]];
        let km = kmeans(&pts, 1, 1, 100, 1e-6).unwrap();
        let g = em_fit(&pts, &km, 1e-9, 200);
        let n = pts.len() as f64;
        let m = mean_of(&pts);
        let sxx = pts.iter().map(|p| (p[0] - m[0]).powi(2)).sum::<f64>() / n;
        let sxy = pts.iter().map(|p| (p[0] - m[0]) * (p[1] - m[1])).sum::<f64>() / n;
        let syy = pts.iter().map(|p| (p[1] - m[1]).powi(2)).sum::<f64>() / n;
        let c = g.components[0].gaussian;
        assert!((c.mean[0] - m[0]).abs() < 1e-12 && (c.mean[1] - m[1]).abs() < 1e-12);
        assert!((c.cov[0][0] - sxx).abs() < 1e-12);
        assert!((c.cov[0][1] - sxy).abs() < 1e-12);
        assert!((c.cov[1][1] - syy).abs() < 1e-12);
        assert_eq!(g.components[0].weight, 1.0);
    }

    #[test]
    fn em_floor_engages_on_identical_points() {
        let pts = vec![[3.0, 4.0]; 10];
        let km = kmeans(&pts, 1, 1, 100, 1e-6).unwrap();
        let g = em_fit(&pts, &km, 1e-6, 200);
        let c = g.components[0];
        assert_eq!(c.weight, 1.0);
        assert!((c.gaussian.cov[0][0] - VARIANCE_FLOOR).abs() < 1e-15);
        assert!((c.gaussian.cov[1][1] - VARIANCE_FLOOR).abs() < 1e-15);
        assert_eq!(c.gaussian.cov[0][1], 0.0);
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let mut rng = rng::seeded(5);
        for trial in 0..20 {
            let n = rng.random_range(20..80);
            let pts: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)])
                .collect();
            let km = kmeans(&pts, 3, trial, 100, 1e-6).unwrap();
            let fit = em_fit_weighted(&pts, &vec![1.0; n], gmm_from_kmeans(&pts, &km), 1e-6, 200);
            for w in fit.log_likelihoods.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "trial {trial}: {} -> {}", w[0], w[1]);
            }
            assert!((fit.gmm.weight_sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn floored_clips_only_small_eigenvalues() {
        let g = Gaussian::new([0.0, 0.0], [[4.0, 2.0], [2.0, 1.0]]).floored(0.5);
        let [l1, l2] = g.eigenvalues();
        assert!((l1 - 0.5).abs() < 1e-12);
        assert!((l2 - 5.0).abs() < 1e-12);
        let untouched = Gaussian::new([0.0, 0.0], [[4.0, 1.0], [1.0, 3.0]]);
        assert_eq!(untouched.floored(0.5), untouched);
    }

    #[test]
    fn gmm_pdf_standard_normal_peak() {
        let g = Gmm::single(Gaussian::isotropic([0.0, 0.0], 1.0));
        let expected = 1.0 / (2.0 * PI);
        assert!((gmm_pdf(&g, [0.0, 0.0]) - expected).abs() < 1e-12);
        assert!((gmm_pdf(&g, [0.0, 0.0]) - 0.159155).abs() < 1e-6);
    }

    #[test]
    fn gmm_pdf_mirror_symmetry() {
        let g = Gmm {
            components: vec![
                Component {
                    weight: 0.5,
                    gaussian: Gaussian::new([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]]),
                },
                Component {
                    weight: 0.5,
                    gaussian: Gaussian::new([1.0, -2.0], [[2.0, -0.3], [-0.3, 1.0]]),
                },
            ],
        };
        for p in [[0.0, 0.5], [3.0, 1.7], [-2.0, 4.0]] {
            let a = gmm_pdf(&g, p);
            let b = gmm_pdf(&g, [p[0], -p[1]]);
            assert!((a - b).abs() < 1e-15 * a.max(1.0));
        }
    }

    #[test]
    fn gmm_pdf_integrates_to_one() {
        // Quasi-random (Halton 2,3) integration over a 6-sigma box.
        let g = Gmm {
            components: vec![
                Component {
                    weight: 0.3,
                    gaussian: Gaussian::new([0.0, 0.0], [[1.0, 0.2], [0.2, 0.5]]),
                },
                Component {
                    weight: 0.7,
                    gaussian: Gaussian::isotropic([2.0, 1.0], 0.8),
                },
            ],
        };
        let halton = |mut i: u64, b: u64| {
            let (mut f, mut r) = (1.0, 0.0);
            while i > 0 {
                f /= b as f64;
                r += f * (i % b) as f64;
                i /= b;
            }
            r
        };
        let (lo, hi) = ([-6.0, -6.0], [8.0, 7.0]);
        let n = 200_000u64;
        let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
        let sum: f64 = (1..=n)
            .map(|i| {
                let x = lo[0] + halton(i, 2) * (hi[0] - lo[0]);
                let y = lo[1] + halton(i, 3) * (hi[1] - lo[1]);
                gmm_pdf(&g, [x, y])
            })
            .sum();
        let integral = sum / n as f64 * area;
        assert!((integral - 1.0).abs() < 0.01, "integral {integral}");
    }

    fn four_blobs(seed: u64) -> (Vec<GeoPoint>, Vec<usize>) {
        let mut rng = rng::seeded(seed);
        let centers = [[100.0, 100.0], [900.0, 100.0], [100.0, 900.0], [900.0, 900.0]];
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (l, c) in centers.iter().enumerate() {
            for p in blob(&mut rng, *c, 10.0, 40) {
                pts.push(GeoPoint::new(p[0], p[1]));
                labels.push(l);
            }
        }
        (pts, labels)
    }

    #[test]
    fn hierarchy_height_zero_is_root_only() {
        let (pts, _) = four_blobs(1);
        let tree = build_hierarchy(&pts, 2, 0, 1);
        assert!(tree.root.is_leaf());
        assert_eq!(tree.root.population, pts.len());
        assert_eq!(cluster_path(&tree, &pts[0]), ClusterPath::root());
    }

    #[test]
    fn hierarchy_recovers_four_blobs() {
        let (pts, labels) = four_blobs(2);
        let tree = build_hierarchy(&pts, 2, 2, 9);
        let leaves = tree.leaves();
        assert_eq!(leaves.len(), 4);
        assert_eq!(tree.nodes().len(), 2usize.pow(3) - 1);
        for leaf in &leaves {
            assert_eq!(leaf.population, 40);
            assert_eq!(leaf.prefix.depth(), 2);
            let l0 = labels[leaf.members[0]];
            assert!(leaf.members.iter().all(|&i| labels[i] == l0));
            for &i in &leaf.members {
                assert_eq!(cluster_path(&tree, &pts[i]), leaf.prefix);
            }
            let c = GeoPoint::new(leaf.centroid[0], leaf.centroid[1]);
            assert_eq!(cluster_path(&tree, &c), leaf.prefix);
        }
    }

    #[test]
    fn hierarchy_invariants() {
        let mut rng = rng::seeded(3);
        let pts: Vec<GeoPoint> = (0..500)
            .map(|_| GeoPoint::new(rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)))
            .collect();
        let tree = build_hierarchy(&pts, 3, 4, 21);
        let mut seen = std::collections::HashSet::new();
        for n in tree.nodes() {
            assert!(seen.insert(n.prefix.clone()), "duplicate prefix {}", n.prefix);
            assert!(n.prefix.depth() <= 4);
            if !n.is_leaf() {
                assert_eq!(n.children.len(), 3);
                assert_eq!(n.population, n.children.iter().map(|c| c.population).sum::<usize>());
                let w: f64 = n.children.iter().map(|c| c.weight).sum();
                assert!((w - 1.0).abs() < 1e-9);
                for (d, c) in n.children.iter().enumerate() {
                    assert_eq!(c.prefix, n.prefix.child(d as u8));
                }
            }
        }
    }

    #[test]
    fn split_and_merge_conserve_population() {
        let mut rng = rng::seeded(4);
        let pts: Vec<GeoPoint> = (0..64)
            .map(|_| GeoPoint::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
            .collect();
        let mut tree = build_hierarchy(&pts, 2, 0, 1);
        tree.h = 3;
        let root = ClusterPath::root();
        tree.split_cluster(&root).unwrap();
        assert_eq!(tree.root.children.len(), 2);
        assert_eq!(tree.root.children.iter().map(|c| c.population).sum::<usize>(), 64);
        assert_eq!(
            tree.split_cluster(&root.child(0)),
            Err(ClusterError::NoActionNeeded("0".into()))
        );
        assert!(matches!(tree.merge_children(&root), Err(ClusterError::NoActionNeeded(_))));

        tree.config.n_min = 64;
        tree.merge_children(&root).unwrap();
        assert!(tree.root.is_leaf());
        assert_eq!(tree.root.population, 64);
        assert_eq!(tree.root.members.len(), 64);
    }

    #[test]
    fn merge_small_children() {
        let pts: Vec<GeoPoint> = [
            (0.0, 0.0),
            (1.0, 0.0),
            (0.0, 1.0),
            (50.0, 50.0),
            (51.0, 50.0),
            (50.0, 51.0),
            (51.0, 51.0),
        ]
        .iter()
        .map(|&(x, y)| GeoPoint::new(x, y))
        .collect();
        let cfg = HierarchyConfig {
            split_factor: 1,
            ..HierarchyConfig::default()
        };
        let mut tree = build_hierarchy_with(&pts, 2, 1, 1, cfg);
        let pops: Vec<usize> = tree.root.children.iter().map(|c| c.population).collect();
        assert_eq!(pops.iter().sum::<usize>(), 7);
        assert!(pops.contains(&3) && pops.contains(&4));
        tree.merge_children(&ClusterPath::root()).unwrap();
        assert!(tree.root.is_leaf());
        assert_eq!(tree.root.population, 7);
    }

    #[test]
    fn tree_json_round_trip() {
        let (pts, _) = four_blobs(6);
        let tree = build_hierarchy(&pts, 2, 2, 3);
        let json = tree.to_json();
        let back = ClusterTree::from_json(&json).unwrap();
        assert_eq!(back.to_json(), json);
        for p in pts.iter().step_by(7) {
            assert_eq!(cluster_path(&back, p), cluster_path(&tree, p));
        }
    }
}
