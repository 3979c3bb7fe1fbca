use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LinkModel, VelocityField};
use crate::dht::OverlayConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Per-epoch Poisson rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChurnSchedule {
    pub join_rate: f64,
    pub leave_rate: f64,
    pub fail_rate: f64,
}

impl ChurnSchedule {
    pub fn is_static(&self) -> bool {
        self.join_rate == 0.0 && self.leave_rate == 0.0 && self.fail_rate == 0.0
    }
}

/// Everything a simulation run needs. Loaded from a flat TOML document;
/// unspecified keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub nodes: usize,
    pub side: f64,
    /// Base propagation speed, meters per time unit.
    pub velocity: f64,
    /// Row-major multiplier grid; `[[1.0]]` is uniform.
    pub velocity_grid: Vec<Vec<f64>>,
    pub jitter: f64,
    pub loss: f64,
    pub k: usize,
    /// `None` picks [`auto_height`].
    pub height: Option<usize>,
    pub neighborhood: usize,
    pub successors: Option<usize>,
    /// Data shards per frame.
    pub shards: usize,
    pub epoch_length: f64,
    pub event_cap: usize,
    pub churn: ChurnSchedule,
    /// Lookup pairs per measurement.
    pub pairs: usize,
    pub repetitions: usize,
    /// Node counts for sweeping experiments; empty means `[nodes]`.
    pub sweep: Vec<usize>,
    pub epochs: usize,
    /// Fraction failed at once by the churn experiment.
    pub fail_fraction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            nodes: 256,
            side: 1000.0,
            velocity: 1.0,
            velocity_grid: vec![vec![1.0]],
            jitter: 0.0,
            loss: 0.0,
            k: 2,
            height: None,
            neighborhood: 4,
            successors: None,
            shards: 4,
            epoch_length: 1000.0,
            event_cap: 1 << 22,
            churn: ChurnSchedule::default(),
            pairs: 1000,
            repetitions: 5,
            sweep: Vec::new(),
            epochs: 50,
            fail_fraction: 0.1,
        }
    }
}

/// Hierarchy depth that leaves roughly eight nodes per leaf cluster.
pub fn auto_height(n: usize, k: usize) -> usize {
    let lg = (n.max(2) as f64).log2();
    (((lg - 3.0) / (k.max(2) as f64).log2()).floor() as usize).max(1)
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if !(self.side > 0.0 && self.side.is_finite()) {
            return bad("side must be positive");
        }
        if !(self.velocity > 0.0 && self.velocity.is_finite()) {
            return bad("velocity must be positive");
        }
        if self.velocity_grid.is_empty()
            || self.velocity_grid.iter().any(|r| r.is_empty() || r.iter().any(|&v| !(v > 0.0 && v.is_finite())))
        {
            return bad("velocity_grid must be non-empty with positive multipliers");
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad("jitter must be non-negative");
        }
        if !(0.0..1.0).contains(&self.loss) {
            return bad("loss must lie in [0, 1)");
        }
        if self.nodes == 0 {
            return bad("nodes must be at least 1");
        }
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if self.height == Some(0) {
            return bad("height must be at least 1");
        }
        if self.shards == 0 {
            return bad("shards must be at least 1");
        }
        if !(self.epoch_length > 0.0) {
            return bad("epoch_length must be positive");
        }
        if self.event_cap == 0 {
            return bad("event_cap must be positive");
        }
        let c = self.churn;
        if [c.join_rate, c.leave_rate, c.fail_rate].iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return bad("churn rates must be non-negative");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if !(0.0..1.0).contains(&self.fail_fraction) {
            return bad("fail_fraction must lie in [0, 1)");
        }
        if self.sweep.contains(&0) {
            return bad("sweep entries must be positive");
        }
        Ok(())
    }

    pub fn height_for(&self, n: usize) -> usize {
        self.height.unwrap_or_else(|| auto_height(n, self.k))
    }

    pub fn sweep_points(&self) -> Vec<usize> {
        if self.sweep.is_empty() {
            vec![self.nodes]
        } else {
            self.sweep.clone()
        }
    }

    pub fn link_model(&self) -> LinkModel {
        LinkModel::new(
            VelocityField {
                side: self.side,
                base: self.velocity,
                grid: self.velocity_grid.clone(),
            },
            self.jitter,
        )
    }

    pub fn overlay_config(&self, n: usize, seed: u64) -> OverlayConfig {
        OverlayConfig {
            side: self.side,
            k: self.k,
            h: self.height_for(n),
            neighborhood: self.neighborhood,
            successors: self.successors,
            seed,
            ..OverlayConfig::default()
        }
    }
}
