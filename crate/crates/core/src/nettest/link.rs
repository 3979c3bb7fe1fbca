//! Planar latency field.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geokey::GeoPoint;

/// Propagation velocity as a base speed times a grid of per-cell multipliers.
///
/// `grid[row][col]` covers the cell whose lower-left corner is
/// `(col·side/cols, row·side/rows)`. A 2x2 grid is one multiplier per
/// quadrant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityField {
    pub side: f64,
    pub base: f64,
    pub grid: Vec<Vec<f64>>,
}

impl VelocityField {
    pub fn uniform(side: f64, base: f64) -> Self {
        Self {
            side,
            base,
            grid: vec![vec![1.0]],
        }
    }

    pub fn velocity_at(&self, p: &GeoPoint) -> f64 {
        let rows = self.grid.len().max(1);
        let row = ((p.y / self.side * rows as f64).floor().max(0.0) as usize).min(rows - 1);
        let cols = self.grid.get(row).map_or(1, |r| r.len().max(1));
        let col = ((p.x / self.side * cols as f64).floor().max(0.0) as usize).min(cols - 1);
        let mult = self.grid.get(row).and_then(|r| r.get(col)).copied().unwrap_or(1.0);
        self.base * mult
    }

    /// Velocity averaged over the whole region.
    pub fn mean_velocity(&self) -> f64 {
        let cells: Vec<f64> = self.grid.iter().flatten().copied().collect();
        if cells.is_empty() {
            return self.base;
        }
        self.base * cells.iter().sum::<f64>() / cells.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub field: VelocityField,
    /// Upper bound of the uniform per-message jitter.
    pub jitter: f64,
}

impl LinkModel {
    pub fn new(field: VelocityField, jitter: f64) -> Self {
        Self { field, jitter }
    }

    /// Propagation delay without jitter.
    pub fn base_latency(&self, a: &GeoPoint, b: &GeoPoint) -> f64 {
        let d = a.distance(b);
        if d == 0.0 {
            return 0.0;
        }
        d / self.field.velocity_at(&a.midpoint(b))
    }

    pub fn expected_latency(&self, a: &GeoPoint, b: &GeoPoint) -> f64 {
        self.base_latency(a, b) + 0.5 * self.jitter
    }

    /// One message's latency: propagation plus uniform jitter in `[0, j)`.
    pub fn latency<R: Rng + ?Sized>(&self, a: &GeoPoint, b: &GeoPoint, rng: &mut R) -> f64 {
        let base = self.base_latency(a, b);
        if self.jitter > 0.0 {
            base + rng.random_range(0.0..self.jitter)
        } else {
            base
        }
    }
}

/// Free-function form of [`LinkModel::latency`].
pub fn link_latency<R: Rng + ?Sized>(a: &GeoPoint, b: &GeoPoint, model: &LinkModel, rng: &mut R) -> f64 {
    model.latency(a, b, rng)
}
