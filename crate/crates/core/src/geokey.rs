//! Locality-preserving keys.
//!
//! A position inside the square region is quantized onto an equal-distance
//! grid and the two cell coordinates are bit-interleaved (Z-order) into a
//! single ring key. Keys are left-aligned in `m` bits so that a coarse cell
//! is always a prefix of every finer cell inside it.
//!
//! The module also holds the ring metric and RTT multilateration used to
//! approximate the position of nodes that cannot (or will not) report it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default key width in bits.
pub const DEFAULT_KEY_BITS: u32 = 32;

/// Largest supported key width.
pub const MAX_KEY_BITS: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoKeyError {
    #[error("point ({x}, {y}) lies outside the region of side {side}")]
    OutOfRegion { x: f64, y: f64, side: f64 },
    #[error("key widths differ: {0} vs {1} bits")]
    KeyWidthMismatch(u32, u32),
    #[error("key width must be even and in 2..=64, got {0}")]
    InvalidKeyWidth(u32),
    #[error("grid level {level} exceeds the key resolution of {max}")]
    LevelTooDeep { level: u32, max: u32 },
    #[error("cell ({x}, {y}) is outside level {level}")]
    CellOutOfRange { x: u64, y: u64, level: u32 },
    #[error("malformed grid code {0:?}")]
    MalformedGridCode(String),
    #[error("malformed key {0:?}")]
    MalformedKey(String),
    #[error("need at least 3 anchors, got {0}")]
    InsufficientAnchors(usize),
    #[error("anchor geometry is degenerate")]
    DegenerateGeometry,
    #[error("observation {0} has a negative or non-finite rtt")]
    InvalidObservation(usize),
}

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoPoint {
    pub x: f64,
    pub y: f64,
}

impl GeoPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &GeoPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn midpoint(&self, other: &GeoPoint) -> GeoPoint {
        GeoPoint::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn in_region(&self, side: f64) -> bool {
        self.x >= 0.0 && self.x < side && self.y >= 0.0 && self.y < side
    }
}

/// A cell of the equal-distance grid at some precision level.
///
/// Rendered as `L<level>:<cell_x>-<cell_y>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridCode {
    pub level: u32,
    pub cell_x: u64,
    pub cell_y: u64,
}

impl GridCode {
    pub fn new(level: u32, cell_x: u64, cell_y: u64) -> Result<Self, GeoKeyError> {
        if level > MAX_KEY_BITS / 2 {
            return Err(GeoKeyError::LevelTooDeep {
                level,
                max: MAX_KEY_BITS / 2,
            });
        }
        let cells = cells_per_side(level);
        if cell_x >= cells || cell_y >= cells {
            return Err(GeoKeyError::CellOutOfRange {
                x: cell_x,
                y: cell_y,
                level,
            });
        }
        Ok(Self {
            level,
            cell_x,
            cell_y,
        })
    }

    /// Center of the cell in region coordinates.
    pub fn center(&self, side: f64) -> GeoPoint {
        let width = side / cells_per_side(self.level) as f64;
        GeoPoint::new(
            (self.cell_x as f64 + 0.5) * width,
            (self.cell_y as f64 + 0.5) * width,
        )
    }
}

impl fmt::Display for GridCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}:{}-{}", self.level, self.cell_x, self.cell_y)
    }
}

impl FromStr for GridCode {
    type Err = GeoKeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeoKeyError::MalformedGridCode(s.to_string());
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (level, cells) = rest.split_once(':').ok_or_else(bad)?;
        let (cx, cy) = cells.split_once('-').ok_or_else(bad)?;
        let level = level.parse::<u32>().map_err(|_| bad())?;
        let cx = cx.parse::<u64>().map_err(|_| bad())?;
        let cy = cy.parse::<u64>().map_err(|_| bad())?;
        GridCode::new(level, cx, cy).map_err(|_| bad())
    }
}

fn cells_per_side(level: u32) -> u64 {
    1u64 << level
}

/// An `m`-bit key on the modular ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RingKey {
    value: u64,
    bits: u32,
}

impl RingKey {
    pub fn new(value: u64, bits: u32) -> Result<Self, GeoKeyError> {
        check_bits(bits)?;
        Ok(Self {
            value: value & mask(bits),
            bits,
        })
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Clockwise successor position `self + offset (mod 2^m)`.
    pub fn add(&self, offset: u64) -> RingKey {
        RingKey {
            value: self.value.wrapping_add(offset) & mask(self.bits),
            bits: self.bits,
        }
    }

    /// Clockwise distance from `self` to `other`.
    pub fn clockwise_to(&self, other: &RingKey) -> u64 {
        other.value.wrapping_sub(self.value) & mask(self.bits)
    }

    /// True when `self` lies on the half-open clockwise arc `(from, to]`.
    ///
    /// The arc `(a, a]` is the whole ring.
    pub fn in_arc(&self, from: &RingKey, to: &RingKey) -> bool {
        let span = from.clockwise_to(to);
        let offset = from.clockwise_to(self);
        if span == 0 {
            return true;
        }
        offset != 0 && offset <= span
    }

    /// Top `n` bits of the key.
    pub fn prefix(&self, n: u32) -> u64 {
        if n == 0 {
            0
        } else {
            self.value >> (self.bits - n.min(self.bits))
        }
    }

    /// Lowercase hex rendering, `ceil(m/4)` digits.
    pub fn to_hex(&self) -> String {
        let width = self.bits.div_ceil(4) as usize;
        format!("{:0width$x}", self.value, width = width)
    }

    pub fn from_hex(s: &str, bits: u32) -> Result<Self, GeoKeyError> {
        check_bits(bits)?;
        let width = bits.div_ceil(4) as usize;
        if s.len() != width || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(GeoKeyError::MalformedKey(s.to_string()));
        }
        let value = u64::from_str_radix(s, 16).map_err(|_| GeoKeyError::MalformedKey(s.to_string()))?;
        if value > mask(bits) {
            return Err(GeoKeyError::MalformedKey(s.to_string()));
        }
        Ok(Self { value, bits })
    }

    /// Grid cell at full key resolution (`m/2` bits per axis).
    pub fn to_grid(&self) -> GridCode {
        let level = self.bits / 2;
        let (cx, cy) = deinterleave(self.value, level);
        GridCode {
            level,
            cell_x: cx,
            cell_y: cy,
        }
    }

    /// Center of the finest cell this key addresses.
    pub fn cell_center(&self, side: f64) -> GeoPoint {
        self.to_grid().center(side)
    }
}

impl fmt::Display for RingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

fn check_bits(bits: u32) -> Result<(), GeoKeyError> {
    if !(2..=MAX_KEY_BITS).contains(&bits) || !bits.is_multiple_of(2) {
        return Err(GeoKeyError::InvalidKeyWidth(bits));
    }
    Ok(())
}

fn mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Quantize a point onto the level-`level` grid (half-open cells).
pub fn encode_grid(p: GeoPoint, level: u32, side: f64) -> Result<GridCode, GeoKeyError> {
    if !(side > 0.0) || !p.in_region(side) {
        return Err(GeoKeyError::OutOfRegion {
            x: p.x,
            y: p.y,
            side,
        });
    }
    if level > MAX_KEY_BITS / 2 {
        return Err(GeoKeyError::LevelTooDeep {
            level,
            max: MAX_KEY_BITS / 2,
        });
    }
    let cells = cells_per_side(level);
    let scale = cells as f64 / side;
    // Float rounding can push a point just under `side` onto `cells`.
    let cx = ((p.x * scale).floor() as u64).min(cells - 1);
    let cy = ((p.y * scale).floor() as u64).min(cells - 1);
    Ok(GridCode {
        level,
        cell_x: cx,
        cell_y: cy,
    })
}

/// Spread the low 32 bits of `v` into the even bit positions.
fn spread(v: u64) -> u64 {
    let mut x = v & 0xffff_ffff;
    x = (x | (x << 16)) & 0x0000_ffff_0000_ffff;
    x = (x | (x << 8)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x << 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

fn compact(v: u64) -> u64 {
    let mut x = v & 0x5555_5555_5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333_3333_3333;
    x = (x | (x >> 2)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x >> 4)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x >> 8)) & 0x0000_ffff_0000_ffff;
    x = (x | (x >> 16)) & 0x0000_0000_ffff_ffff;
    x
}

/// Morton code with `x` on even bits and `y` on odd bits (`2·level` bits).
pub fn morton(cell_x: u64, cell_y: u64, level: u32) -> u64 {
    let m = if level == 0 { 0 } else { mask(level.min(32)) };
    spread(cell_x & m) | (spread(cell_y & m) << 1)
}

/// Inverse of [`morton`].
pub fn deinterleave(code: u64, level: u32) -> (u64, u64) {
    let m = if level == 0 { 0 } else { mask(level.min(32)) };
    (compact(code) & m, compact(code >> 1) & m)
}

/// Interleave a grid cell into a left-aligned `bits`-wide ring key.
pub fn interleave(code: &GridCode, bits: u32) -> Result<RingKey, GeoKeyError> {
    check_bits(bits)?;
    if code.level > bits / 2 {
        return Err(GeoKeyError::LevelTooDeep {
            level: code.level,
            max: bits / 2,
        });
    }
    let cells = cells_per_side(code.level);
    if code.cell_x >= cells || code.cell_y >= cells {
        return Err(GeoKeyError::CellOutOfRange {
            x: code.cell_x,
            y: code.cell_y,
            level: code.level,
        });
    }
    let significant = morton(code.cell_x, code.cell_y, code.level);
    let shift = bits - 2 * code.level;
    let value = if shift >= 64 { 0 } else { significant << shift };
    RingKey::new(value, bits)
}

/// Full-resolution key for a point: grid level `m/2`, then Z-order.
pub fn point_to_key(p: GeoPoint, side: f64, bits: u32) -> Result<RingKey, GeoKeyError> {
    check_bits(bits)?;
    let code = encode_grid(p, bits / 2, side)?;
    interleave(&code, bits)
}

/// Circular distance `min((a-b), (b-a)) mod 2^m`.
pub fn ring_distance(a: &RingKey, b: &RingKey) -> Result<u64, GeoKeyError> {
    if a.bits != b.bits {
        return Err(GeoKeyError::KeyWidthMismatch(a.bits, b.bits));
    }
    Ok(a.clockwise_to(b).min(b.clockwise_to(a)))
}

/// An RTT measured between a node and an anchor whose position is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorObservation {
    pub anchor: GeoPoint,
    /// Two-way time.
    pub rtt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationModel {
    /// Meters per time unit.
    pub velocity: f64,
}

impl PropagationModel {
    pub fn range(&self, rtt: f64) -> f64 {
        self.velocity * rtt / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationEstimate {
    pub point: GeoPoint,
    pub rms_residual: f64,
}

const GAUSS_NEWTON_ITERATIONS: usize = 20;
const GAUSS_NEWTON_STEP_TOL: f64 = 1e-9;

/// Least-squares multilateration from RTTs to known anchors.
///
/// The circle equations are linearized against the first anchor, solved in
/// closed form, and then refined with a bounded Gauss-Newton loop on the
/// range residuals.
pub fn estimate_location(
    obs: &[AnchorObservation],
    model: &PropagationModel,
) -> Result<LocationEstimate, GeoKeyError> {
    if obs.len() < 3 {
        return Err(GeoKeyError::InsufficientAnchors(obs.len()));
    }
    for (i, o) in obs.iter().enumerate() {
        if !(o.rtt >= 0.0) || !o.rtt.is_finite() {
            return Err(GeoKeyError::InvalidObservation(i));
        }
    }
    let ranges: Vec<f64> = obs.iter().map(|o| model.range(o.rtt)).collect();
    let a0 = obs[0].anchor;
    let d0 = ranges[0];

    // Normal equations of the (n-1) x 2 linearized system.
    let (mut ata, mut atb) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
    let mut scale = 0.0f64;
    for (o, &d) in obs.iter().zip(&ranges).skip(1) {
        let row = [2.0 * (o.anchor.x - a0.x), 2.0 * (o.anchor.y - a0.y)];
        let rhs = d0 * d0 - d * d + o.anchor.x * o.anchor.x - a0.x * a0.x + o.anchor.y * o.anchor.y
            - a0.y * a0.y;
        for r in 0..2 {
            for c in 0..2 {
                ata[r][c] += row[r] * row[c];
            }
            atb[r] += row[r] * rhs;
        }
        scale = scale.max(row[0].abs()).max(row[1].abs());
    }
    let det = ata[0][0] * ata[1][1] - ata[0][1] * ata[1][0];
    let norm = ata[0][0] + ata[1][1];
    if scale == 0.0 || !(det.abs() > 1e-10 * norm * norm) {
        return Err(GeoKeyError::DegenerateGeometry);
    }
    let mut x = (ata[1][1] * atb[0] - ata[0][1] * atb[1]) / det;
    let mut y = (ata[0][0] * atb[1] - ata[1][0] * atb[0]) / det;

    for _ in 0..GAUSS_NEWTON_ITERATIONS {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (o, &d) in obs.iter().zip(&ranges) {
            let dx = x - o.anchor.x;
            let dy = y - o.anchor.y;
            let dist = dx.hypot(dy);
            if dist < 1e-12 {
                continue;
            }
            let j = [dx / dist, dy / dist];
            let r = dist - d;
            for a in 0..2 {
                for b in 0..2 {
                    jtj[a][b] += j[a] * j[b];
                }
                jtr[a] += j[a] * r;
            }
        }
        let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
        if det.abs() < 1e-15 {
            break;
        }
        let sx = (jtj[1][1] * jtr[0] - jtj[0][1] * jtr[1]) / det;
        let sy = (jtj[0][0] * jtr[1] - jtj[1][0] * jtr[0]) / det;
        x -= sx;
        y -= sy;
        if sx.hypot(sy) < GAUSS_NEWTON_STEP_TOL * (1.0 + x.hypot(y)) {
            break;
        }
    }
    let point = GeoPoint::new(x, y);
    Ok(LocationEstimate {
        point,
        rms_residual: rms(&range_residuals(obs, &ranges, point)),
    })
}

fn range_residuals(obs: &[AnchorObservation], ranges: &[f64], p: GeoPoint) -> Vec<f64> {
    obs.iter()
        .zip(ranges)
        .map(|(o, &d)| p.distance(&o.anchor) - d)
        .collect()
}

fn rms(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt()
}

/// Indices of anchors whose range residual is out of line with the rest.
///
/// Each round tries every remaining anchor as the suspect: the position is
/// re-estimated without it and its residual is compared against `tau` times
/// the RMS residual of the others. The worst offender is flagged while the
/// ratio exceeds `tau` and at least three anchors remain.
pub fn flag_outliers(
    obs: &[AnchorObservation],
    model: &PropagationModel,
    tau: f64,
) -> Vec<usize> {
    let mut flagged = Vec::new();
    if !tau.is_finite() {
        return flagged;
    }
    let ranges: Vec<f64> = obs.iter().map(|o| model.range(o.rtt)).collect();
    loop {
        let active: Vec<usize> = (0..obs.len()).filter(|i| !flagged.contains(i)).collect();
        if active.len() <= 3 {
            break;
        }
        let mut worst: Option<(usize, f64)> = None;
        for &suspect in &active {
            let rest: Vec<usize> = active.iter().copied().filter(|&i| i != suspect).collect();
            let subset: Vec<AnchorObservation> = rest.iter().map(|&i| obs[i]).collect();
            let Ok(est) = estimate_location(&subset, model) else {
                continue;
            };
            let residual = (est.point.distance(&obs[suspect].anchor) - ranges[suspect]).abs();
            let floor = 1e-9 * (1.0 + ranges[suspect].abs());
            if residual <= tau * est.rms_residual + floor {
                continue;
            }
            let ratio = residual / (est.rms_residual + floor);
            if worst.is_none_or(|(_, r)| ratio > r) {
                worst = Some((suspect, ratio));
            }
        }
        match worst {
            Some((i, _)) => flagged.push(i),
            None => break,
        }
    }
    flagged.sort_unstable();
    flagged
}
