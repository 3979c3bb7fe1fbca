//! Location-agnostic reference overlays over the same nodes and link model.

use rand::Rng;
use sha2::{Digest, Sha256};

use super::LinkModel;
use crate::geokey::GeoPoint;
use crate::route::RouteError;

/// A baseline route: visited node indices and summed link latency.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePath {
    pub hops: Vec<usize>,
    pub total_latency: f64,
}

impl BaselinePath {
    pub fn hop_count(&self) -> usize {
        self.hops.len() - 1
    }
}

fn digest(seed: u64, index: usize, salt: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    h.finalize().into()
}

fn ttl(n: usize) -> usize {
    crate::route::default_ttl(n)
}

fn walk_latency<R: Rng + ?Sized>(hops: &[usize], positions: &[GeoPoint], link: &LinkModel, rng: &mut R) -> f64 {
    hops.windows(2)
        .map(|w| link.latency(&positions[w[0]], &positions[w[1]], rng))
        .sum()
}

/// Classic Chord on an `m`-bit ring with hashed identifiers.
#[derive(Debug, Clone)]
pub struct FlatChord {
    pub bits: u32,
    pub ids: Vec<u64>,
    pub positions: Vec<GeoPoint>,
    /// Node indices sorted by id.
    order: Vec<usize>,
    /// Distinct fingers per node, ascending clockwise distance.
    fingers: Vec<Vec<usize>>,
}

impl FlatChord {
    /// Hash `seed`/index into `bits`-bit ids (redrawing collisions).
    pub fn hashed(positions: &[GeoPoint], bits: u32, seed: u64) -> Self {
        let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        let mut seen = std::collections::HashSet::new();
        let ids = (0..positions.len())
            .map(|i| {
                let mut salt = 0u8;
                loop {
                    let d = digest(seed, i, &[b'c', salt]);
                    let id = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) & mask;
                    if seen.insert(id) {
                        return id;
                    }
                    salt = salt.wrapping_add(1);
                }
            })
            .collect();
        Self::with_ids(positions, ids, bits)
    }

    pub fn with_ids(positions: &[GeoPoint], ids: Vec<u64>, bits: u32) -> Self {
        assert_eq!(positions.len(), ids.len());
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| ids[i]);
        let mut chord = Self {
            bits,
            ids,
            positions: positions.to_vec(),
            order,
            fingers: Vec::new(),
        };
        chord.fingers = (0..chord.ids.len())
            .map(|n| {
                let mut f: Vec<usize> = Vec::new();
                for i in 0..bits {
                    let s = chord.successor(chord.add(chord.ids[n], 1u64 << i));
                    if s != n && !f.contains(&s) {
                        f.push(s);
                    }
                }
                f
            })
            .collect();
        chord
    }

    fn modulus_mask(&self) -> u64 {
        if self.bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.bits) - 1
        }
    }

    fn add(&self, a: u64, b: u64) -> u64 {
        a.wrapping_add(b) & self.modulus_mask()
    }

    fn cw(&self, from: u64, to: u64) -> u64 {
        to.wrapping_sub(from) & self.modulus_mask()
    }

    /// Owner of `key`: first id at or after it.
    pub fn successor(&self, key: u64) -> usize {
        let i = self.order.partition_point(|&n| self.ids[n] < key);
        self.order[i % self.order.len()]
    }

    pub fn fingers(&self, n: usize) -> &[usize] {
        &self.fingers[n]
    }

    /// Node indices visited from `src` to the owner of `key`.
    pub fn lookup(&self, src: usize, key: u64) -> Result<Vec<usize>, RouteError> {
        let owner = self.successor(key);
        let limit = ttl(self.ids.len());
        let mut hops = vec![src];
        let mut at = src;
        while at != owner {
            if hops.len() > limit {
                return Err(RouteError::TtlExceeded(limit));
            }
            // Closest finger on the arc (at, key].
            let d = self.cw(self.ids[at], key);
            let next = self.fingers[at]
                .iter()
                .copied()
                .filter(|&f| {
                    let df = self.cw(self.ids[at], self.ids[f]);
                    df > 0 && df <= d
                })
                .max_by_key(|&f| self.cw(self.ids[at], self.ids[f]))
                .unwrap_or_else(|| self.fingers[at].first().copied().unwrap_or(owner));
            at = next;
            hops.push(at);
        }
        Ok(hops)
    }

    pub fn route<R: Rng + ?Sized>(
        &self,
        src: usize,
        key: u64,
        link: &LinkModel,
        rng: &mut R,
    ) -> Result<BaselinePath, RouteError> {
        let hops = self.lookup(src, key)?;
        let total_latency = walk_latency(&hops, &self.positions, link, rng);
        Ok(BaselinePath { hops, total_latency })
    }
}

/// 160-bit identifier.
pub type XorId = [u8; 20];

fn xor_distance(a: &XorId, b: &XorId) -> XorId {
    let mut out = [0u8; 20];
    for i in 0..20 {
        out[i] = a[i] ^ b[i];
    }
    out
}

fn leading_bit(d: &XorId) -> Option<usize> {
    d.iter()
        .enumerate()
        .find(|(_, &b)| b != 0)
        .map(|(i, &b)| i * 8 + b.leading_zeros() as usize)
}

/// XOR-metric overlay with one contact per bucket.
#[derive(Debug, Clone)]
pub struct XorOverlay {
    pub ids: Vec<XorId>,
    pub positions: Vec<GeoPoint>,
    /// `buckets[n][b]`: a contact sharing exactly `b` leading bits with `n`.
    buckets: Vec<Vec<Option<usize>>>,
}

impl XorOverlay {
    pub fn hashed<R: Rng + ?Sized>(positions: &[GeoPoint], seed: u64, rng: &mut R) -> Self {
        let ids: Vec<XorId> = (0..positions.len())
            .map(|i| digest(seed, i, b"x")[..20].try_into().expect("20 bytes"))
            .collect();
        let n = ids.len();
        let mut buckets = vec![vec![None; 160]; n];
        for a in 0..n {
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 160];
            for b in 0..n {
                if a != b {
                    if let Some(bit) = leading_bit(&xor_distance(&ids[a], &ids[b])) {
                        groups[bit].push(b);
                    }
                }
            }
            for (bit, g) in groups.into_iter().enumerate() {
                if !g.is_empty() {
                    buckets[a][bit] = Some(g[rng.random_range(0..g.len())]);
                }
            }
        }
        Self {
            ids,
            positions: positions.to_vec(),
            buckets,
        }
    }

    pub fn contacts(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.buckets[n].iter().flatten().copied()
    }

    /// Node with the smallest XOR distance to `target`.
    pub fn owner(&self, target: &XorId) -> usize {
        (0..self.ids.len())
            .min_by_key(|&i| xor_distance(&self.ids[i], target))
            .expect("nonempty")
    }

    pub fn lookup(&self, src: usize, target: &XorId) -> Result<Vec<usize>, RouteError> {
        let limit = ttl(self.ids.len());
        let mut hops = vec![src];
        let mut at = src;
        loop {
            let here = xor_distance(&self.ids[at], target);
            let best = self
                .contacts(at)
                .map(|c| (xor_distance(&self.ids[c], target), c))
                .min();
            match best {
                Some((d, c)) if d < here => {
                    if hops.len() > limit {
                        return Err(RouteError::TtlExceeded(limit));
                    }
                    at = c;
                    hops.push(at);
                }
                _ => return Ok(hops),
            }
        }
    }

    pub fn route<R: Rng + ?Sized>(
        &self,
        src: usize,
        target: &XorId,
        link: &LinkModel,
        rng: &mut R,
    ) -> Result<BaselinePath, RouteError> {
        let hops = self.lookup(src, target)?;
        let total_latency = walk_latency(&hops, &self.positions, link, rng);
        Ok(BaselinePath { hops, total_latency })
    }
}
