//! Single-parity erasure framing: `k` data shards plus one XOR parity shard,
//! any `k` of which rebuild the payload.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FecError {
    #[error("shard count must be at least 1")]
    ZeroShards,
    #[error("frame {frame_id}: {missing} shards missing, at most 1 is recoverable")]
    UnrecoverableFrame { frame_id: u64, missing: usize },
    #[error("shards disagree on frame layout")]
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub frame_id: u64,
    /// `0..k` data, `k` parity.
    pub index: usize,
    pub k: usize,
    pub payload_len: usize,
    pub data: Vec<u8>,
}

impl Shard {
    pub fn is_parity(&self) -> bool {
        self.index == self.k
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FecFrame {
    pub frame_id: u64,
    pub k: usize,
    pub shards: Vec<Shard>,
}

/// Split `payload` into `k` zero-padded shards and append their XOR.
pub fn fec_encode(payload: &[u8], k: usize, frame_id: u64) -> Result<FecFrame, FecError> {
    if k == 0 {
        return Err(FecError::ZeroShards);
    }
    let len = payload.len().div_ceil(k).max(1);
    let mut shards: Vec<Shard> = (0..k)
        .map(|i| {
            let mut data = vec![0u8; len];
            let lo = (i * len).min(payload.len());
            let hi = ((i + 1) * len).min(payload.len());
            data[..hi - lo].copy_from_slice(&payload[lo..hi]);
            Shard {
                frame_id,
                index: i,
                k,
                payload_len: payload.len(),
                data,
            }
        })
        .collect();
    let mut parity = vec![0u8; len];
    for s in &shards {
        xor_into(&mut parity, &s.data);
    }
    shards.push(Shard {
        frame_id,
        index: k,
        k,
        payload_len: payload.len(),
        data: parity,
    });
    Ok(FecFrame { frame_id, k, shards })
}

fn xor_into(acc: &mut [u8], other: &[u8]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a ^= b;
    }
}

/// Rebuild the payload from whatever shards of one frame arrived.
pub fn fec_decode(shards: &[Shard]) -> Result<Vec<u8>, FecError> {
    let first = shards.first().ok_or(FecError::UnrecoverableFrame {
        frame_id: 0,
        missing: usize::MAX,
    })?;
    let (frame_id, k, payload_len, len) = (first.frame_id, first.k, first.payload_len, first.data.len());
    if k == 0 {
        return Err(FecError::ZeroShards);
    }
    let mut slots: Vec<Option<&[u8]>> = vec![None; k + 1];
    for s in shards {
        if s.frame_id != frame_id || s.k != k || s.payload_len != payload_len || s.data.len() != len || s.index > k {
            return Err(FecError::Inconsistent);
        }
        slots[s.index] = Some(&s.data);
    }
    let missing: Vec<usize> = (0..=k).filter(|&i| slots[i].is_none()).collect();
    let missing_data: Vec<usize> = missing.iter().copied().filter(|&i| i < k).collect();
    if missing.len() > 1 {
        return Err(FecError::UnrecoverableFrame {
            frame_id,
            missing: missing.len(),
        });
    }
    let mut rebuilt: Option<Vec<u8>> = None;
    if let Some(&gap) = missing_data.first() {
        let mut acc = vec![0u8; len];
        for (i, s) in slots.iter().enumerate() {
            if i != gap {
                xor_into(&mut acc, s.expect("only one gap"));
            }
        }
        rebuilt = Some(acc);
    }
    let mut out = Vec::with_capacity(k * len);
    for slot in &slots[..k] {
        match slot {
            Some(d) => out.extend_from_slice(d),
            None => out.extend_from_slice(rebuilt.as_deref().expect("rebuilt above")),
        }
    }
    out.truncate(payload_len);
    Ok(out)
}

/// Probability that a `k+1`-shard frame survives i.i.d. shard loss `loss`.
pub fn frame_delivery_probability(k: usize, loss: f64) -> f64 {
    let n = (k + 1) as f64;
    (1.0 - loss).powf(n) + n * loss * (1.0 - loss).powf(n - 1.0)
}
