//! Look-ahead geometry: which keys each query token may attend to, how far
//! into the future an output token depends, and what that costs in latency.
//!
//! All positions are global indices of post-downsampling tokens. A mask built
//! for a window of queries with a `query_offset` is exactly the corresponding
//! block of the whole-utterance mask; streaming correctness starts here.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::BoolMatrix;

/// Attention context regime.
///
/// `left` / `left_chunks` of `None` means unlimited past context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum AttentionContext {
    /// Unrestricted attention; used by the full-context baseline only.
    Full,
    /// Each token sees itself and (optionally a bounded window of) the past.
    Zero { left: Option<usize> },
    /// Each token sees `lookahead` future tokens and `left` past tokens, per layer.
    Regular {
        lookahead: usize,
        left: Option<usize>,
    },
    /// Tokens see their whole chunk plus `left_chunks` previous chunks.
    Chunk {
        size: usize,
        left_chunks: Option<usize>,
    },
}

impl AttentionContext {
    pub fn validate(&self) -> Result<()> {
        if let AttentionContext::Chunk { size: 0, .. } = self {
            return Err(Error::config("chunk_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn is_streamable(&self) -> bool {
        !matches!(self, AttentionContext::Full)
    }

    /// Whether query token `q` may attend key token `k`.
    pub fn allows(&self, q: usize, k: usize) -> bool {
        match *self {
            AttentionContext::Full => true,
            AttentionContext::Zero { left } => k <= q && left.is_none_or(|l| q - k <= l),
            AttentionContext::Regular { lookahead, left } => {
                k <= q + lookahead && (k >= q || left.is_none_or(|l| q - k <= l))
            }
            AttentionContext::Chunk { size, left_chunks } => {
                let (cq, ck) = (q / size, k / size);
                ck <= cq && left_chunks.is_none_or(|n| cq - ck <= n)
            }
        }
    }

    /// Future tokens one attention layer can reach from query `q` (ignoring sequence end).
    pub fn layer_future(&self, q: usize) -> usize {
        match *self {
            AttentionContext::Full => usize::MAX,
            AttentionContext::Zero { .. } => 0,
            AttentionContext::Regular { lookahead, .. } => lookahead,
            AttentionContext::Chunk { size, .. } => size - 1 - q % size,
        }
    }

    /// Number of past tokens an attention cache must retain (`None` = all).
    pub fn cache_len(&self) -> Option<usize> {
        match *self {
            AttentionContext::Full => None,
            AttentionContext::Zero { left } | AttentionContext::Regular { left, .. } => left,
            AttentionContext::Chunk { size, left_chunks } => left_chunks.map(|n| n * size),
        }
    }

    /// Largest key-minus-query offset the mask permits.
    pub fn max_future_offset(&self) -> usize {
        match *self {
            AttentionContext::Full => usize::MAX,
            AttentionContext::Zero { .. } => 0,
            AttentionContext::Regular { lookahead, .. } => lookahead,
            AttentionContext::Chunk { size, .. } => size - 1,
        }
    }

    /// Largest query-minus-key offset the mask permits (`None` = unbounded).
    pub fn max_past_offset(&self) -> Option<usize> {
        match *self {
            AttentionContext::Full => None,
            AttentionContext::Zero { left } | AttentionContext::Regular { left, .. } => left,
            AttentionContext::Chunk { size, left_chunks } => {
                left_chunks.map(|n| n * size + size - 1)
            }
        }
    }

    /// Tokens produced per streaming step.
    pub fn step_tokens(&self) -> usize {
        match *self {
            AttentionContext::Chunk { size, .. } => size,
            _ => 1,
        }
    }

    pub fn label(&self) -> String {
        let left = |l: Option<usize>| l.map_or("inf".to_string(), |v| v.to_string());
        match *self {
            AttentionContext::Full => "full".into(),
            AttentionContext::Zero { left: l } => format!("zero(L={})", left(l)),
            AttentionContext::Regular { lookahead, left: l } => {
                format!("regular(M={lookahead},L={})", left(l))
            }
            AttentionContext::Chunk { size, left_chunks } => {
                format!("chunk(C={size},left={})", left(left_chunks))
            }
        }
    }
}

/// Mask for queries `query_offset..query_offset+t` against keys `0..query_offset+t`.
pub fn build_mask(ctx: &AttentionContext, t: usize, query_offset: usize) -> BoolMatrix {
    mask_window(ctx, query_offset..query_offset + t, 0..query_offset + t)
}

/// Mask for an arbitrary window of global query and key positions.
pub fn mask_window(
    ctx: &AttentionContext,
    queries: Range<usize>,
    keys: Range<usize>,
) -> BoolMatrix {
    BoolMatrix::from_fn(queries.len(), keys.len(), |r, c| {
        ctx.allows(queries.start + r, keys.start + c)
    })
}

/// Future tokens an output of an `n_layers` stack depends on, maximized over tokens.
///
/// Regular look-ahead compounds with depth; chunked look-ahead does not. The
/// full-context regime has no bound and returns `usize::MAX`.
pub fn effective_lookahead(ctx: &AttentionContext, n_layers: usize) -> usize {
    match *ctx {
        AttentionContext::Full => usize::MAX,
        AttentionContext::Zero { .. } => 0,
        AttentionContext::Regular { lookahead, .. } => lookahead * n_layers,
        AttentionContext::Chunk { size, .. } => size - 1,
    }
}

/// Effective look-ahead of token `t` specifically.
pub fn token_lookahead(ctx: &AttentionContext, n_layers: usize, t: usize) -> usize {
    match *ctx {
        AttentionContext::Chunk { size, .. } => size - 1 - t % size,
        _ => effective_lookahead(ctx, n_layers),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub frame_shift_ms: u32,
    pub downsampling: usize,
    pub n_layers: usize,
}

impl LatencyModel {
    pub fn new(frame_shift_ms: u32, downsampling: usize, n_layers: usize) -> Result<Self> {
        if frame_shift_ms == 0 {
            return Err(Error::config("frame_shift_ms", "must be positive"));
        }
        if downsampling == 0 {
            return Err(Error::config("downsampling", "must be positive"));
        }
        if n_layers == 0 {
            return Err(Error::config("n_layers", "must be positive"));
        }
        Ok(LatencyModel {
            frame_shift_ms,
            downsampling,
            n_layers,
        })
    }

    /// Duration of one encoder token.
    pub fn token_ms(&self) -> u64 {
        self.frame_shift_ms as u64 * self.downsampling as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub max_ms: f64,
    pub avg_ms: f64,
}

/// Algorithmic look-ahead latency of a regime (compute time excluded).
pub fn latency_ms(ctx: &AttentionContext, lm: &LatencyModel) -> Result<Latency> {
    if !ctx.is_streamable() {
        return Err(Error::Argument(
            "full-context attention has unbounded look-ahead".into(),
        ));
    }
    let max_ms = (effective_lookahead(ctx, lm.n_layers) as u64 * lm.token_ms()) as f64;
    Ok(Latency {
        max_ms,
        avg_ms: max_ms / 2.0,
    })
}

/// Every latency reachable with regular look-ahead `0..=max_lookahead`.
pub fn feasible_regular_latencies(lm: &LatencyModel, max_lookahead: usize) -> Vec<u64> {
    (0..=max_lookahead)
        .map(|m| m as u64 * lm.n_layers as u64 * lm.token_ms())
        .collect()
}

/// The per-layer look-ahead achieving exactly `ms` with regular look-ahead, if any.
pub fn regular_lookahead_for(lm: &LatencyModel, ms: u64) -> Option<usize> {
    let step = lm.n_layers as u64 * lm.token_ms();
    ms.is_multiple_of(step).then_some((ms / step) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(size: usize, left: usize) -> AttentionContext {
        AttentionContext::Chunk {
            size,
            left_chunks: Some(left),
        }
    }

    #[test]
    fn zero_regime_is_lower_triangular() {
        let m = build_mask(&AttentionContext::Zero { left: None }, 3, 0);
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(m.get(q, k), k <= q);
            }
        }
    }

    #[test]
    fn chunk_mask_examples() {
        let m = build_mask(&chunk(3, 1), 6, 0);
        assert_eq!(m.allowed(4), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(m.allowed(2), vec![0, 1, 2]);
        // oracle: chunk membership by div
        for q in 0..6 {
            for k in 0..6 {
                let (cq, ck) = (q / 3, k / 3);
                assert_eq!(m.get(q, k), ck <= cq && cq - ck <= 1);
            }
        }
    }

    #[test]
    fn regular_mask_example() {
        let ctx = AttentionContext::Regular {
            lookahead: 1,
            left: Some(2),
        };
        let m = build_mask(&ctx, 5, 0);
        assert_eq!(m.allowed(2), vec![0, 1, 2, 3]);
        for q in 0..5usize {
            let want: Vec<usize> = (q.saturating_sub(2)..=(q + 1).min(4)).collect();
            assert_eq!(m.allowed(q), want);
        }
    }

    #[test]
    fn chunk_never_sees_later_chunks() {
        for size in 1..=8 {
            for left in 0..=3 {
                let m = build_mask(&chunk(size, left), 64, 0);
                for q in 0..64 {
                    for k in 0..64 {
                        if k / size > q / size {
                            assert!(!m.get(q, k));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn per_chunk_masks_match_whole_mask() {
        let ctxs = [
            chunk(3, 1),
            chunk(4, 0),
            AttentionContext::Chunk {
                size: 2,
                left_chunks: None,
            },
            AttentionContext::Zero { left: Some(3) },
            AttentionContext::Regular {
                lookahead: 2,
                left: Some(4),
            },
        ];
        let total = 24;
        for ctx in ctxs {
            let whole = build_mask(&ctx, total, 0);
            let step = ctx.step_tokens().max(3);
            let mut start = 0;
            while start < total {
                let n = step.min(total - start);
                let part = build_mask(&ctx, n, start);
                assert_eq!(
                    part,
                    whole.submatrix(start..start + n, 0..start + n),
                    "{ctx:?} at {start}"
                );
                start += n;
            }
        }
    }

    #[test]
    fn chunk_lookahead_spans_zero_to_c_minus_one() {
        for size in 1..=12 {
            let ctx = chunk(size, 1);
            let mut seen: Vec<usize> = (0..size).map(|t| token_lookahead(&ctx, 17, t)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..size).collect::<Vec<_>>());
            let mean = (size - 1) as f64 / 2.0;
            for m in 0..size {
                if size - 1 > 2 * m {
                    assert!(mean > m as f64);
                }
            }
        }
    }

    #[test]
    fn effective_lookahead_examples() {
        let reg = AttentionContext::Regular {
            lookahead: 2,
            left: None,
        };
        assert_eq!(effective_lookahead(&reg, 17), 34);
        assert_eq!(
            effective_lookahead(&AttentionContext::Zero { left: None }, 17),
            0
        );
        assert_eq!(effective_lookahead(&chunk(3, 1), 17), 2);
    }

    #[test]
    fn latency_examples() {
        let lm4 = LatencyModel::new(10, 4, 17).unwrap();
        let lm8 = LatencyModel::new(10, 8, 17).unwrap();
        let reg = |m| AttentionContext::Regular {
            lookahead: m,
            left: None,
        };
        assert_eq!(latency_ms(&reg(2), &lm4).unwrap().max_ms, 1360.0);
        assert_eq!(latency_ms(&reg(1), &lm8).unwrap().max_ms, 1360.0);
        let l = latency_ms(&chunk(2, 1), &lm8).unwrap();
        assert_eq!((l.max_ms, l.avg_ms), (80.0, 40.0));
        assert_eq!(latency_ms(&chunk(14, 1), &lm8).unwrap().avg_ms, 520.0);
        let z = latency_ms(&AttentionContext::Zero { left: None }, &lm8).unwrap();
        assert_eq!((z.max_ms, z.avg_ms), (0.0, 0.0));
        assert!(latency_ms(&AttentionContext::Full, &lm8).is_err());
    }

    #[test]
    fn feasible_regular_examples() {
        let lm8 = LatencyModel::new(10, 8, 17).unwrap();
        assert_eq!(feasible_regular_latencies(&lm8, 1), vec![0, 1360]);
        let lm1 = LatencyModel::new(10, 8, 1).unwrap();
        assert_eq!(feasible_regular_latencies(&lm1, 3), vec![0, 80, 160, 240]);
        assert_eq!(regular_lookahead_for(&lm8, 240), None);
        assert_eq!(regular_lookahead_for(&lm8, 2720), Some(2));
    }

    #[test]
    fn config_validation() {
        assert!(chunk(0, 1).validate().is_err());
        assert!(LatencyModel::new(10, 0, 1).is_err());
    }
}
