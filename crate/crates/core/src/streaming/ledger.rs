//! Multiply-accumulate accounting.
//!
//! The encoder records what it actually computes: per-row costs of the
//! position-wise layers plus one pair cost for every unmasked query-key pair
//! it visits. [`count_macs`] predicts the same numbers from shapes and masks
//! alone, without running anything.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::context::AttentionContext;
use crate::encoder::EncoderConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounts {
    pub attention: u64,
    pub conv: u64,
    pub ffn: u64,
    pub downsampler: u64,
    pub decoder: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.attention + self.conv + self.ffn + self.downsampler + self.decoder
    }

    /// Encoder share only (everything but the decoder heads).
    pub fn encoder(&self) -> u64 {
        self.attention + self.conv + self.ffn + self.downsampler
    }
}

impl Add for MacCounts {
    type Output = MacCounts;
    fn add(mut self, o: MacCounts) -> MacCounts {
        self += o;
        self
    }
}

impl AddAssign for MacCounts {
    fn add_assign(&mut self, o: MacCounts) {
        self.attention += o.attention;
        self.conv += o.conv;
        self.ffn += o.ffn;
        self.downsampler += o.downsampler;
        self.decoder += o.decoder;
    }
}

impl std::iter::Sum for MacCounts {
    fn sum<I: Iterator<Item = MacCounts>>(iter: I) -> MacCounts {
        iter.fold(MacCounts::default(), Add::add)
    }
}

/// Per-step MAC counts plus the share spent on work that was thrown away.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLedger {
    pub steps: Vec<MacCounts>,
    /// MACs spent on outputs that were discarded and recomputed later (or never kept).
    pub duplicate: u64,
    /// Encoder rows computed and discarded, summed over layers.
    pub duplicate_rows: u64,
    /// Unmasked query-key pairs visited, summed over layers (heads share a pair).
    pub attention_pairs: u64,
}

impl ComputeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn totals(&self) -> MacCounts {
        self.steps.iter().copied().sum()
    }

    pub fn total(&self) -> u64 {
        self.totals().total()
    }

    pub fn begin_step(&mut self) {
        self.steps.push(MacCounts::default());
    }

    /// Adds to the current step, opening one if none exists.
    pub fn record(&mut self, macs: MacCounts) {
        if self.steps.is_empty() {
            self.begin_step();
        }
        *self.steps.last_mut().expect("step exists") += macs;
    }

    pub fn absorb(&mut self, other: &ComputeLedger) {
        self.steps.extend_from_slice(&other.steps);
        self.duplicate += other.duplicate;
        self.duplicate_rows += other.duplicate_rows;
        self.attention_pairs += other.attention_pairs;
    }
}

/// Shape-derived per-row costs of the encoder.
#[derive(Clone, Copy, Debug)]
pub struct CostModel {
    d: u64,
    heads: u64,
    ffn_dim: u64,
    kernel: u64,
    n_mels: u64,
    stages: usize,
}

impl CostModel {
    pub fn new(cfg: &EncoderConfig) -> Self {
        CostModel {
            d: cfg.d_model as u64,
            heads: cfg.n_heads as u64,
            ffn_dim: cfg.ffn_dim() as u64,
            kernel: cfg.conv_kernel as u64,
            n_mels: cfg.n_mels as u64,
            stages: cfg.n_stages(),
        }
    }

    /// Cost of one query row through one block, excluding attention pairs.
    pub fn row(&self) -> MacCounts {
        let d = self.d;
        MacCounts {
            // query, key-absorbed query, value and output projections
            attention: 4 * d * d,
            // pointwise in (GLU doubles width), depthwise, pointwise out
            conv: 2 * d * d + d * self.kernel + d * d,
            // two half-step feed-forward modules
            ffn: 2 * (2 * d * self.ffn_dim),
            ..MacCounts::default()
        }
    }

    /// Cost of one unmasked query-key pair across all heads: score and value sum.
    pub fn pair(&self) -> u64 {
        2 * self.heads * self.d
    }

    /// Cost of one output row of downsampling stage `stage` (0-based).
    pub fn stage_row(&self, stage: usize) -> u64 {
        let fin = if stage == 0 { self.n_mels } else { self.d };
        3 * fin * self.d
    }

    /// Final projection cost per token.
    pub fn projection_row(&self) -> u64 {
        let fin = if self.stages == 0 {
            self.n_mels
        } else {
            self.d
        };
        fin * self.d
    }

    pub fn rows(&self, n: u64, pairs: u64) -> MacCounts {
        let r = self.row();
        MacCounts {
            attention: n * r.attention + pairs * self.pair(),
            conv: n * r.conv,
            ffn: n * r.ffn,
            ..MacCounts::default()
        }
    }

    /// Downsampler MACs producing `tokens` tokens from scratch.
    pub fn downsampler(&self, mel_frames: usize) -> u64 {
        let mut len = mel_frames;
        let mut total = 0;
        for s in 0..self.stages {
            len /= 2;
            total += len as u64 * self.stage_row(s);
        }
        total + len as u64 * self.projection_row()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// One pass over the whole utterance.
    Offline,
    /// Cache-aware streaming, one step per chunk (regular look-ahead: one token per step).
    Streaming,
}

fn pairs_for_row(ctx: &AttentionContext, q: usize, key_end: usize) -> u64 {
    // keys the mask allows among 0..key_end; Σ over rows is the unmasked-pair count
    let lo = match ctx.max_past_offset() {
        Some(p) => q.saturating_sub(p),
        None => 0,
    };
    (lo..key_end).filter(|&k| ctx.allows(q, k)).count() as u64
}

/// Closed-form MAC model of the encoder for `mel_frames` input frames.
///
/// Streaming mode assumes chunk-aligned steps for chunk/zero regimes (identical
/// to offline) and stride-1 steps for regular look-ahead, where every layer
/// evaluates `M` provisional rows per step that are later recomputed. The end
/// of the stream is signalled by a separate flush step carrying no audio.
pub fn count_macs(
    cfg: &EncoderConfig,
    ctx: &AttentionContext,
    mel_frames: usize,
    mode: InferenceMode,
) -> ComputeLedger {
    let cost = CostModel::new(cfg);
    let t = mel_frames / cfg.downsampling;
    let mut ledger = ComputeLedger::new();
    let mut macs = MacCounts {
        downsampler: cost.downsampler(mel_frames),
        ..MacCounts::default()
    };
    let offline_pairs: u64 = (0..t).map(|q| pairs_for_row(ctx, q, t)).sum();
    let layers = cfg.n_layers as u64;
    macs += cost.rows(t as u64 * layers, offline_pairs * layers);
    ledger.attention_pairs = offline_pairs * layers;

    if let (InferenceMode::Streaming, AttentionContext::Regular { lookahead, .. }) = (mode, ctx) {
        let m = *lookahead;
        let mut dup = MacCounts::default();
        for layer in 0..cfg.n_layers {
            // windows evaluated before the final flush at this layer
            let windows = (t as i64 - ((layer + 1) * m) as i64).max(0) as usize;
            for p in 0..windows {
                for j in 1..=m {
                    let pairs = pairs_for_row(ctx, p + j, p + m + 1);
                    dup += cost.rows(1, pairs);
                    ledger.attention_pairs += pairs;
                    ledger.duplicate_rows += 1;
                }
            }
        }
        ledger.duplicate = dup.total();
        macs += dup;
    }
    ledger.steps.push(macs);
    ledger
}
