//! Limited-context Conformer-style encoder.
//!
//! Layout: a causal striding downsampler, then `N` blocks of
//! half-step FFN → masked self-attention → causal convolution module →
//! half-step FFN → layer norm. Every normalization is a per-step layer norm.
//!
//! The same [`Encoder::layer_forward`] routine serves the full-utterance pass
//! and every streaming step: it takes a window of query rows at a global
//! offset plus whatever the caches hold for the preceding positions. Because
//! the key set of each query, and the order in which it is reduced, depends
//! only on global positions, streaming reproduces the offline output exactly.
//!
//! Attention caches hold the attention *inputs* (the layer-normed residual
//! stream). Keys are never materialized: the key projection is folded into the
//! query (`q·(W_k h)ᵀ = (W_kᵀ q)·h`) and the value projection is applied after
//! the weighted sum of cached inputs. Nothing derived from a past token is
//! recomputed. The key bias is omitted since it cancels inside the softmax.

use serde::{Deserialize, Serialize};

use crate::cache::{attn_cache_update, ConvCache, DownsamplerCache, ResidualMode, StreamState};
use crate::context::AttentionContext;
use crate::error::{Error, Result};
use crate::features::MelFrames;
use crate::numerics::{
    depthwise_conv1d_causal, dot, layer_norm_rows, linear, sigmoid, softmax_into, swish, Matrix,
    LAYER_NORM_EPS,
};
use crate::params::{Init, ParamSource};
use crate::streaming::ledger::{ComputeLedger, CostModel, MacCounts};

/// Position-bias span used when the mask itself is unbounded.
pub const DEFAULT_UNBOUNDED_SPAN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    /// Total downsampling rate `D_r`; one of 1, 2, 4, 8.
    pub downsampling: usize,
    pub n_mels: usize,
    pub attention: AttentionContext,
    /// Past offsets covered by the relative position-bias table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_bias_past: Option<usize>,
    /// Future offsets covered by the relative position-bias table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_bias_future: Option<usize>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be at least 1"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be at least 1"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!(
                    "{} heads do not divide d_model {}",
                    self.n_heads, self.d_model
                ),
            ));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::config("ffn_expansion", "must be at least 1"));
        }
        if self.conv_kernel == 0 {
            return Err(Error::config("conv_kernel", "must be at least 1"));
        }
        if ![1, 2, 4, 8].contains(&self.downsampling) {
            return Err(Error::config(
                "downsampling",
                format!("{} is not one of 1, 2, 4, 8", self.downsampling),
            ));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels", "must be at least 1"));
        }
        self.attention.validate()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_expansion
    }

    /// Number of stride-2 stages in the downsampler.
    pub fn n_stages(&self) -> usize {
        self.downsampling.trailing_zeros() as usize
    }

    /// Mel frames of left context a chunk needs when the downsampler is
    /// streamed by frame concatenation: `2·log2(D_r) + 1`, none for `D_r = 1`.
    pub fn residual_frames(&self) -> usize {
        match self.n_stages() {
            0 => 0,
            s => 2 * s + 1,
        }
    }

    /// `(past, future)` offsets covered by the position-bias table.
    pub fn bias_span(&self) -> (usize, usize) {
        let past = self.pos_bias_past.unwrap_or_else(|| {
            self.attention
                .max_past_offset()
                .unwrap_or(DEFAULT_UNBOUNDED_SPAN)
        });
        let future =
            self.pos_bias_future
                .unwrap_or_else(|| match self.attention.max_future_offset() {
                    usize::MAX => DEFAULT_UNBOUNDED_SPAN,
                    f => f,
                });
        (past, future)
    }

    /// Checks that a streaming context fits the trained position-bias table.
    pub fn check_context(&self, ctx: &AttentionContext) -> Result<()> {
        ctx.validate()?;
        if !ctx.is_streamable() {
            return Ok(());
        }
        let (past, future) = self.bias_span();
        if ctx.max_future_offset() > future {
            return Err(Error::config(
                "attention",
                format!(
                    "{} reaches {} tokens ahead but the position-bias table covers {future}",
                    ctx.label(),
                    ctx.max_future_offset()
                ),
            ));
        }
        if let Some(p) = ctx.max_past_offset() {
            if p > past {
                return Err(Error::config(
                    "attention",
                    format!(
                        "{} reaches {p} tokens back but the position-bias table covers {past}",
                        ctx.label()
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    ln_g: Matrix,
    ln_b: Matrix,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

impl FeedForward {
    fn new(src: &mut dyn ParamSource, p: &str, d: usize, f: usize) -> Result<Self> {
        Ok(FeedForward {
            ln_g: src.take(&format!("{p}.ln.gamma"), 1, d, Init::Ones)?,
            ln_b: src.take(&format!("{p}.ln.beta"), 1, d, Init::Zeros)?,
            w1: src.take(&format!("{p}.w1"), d, f, Init::Uniform { fan_in: d })?,
            b1: src.take(&format!("{p}.b1"), 1, f, Init::Uniform { fan_in: d })?,
            w2: src.take(&format!("{p}.w2"), f, d, Init::Uniform { fan_in: f })?,
            b2: src.take(&format!("{p}.b2"), 1, d, Init::Uniform { fan_in: f })?,
        })
    }

    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{p}.ln.gamma"), &self.ln_g));
        out.push((format!("{p}.ln.beta"), &self.ln_b));
        out.push((format!("{p}.w1"), &self.w1));
        out.push((format!("{p}.b1"), &self.b1));
        out.push((format!("{p}.w2"), &self.w2));
        out.push((format!("{p}.b2"), &self.b2));
    }

    /// `x + ½·FFN(x)`
    fn half_step(&self, x: &Matrix) -> Result<Matrix> {
        let z = layer_norm_rows(
            x,
            self.ln_g.as_slice(),
            self.ln_b.as_slice(),
            LAYER_NORM_EPS,
        )?;
        let mut hidden = linear(&z, &self.w1, Some(self.b1.as_slice()))?;
        hidden
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = swish(*v));
        let y = linear(&hidden, &self.w2, Some(self.b2.as_slice()))?;
        let mut out = x.clone();
        for (o, v) in out.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *o += 0.5 * v;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct SelfAttention {
    ln_g: Matrix,
    ln_b: Matrix,
    wq: Matrix,
    bq: Matrix,
    wk: Matrix,
    wv: Matrix,
    bv: Matrix,
    wo: Matrix,
    bo: Matrix,
    /// `[heads × (past + future + 1)]`, column `future + (q − k)`.
    pos_bias: Matrix,
    /// Per head, `W_k` columns of that head transposed: `[d_head × d_model]`.
    key_heads: Vec<Matrix>,
}

impl SelfAttention {
    fn new(src: &mut dyn ParamSource, p: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        let (past, future) = cfg.bias_span();
        let span = past + future + 1;
        let wk = src.take(&format!("{p}.wk"), d, d, Init::Uniform { fan_in: d })?;
        let dh = cfg.d_head();
        let key_heads = (0..cfg.n_heads)
            .map(|h| {
                let mut m = Matrix::zeros(dh, d);
                for j in 0..dh {
                    for r in 0..d {
                        m[(j, r)] = wk[(r, h * dh + j)];
                    }
                }
                m
            })
            .collect();
        Ok(SelfAttention {
            ln_g: src.take(&format!("{p}.ln.gamma"), 1, d, Init::Ones)?,
            ln_b: src.take(&format!("{p}.ln.beta"), 1, d, Init::Zeros)?,
            wq: src.take(&format!("{p}.wq"), d, d, Init::Uniform { fan_in: d })?,
            bq: src.take(&format!("{p}.bq"), 1, d, Init::Uniform { fan_in: d })?,
            wk,
            wv: src.take(&format!("{p}.wv"), d, d, Init::Uniform { fan_in: d })?,
            bv: src.take(&format!("{p}.bv"), 1, d, Init::Uniform { fan_in: d })?,
            wo: src.take(&format!("{p}.wo"), d, d, Init::Uniform { fan_in: d })?,
            bo: src.take(&format!("{p}.bo"), 1, d, Init::Uniform { fan_in: d })?,
            pos_bias: src.take(
                &format!("{p}.pos_bias"),
                cfg.n_heads,
                span,
                Init::Uniform { fan_in: 4 },
            )?,
            key_heads,
        })
    }

    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a Matrix)>) {
        // order matches `new`, which is the blob order
        out.push((format!("{p}.wk"), &self.wk));
        out.push((format!("{p}.ln.gamma"), &self.ln_g));
        out.push((format!("{p}.ln.beta"), &self.ln_b));
        out.push((format!("{p}.wq"), &self.wq));
        out.push((format!("{p}.bq"), &self.bq));
        out.push((format!("{p}.wv"), &self.wv));
        out.push((format!("{p}.bv"), &self.bv));
        out.push((format!("{p}.wo"), &self.wo));
        out.push((format!("{p}.bo"), &self.bo));
        out.push((format!("{p}.pos_bias"), &self.pos_bias));
    }
}

#[derive(Clone, Debug)]
struct ConvModule {
    ln_g: Matrix,
    ln_b: Matrix,
    pw1: Matrix,
    pw1_b: Matrix,
    dw: Matrix,
    dw_b: Matrix,
    dw_ln_g: Matrix,
    dw_ln_b: Matrix,
    pw2: Matrix,
    pw2_b: Matrix,
}

impl ConvModule {
    fn new(src: &mut dyn ParamSource, p: &str, d: usize, k: usize) -> Result<Self> {
        Ok(ConvModule {
            ln_g: src.take(&format!("{p}.ln.gamma"), 1, d, Init::Ones)?,
            ln_b: src.take(&format!("{p}.ln.beta"), 1, d, Init::Zeros)?,
            pw1: src.take(&format!("{p}.pw1"), d, 2 * d, Init::Uniform { fan_in: d })?,
            pw1_b: src.take(&format!("{p}.pw1_b"), 1, 2 * d, Init::Uniform { fan_in: d })?,
            dw: src.take(&format!("{p}.dw"), d, k, Init::Uniform { fan_in: k })?,
            dw_b: src.take(&format!("{p}.dw_b"), 1, d, Init::Uniform { fan_in: k })?,
            dw_ln_g: src.take(&format!("{p}.dw_ln.gamma"), 1, d, Init::Ones)?,
            dw_ln_b: src.take(&format!("{p}.dw_ln.beta"), 1, d, Init::Zeros)?,
            pw2: src.take(&format!("{p}.pw2"), d, d, Init::Uniform { fan_in: d })?,
            pw2_b: src.take(&format!("{p}.pw2_b"), 1, d, Init::Uniform { fan_in: d })?,
        })
    }

    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{p}.ln.gamma"), &self.ln_g));
        out.push((format!("{p}.ln.beta"), &self.ln_b));
        out.push((format!("{p}.pw1"), &self.pw1));
        out.push((format!("{p}.pw1_b"), &self.pw1_b));
        out.push((format!("{p}.dw"), &self.dw));
        out.push((format!("{p}.dw_b"), &self.dw_b));
        out.push((format!("{p}.dw_ln.gamma"), &self.dw_ln_g));
        out.push((format!("{p}.dw_ln.beta"), &self.dw_ln_b));
        out.push((format!("{p}.pw2"), &self.pw2));
        out.push((format!("{p}.pw2_b"), &self.pw2_b));
    }

    /// Pointwise + GLU: the depthwise convolution's input `g`.
    fn gate(&self, x: &Matrix) -> Result<Matrix> {
        let z = layer_norm_rows(
            x,
            self.ln_g.as_slice(),
            self.ln_b.as_slice(),
            LAYER_NORM_EPS,
        )?;
        let p = linear(&z, &self.pw1, Some(self.pw1_b.as_slice()))?;
        let d = x.cols();
        let mut g = Matrix::zeros(x.rows(), d);
        for t in 0..x.rows() {
            let (a, b) = p.row(t).split_at(d);
            for ((o, &a), &b) in g.row_mut(t).iter_mut().zip(a).zip(b) {
                *o = a * sigmoid(b);
            }
        }
        Ok(g)
    }

    /// Depthwise conv over `history ∥ g`, then norm, swish and pointwise out.
    fn finish(&self, g: &Matrix, history: &Matrix) -> Result<Matrix> {
        let mut c = depthwise_conv1d_causal(g, &self.dw, Some(history))?;
        for t in 0..c.rows() {
            for (v, b) in c.row_mut(t).iter_mut().zip(self.dw_b.as_slice()) {
                *v += b;
            }
        }
        let mut c = layer_norm_rows(
            &c,
            self.dw_ln_g.as_slice(),
            self.dw_ln_b.as_slice(),
            LAYER_NORM_EPS,
        )?;
        c.as_mut_slice().iter_mut().for_each(|v| *v = swish(*v));
        linear(&c, &self.pw2, Some(self.pw2_b.as_slice()))
    }
}

#[derive(Clone, Debug)]
struct Block {
    ff1: FeedForward,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    out_ln_g: Matrix,
    out_ln_b: Matrix,
}

#[derive(Clone, Debug)]
struct Downsampler {
    /// Per stage: `[3·F_in × d_model]` weights and bias. Tap 0 is the oldest frame.
    stages: Vec<(Matrix, Matrix)>,
    proj: Matrix,
    proj_b: Matrix,
}

/// Result of running one block over a window of query rows.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// Block outputs, one per query row.
    pub out: Matrix,
    /// Attention inputs of the query rows (what the attention cache stores).
    pub h: Matrix,
    /// Depthwise-conv inputs of the query rows (what the conv cache stores).
    pub g: Matrix,
    /// Keys visited per query row.
    pub pairs: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    downsampler: Downsampler,
    blocks: Vec<Block>,
    cost: CostModel,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, src: &mut dyn ParamSource) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut stages = Vec::new();
        let mut fin = cfg.n_mels;
        for s in 0..cfg.n_stages() {
            let w = src.take(
                &format!("downsampler.stage{s}.w"),
                3 * fin,
                d,
                Init::Uniform { fan_in: 3 * fin },
            )?;
            let b = src.take(
                &format!("downsampler.stage{s}.b"),
                1,
                d,
                Init::Uniform { fan_in: 3 * fin },
            )?;
            stages.push((w, b));
            fin = d;
        }
        let proj = src.take("downsampler.proj", fin, d, Init::Uniform { fan_in: fin })?;
        let proj_b = src.take("downsampler.proj_b", 1, d, Init::Uniform { fan_in: fin })?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            blocks.push(Block {
                ff1: FeedForward::new(src, &format!("{p}.ff1"), d, cfg.ffn_dim())?,
                attn: SelfAttention::new(src, &format!("{p}.attn"), &cfg)?,
                conv: ConvModule::new(src, &format!("{p}.conv"), d, cfg.conv_kernel)?,
                ff2: FeedForward::new(src, &format!("{p}.ff2"), d, cfg.ffn_dim())?,
                out_ln_g: src.take(&format!("{p}.out_ln.gamma"), 1, d, Init::Ones)?,
                out_ln_b: src.take(&format!("{p}.out_ln.beta"), 1, d, Init::Zeros)?,
            });
        }
        let cost = CostModel::new(&cfg);
        Ok(Encoder {
            cfg,
            downsampler: Downsampler {
                stages,
                proj,
                proj_b,
            },
            blocks,
            cost,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    /// All tensors in storage order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (s, (w, b)) in self.downsampler.stages.iter().enumerate() {
            out.push((format!("downsampler.stage{s}.w"), w));
            out.push((format!("downsampler.stage{s}.b"), b));
        }
        out.push(("downsampler.proj".into(), &self.downsampler.proj));
        out.push(("downsampler.proj_b".into(), &self.downsampler.proj_b));
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("layers.{l}");
            b.ff1.visit(&format!("{p}.ff1"), &mut out);
            b.attn.visit(&format!("{p}.attn"), &mut out);
            b.conv.visit(&format!("{p}.conv"), &mut out);
            b.ff2.visit(&format!("{p}.ff2"), &mut out);
            out.push((format!("{p}.out_ln.gamma"), &b.out_ln_g));
            out.push((format!("{p}.out_ln.beta"), &b.out_ln_b));
        }
        out
    }

    // ---- downsampler -------------------------------------------------------

    /// One stride-2, kernel-3 causal stage.
    ///
    /// `input` holds rows for global positions `p0..p0+rows`; positions below
    /// zero are padding and read as zeros. Output `i` reads inputs
    /// `2i−1, 2i, 2i+1`, so it is complete once `2i+1` has arrived. Every output
    /// computable from the window is produced; returns them with the position
    /// of the first.
    fn stage_forward(&self, stage: usize, input: &Matrix, p0: isize) -> Result<(Matrix, isize)> {
        let (w, b) = &self.downsampler.stages[stage];
        let fin = w.rows() / 3;
        let p1 = p0 + input.rows() as isize;
        let q0: isize = if p0 <= 0 { 0 } else { (p0 + 2) / 2 };
        let q1: isize = if p1 <= 0 { 0 } else { p1 / 2 };
        let n = (q1 - q0).max(0) as usize;
        let mut patches = Matrix::zeros(n, 3 * fin);
        for r in 0..n {
            let i = q0 + r as isize;
            for tap in 0..3 {
                let pos = 2 * i - 1 + tap as isize;
                if pos < 0 {
                    continue;
                }
                let src = input.row((pos - p0) as usize);
                patches.row_mut(r)[tap * fin..(tap + 1) * fin].copy_from_slice(src);
            }
        }
        let mut out = linear(&patches, w, Some(b.as_slice()))?;
        out.as_mut_slice().iter_mut().for_each(|v| *v = swish(*v));
        Ok((out, q0))
    }

    /// Full-utterance downsampling: `⌊frames / D_r⌋` tokens of width `d_model`.
    pub fn downsample(&self, mel: &Matrix) -> Result<(Matrix, u64)> {
        if mel.cols() != self.cfg.n_mels {
            return Err(Error::shape(
                "downsample",
                format!(
                    "{} mel bins, encoder expects {}",
                    mel.cols(),
                    self.cfg.n_mels
                ),
            ));
        }
        let mut x = mel.clone();
        let mut macs = 0;
        for s in 0..self.downsampler.stages.len() {
            let (y, _) = self.stage_forward(s, &x, 0)?;
            macs += y.rows() as u64 * self.cost.stage_row(s);
            x = y;
        }
        let tokens = linear(
            &x,
            &self.downsampler.proj,
            Some(self.downsampler.proj_b.as_slice()),
        )?;
        macs += tokens.rows() as u64 * self.cost.projection_row();
        Ok((tokens, macs))
    }

    /// Streams one chunk of mel frames through the downsampler.
    ///
    /// `start` is the global index of the chunk's first frame. Returns the new
    /// tokens, MACs spent, and MACs spent recomputing outputs that precede the
    /// chunk (non-zero only for [`ResidualMode::MelConcat`]).
    pub fn downsample_chunk(
        &self,
        chunk: &Matrix,
        cache: &mut DownsamplerCache,
        start: usize,
        last: bool,
    ) -> Result<(Matrix, u64, u64)> {
        if chunk.rows() > 0 && chunk.cols() != self.cfg.n_mels {
            return Err(Error::shape(
                "downsample_chunk",
                format!(
                    "{} mel bins, encoder expects {}",
                    chunk.cols(),
                    self.cfg.n_mels
                ),
            ));
        }
        let dr = self.cfg.downsampling;
        if !last && !chunk.rows().is_multiple_of(dr) {
            return Err(Error::Chunking(format!(
                "non-final chunk of {} frames is not a multiple of D_r = {dr}",
                chunk.rows()
            )));
        }
        if !start.is_multiple_of(dr) {
            return Err(Error::Chunking(format!(
                "chunk starts at frame {start}, not a multiple of D_r = {dr}"
            )));
        }
        let mut macs = 0;
        let mut overlap = 0;
        let x = match cache {
            DownsamplerCache::StageInputs(rows) => {
                let mut x = chunk.clone();
                let mut pos = start;
                for (s, last_row) in rows.iter_mut().enumerate() {
                    let (input, p0) = if pos > 0 {
                        (last_row.vstack(&x)?, pos as isize - 1)
                    } else {
                        (x.clone(), 0)
                    };
                    if x.rows() > 0 {
                        *last_row = x.tail_rows(1);
                    }
                    let (y, q0) = self.stage_forward(s, &input, p0)?;
                    debug_assert_eq!(q0 as usize, pos / 2);
                    macs += y.rows() as u64 * self.cost.stage_row(s);
                    x = y;
                    pos /= 2;
                }
                x
            }
            DownsamplerCache::MelResidual(residual) => {
                let r = residual.rows();
                let input = residual.vstack(chunk)?;
                *residual = input.tail_rows(r);
                let mut x = input;
                let mut p0 = start as isize - r as isize;
                let mut keep_from = start as isize;
                for s in 0..self.downsampler.stages.len() {
                    let (y, q0) = self.stage_forward(s, &x, p0)?;
                    keep_from /= 2;
                    let stale = (keep_from - q0).clamp(0, y.rows() as isize) as usize;
                    let cost = self.cost.stage_row(s);
                    macs += y.rows() as u64 * cost;
                    overlap += stale as u64 * cost;
                    x = y;
                    p0 = q0;
                }
                // drop recomputed rows that belong to earlier chunks
                let first = (keep_from - p0).max(0) as usize;
                if first > x.rows() {
                    return Err(Error::Chunking(
                        "mel residual too short for the downsampler's receptive field".into(),
                    ));
                }
                x.slice_rows(first, x.rows())
            }
        };
        let expect = (start + chunk.rows()) / dr - start / dr;
        if x.rows() != expect {
            return Err(Error::Chunking(format!(
                "downsampler produced {} tokens, expected {expect}",
                x.rows()
            )));
        }
        let tokens = linear(
            &x,
            &self.downsampler.proj,
            Some(self.downsampler.proj_b.as_slice()),
        )?;
        macs += tokens.rows() as u64 * self.cost.projection_row();
        Ok((tokens, macs, overlap))
    }

    // ---- blocks ------------------------------------------------------------

    fn bias(&self, layer: usize, head: usize, rel: isize) -> f64 {
        let (past, future) = self.cfg.bias_span();
        let idx = rel.clamp(-(future as isize), past as isize) + future as isize;
        self.blocks[layer].attn.pos_bias[(head, idx as usize)] as f64
    }

    /// Masked multi-head self-attention for query rows `h` at global `start`,
    /// with `cache` holding the attention inputs of the positions just before.
    fn attention(
        &self,
        layer: usize,
        ctx: &AttentionContext,
        h: &Matrix,
        start: usize,
        cache: &Matrix,
    ) -> Result<(Matrix, Vec<u64>)> {
        let att = &self.blocks[layer].attn;
        let (d, heads, dh) = (self.cfg.d_model, self.cfg.n_heads, self.cfg.d_head());
        let n = h.rows();
        let key_start = start.checked_sub(cache.rows()).ok_or_else(|| {
            Error::Session(format!(
                "attention cache of {} rows precedes position 0 (window at {start})",
                cache.rows()
            ))
        })?;
        let key_end = start + n;
        let key_row = |k: usize| {
            if k < start {
                cache.row(k - key_start)
            } else {
                h.row(k - start)
            }
        };
        let q = linear(h, &att.wq, Some(att.bq.as_slice()))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Matrix::zeros(n, d);
        let mut pairs = Vec::with_capacity(n);
        let mut logits = Vec::new();
        let mut weights = Vec::new();
        let mut q_key = vec![0.0f32; d];
        let mut acc = vec![0.0f64; d];
        for i in 0..n {
            let qpos = start + i;
            let allowed: Vec<usize> = (key_start..key_end)
                .filter(|&k| ctx.allows(qpos, k))
                .collect();
            if allowed.is_empty() {
                return Err(Error::DegenerateMask { row: qpos });
            }
            pairs.push(allowed.len() as u64);
            for head in 0..heads {
                let qh = &q.row(i)[head * dh..(head + 1) * dh];
                // W_k folded into the query
                acc.iter_mut().for_each(|v| *v = 0.0);
                for (j, &qj) in qh.iter().enumerate() {
                    let qj = qj as f64;
                    for (a, &w) in acc.iter_mut().zip(att.key_heads[head].row(j)) {
                        *a += qj * w as f64;
                    }
                }
                for (o, a) in q_key.iter_mut().zip(&acc) {
                    *o = *a as f32;
                }
                logits.clear();
                for &k in &allowed {
                    let s = dot(&q_key, key_row(k)) * scale
                        + self.bias(layer, head, qpos as isize - k as isize);
                    logits.push(s);
                }
                softmax_into(&logits, &mut weights);
                acc.iter_mut().for_each(|v| *v = 0.0);
                for (&k, &a) in allowed.iter().zip(&weights) {
                    for (slot, &v) in acc.iter_mut().zip(key_row(k)) {
                        *slot += a * v as f64;
                    }
                }
                let mixed: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
                // value projection after mixing
                let out = &mut concat.row_mut(i)[head * dh..(head + 1) * dh];
                for (j, o) in out.iter_mut().enumerate() {
                    let col = head * dh + j;
                    let mut s = 0.0f64;
                    for (r, &u) in mixed.iter().enumerate() {
                        s += u as f64 * att.wv[(r, col)] as f64;
                    }
                    *o = (s + att.bv[(0, col)] as f64) as f32;
                }
            }
        }
        let out = linear(&concat, &att.wo, Some(att.bo.as_slice()))?;
        Ok((out, pairs))
    }

    /// Runs block `layer` on rows `x` at global positions `start..start+n`.
    ///
    /// `attn_cache` holds the attention inputs of the positions directly before
    /// `start`; `conv_history` holds the last `K−1` depthwise-conv inputs.
    pub fn layer_forward(
        &self,
        layer: usize,
        ctx: &AttentionContext,
        x: &Matrix,
        start: usize,
        attn_cache: &Matrix,
        conv_history: &Matrix,
    ) -> Result<LayerOutput> {
        let b = &self.blocks[layer];
        let x1 = b.ff1.half_step(x)?;
        let h = layer_norm_rows(
            &x1,
            b.attn.ln_g.as_slice(),
            b.attn.ln_b.as_slice(),
            LAYER_NORM_EPS,
        )?;
        let (att, pairs) = self.attention(layer, ctx, &h, start, attn_cache)?;
        let mut x2 = x1;
        for (o, v) in x2.as_mut_slice().iter_mut().zip(att.as_slice()) {
            *o += v;
        }
        let g = b.conv.gate(&x2)?;
        let conv = b.conv.finish(&g, conv_history)?;
        let mut x3 = x2;
        for (o, v) in x3.as_mut_slice().iter_mut().zip(conv.as_slice()) {
            *o += v;
        }
        let x4 = b.ff2.half_step(&x3)?;
        let out = layer_norm_rows(
            &x4,
            b.out_ln_g.as_slice(),
            b.out_ln_b.as_slice(),
            LAYER_NORM_EPS,
        )?;
        Ok(LayerOutput { out, h, g, pairs })
    }

    // ---- full pass ---------------------------------------------------------

    /// Whole-utterance forward pass under the configured attention context.
    pub fn encode_full(&self, mel: &MelFrames) -> Result<(Matrix, ComputeLedger)> {
        self.encode_full_with(mel, &self.cfg.attention)
    }

    /// Whole-utterance forward pass under an explicit attention context.
    pub fn encode_full_with(
        &self,
        mel: &MelFrames,
        ctx: &AttentionContext,
    ) -> Result<(Matrix, ComputeLedger)> {
        self.cfg.check_context(ctx)?;
        let mut ledger = ComputeLedger::new();
        ledger.begin_step();
        let (mut x, ds_macs) = self.downsample(&mel.frames)?;
        ledger.record(MacCounts {
            downsampler: ds_macs,
            ..MacCounts::default()
        });
        let d = self.cfg.d_model;
        let empty = Matrix::zeros(0, d);
        let hist = Matrix::zeros(self.cfg.conv_kernel - 1, d);
        for layer in 0..self.cfg.n_layers {
            let out = self.layer_forward(layer, ctx, &x, 0, &empty, &hist)?;
            let pairs: u64 = out.pairs.iter().sum();
            ledger.attention_pairs += pairs;
            ledger.record(self.cost.rows(x.rows() as u64, pairs));
            x = out.out;
        }
        Ok((x, ledger))
    }

    // ---- streaming ---------------------------------------------------------

    /// Fresh session state under the configured context.
    pub fn init_state(&self) -> Result<StreamState> {
        self.init_state_with(&self.cfg.attention, ResidualMode::default())
    }

    pub fn init_state_with(
        &self,
        ctx: &AttentionContext,
        mode: ResidualMode,
    ) -> Result<StreamState> {
        self.cfg.check_context(ctx)?;
        if !ctx.is_streamable() {
            return Err(Error::Session(
                "full-context attention cannot be streamed".into(),
            ));
        }
        let d = self.cfg.d_model;
        let downsampler = match mode {
            ResidualMode::StageCache => DownsamplerCache::StageInputs(
                (0..self.cfg.n_stages())
                    .map(|s| Matrix::zeros(1, if s == 0 { self.cfg.n_mels } else { d }))
                    .collect(),
            ),
            ResidualMode::MelConcat => DownsamplerCache::MelResidual(Matrix::zeros(
                self.cfg.residual_frames(),
                self.cfg.n_mels,
            )),
        };
        Ok(StreamState::new(
            &self.cfg,
            *ctx,
            (0..self.cfg.n_layers)
                .map(|_| ConvCache::zeros(self.cfg.conv_kernel, d))
                .collect(),
            downsampler,
        ))
    }

    /// Consumes one chunk of mel frames and returns the encoder outputs that
    /// became final. `last` marks the end of the stream and flushes everything.
    ///
    /// Chunk regime: non-final chunks must hold a multiple of `C·D_r` frames.
    /// Zero regime: any multiple of `D_r`. Regular regime: frames are split
    /// into one-token steps internally; each step evaluates `M+1` query rows
    /// per layer and keeps only the first.
    pub fn encode_step(
        &self,
        chunk: &MelFrames,
        state: &mut StreamState,
        last: bool,
    ) -> Result<Matrix> {
        state.check_layout(&self.cfg)?;
        if state.finished {
            return Err(Error::Session("stream already finished".into()));
        }
        let ctx = state.ctx;
        if let AttentionContext::Chunk { size, .. } = ctx {
            let frames = size * self.cfg.downsampling;
            if !last && !chunk.len().is_multiple_of(frames) {
                return Err(Error::Chunking(format!(
                    "non-final chunk of {} frames is not a multiple of C·D_r = {frames}",
                    chunk.len()
                )));
            }
        }
        state.ledger.begin_step();
        let start = state.frames_seen;
        let (tokens, ds_macs, overlap) =
            self.downsample_chunk(&chunk.frames, &mut state.downsampler, start, last)?;
        state.frames_seen += chunk.len();
        state.ledger.record(MacCounts {
            downsampler: ds_macs,
            ..MacCounts::default()
        });
        state.ledger.duplicate += overlap;
        state.tokens_in += tokens.rows();

        let out = match ctx {
            AttentionContext::Regular { lookahead, .. } => {
                let mut produced = Matrix::zeros(0, self.cfg.d_model);
                for t in 0..tokens.rows() {
                    let y = self.regular_advance(
                        &ctx,
                        lookahead,
                        tokens.slice_rows(t, t + 1),
                        state,
                        false,
                    )?;
                    produced = produced.vstack(&y)?;
                }
                if last {
                    let y = self.regular_advance(
                        &ctx,
                        lookahead,
                        Matrix::zeros(0, self.cfg.d_model),
                        state,
                        true,
                    )?;
                    produced = produced.vstack(&y)?;
                }
                produced
            }
            _ => self.chunk_advance(&ctx, tokens, state)?,
        };
        state.offset += out.rows();
        if last {
            state.finished = true;
        }
        Ok(out)
    }

    fn commit(
        &self,
        state: &mut StreamState,
        layer: usize,
        ctx: &AttentionContext,
        h: &Matrix,
        g: &Matrix,
    ) -> Result<()> {
        state.attn[layer] = attn_cache_update(&state.attn[layer], h, ctx.cache_len())?;
        state.conv[layer].update(g)?;
        Ok(())
    }

    fn chunk_advance(
        &self,
        ctx: &AttentionContext,
        tokens: Matrix,
        state: &mut StreamState,
    ) -> Result<Matrix> {
        let start = state.tokens_in - tokens.rows();
        let mut x = tokens;
        for layer in 0..self.cfg.n_layers {
            if x.rows() == 0 {
                break;
            }
            let out = self.layer_forward(
                layer,
                ctx,
                &x,
                start,
                &state.attn[layer],
                state.conv[layer].rows(),
            )?;
            let pairs: u64 = out.pairs.iter().sum();
            state.ledger.attention_pairs += pairs;
            state.ledger.record(self.cost.rows(x.rows() as u64, pairs));
            self.commit(state, layer, ctx, &out.h, &out.g)?;
            x = out.out;
        }
        Ok(x)
    }

    /// Pushes final rows into the regular look-ahead pipeline.
    fn regular_advance(
        &self,
        ctx: &AttentionContext,
        m: usize,
        tokens: Matrix,
        state: &mut StreamState,
        flush: bool,
    ) -> Result<Matrix> {
        let d = self.cfg.d_model;
        let mut incoming = tokens;
        for layer in 0..self.cfg.n_layers {
            state.pending[layer] = state.pending[layer].vstack(&incoming)?;
            let mut produced = Matrix::zeros(0, d);
            if !flush {
                while state.pending[layer].rows() > m {
                    let p = state.next_pos[layer];
                    let window = state.pending[layer].slice_rows(0, m + 1);
                    let out = self.layer_forward(
                        layer,
                        ctx,
                        &window,
                        p,
                        &state.attn[layer],
                        state.conv[layer].rows(),
                    )?;
                    self.commit(
                        state,
                        layer,
                        ctx,
                        &out.h.slice_rows(0, 1),
                        &out.g.slice_rows(0, 1),
                    )?;
                    produced.push_row(out.out.row(0))?;
                    state.ledger.record(self.cost.rows(1, out.pairs[0]));
                    let wasted: u64 = out.pairs[1..].iter().sum();
                    let dup = self.cost.rows(m as u64, wasted);
                    state.ledger.record(dup);
                    state.ledger.duplicate += dup.total();
                    state.ledger.duplicate_rows += m as u64;
                    state.ledger.attention_pairs += out.pairs.iter().sum::<u64>();
                    let rest = state.pending[layer].rows();
                    state.pending[layer] = state.pending[layer].slice_rows(1, rest);
                    state.next_pos[layer] += 1;
                }
            } else if state.pending[layer].rows() > 0 {
                let p = state.next_pos[layer];
                let window = std::mem::replace(&mut state.pending[layer], Matrix::zeros(0, d));
                let out = self.layer_forward(
                    layer,
                    ctx,
                    &window,
                    p,
                    &state.attn[layer],
                    state.conv[layer].rows(),
                )?;
                self.commit(state, layer, ctx, &out.h, &out.g)?;
                let pairs: u64 = out.pairs.iter().sum();
                state.ledger.attention_pairs += pairs;
                state
                    .ledger
                    .record(self.cost.rows(window.rows() as u64, pairs));
                state.next_pos[layer] += window.rows();
                produced = out.out;
            }
            incoming = produced;
        }
        Ok(incoming)
    }
}
