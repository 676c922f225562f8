//! Per-session streaming state: convolution and attention caches, the
//! downsampler's carry-over, the regular-regime look-ahead pipeline, and the
//! RNNT decoder state. Everything a session needs to resume lives here and
//! round-trips through a versioned binary format.

use serde::{Deserialize, Serialize};

use crate::context::AttentionContext;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::streaming::ledger::ComputeLedger;

/// The last `K−1` depthwise-convolution inputs of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCache {
    rows: Matrix,
}

impl ConvCache {
    pub fn zeros(kernel: usize, d: usize) -> Self {
        ConvCache {
            rows: Matrix::zeros(kernel.saturating_sub(1), d),
        }
    }

    pub fn from_matrix(rows: Matrix) -> Self {
        ConvCache { rows }
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    /// Width in time steps; constant at `K−1`.
    pub fn width(&self) -> usize {
        self.rows.rows()
    }

    /// Appends new inputs and keeps the last `K−1`.
    pub fn update(&mut self, inputs: &Matrix) -> Result<()> {
        let (_, next) = conv_cache_apply_update(&self.rows, inputs)?;
        self.rows = next;
        Ok(())
    }
}

/// Returns the convolution window `cache ∥ chunk` and the next cache (its last
/// `cache.rows()` rows).
pub fn conv_cache_apply_update(cache: &Matrix, chunk: &Matrix) -> Result<(Matrix, Matrix)> {
    let window = cache.vstack(chunk)?;
    let next = window.tail_rows(cache.rows());
    Ok((window, next))
}

/// Appends attention inputs to a cache and keeps at most `max` rows.
pub fn attn_cache_update(cache: &Matrix, new_rows: &Matrix, max: Option<usize>) -> Result<Matrix> {
    let all = cache.vstack(new_rows)?;
    Ok(match max {
        Some(m) => all.tail_rows(m.min(all.rows())),
        None => all,
    })
}

/// How the downsampler carries state across chunks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Keep the last input row of each stride-2 stage; nothing is recomputed.
    #[default]
    StageCache,
    /// Prepend the last `2·log2(D_r)+1` mel frames to each chunk and drop the
    /// recomputed outputs.
    MelConcat,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DownsamplerCache {
    StageInputs(Vec<Matrix>),
    MelResidual(Matrix),
}

impl DownsamplerCache {
    pub fn mode(&self) -> ResidualMode {
        match self {
            DownsamplerCache::StageInputs(_) => ResidualMode::StageCache,
            DownsamplerCache::MelResidual(_) => ResidualMode::MelConcat,
        }
    }

    pub fn floats(&self) -> usize {
        match self {
            DownsamplerCache::StageInputs(rows) => rows.iter().map(|m| m.as_slice().len()).sum(),
            DownsamplerCache::MelResidual(m) => m.as_slice().len(),
        }
    }
}

/// Prediction-network state of the RNNT decoder.
///
/// `hidden` is the recurrent state *after* consuming `last_token`; its top
/// layer is the prediction output fed to the joint network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnntState {
    pub hidden: Vec<Vec<f32>>,
    pub last_token: u32,
}

impl RnntState {
    pub fn new(layers: usize, width: usize, blank: u32) -> Self {
        RnntState {
            hidden: vec![vec![0.0; width]; layers],
            last_token: blank,
        }
    }

    pub fn floats(&self) -> usize {
        self.hidden.iter().map(Vec::len).sum()
    }
}

/// Serializes a decoder state to bytes.
pub fn rnnt_state_save(state: &RnntState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(state.hidden.len() as u32).to_le_bytes());
    let width = state.hidden.first().map_or(0, Vec::len);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&state.last_token.to_le_bytes());
    for layer in &state.hidden {
        for v in layer {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Restores a decoder state, checking it fits a network of the given shape.
pub fn rnnt_state_restore(bytes: &[u8], layers: usize, width: usize) -> Result<RnntState> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::State("truncated decoder state".into()))
    };
    let (l, w, last) = (word(0)? as usize, word(1)? as usize, word(2)?);
    if l != layers || w != width {
        return Err(Error::State(format!(
            "decoder state has {l} layers of width {w}, network has {layers} of width {width}"
        )));
    }
    if bytes.len() != 12 + 4 * l * w {
        return Err(Error::State("decoder state length mismatch".into()));
    }
    let hidden = (0..l)
        .map(|i| {
            (0..w)
                .map(|j| f32::from_bits(word(3 + i * w + j).unwrap_or(0)))
                .collect()
        })
        .collect();
    Ok(RnntState {
        hidden,
        last_token: last,
    })
}

/// Shape facts a state must agree with before an encoder may use it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub n_layers: usize,
    pub d_model: usize,
    pub conv_kernel: usize,
    pub downsampling: usize,
    pub n_mels: usize,
}

impl StateLayout {
    pub fn of(cfg: &EncoderConfig) -> Self {
        StateLayout {
            n_layers: cfg.n_layers,
            d_model: cfg.d_model,
            conv_kernel: cfg.conv_kernel,
            downsampling: cfg.downsampling,
            n_mels: cfg.n_mels,
        }
    }
}

/// Cache sizes in floats, per kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMemory {
    pub conv: usize,
    pub attention: usize,
    pub downsampler: usize,
    pub pending: usize,
    pub decoder: usize,
}

impl CacheMemory {
    pub fn total(&self) -> usize {
        self.conv + self.attention + self.downsampler + self.pending + self.decoder
    }
}

/// Closed-form cache size: `L·D·(K−1) + L·C_mha·D` floats for conv plus
/// attention caches holding `c_mha` rows each.
pub fn cache_floats_closed_form(n_layers: usize, d: usize, kernel: usize, c_mha: usize) -> usize {
    n_layers * d * (kernel - 1) + n_layers * c_mha * d
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub layout: StateLayout,
    pub ctx: AttentionContext,
    pub conv: Vec<ConvCache>,
    pub attn: Vec<Matrix>,
    pub downsampler: DownsamplerCache,
    /// Regular regime: final-but-unprocessed input rows per layer.
    pub pending: Vec<Matrix>,
    /// Regular regime: global position of each layer's first pending row.
    pub next_pos: Vec<usize>,
    pub rnnt: Option<RnntState>,
    /// Mel frames consumed.
    pub frames_seen: usize,
    /// Tokens out of the downsampler.
    pub tokens_in: usize,
    /// Final encoder outputs emitted.
    pub offset: usize,
    pub finished: bool,
    pub ledger: ComputeLedger,
}

impl StreamState {
    pub fn new(
        cfg: &EncoderConfig,
        ctx: AttentionContext,
        conv: Vec<ConvCache>,
        downsampler: DownsamplerCache,
    ) -> Self {
        let n = cfg.n_layers;
        StreamState {
            layout: StateLayout::of(cfg),
            ctx,
            conv,
            attn: vec![Matrix::zeros(0, cfg.d_model); n],
            downsampler,
            pending: vec![Matrix::zeros(0, cfg.d_model); n],
            next_pos: vec![0; n],
            rnnt: None,
            frames_seen: 0,
            tokens_in: 0,
            offset: 0,
            finished: false,
            ledger: ComputeLedger::new(),
        }
    }

    pub fn check_layout(&self, cfg: &EncoderConfig) -> Result<()> {
        let want = StateLayout::of(cfg);
        if self.layout != want {
            return Err(Error::Session(format!(
                "state built for {:?}, encoder is {:?}",
                self.layout, want
            )));
        }
        Ok(())
    }

    /// Current attention cache length (rows) of layer 0.
    pub fn attn_width(&self) -> usize {
        self.attn.first().map_or(0, Matrix::rows)
    }

    pub fn memory(&self) -> CacheMemory {
        CacheMemory {
            conv: self.conv.iter().map(|c| c.rows().as_slice().len()).sum(),
            attention: self.attn.iter().map(|m| m.as_slice().len()).sum(),
            downsampler: self.downsampler.floats(),
            pending: self.pending.iter().map(|m| m.as_slice().len()).sum(),
            decoder: self.rnnt.as_ref().map_or(0, RnntState::floats),
        }
    }

    /// Versioned binary form: magic, version, JSON header, then `f32` tensors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Matrix)> = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            tensors.push((format!("conv.{i}"), c.rows()));
        }
        for (i, m) in self.attn.iter().enumerate() {
            tensors.push((format!("attn.{i}"), m));
        }
        for (i, m) in self.pending.iter().enumerate() {
            tensors.push((format!("pending.{i}"), m));
        }
        match &self.downsampler {
            DownsamplerCache::StageInputs(rows) => {
                for (i, m) in rows.iter().enumerate() {
                    tensors.push((format!("stage.{i}"), m));
                }
            }
            DownsamplerCache::MelResidual(m) => tensors.push(("residual".into(), m)),
        }
        let header = StateHeader {
            layout: self.layout.clone(),
            ctx: self.ctx,
            residual_mode: self.downsampler.mode(),
            next_pos: self.next_pos.clone(),
            rnnt: self.rnnt.clone(),
            frames_seen: self.frames_seen,
            tokens_in: self.tokens_in,
            offset: self.offset,
            finished: self.finished,
            ledger: self.ledger.clone(),
            tensors: tensors
                .iter()
                .map(|(n, m)| (n.clone(), [m.rows(), m.cols()]))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("state header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in tensors {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::State(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != STATE_MAGIC {
            return Err(bad("not a stream state"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != STATE_VERSION {
            return Err(Error::State(format!("unsupported state version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: StateHeader =
            serde_json::from_slice(json).map_err(|e| Error::State(format!("bad header: {e}")))?;
        let mut pos = 16 + len;
        let mut read = |name: &str| -> Result<Matrix> {
            let shape = header
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| *s)
                .ok_or_else(|| Error::State(format!("missing tensor {name}")))?;
            let n = shape[0] * shape[1];
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| Error::State(format!("truncated tensor {name}")))?;
            pos += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Matrix::from_vec(shape[0], shape[1], data)
        };
        let n = header.layout.n_layers;
        let conv = (0..n)
            .map(|i| read(&format!("conv.{i}")).map(ConvCache::from_matrix))
            .collect::<Result<Vec<_>>>()?;
        let attn = (0..n)
            .map(|i| read(&format!("attn.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let pending = (0..n)
            .map(|i| read(&format!("pending.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let downsampler = match header.residual_mode {
            ResidualMode::StageCache => {
                let stages = header.layout.downsampling.trailing_zeros() as usize;
                DownsamplerCache::StageInputs(
                    (0..stages)
                        .map(|i| read(&format!("stage.{i}")))
                        .collect::<Result<_>>()?,
                )
            }
            ResidualMode::MelConcat => DownsamplerCache::MelResidual(read("residual")?),
        };
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        if header.next_pos.len() != n {
            return Err(bad("pipeline positions do not match layer count"));
        }
        Ok(StreamState {
            layout: header.layout,
            ctx: header.ctx,
            conv,
            attn,
            downsampler,
            pending,
            next_pos: header.next_pos,
            rnnt: header.rnnt,
            frames_seen: header.frames_seen,
            tokens_in: header.tokens_in,
            offset: header.offset,
            finished: header.finished,
            ledger: header.ledger,
        })
    }
}

const STATE_MAGIC: &[u8; 4] = b"CSST";
const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StateHeader {
    layout: StateLayout,
    ctx: AttentionContext,
    residual_mode: ResidualMode,
    next_pos: Vec<usize>,
    rnnt: Option<RnntState>,
    frames_seen: usize,
    tokens_in: usize,
    offset: usize,
    finished: bool,
    ledger: ComputeLedger,
    tensors: Vec<(String, [usize; 2])>,
}
