//! End-to-end inference: offline, cache-aware streaming, the buffered
//! baseline, and one model evaluated under several chunk sizes.

pub mod ledger;

use serde::{Deserialize, Serialize};

use crate::cache::{ResidualMode, RnntState, StreamState};
use crate::context::{latency_ms, token_lookahead, AttentionContext, LatencyModel};
use crate::decoders::{ctc_greedy_decode, Emission, BLANK};
use crate::error::{Error, Result};
use crate::features::{log_mel, AudioBuffer, MelFrames, StreamingFeatures};
use crate::metrics::eil;
use crate::model::Model;
use crate::numerics::Matrix;

use ledger::{ComputeLedger, CostModel, MacCounts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderChoice {
    Ctc,
    Rnnt,
    Both,
}

impl DecoderChoice {
    fn ctc(self) -> bool {
        matches!(self, DecoderChoice::Ctc | DecoderChoice::Both)
    }

    fn rnnt(self) -> bool {
        matches!(self, DecoderChoice::Rnnt | DecoderChoice::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Offline,
    Streaming,
    Buffered,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    /// First mel frame of the encoder step the token was emitted at.
    pub first_frame: usize,
    /// Mel frame by which the encoder had all the audio that step needed.
    pub emit_frame: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    pub attention: u64,
    pub conv: u64,
    pub ffn: u64,
    pub downsampler: u64,
    pub decoder: u64,
    pub total: u64,
    pub duplicate: u64,
}

impl MacReport {
    fn new(encoder: MacCounts, decoder: u64, duplicate: u64) -> Self {
        MacReport {
            attention: encoder.attention,
            conv: encoder.conv,
            ffn: encoder.ffn,
            downsampler: encoder.downsampler,
            decoder,
            total: encoder.encoder() + decoder,
            duplicate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub mode: RunMode,
    pub decoder: DecoderChoice,
    pub regime: String,
    pub text: String,
    pub tokens: Vec<TokenRecord>,
    pub avg_latency_ms: f64,
    pub macs: MacReport,
}

/// Algorithmic latency only; compute time never enters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub regime: String,
    /// Configured worst-case look-ahead latency, when the regime is bounded.
    pub max_ms: Option<f64>,
    /// Configured average look-ahead latency, when the regime is bounded.
    pub avg_ms: Option<f64>,
    /// Mean per-token wait measured over every encoder step of the run.
    pub measured_ms: f64,
    pub encoder_steps: usize,
    /// Steps near the end of the stream whose look-ahead was cut short.
    pub truncated_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub transcripts: Vec<Transcript>,
    pub ledger: ComputeLedger,
    pub latency: LatencyReport,
    /// Final encoder outputs, one row per token step.
    pub encoder_out: Matrix,
}

impl RunOutput {
    pub fn transcript(&self, decoder: DecoderChoice) -> Option<&Transcript> {
        self.transcripts.iter().find(|t| t.decoder == decoder)
    }
}

/// Frame at which every input of encoder step `t` has arrived.
fn ready_frame(
    ctx: &AttentionContext,
    n_layers: usize,
    dr: usize,
    t: usize,
    steps: usize,
) -> usize {
    let la = token_lookahead(ctx, n_layers, t);
    (t.saturating_add(la).min(steps.saturating_sub(1)) + 1) * dr
}

#[derive(Default)]
struct DecodeState {
    ctc_prev: u32,
    ctc: Vec<Emission>,
    rnnt: Vec<Emission>,
    ctc_macs: u64,
    rnnt_macs: u64,
}

impl DecodeState {
    fn new() -> Self {
        DecodeState {
            ctc_prev: BLANK,
            ..Default::default()
        }
    }

    fn decode(
        &mut self,
        model: &Model,
        choice: DecoderChoice,
        enc: &Matrix,
        offset: usize,
        rnnt_state: &mut RnntState,
        ledger: &mut ComputeLedger,
    ) -> Result<()> {
        if enc.rows() == 0 {
            return Ok(());
        }
        let mut macs = 0;
        if choice.ctc() {
            let lp = model.ctc.logprobs(enc)?;
            self.ctc
                .extend(ctc_greedy_decode(&lp, offset, &mut self.ctc_prev));
            let m = model.ctc.macs_per_step() * enc.rows() as u64;
            self.ctc_macs += m;
            macs += m;
        }
        if choice.rnnt() {
            let (e, m) = model.rnnt.greedy_decode(enc, rnnt_state, offset)?;
            self.rnnt.extend(e);
            self.rnnt_macs += m;
            macs += m;
        }
        ledger.record(MacCounts {
            decoder: macs,
            ..MacCounts::default()
        });
        Ok(())
    }
}

struct Finalize<'a> {
    model: &'a Model,
    mode: RunMode,
    choice: DecoderChoice,
    regime: String,
    ledger: &'a ComputeLedger,
    /// Mel frame by which each encoder step was available.
    ready: Vec<usize>,
}

impl Finalize<'_> {
    fn transcript(
        &self,
        decoder: DecoderChoice,
        emissions: &[Emission],
        decoder_macs: u64,
    ) -> Result<Transcript> {
        let dr = self.model.config().encoder.downsampling;
        let vocab = self.model.vocab();
        let lm = latency_model(self.model)?;
        let tokens: Vec<TokenRecord> = emissions
            .iter()
            .map(|e| TokenRecord {
                text: vocab.token(e.token).to_string(),
                first_frame: e.step * dr,
                emit_frame: self.ready[e.step],
            })
            .collect();
        let audio_end: Vec<usize> = emissions.iter().map(|e| (e.step + 1) * dr).collect();
        let emit: Vec<usize> = tokens.iter().map(|t| t.emit_frame).collect();
        let ids: Vec<u32> = emissions.iter().map(|e| e.token).collect();
        Ok(Transcript {
            mode: self.mode,
            decoder,
            regime: self.regime.clone(),
            text: vocab.detokenize(&ids),
            tokens,
            avg_latency_ms: eil(&emit, &audio_end, &lm)?,
            macs: MacReport::new(self.ledger.totals(), decoder_macs, self.ledger.duplicate),
        })
    }

    fn finish(
        self,
        decoded: DecodeState,
        encoder_out: Matrix,
        ctx: Option<&AttentionContext>,
    ) -> Result<RunOutput> {
        let mut transcripts = Vec::new();
        if self.choice.ctc() {
            transcripts.push(self.transcript(
                DecoderChoice::Ctc,
                &decoded.ctc,
                decoded.ctc_macs,
            )?);
        }
        if self.choice.rnnt() {
            transcripts.push(self.transcript(
                DecoderChoice::Rnnt,
                &decoded.rnnt,
                decoded.rnnt_macs,
            )?);
        }
        let lm = latency_model(self.model)?;
        let dr = self.model.config().encoder.downsampling;
        let steps = self.ready.len();
        let audio_end: Vec<usize> = (0..steps).map(|t| (t + 1) * dr).collect();
        let configured = ctx
            .filter(|c| c.is_streamable())
            .map(|c| latency_ms(c, &lm))
            .transpose()?;
        let truncated_steps = match ctx {
            Some(c) if c.is_streamable() => (0..steps)
                .filter(|&t| t + token_lookahead(c, lm.n_layers, t) >= steps)
                .filter(|&t| token_lookahead(c, lm.n_layers, t) > 0)
                .count(),
            _ => 0,
        };
        Ok(RunOutput {
            latency: LatencyReport {
                regime: self.regime,
                max_ms: configured.map(|l| l.max_ms),
                avg_ms: configured.map(|l| l.avg_ms),
                measured_ms: eil(&self.ready, &audio_end, &lm)?,
                encoder_steps: steps,
                truncated_steps,
            },
            transcripts,
            ledger: self.ledger.clone(),
            encoder_out,
        })
    }
}

fn latency_model(model: &Model) -> Result<LatencyModel> {
    let cfg = model.config();
    LatencyModel::new(
        cfg.features.frame_shift_ms,
        cfg.encoder.downsampling,
        cfg.encoder.n_layers,
    )
}

/// Full-utterance inference under `ctx`.
pub fn run_offline(
    mel: &MelFrames,
    model: &Model,
    ctx: &AttentionContext,
    choice: DecoderChoice,
) -> Result<RunOutput> {
    let (enc, mut ledger) = model.encoder.encode_full_with(mel, ctx)?;
    let mut decoded = DecodeState::new();
    let mut rnnt_state = model.rnnt.initial_state();
    decoded.decode(model, choice, &enc, 0, &mut rnnt_state, &mut ledger)?;
    let steps = enc.rows();
    let dr = model.config().encoder.downsampling;
    Finalize {
        model,
        mode: RunMode::Offline,
        choice,
        regime: ctx.label(),
        ledger: &ledger,
        ready: vec![steps * dr; steps],
    }
    .finish(decoded, enc, Some(ctx))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamingOptions {
    pub ctx: AttentionContext,
    pub decoder: DecoderChoice,
    /// Encoder steps per call, in units of the regime's natural step
    /// (`C` tokens for chunks, one token otherwise).
    pub steps_per_call: usize,
    pub residual: ResidualMode,
}

impl StreamingOptions {
    pub fn new(ctx: AttentionContext, decoder: DecoderChoice) -> Self {
        StreamingOptions {
            ctx,
            decoder,
            steps_per_call: 1,
            residual: ResidualMode::default(),
        }
    }
}

/// One streaming inference session: audio in, tokens out.
pub struct StreamingSession<'m> {
    model: &'m Model,
    opts: StreamingOptions,
    features: StreamingFeatures,
    pending: Matrix,
    state: StreamState,
    decoded: DecodeState,
    outputs: Matrix,
    call_frames: usize,
}

impl<'m> StreamingSession<'m> {
    pub fn new(model: &'m Model, opts: StreamingOptions) -> Result<Self> {
        if opts.steps_per_call == 0 {
            return Err(Error::Argument("steps_per_call must be at least 1".into()));
        }
        let mut state = model.encoder.init_state_with(&opts.ctx, opts.residual)?;
        state.rnnt = Some(model.rnnt.initial_state());
        let cfg = model.config();
        Ok(StreamingSession {
            model,
            features: StreamingFeatures::new(cfg.features.clone())?,
            pending: Matrix::zeros(0, cfg.encoder.n_mels),
            state,
            decoded: DecodeState::new(),
            outputs: Matrix::zeros(0, cfg.encoder.d_model),
            call_frames: opts.ctx.step_tokens() * cfg.encoder.downsampling * opts.steps_per_call,
            opts,
        })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    /// Mel frames per encoder call.
    pub fn call_frames(&self) -> usize {
        self.call_frames
    }

    /// Encoder outputs finalized so far.
    pub fn outputs(&self) -> &Matrix {
        &self.outputs
    }

    pub fn emitted(&self, decoder: DecoderChoice) -> &[Emission] {
        match decoder {
            DecoderChoice::Rnnt => &self.decoded.rnnt,
            _ => &self.decoded.ctc,
        }
    }

    pub fn push_audio(&mut self, samples: &[i16]) -> Result<()> {
        let mel = self.features.push(samples);
        self.push_mel(&mel)
    }

    pub fn push_mel(&mut self, mel: &MelFrames) -> Result<()> {
        self.pending = self.pending.vstack(&mel.frames)?;
        while self.pending.rows() >= self.call_frames {
            let chunk = self.pending.slice_rows(0, self.call_frames);
            self.pending = self
                .pending
                .slice_rows(self.call_frames, self.pending.rows());
            self.step(chunk, false)?;
        }
        Ok(())
    }

    /// Runs one encoder call on exactly these frames, bypassing buffering.
    pub fn step_frames(&mut self, frames: &MelFrames, last: bool) -> Result<Matrix> {
        self.step(frames.frames.clone(), last)
    }

    fn step(&mut self, chunk: Matrix, last: bool) -> Result<Matrix> {
        let shift = self.model.config().features.frame_shift_ms;
        let offset = self.state.offset;
        let enc =
            self.model
                .encoder
                .encode_step(&MelFrames::new(shift, chunk), &mut self.state, last)?;
        let mut rnnt = self
            .state
            .rnnt
            .take()
            .unwrap_or_else(|| self.model.rnnt.initial_state());
        let res = self.decoded.decode(
            self.model,
            self.opts.decoder,
            &enc,
            offset,
            &mut rnnt,
            &mut self.state.ledger,
        );
        self.state.rnnt = Some(rnnt);
        res?;
        self.outputs = self.outputs.vstack(&enc)?;
        Ok(enc)
    }

    /// Flushes the remaining audio and closes the stream.
    pub fn finish(mut self) -> Result<RunOutput> {
        let rest = std::mem::replace(&mut self.pending, Matrix::zeros(0, 0));
        let rest = if rest.cols() == 0 {
            Matrix::zeros(0, self.model.config().encoder.n_mels)
        } else {
            rest
        };
        self.step(rest, true)?;
        let cfg = &self.model.config().encoder;
        let steps = self.outputs.rows();
        let ready = (0..steps)
            .map(|t| ready_frame(&self.opts.ctx, cfg.n_layers, cfg.downsampling, t, steps))
            .collect();
        Finalize {
            model: self.model,
            mode: RunMode::Streaming,
            choice: self.opts.decoder,
            regime: self.opts.ctx.label(),
            ledger: &self.state.ledger,
            ready,
        }
        .finish(self.decoded, self.outputs, Some(&self.opts.ctx))
    }
}

/// Cache-aware streaming over a whole recording, fed in one piece.
pub fn run_streaming(
    audio: &AudioBuffer,
    model: &Model,
    opts: StreamingOptions,
) -> Result<RunOutput> {
    check_rate(audio, model)?;
    let mut session = StreamingSession::new(model, opts)?;
    session.push_audio(&audio.samples)?;
    session.finish()
}

fn check_rate(audio: &AudioBuffer, model: &Model) -> Result<()> {
    let want = model.config().features.sample_rate;
    if audio.sample_rate != want {
        return Err(Error::WavFormat {
            field: "sample_rate",
            detail: format!("{} Hz, model expects {want} Hz", audio.sample_rate),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferedConfig {
    pub chunk_seconds: f64,
    /// Whole buffer, context on both sides included.
    pub buffer_seconds: f64,
}

impl BufferedConfig {
    pub fn ctc_default() -> Self {
        BufferedConfig {
            chunk_seconds: 1.0,
            buffer_seconds: 4.0,
        }
    }

    pub fn rnnt_default() -> Self {
        BufferedConfig {
            chunk_seconds: 2.0,
            buffer_seconds: 4.0,
        }
    }

    /// `(chunk, context per side)` in encoder steps.
    fn tokens(&self, lm: &LatencyModel) -> Result<(usize, usize)> {
        if !self.chunk_seconds.is_finite() || self.chunk_seconds <= 0.0 {
            return Err(Error::config("chunk_seconds", "must be positive"));
        }
        if !self.buffer_seconds.is_finite() || self.buffer_seconds < self.chunk_seconds {
            return Err(Error::config(
                "buffer_seconds",
                format!(
                    "{} s buffer is shorter than the {} s chunk",
                    self.buffer_seconds, self.chunk_seconds
                ),
            ));
        }
        let per_token = lm.token_ms() as f64 / 1000.0;
        let chunk = ((self.chunk_seconds / per_token).round() as usize).max(1);
        let buffer = ((self.buffer_seconds / per_token).round() as usize).max(chunk);
        Ok((chunk, (buffer - chunk) / 2))
    }
}

/// Buffered baseline: the full-context model over overlapping windows.
///
/// Each step encodes `context ∥ chunk ∥ context` from scratch with an
/// unrestricted mask and keeps the central chunk's outputs. CTC decodes the
/// concatenated central outputs; RNNT decodes each central region with a
/// freshly reset prediction network. The ledger counts every buffer; the
/// duplicate counter holds what exceeds encoding each chunk on its own.
pub fn run_buffered(
    mel: &MelFrames,
    model: &Model,
    bcfg: BufferedConfig,
    choice: DecoderChoice,
) -> Result<RunOutput> {
    let enc_cfg = &model.config().encoder;
    let lm = latency_model(model)?;
    let (chunk, context) = bcfg.tokens(&lm)?;
    let dr = enc_cfg.downsampling;
    let total = mel.len() / dr;
    let cost = CostModel::new(enc_cfg);
    let full = AttentionContext::Full;
    let mut ledger = ComputeLedger::new();
    let mut decoded = DecodeState::new();
    let mut outputs = Matrix::zeros(0, enc_cfg.d_model);
    let mut ready = Vec::with_capacity(total);
    let mut c0 = 0;
    while c0 < total {
        let c1 = (c0 + chunk).min(total);
        let b0 = c0.saturating_sub(context);
        let b1 = (c1 + context).min(total);
        ledger.begin_step();
        let window = mel.slice(b0 * dr, b1 * dr);
        let (enc, step_ledger) = model.encoder.encode_full_with(&window, &full)?;
        let spent = step_ledger.total();
        ledger.record(step_ledger.totals());
        ledger.attention_pairs += step_ledger.attention_pairs;
        let n = (c1 - c0) as u64;
        let alone = cost.downsampler((c1 - c0) * dr)
            + cost
                .rows(n * enc_cfg.n_layers as u64, n * n * enc_cfg.n_layers as u64)
                .total();
        ledger.duplicate += spent - alone;
        ledger.duplicate_rows += ((b1 - b0) - (c1 - c0)) as u64 * enc_cfg.n_layers as u64;
        let kept = enc.slice_rows(c0 - b0, c1 - b0);
        let mut rnnt_state = model.rnnt.initial_state();
        decoded.decode(model, choice, &kept, c0, &mut rnnt_state, &mut ledger)?;
        outputs = outputs.vstack(&kept)?;
        ready.extend(std::iter::repeat_n(b1 * dr, c1 - c0));
        c0 = c1;
    }
    Finalize {
        model,
        mode: RunMode::Buffered,
        choice,
        regime: format!(
            "buffered(chunk={}s,buffer={}s)",
            bcfg.chunk_seconds, bcfg.buffer_seconds
        ),
        ledger: &ledger,
        ready,
    }
    .finish(decoded, outputs, None)
}

/// Evaluates one weight set under each chunk size, streaming.
///
/// Left context follows the model's configured chunk regime (`left_chunks`),
/// unlimited otherwise. Chunk sizes beyond the position-bias table are a
/// config error.
pub fn run_multi_lookahead(
    audio: &AudioBuffer,
    model: &Model,
    chunk_sizes: &[usize],
    decoder: DecoderChoice,
) -> Result<Vec<(AttentionContext, RunOutput)>> {
    let left_chunks = match model.config().encoder.attention {
        AttentionContext::Chunk { left_chunks, .. } => left_chunks,
        _ => None,
    };
    let ctxs: Vec<AttentionContext> = chunk_sizes
        .iter()
        .map(|&size| AttentionContext::Chunk { size, left_chunks })
        .collect();
    for ctx in &ctxs {
        model.config().encoder.check_context(ctx)?;
    }
    ctxs.into_iter()
        .map(|ctx| {
            Ok((
                ctx,
                run_streaming(audio, model, StreamingOptions::new(ctx, decoder))?,
            ))
        })
        .collect()
}

/// Offline inference straight from audio.
pub fn run_offline_audio(
    audio: &AudioBuffer,
    model: &Model,
    ctx: &AttentionContext,
    choice: DecoderChoice,
) -> Result<RunOutput> {
    check_rate(audio, model)?;
    run_offline(
        &log_mel(audio, &model.config().features)?,
        model,
        ctx,
        choice,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::features::synthetic_utterance;
    use crate::model::ModelConfig;

    fn model(ctx: AttentionContext) -> Model {
        let cfg = ModelConfig::tiny(EncoderConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ffn_expansion: 2,
            conv_kernel: 3,
            downsampling: 4,
            n_mels: 20,
            attention: ctx,
            pos_bias_past: None,
            pos_bias_future: None,
        });
        Model::init(cfg, 11).unwrap()
    }

    fn chunk(size: usize, left: usize) -> AttentionContext {
        AttentionContext::Chunk {
            size,
            left_chunks: Some(left),
        }
    }

    #[test]
    fn zero_length_audio() {
        let m = model(chunk(2, 1));
        let audio = AudioBuffer::new(16000, vec![]).unwrap();
        let out = run_streaming(
            &audio,
            &m,
            StreamingOptions::new(chunk(2, 1), DecoderChoice::Both),
        )
        .unwrap();
        assert!(out.transcripts.iter().all(|t| t.tokens.is_empty()));
        assert_eq!(out.ledger.total(), 0);
    }

    #[test]
    fn streaming_equals_offline_and_chunking_invariant() {
        let ctx = chunk(3, 2);
        let m = model(ctx);
        let audio = synthetic_utterance(5, 16000, 1.3);
        let off = run_offline_audio(&audio, &m, &ctx, DecoderChoice::Both).unwrap();
        let one =
            run_streaming(&audio, &m, StreamingOptions::new(ctx, DecoderChoice::Both)).unwrap();
        assert_eq!(one.encoder_out, off.encoder_out);
        for d in [DecoderChoice::Ctc, DecoderChoice::Rnnt] {
            assert_eq!(
                one.transcript(d).unwrap().text,
                off.transcript(d).unwrap().text
            );
        }
        assert_eq!(one.ledger.total(), off.ledger.total());
        assert_eq!(one.ledger.duplicate, 0);
        // arbitrary audio piece sizes
        let mut s =
            StreamingSession::new(&m, StreamingOptions::new(ctx, DecoderChoice::Both)).unwrap();
        for piece in audio.samples.chunks(1234) {
            s.push_audio(piece).unwrap();
        }
        let many = s.finish().unwrap();
        assert_eq!(many.transcripts, one.transcripts);
        assert_eq!(many.ledger.totals(), one.ledger.totals());
    }

    #[test]
    fn buffered_duplicates_compute() {
        let m = model(chunk(2, 1));
        let mel = log_mel(&synthetic_utterance(2, 16000, 2.0), &m.config().features).unwrap();
        let bcfg = BufferedConfig {
            chunk_seconds: 0.32,
            buffer_seconds: 0.96,
        };
        let out = run_buffered(&mel, &m, bcfg, DecoderChoice::Ctc).unwrap();
        assert!(out.ledger.duplicate > 0);
        let off = run_offline(&mel, &m, &AttentionContext::Full, DecoderChoice::Ctc).unwrap();
        assert!(out.ledger.total() > off.ledger.total());
        let same = BufferedConfig {
            chunk_seconds: 0.32,
            buffer_seconds: 0.32,
        };
        assert_eq!(
            run_buffered(&mel, &m, same, DecoderChoice::Ctc)
                .unwrap()
                .ledger
                .duplicate,
            0
        );
        let bad = BufferedConfig {
            chunk_seconds: 1.0,
            buffer_seconds: 0.5,
        };
        assert!(matches!(
            run_buffered(&mel, &m, bad, DecoderChoice::Ctc),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn multi_lookahead_reports_latencies() {
        let mut cfg = model(chunk(2, 1)).config().clone();
        cfg.encoder.downsampling = 8;
        cfg.encoder.pos_bias_future = Some(13);
        cfg.encoder.pos_bias_past = Some(64);
        let m = Model::init(cfg, 3).unwrap();
        let audio = synthetic_utterance(1, 16000, 1.0);
        let outs = run_multi_lookahead(&audio, &m, &[2, 7, 14], DecoderChoice::Ctc).unwrap();
        let avgs: Vec<f64> = outs
            .iter()
            .map(|(_, o)| o.latency.avg_ms.unwrap())
            .collect();
        assert_eq!(avgs, vec![40.0, 240.0, 520.0]);
        assert!(matches!(
            run_multi_lookahead(&audio, &m, &[15], DecoderChoice::Ctc),
            Err(Error::Config { .. })
        ));
    }
}
