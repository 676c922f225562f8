//! PCM WAV input and log-mel features.
//!
//! Frames are computed strictly from their own window of samples: there is
//! no reflection padding and no utterance-level mean/variance normalization,
//! so features can be produced incrementally as audio arrives.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, WeightRng};

/// Floor added before the logarithm so silence maps to `ln(1e-10)`.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub sample_rate: u32,
    pub samples: Vec<i16>,
}

impl AudioBuffer {
    pub fn new(sample_rate: u32, samples: Vec<i16>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample_rate", "must be positive"));
        }
        Ok(AudioBuffer {
            sample_rate,
            samples,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decodes a RIFF/WAVE file holding mono 16-bit PCM.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| match e {
        hound::Error::IoError(io) => Error::file(path, io),
        other => Error::WavFormat {
            field: "header",
            detail: other.to_string(),
        },
    })?;
    let wav = reader.spec();
    if wav.channels != 1 {
        return Err(Error::WavFormat {
            field: "channels",
            detail: format!("{} channels, expected mono", wav.channels),
        });
    }
    if wav.sample_format != hound::SampleFormat::Int || wav.bits_per_sample != 16 {
        return Err(Error::WavFormat {
            field: "bits_per_sample",
            detail: format!(
                "{} bit {:?}, expected 16 bit PCM",
                wav.bits_per_sample, wav.sample_format
            ),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::WavFormat {
            field: "data",
            detail: e.to_string(),
        })?;
    AudioBuffer::new(wav.sample_rate, samples)
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let wav = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::file(path, io),
        other => Error::Malformed(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, wav).map_err(wrap)?;
    for &s in &audio.samples {
        w.write_sample(s).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub frame_shift_ms: u32,
    pub n_mels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            window_ms: 25,
            frame_shift_ms: 10,
            n_mels: 80,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as usize * self.frame_shift_ms as usize) / 1000
    }

    pub fn n_fft(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate", "must be positive"));
        }
        if self.frame_shift_ms == 0 || self.hop_samples() == 0 {
            return Err(Error::config("frame_shift_ms", "must be positive"));
        }
        if self.window_ms < self.frame_shift_ms {
            return Err(Error::config(
                "window_ms",
                format!(
                    "window {} ms is shorter than the {} ms shift",
                    self.window_ms, self.frame_shift_ms
                ),
            ));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of complete frames in `n` samples.
    pub fn frames_for(&self, n: usize) -> usize {
        let win = self.window_samples();
        if n < win {
            0
        } else {
            (n - win) / self.hop_samples() + 1
        }
    }
}

/// Time-major log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFrames {
    pub frame_shift_ms: u32,
    pub n_mels: usize,
    pub frames: Matrix,
}

impl MelFrames {
    pub fn new(frame_shift_ms: u32, frames: Matrix) -> Self {
        MelFrames {
            frame_shift_ms,
            n_mels: frames.cols(),
            frames,
        }
    }

    pub fn empty(frame_shift_ms: u32, n_mels: usize) -> Self {
        MelFrames {
            frame_shift_ms,
            n_mels,
            frames: Matrix::zeros(0, n_mels),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn slice(&self, start: usize, end: usize) -> MelFrames {
        MelFrames::new(self.frame_shift_ms, self.frames.slice_rows(start, end))
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters, `[n_mels × (n_fft/2 + 1)]`, peak weight 1.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = b as f64 * sample_rate as f64 / n_fft as f64;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Reusable log-mel extractor (Hann window, power spectrum, mel, log).
#[derive(Clone)]
pub struct MelExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor")
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl MelExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.window_samples();
        // periodic Hann
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
            .collect();
        let filters = mel_filterbank(cfg.sample_rate, cfg.n_fft(), cfg.n_mels);
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft());
        Ok(MelExtractor {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Power spectrum `|X_k|²` of one windowed frame, `k = 0..=n_fft/2`.
    pub fn power_spectrum(&self, samples: &[i16]) -> Vec<f64> {
        let n_fft = self.cfg.n_fft();
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for ((slot, &s), &w) in buf.iter_mut().zip(samples).zip(&self.window) {
            slot.re = s as f64 / 32768.0 * w;
        }
        self.fft.process(&mut buf);
        buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    fn frame(&self, samples: &[i16], out: &mut [f32]) {
        let power = self.power_spectrum(samples);
        for (o, filt) in out.iter_mut().zip(&self.filters) {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            *o = (e + LOG_FLOOR).ln() as f32;
        }
    }

    /// Features for every complete window in `audio`.
    pub fn log_mel(&self, audio: &AudioBuffer) -> Result<MelFrames> {
        if audio.sample_rate != self.cfg.sample_rate {
            return Err(Error::Argument(format!(
                "audio is {} Hz, extractor expects {} Hz",
                audio.sample_rate, self.cfg.sample_rate
            )));
        }
        Ok(self.frames_from(&audio.samples))
    }

    fn frames_from(&self, samples: &[i16]) -> MelFrames {
        let n = self.cfg.frames_for(samples.len());
        let (hop, win) = (self.cfg.hop_samples(), self.cfg.window_samples());
        let mut m = Matrix::zeros(n, self.cfg.n_mels);
        for t in 0..n {
            self.frame(&samples[t * hop..t * hop + win], m.row_mut(t));
        }
        MelFrames::new(self.cfg.frame_shift_ms, m)
    }
}

/// One-shot helper: `MelExtractor::new(cfg)?.log_mel(audio)`.
pub fn log_mel(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<MelFrames> {
    MelExtractor::new(cfg.clone())?.log_mel(audio)
}

/// Incremental feature extraction carrying over the samples of the next
/// incomplete window.
#[derive(Clone, Debug)]
pub struct StreamingFeatures {
    extractor: MelExtractor,
    pending: Vec<i16>,
}

impl StreamingFeatures {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        Ok(StreamingFeatures {
            extractor: MelExtractor::new(cfg)?,
            pending: Vec::new(),
        })
    }

    pub fn pending_samples(&self) -> usize {
        self.pending.len()
    }

    /// Appends samples and returns the frames they complete.
    pub fn push(&mut self, samples: &[i16]) -> MelFrames {
        self.pending.extend_from_slice(samples);
        let frames = self.extractor.frames_from(&self.pending);
        let consumed = frames.len() * self.extractor.cfg.hop_samples();
        self.pending.drain(..consumed);
        frames
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct FeatureDumpHeader {
    pub n_mels: usize,
    pub frame_shift_ms: u32,
    pub n_frames: usize,
}

/// Writes `<stem>.f32` (little-endian, time-major) and `<stem>.json`.
pub fn write_feature_dump(stem: impl AsRef<Path>, mel: &MelFrames) -> Result<()> {
    let stem = stem.as_ref();
    let blob: Vec<u8> = mel
        .frames
        .as_slice()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let bin = stem.with_extension("f32");
    std::fs::write(&bin, blob).map_err(|e| Error::file(&bin, e))?;
    let header = FeatureDumpHeader {
        n_mels: mel.n_mels,
        frame_shift_ms: mel.frame_shift_ms,
        n_frames: mel.len(),
    };
    let json = stem.with_extension("json");
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(&json, text).map_err(|e| Error::file(&json, e))
}

pub fn read_feature_dump(stem: impl AsRef<Path>) -> Result<MelFrames> {
    let stem = stem.as_ref();
    let json = stem.with_extension("json");
    let text = std::fs::read_to_string(&json).map_err(|e| Error::file(&json, e))?;
    let header: FeatureDumpHeader =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(e.to_string()))?;
    let bin = stem.with_extension("f32");
    let bytes = std::fs::read(&bin).map_err(|e| Error::file(&bin, e))?;
    if bytes.len() != header.n_frames * header.n_mels * 4 {
        return Err(Error::Malformed(format!(
            "{} holds {} bytes, header implies {}",
            bin.display(),
            bytes.len(),
            header.n_frames * header.n_mels * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let frames = Matrix::from_vec(header.n_frames, header.n_mels, data)?;
    Ok(MelFrames {
        frame_shift_ms: header.frame_shift_ms,
        n_mels: header.n_mels,
        frames,
    })
}

/// Sine tone at `amplitude` (full scale = 1.0).
pub fn sine(sample_rate: u32, freq_hz: f64, seconds: f64, amplitude: f64) -> AudioBuffer {
    let n = (sample_rate as f64 * seconds).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let v = amplitude * (2.0 * PI * freq_hz * i as f64 / sample_rate as f64).sin();
            (v * 32767.0).round() as i16
        })
        .collect();
    AudioBuffer {
        sample_rate,
        samples,
    }
}

/// Deterministic speech-like test signal: a few gliding harmonics with
/// syllable-rate amplitude modulation plus low-level noise.
pub fn synthetic_utterance(seed: u64, sample_rate: u32, seconds: f64) -> AudioBuffer {
    let mut rng = WeightRng::new(seed);
    let n = (sample_rate as f64 * seconds).round() as usize;
    let f0 = 110.0 + 120.0 * rng.next_f64();
    let glide = 40.0 * (rng.next_f64() - 0.5);
    let syllable_hz = 3.0 + 3.0 * rng.next_f64();
    let formants: Vec<(f64, f64)> = (0..3)
        .map(|_| (300.0 + 2500.0 * rng.next_f64(), 0.2 + 0.3 * rng.next_f64()))
        .collect();
    let mut phase = 0.0f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let f = f0 + glide * (2.0 * PI * 0.5 * t).sin();
            phase += 2.0 * PI * f / sample_rate as f64;
            let env = 0.5 + 0.5 * (2.0 * PI * syllable_hz * t).sin();
            let mut v = 0.3 * phase.sin();
            for (k, (fr, a)) in formants.iter().enumerate() {
                v += a * (2.0 * PI * fr * t + k as f64).sin() * 0.3;
            }
            let noise = 0.02 * (rng.next_f64() - 0.5);
            ((env * v * 0.6 + noise).clamp(-1.0, 1.0) * 32767.0).round() as i16
        })
        .collect();
    AudioBuffer {
        sample_rate,
        samples,
    }
}
