//! A complete model: feature settings, encoder, both heads and the vocabulary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoders::{CtcHead, DecoderConfig, RnntHead, Vocab};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::numerics::Matrix;
use crate::params::{read_weights, write_weights, NamedTensors, ParamSource, RandomInit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// CTC weight in `α·l_ctc + l_rnnt`.
    pub alpha: f64,
    pub fastemit_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.3,
            fastemit_lambda: 0.005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub vocab: Vocab,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.features.n_mels != self.encoder.n_mels {
            return Err(Error::config(
                "n_mels",
                format!(
                    "features produce {} bins, encoder expects {}",
                    self.features.n_mels, self.encoder.n_mels
                ),
            ));
        }
        if self.decoder.vocab_size != self.vocab.len() {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "decoder has {} outputs, vocabulary has {} tokens",
                    self.decoder.vocab_size,
                    self.vocab.len()
                ),
            ));
        }
        if [self.loss.alpha, self.loss.fastemit_lambda]
            .iter()
            .any(|w| w.is_nan() || *w < 0.0)
        {
            return Err(Error::config("loss", "weights must be non-negative"));
        }
        Ok(())
    }

    /// A small character-level model, convenient for tests and demos.
    pub fn tiny(encoder: EncoderConfig) -> Self {
        let vocab = Vocab::characters();
        ModelConfig {
            features: FeatureConfig {
                n_mels: encoder.n_mels,
                ..FeatureConfig::default()
            },
            decoder: DecoderConfig {
                vocab_size: vocab.len(),
                pred_dim: 16,
                pred_layers: 1,
                joint_dim: 16,
                max_symbols: 10,
            },
            encoder,
            loss: LossConfig::default(),
            vocab,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    pub encoder: Encoder,
    pub ctc: CtcHead,
    pub rnnt: RnntHead,
}

impl Model {
    fn build(cfg: ModelConfig, src: &mut dyn ParamSource) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), src)?;
        let d = cfg.encoder.d_model;
        let ctc = CtcHead::new(src, d, cfg.vocab.len())?;
        let rnnt = RnntHead::new(src, d, cfg.decoder.clone())?;
        Ok(Model {
            cfg,
            encoder,
            ctc,
            rnnt,
        })
    }

    /// Deterministic random weights.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, &mut RandomInit::new(seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.cfg.vocab
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut t = self.encoder.tensors();
        t.extend(self.ctc.tensors());
        t.extend(self.rnnt.tensors());
        t
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    /// Writes `<path>` (JSON manifest) and the matching `.bin` blob.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_weights(path.as_ref(), &self.cfg, &self.tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (cfg, tensors): (ModelConfig, _) = read_weights(path.as_ref())?;
        let mut src = NamedTensors::new(tensors);
        let model = Self::build(cfg, &mut src)?;
        src.finish()?;
        Ok(model)
    }
}
