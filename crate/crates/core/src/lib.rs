//! Cache-aware streaming inference for a limited-context Conformer-style
//! speech encoder with CTC and RNN-transducer heads.
//!
//! The encoder restricts every attention layer's context (zero, regular or
//! chunked look-ahead), so a stream can be processed step by step while
//! caching only convolution histories and past attention inputs. Streaming
//! output equals the full-utterance output bit for bit, and the compute
//! ledger shows no work is repeated.
//!
//! ```
//! use cachestream::{AttentionContext, EncoderConfig, Model, ModelConfig};
//! use cachestream::streaming::{run_offline_audio, run_streaming, DecoderChoice, StreamingOptions};
//! use cachestream::features::synthetic_utterance;
//!
//! let ctx = AttentionContext::Chunk { size: 2, left_chunks: Some(2) };
//! let cfg = ModelConfig::tiny(EncoderConfig {
//!     n_layers: 2, d_model: 16, n_heads: 2, ffn_expansion: 2, conv_kernel: 3,
//!     downsampling: 4, n_mels: 20, attention: ctx,
//!     pos_bias_past: None, pos_bias_future: None,
//! });
//! let model = Model::init(cfg, 42)?;
//! let audio = synthetic_utterance(7, 16_000, 1.0);
//!
//! let offline = run_offline_audio(&audio, &model, &ctx, DecoderChoice::Ctc)?;
//! let streamed = run_streaming(&audio, &model, StreamingOptions::new(ctx, DecoderChoice::Ctc))?;
//! assert_eq!(streamed.encoder_out, offline.encoder_out);
//! assert_eq!(streamed.ledger.duplicate, 0);
//! # Ok::<(), cachestream::Error>(())
//! ```

pub mod cache;
pub mod context;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod streaming;

pub use cache::{ResidualMode, RnntState, StreamState};
pub use context::{AttentionContext, LatencyModel};
pub use decoders::Vocab;
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use features::{AudioBuffer, FeatureConfig, MelFrames};
pub use model::{Model, ModelConfig};
pub use numerics::Matrix;
pub use streaming::ledger::{ComputeLedger, MacCounts};
