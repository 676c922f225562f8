//! Output heads on top of the encoder: a linear CTC head and an RNN
//! transducer (prediction network + joint network), both decoded greedily.
//!
//! Ties in every argmax go to the lowest token id; the blank is id 0.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::RnntState;
use crate::error::{Error, Result};
use crate::numerics::{linear, log_softmax, Matrix};
use crate::params::{Init, ParamSource};

pub const BLANK: u32 = 0;
pub const BLANK_SYMBOL: &str = "<blank>";

/// Token inventory. Entry 0 is always the blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(BLANK_SYMBOL) {
            return Err(Error::Malformed(format!(
                "vocabulary must start with {BLANK_SYMBOL}"
            )));
        }
        if tokens.len() < 2 {
            return Err(Error::Malformed(
                "vocabulary has no non-blank tokens".into(),
            ));
        }
        Ok(Vocab { tokens })
    }

    /// Blank, space, `a`–`z`, apostrophe.
    pub fn characters() -> Self {
        let mut tokens = vec![BLANK_SYMBOL.to_string(), " ".to_string()];
        tokens.extend(('a'..='z').map(String::from));
        tokens.push("'".into());
        Vocab { tokens }
    }

    /// One token per line, UTF-8.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text: String = self.tokens.iter().map(|t| format!("{t}\n")).collect();
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("", String::as_str)
    }

    /// Joins token strings; `▁` marks a word boundary as in subword vocabularies.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let s: String = ids.iter().map(|&i| self.token(i)).collect();
        s.replace('\u{2581}', " ")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Greedy longest-match tokenization.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let best = self
                .tokens
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(_, t)| !t.is_empty() && rest.starts_with(t.as_str()))
                .max_by_key(|(i, t)| (t.len(), std::cmp::Reverse(*i)));
            match best {
                Some((i, t)) => {
                    ids.push(i as u32);
                    rest = &rest[t.len()..];
                }
                None => {
                    let c = rest.chars().next().expect("non-empty");
                    return Err(Error::Argument(format!(
                        "character {c:?} is not in the vocabulary"
                    )));
                }
            }
        }
        Ok(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub pred_dim: usize,
    pub pred_layers: usize,
    pub joint_dim: usize,
    #[serde(default = "default_max_symbols")]
    pub max_symbols: usize,
}

fn default_max_symbols() -> usize {
    10
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config(
                "vocab_size",
                "needs the blank and at least one token",
            ));
        }
        if self.pred_dim == 0 || self.pred_layers == 0 || self.joint_dim == 0 {
            return Err(Error::config("decoder", "dimensions must be at least 1"));
        }
        if self.max_symbols == 0 {
            return Err(Error::config("max_symbols", "must be at least 1"));
        }
        Ok(())
    }
}

/// A decoded token and the encoder step it was emitted at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub token: u32,
    pub step: usize,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct CtcHead {
    w: Matrix,
    b: Matrix,
}

impl CtcHead {
    pub fn new(src: &mut dyn ParamSource, d_model: usize, vocab: usize) -> Result<Self> {
        Ok(CtcHead {
            w: src.take("ctc.w", d_model, vocab, Init::Uniform { fan_in: d_model })?,
            b: src.take("ctc.b", 1, vocab, Init::Uniform { fan_in: d_model })?,
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("ctc.w".into(), &self.w), ("ctc.b".into(), &self.b)]
    }

    pub fn macs_per_step(&self) -> u64 {
        (self.w.rows() * self.w.cols()) as u64
    }

    /// Raw logits, one row per encoder step.
    pub fn logits(&self, enc: &Matrix) -> Result<Vec<Vec<f64>>> {
        let z = linear(enc, &self.w, Some(self.b.as_slice()))?;
        Ok(z.row_iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect())
    }

    pub fn logprobs(&self, enc: &Matrix) -> Result<Vec<Vec<f64>>> {
        Ok(self.logits(enc)?.iter().map(|r| log_softmax(r)).collect())
    }
}

/// Frame-wise argmax, merge repeats, drop blanks.
///
/// `prev` is the argmax of the step before the first row (blank at stream
/// start), so a token split across a chunk boundary is emitted once.
pub fn ctc_greedy_decode(
    logprobs: &[Vec<f64>],
    step_offset: usize,
    prev: &mut u32,
) -> Vec<Emission> {
    let mut out = Vec::new();
    for (t, row) in logprobs.iter().enumerate() {
        let k = argmax(row) as u32;
        if k != BLANK && k != *prev {
            out.push(Emission {
                token: k,
                step: step_offset + t,
            });
        }
        *prev = k;
    }
    out
}

#[derive(Clone, Debug)]
pub struct RnntHead {
    cfg: DecoderConfig,
    embed: Matrix,
    /// Per layer: input weights, recurrent weights, bias.
    rnn: Vec<(Matrix, Matrix, Matrix)>,
    joint_enc: Matrix,
    joint_pred: Matrix,
    joint_b: Matrix,
    out_w: Matrix,
    out_b: Matrix,
}

impl RnntHead {
    pub fn new(src: &mut dyn ParamSource, d_model: usize, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (p, j, v) = (cfg.pred_dim, cfg.joint_dim, cfg.vocab_size);
        let embed = src.take("rnnt.embed", v, p, Init::Uniform { fan_in: 1 })?;
        let mut rnn = Vec::new();
        for l in 0..cfg.pred_layers {
            rnn.push((
                src.take(
                    &format!("rnnt.rnn{l}.wx"),
                    p,
                    p,
                    Init::Uniform { fan_in: p },
                )?,
                src.take(
                    &format!("rnnt.rnn{l}.wh"),
                    p,
                    p,
                    Init::Uniform { fan_in: p },
                )?,
                src.take(&format!("rnnt.rnn{l}.b"), 1, p, Init::Uniform { fan_in: p })?,
            ));
        }
        Ok(RnntHead {
            embed,
            rnn,
            joint_enc: src.take(
                "rnnt.joint_enc",
                d_model,
                j,
                Init::Uniform { fan_in: d_model },
            )?,
            joint_pred: src.take("rnnt.joint_pred", p, j, Init::Uniform { fan_in: p })?,
            joint_b: src.take("rnnt.joint_b", 1, j, Init::Zeros)?,
            out_w: src.take("rnnt.out_w", j, v, Init::Uniform { fan_in: j })?,
            out_b: src.take("rnnt.out_b", 1, v, Init::Uniform { fan_in: j })?,
            cfg,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("rnnt.embed".to_string(), &self.embed)];
        for (l, (wx, wh, b)) in self.rnn.iter().enumerate() {
            out.push((format!("rnnt.rnn{l}.wx"), wx));
            out.push((format!("rnnt.rnn{l}.wh"), wh));
            out.push((format!("rnnt.rnn{l}.b"), b));
        }
        out.push(("rnnt.joint_enc".into(), &self.joint_enc));
        out.push(("rnnt.joint_pred".into(), &self.joint_pred));
        out.push(("rnnt.joint_b".into(), &self.joint_b));
        out.push(("rnnt.out_w".into(), &self.out_w));
        out.push(("rnnt.out_b".into(), &self.out_b));
        out
    }

    /// Prediction-network MACs per consumed token.
    pub fn pred_macs(&self) -> u64 {
        (2 * self.cfg.pred_layers * self.cfg.pred_dim * self.cfg.pred_dim) as u64
    }

    /// Joint MACs: per encoder step (encoder projection) and per evaluation.
    pub fn joint_macs(&self) -> (u64, u64) {
        let (d, j) = (self.joint_enc.rows(), self.cfg.joint_dim);
        let (p, v) = (self.cfg.pred_dim, self.cfg.vocab_size);
        ((d * j) as u64, (p * j + j * v) as u64)
    }

    /// Consumes `token` from the recurrent state `hidden`.
    pub fn predict(&self, hidden: &[Vec<f32>], token: u32) -> Result<Vec<Vec<f32>>> {
        if hidden.len() != self.rnn.len() {
            return Err(Error::State(format!(
                "decoder state has {} layers, network has {}",
                hidden.len(),
                self.rnn.len()
            )));
        }
        if token as usize >= self.cfg.vocab_size {
            return Err(Error::Argument(format!("token {token} outside vocabulary")));
        }
        let p = self.cfg.pred_dim;
        let mut x: Vec<f32> = self.embed.row(token as usize).to_vec();
        let mut next = Vec::with_capacity(self.rnn.len());
        for ((wx, wh, b), h) in self.rnn.iter().zip(hidden) {
            if h.len() != p {
                return Err(Error::State(format!(
                    "decoder state width {} differs from {p}",
                    h.len()
                )));
            }
            let mut y = vec![0.0f32; p];
            for (j, out) in y.iter_mut().enumerate() {
                let mut s = b[(0, j)] as f64;
                for (i, &xi) in x.iter().enumerate() {
                    s += xi as f64 * wx[(i, j)] as f64;
                }
                for (i, &hi) in h.iter().enumerate() {
                    s += hi as f64 * wh[(i, j)] as f64;
                }
                *out = (s as f32).tanh();
            }
            next.push(y.clone());
            x = y;
        }
        Ok(next)
    }

    /// State at the start of an utterance: the blank consumed from zeros.
    pub fn initial_state(&self) -> RnntState {
        let zeros = vec![vec![0.0; self.cfg.pred_dim]; self.cfg.pred_layers];
        RnntState {
            hidden: self.predict(&zeros, BLANK).expect("shapes match"),
            last_token: BLANK,
        }
    }

    /// Encoder half of the joint: `enc · W_je`, one row per step.
    pub fn project_encoder(&self, enc: &Matrix) -> Result<Matrix> {
        linear(enc, &self.joint_enc, None)
    }

    /// Joint logits for one projected encoder row and one prediction output.
    pub fn joint_logits(&self, enc_proj: &[f32], pred: &[f32]) -> Vec<f64> {
        let j = self.cfg.joint_dim;
        let mut hidden = vec![0.0f32; j];
        for (c, h) in hidden.iter_mut().enumerate() {
            let mut s = enc_proj[c] as f64 + self.joint_b[(0, c)] as f64;
            for (i, &pi) in pred.iter().enumerate() {
                s += pi as f64 * self.joint_pred[(i, c)] as f64;
            }
            *h = (s as f32).tanh();
        }
        (0..self.cfg.vocab_size)
            .map(|v| {
                let mut s = self.out_b[(0, v)] as f64;
                for (c, &h) in hidden.iter().enumerate() {
                    s += h as f64 * self.out_w[(c, v)] as f64;
                }
                s
            })
            .collect()
    }

    /// Joint logits over the whole `T × (U+1)` lattice for a label sequence.
    pub fn lattice_logits(&self, enc: &Matrix, labels: &[u32]) -> Result<Vec<Vec<Vec<f64>>>> {
        let proj = self.project_encoder(enc)?;
        let mut state = self.initial_state();
        let mut preds = vec![state.hidden.last().expect("layers").clone()];
        for &y in labels {
            state.hidden = self.predict(&state.hidden, y)?;
            preds.push(state.hidden.last().expect("layers").clone());
        }
        Ok((0..enc.rows())
            .map(|t| {
                preds
                    .iter()
                    .map(|g| self.joint_logits(proj.row(t), g))
                    .collect()
            })
            .collect())
    }

    /// Greedy transducer decoding over encoder rows, continuing from `state`.
    ///
    /// At most `max_symbols` tokens are emitted per step. Returns the
    /// emissions (steps offset by `step_offset`) and decoder MACs spent.
    pub fn greedy_decode(
        &self,
        enc: &Matrix,
        state: &mut RnntState,
        step_offset: usize,
    ) -> Result<(Vec<Emission>, u64)> {
        let proj = self.project_encoder(enc)?;
        let (per_step, per_joint) = self.joint_macs();
        let mut macs = per_step * enc.rows() as u64;
        let mut out = Vec::new();
        for t in 0..enc.rows() {
            for _ in 0..self.cfg.max_symbols {
                let pred = state
                    .hidden
                    .last()
                    .ok_or_else(|| Error::State("empty decoder state".into()))?;
                let logits = self.joint_logits(proj.row(t), pred);
                macs += per_joint;
                let k = argmax(&logits) as u32;
                if k == BLANK {
                    break;
                }
                out.push(Emission {
                    token: k,
                    step: step_offset + t,
                });
                state.hidden = self.predict(&state.hidden, k)?;
                state.last_token = k;
                macs += self.pred_macs();
            }
        }
        Ok((out, macs))
    }
}
