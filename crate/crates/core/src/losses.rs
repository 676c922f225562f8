//! CTC and RNN-transducer losses with analytic gradients w.r.t. logits.
//!
//! Everything runs in `f64` in the log domain. An infeasible target (too
//! short an input) has loss `+∞` and a zero gradient.

use crate::decoders::BLANK;
use crate::error::{Error, Result};
use crate::numerics::log_softmax;

/// Stand-in for `ln 0` that keeps sums finite.
pub const LOG_ZERO: f64 = -1.0e30;

fn lse2(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO {
        return b;
    }
    if b <= LOG_ZERO {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Loss value and `∂loss/∂logits`, shaped like the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<G> {
    pub loss: f64,
    pub grad: G,
}

fn check_labels(labels: &[u32], vocab: usize) -> Result<()> {
    for &y in labels {
        if y == BLANK || y as usize >= vocab {
            return Err(Error::Argument(format!(
                "label {y} is the blank or outside a vocabulary of {vocab}"
            )));
        }
    }
    Ok(())
}

fn check_rows(rows: &[Vec<f64>], vocab: usize, op: &'static str) -> Result<()> {
    if rows.iter().any(|r| r.len() != vocab) {
        return Err(Error::shape(op, "logit rows differ in width"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

/// CTC negative log-likelihood of `labels` given frame logits `[T][V]`.
pub fn ctc_loss(logits: &[Vec<f64>], labels: &[u32]) -> Result<LossOutput<Vec<Vec<f64>>>> {
    let t_len = logits.len();
    let vocab = logits.first().map_or(0, Vec::len);
    check_rows(logits, vocab, "ctc_loss")?;
    if t_len > 0 {
        check_labels(labels, vocab)?;
    }
    let zero_grad = vec![vec![0.0; vocab]; t_len];
    let lp: Vec<Vec<f64>> = logits.iter().map(|r| log_softmax(r)).collect();

    // blank-augmented target: ∅ y1 ∅ y2 … yU ∅
    let mut ext = vec![BLANK];
    for &y in labels {
        ext.push(y);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    if t_len < labels.len() + repeats || t_len == 0 {
        if t_len == 0 && labels.is_empty() {
            return Ok(LossOutput {
                loss: 0.0,
                grad: zero_grad,
            });
        }
        return Ok(LossOutput {
            loss: f64::INFINITY,
            grad: zero_grad,
        });
    }
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![vec![LOG_ZERO; s_len]; t_len];
    alpha[0][0] = lp[0][ext[0] as usize];
    if s_len > 1 {
        alpha[0][1] = lp[0][ext[1] as usize];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = lse2(a, alpha[t - 1][s - 1]);
            }
            if skip(s) {
                a = lse2(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a <= LOG_ZERO {
                LOG_ZERO
            } else {
                a + lp[t][ext[s] as usize]
            };
        }
    }
    let mut beta = vec![vec![LOG_ZERO; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = lp[t_len - 1][ext[s_len - 1] as usize];
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = lp[t_len - 1][ext[s_len - 2] as usize];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = lse2(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = lse2(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = if b <= LOG_ZERO {
                LOG_ZERO
            } else {
                b + lp[t][ext[s] as usize]
            };
        }
    }
    let mut log_p = alpha[t_len - 1][s_len - 1];
    if s_len > 1 {
        log_p = lse2(log_p, alpha[t_len - 1][s_len - 2]);
    }
    if log_p <= LOG_ZERO {
        return Ok(LossOutput {
            loss: f64::INFINITY,
            grad: zero_grad,
        });
    }
    let mut grad = vec![vec![0.0; vocab]; t_len];
    for t in 0..t_len {
        let mut occupancy = vec![LOG_ZERO; vocab];
        for s in 0..s_len {
            let k = ext[s] as usize;
            let g = alpha[t][s] + beta[t][s] - lp[t][k];
            occupancy[k] = lse2(occupancy[k], g);
        }
        for k in 0..vocab {
            let post = if occupancy[k] <= LOG_ZERO {
                0.0
            } else {
                (occupancy[k] - log_p).exp()
            };
            grad[t][k] = lp[t][k].exp() - post;
        }
    }
    Ok(LossOutput { loss: -log_p, grad })
}

/// Per-lattice-node gradients w.r.t. the blank and next-label log-probs.
struct LatticeGrad {
    loss: f64,
    lp: Vec<Vec<Vec<f64>>>,
    d_blank: Vec<Vec<f64>>,
    d_label: Vec<Vec<f64>>,
}

fn rnnt_lattice(logits: &[Vec<Vec<f64>>], labels: &[u32]) -> Result<Option<LatticeGrad>> {
    let t_len = logits.len();
    let u_len = labels.len();
    let vocab = logits.first().and_then(|r| r.first()).map_or(0, Vec::len);
    for row in logits {
        if row.len() != u_len + 1 {
            return Err(Error::shape(
                "rnnt_loss",
                format!(
                    "lattice has {} label positions, expected {}",
                    row.len(),
                    u_len + 1
                ),
            ));
        }
        check_rows(row, vocab, "rnnt_loss")?;
    }
    if t_len == 0 {
        return Ok(None);
    }
    check_labels(labels, vocab)?;
    let lp: Vec<Vec<Vec<f64>>> = logits
        .iter()
        .map(|r| r.iter().map(|z| log_softmax(z)).collect())
        .collect();
    let blank = |t: usize, u: usize| lp[t][u][BLANK as usize];
    let emit = |t: usize, u: usize| lp[t][u][labels[u] as usize];

    let mut alpha = vec![vec![LOG_ZERO; u_len + 1]; t_len];
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                alpha[0][0] = 0.0;
                continue;
            }
            let mut a = LOG_ZERO;
            if t > 0 {
                a = lse2(a, alpha[t - 1][u] + blank(t - 1, u));
            }
            if u > 0 {
                a = lse2(a, alpha[t][u - 1] + emit(t, u - 1));
            }
            alpha[t][u] = a;
        }
    }
    let mut beta = vec![vec![LOG_ZERO; u_len + 1]; t_len];
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            if t == t_len - 1 && u == u_len {
                beta[t][u] = blank(t, u);
                continue;
            }
            let mut b = LOG_ZERO;
            if t + 1 < t_len {
                b = lse2(b, beta[t + 1][u] + blank(t, u));
            }
            if u < u_len {
                b = lse2(b, beta[t][u + 1] + emit(t, u));
            }
            beta[t][u] = b;
        }
    }
    let log_p = alpha[t_len - 1][u_len] + blank(t_len - 1, u_len);
    let mut d_blank = vec![vec![0.0; u_len + 1]; t_len];
    let mut d_label = vec![vec![0.0; u_len + 1]; t_len];
    for t in 0..t_len {
        for u in 0..=u_len {
            let next = if t + 1 < t_len {
                beta[t + 1][u]
            } else if u == u_len {
                0.0
            } else {
                LOG_ZERO
            };
            if next > LOG_ZERO {
                d_blank[t][u] = -(alpha[t][u] + blank(t, u) + next - log_p).exp();
            }
            if u < u_len {
                d_label[t][u] = -(alpha[t][u] + emit(t, u) + beta[t][u + 1] - log_p).exp();
            }
        }
    }
    Ok(Some(LatticeGrad {
        loss: -log_p,
        lp,
        d_blank,
        d_label,
    }))
}

/// Maps log-prob gradients through log-softmax: `∂z_k = g_k − p_k·Σ_j g_j`.
fn logit_grad(lp: &[f64], g_blank: f64, g_label: Option<(usize, f64)>) -> Vec<f64> {
    let mut g = vec![0.0; lp.len()];
    g[BLANK as usize] += g_blank;
    if let Some((k, v)) = g_label {
        g[k] += v;
    }
    let sum: f64 = g.iter().sum();
    lp.iter()
        .zip(&g)
        .map(|(&l, &gk)| gk - l.exp() * sum)
        .collect()
}

/// RNNT negative log-likelihood over joint logits `[T][U+1][V]`.
pub fn rnnt_loss(
    logits: &[Vec<Vec<f64>>],
    labels: &[u32],
) -> Result<LossOutput<Vec<Vec<Vec<f64>>>>> {
    rnnt_loss_fastemit(logits, labels, 0.0)
}

/// RNNT loss with FastEmit regularization of weight `lambda`.
///
/// The reported value is `(1+λ)·L`. The gradient scales the label-emission
/// terms of the lattice by `(1+λ)` and leaves the blank terms unchanged, which
/// nudges probability mass toward emitting labels earlier. `λ = 0` is plain RNNT.
pub fn rnnt_loss_fastemit(
    logits: &[Vec<Vec<f64>>],
    labels: &[u32],
    lambda: f64,
) -> Result<LossOutput<Vec<Vec<Vec<f64>>>>> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Argument(format!(
            "FastEmit weight {lambda} must be ≥ 0"
        )));
    }
    let zero = || {
        logits
            .iter()
            .map(|r| r.iter().map(|z| vec![0.0; z.len()]).collect())
            .collect()
    };
    let Some(lat) = rnnt_lattice(logits, labels)? else {
        return Ok(LossOutput {
            loss: f64::INFINITY,
            grad: zero(),
        });
    };
    if !lat.loss.is_finite() || lat.loss >= -LOG_ZERO {
        return Ok(LossOutput {
            loss: f64::INFINITY,
            grad: zero(),
        });
    }
    let scale = 1.0 + lambda;
    let grad = lat
        .lp
        .iter()
        .enumerate()
        .map(|(t, row)| {
            row.iter()
                .enumerate()
                .map(|(u, lp)| {
                    let label = labels
                        .get(u)
                        .map(|&y| (y as usize, lat.d_label[t][u] * scale));
                    logit_grad(lp, lat.d_blank[t][u], label)
                })
                .collect()
        })
        .collect();
    Ok(LossOutput {
        loss: lat.loss * scale,
        grad,
    })
}

/// `α·ctc + rnnt`, the objective of the shared-encoder hybrid.
pub fn hybrid_loss(ctc: f64, rnnt: f64, alpha: f64) -> f64 {
    alpha * ctc + rnnt
}
