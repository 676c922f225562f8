//! Word error rate and encoder-induced latency.

use serde::{Deserialize, Serialize};

use crate::context::LatencyModel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
    /// Percent.
    pub wer: f64,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Cost {
    total: usize,
    // lexicographic tie-break: more substitutions first, then more deletions
    neg_subs: isize,
    neg_dels: isize,
}

/// Levenshtein alignment over whitespace-separated, case-sensitive words.
///
/// Among minimum-edit alignments, the one with the most substitutions is
/// chosen, then the one with the most deletions.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r: Vec<&str> = reference.split_ascii_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_ascii_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Argument("reference transcript is empty".into()));
    }
    let step = |c: Cost, s: isize, d: isize| Cost {
        total: c.total + 1,
        neg_subs: c.neg_subs - s,
        neg_dels: c.neg_dels - d,
    };
    let zero = Cost {
        total: 0,
        neg_subs: 0,
        neg_dels: 0,
    };
    // cell (i, j): reference prefix i aligned to hypothesis prefix j
    let mut table = vec![vec![zero; h.len() + 1]; r.len() + 1];
    for i in 1..=r.len() {
        table[i][0] = step(table[i - 1][0], 0, 1);
    }
    for j in 1..=h.len() {
        table[0][j] = step(table[0][j - 1], 0, 0);
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let diag = if r[i - 1] == h[j - 1] {
                table[i - 1][j - 1]
            } else {
                step(table[i - 1][j - 1], 1, 0)
            };
            let del = step(table[i - 1][j], 0, 1);
            let ins = step(table[i][j - 1], 0, 0);
            table[i][j] = diag.min(del).min(ins);
        }
    }
    let best = table[r.len()][h.len()];
    let substitutions = (-best.neg_subs) as usize;
    let deletions = (-best.neg_dels) as usize;
    let insertions = best.total - substitutions - deletions;
    Ok(WerBreakdown {
        substitutions,
        deletions,
        insertions,
        reference_words: r.len(),
        wer: best.total as f64 / r.len() as f64 * 100.0,
    })
}

/// Mean wait, in ms, between each token's audio being complete and the
/// encoder having seen its needed look-ahead. Both inputs are mel frame
/// indices, one entry per token. Zero tokens give zero latency.
pub fn eil(emit_frames: &[usize], ready_frames: &[usize], lm: &LatencyModel) -> Result<f64> {
    if emit_frames.len() != ready_frames.len() {
        return Err(Error::Argument(format!(
            "{} emit frames for {} tokens",
            emit_frames.len(),
            ready_frames.len()
        )));
    }
    if emit_frames.is_empty() {
        return Ok(0.0);
    }
    let total: u64 = emit_frames
        .iter()
        .zip(ready_frames)
        .map(|(&e, &r)| e.saturating_sub(r) as u64)
        .sum();
    Ok(total as f64 * lm.frame_shift_ms as f64 / emit_frames.len() as f64)
}
