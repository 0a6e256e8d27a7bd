use serde::{Deserialize, Serialize};

use super::NnError;

/// Per-frame log-probabilities over the charset plus blank (last class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitMatrix {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogitMatrix {
    /// Wraps row-major `frames × classes` log-probabilities. `-inf` is
    /// allowed, NaN and `+inf` are not.
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if classes < 2 || data.len() != frames * classes {
            return Err(NnError::Shape(format!(
                "logit matrix {frames}x{classes} cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(NnError::NonFinite("logit matrix".into()));
        }
        Ok(LogitMatrix {
            frames,
            classes,
            data,
        })
    }

    /// Log-softmax of raw scores, row by row.
    pub fn from_scores(frames: usize, classes: usize, scores: &[f64]) -> Result<Self, NnError> {
        if scores.len() != frames * classes {
            return Err(NnError::Shape("score matrix size".into()));
        }
        let mut data = Vec::with_capacity(scores.len());
        for row in scores.chunks_exact(classes.max(1)) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        LogitMatrix::new(frames, classes, data)
    }

    /// Natural log of row-major probabilities.
    pub fn from_probabilities(frames: usize, classes: usize, probs: &[f64]) -> Result<Self, NnError> {
        LogitMatrix::new(frames, classes, probs.iter().map(|p| p.ln()).collect())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Index of the blank class.
    pub fn blank(&self) -> u32 {
        (self.classes - 1) as u32
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.classes + k]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Largest `|logsumexp(row)|` over all frames.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.frames)
            .map(|t| log_sum_exp(self.row(t)).abs())
            .fold(0.0, f64::max)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
