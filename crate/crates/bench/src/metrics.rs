//! Error and latency statistics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("shape mismatch: {0} values against {1} exact")]
pub struct ShapeMismatch(pub usize, pub usize);

/// Average relative error `(1/n) Σ |v − a| / max(v, a)` over all cells.
///
/// A cell where both sides are 0 (or both empty) contributes 0. A cell empty
/// on one side only contributes 1. Magnitudes are used in the denominator so
/// negative sums stay in `[0, 2]`.
pub fn are(values: &[Option<f64>], exact: &[Option<f64>]) -> Result<f64, ShapeMismatch> {
    if values.len() != exact.len() {
        return Err(ShapeMismatch(values.len(), exact.len()));
    }
    if values.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = values.iter().zip(exact).map(|(v, a)| relative_error(*v, *a)).sum();
    Ok(total / values.len() as f64)
}

pub fn relative_error(v: Option<f64>, a: Option<f64>) -> f64 {
    match (v, a) {
        (None, None) => 0.0,
        (Some(v), Some(a)) => {
            let den = v.abs().max(a.abs());
            if den == 0.0 {
                0.0
            } else {
                (v - a).abs() / den
            }
        }
        _ => 1.0,
    }
}

/// Summary of a latency sample, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub stdev: f64,
    pub max: f64,
    pub p90: f64,
}

impl LatencyStats {
    pub fn from_micros(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return LatencyStats {
                count: 0,
                median: f64::NAN,
                mean: f64::NAN,
                stdev: f64::NAN,
                max: f64::NAN,
                p90: f64::NAN,
            };
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        LatencyStats {
            count: n,
            median: quantile(&s, 0.5),
            mean,
            stdev: var.sqrt(),
            max: s[n - 1],
            p90: quantile(&s, 0.9),
        }
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + f * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.5)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `|found ∩ truth| / |truth|`; 1 when `truth` is empty. Both sorted.
pub fn recall(found: &[u32], truth: &[u32]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hit = truth.iter().filter(|t| found.binary_search(t).is_ok()).count();
    hit as f64 / truth.len() as f64
}
