//! Dataset-level statistics: percentile bootstrap, Benjamini-Hochberg,
//! Pearson correlation, and area under a k-sweep curve.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("statistic needs a nonempty sample")]
    Empty,
    #[error("bootstrap needs at least one resample")]
    NoResamples,
    #[error("samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("a sample has zero variance")]
    ZeroVariance,
    #[error("k-sweep needs at least two grid points, got {0}")]
    TooFewGridPoints(usize),
    #[error("grid value {0} is duplicated or outside (0, 1]")]
    BadGridPoint(f64),
}

/// Mean computed around the first element, so a constant sample returns
/// that constant exactly.
pub fn mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return f64::NAN;
    };
    first + values.iter().map(|x| x - first).sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub b: usize,
    pub seed: u64,
}

/// 95% percentile bootstrap interval for the mean.
///
/// The endpoints are order statistics of the `b` resampled means at ranks
/// `round(0.025 (b - 1))` and `round(0.975 (b - 1))`.
pub fn bootstrap_ci(values: &[f64], b: usize, seed: u64) -> Result<BootstrapCI, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    if b == 0 {
        return Err(StatsError::NoResamples);
    }
    let n = values.len();
    let mut rng = seed::stream(seed, "", seed::tag::BOOTSTRAP, 0);
    let mut sample = alloc::vec![0.0; n];
    let mut means: Vec<f64> = (0..b)
        .map(|_| {
            for slot in sample.iter_mut() {
                *slot = values[rng.random_range(0..n)];
            }
            mean(&sample)
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let rank = |q: f64| libm::round(q * (b - 1) as f64) as usize;
    Ok(BootstrapCI {
        point: mean(values),
        lo: means[rank(0.025)],
        hi: means[rank(0.975)],
        b,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub rejected: Vec<bool>,
    /// Number of rejections `k` (the step-up threshold rank), if any.
    pub threshold_index: Option<usize>,
    pub alpha: f64,
}

impl FdrResult {
    pub fn rejections(&self) -> usize {
        self.rejected.iter().filter(|&&r| r).count()
    }
}

/// Benjamini-Hochberg step-up: reject the `k` smallest p-values for the
/// largest `k` with `p_(k) <= k alpha / m`.
pub fn bh_fdr(p_values: &[f64], alpha: f64) -> FdrResult {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let k = (1..=m)
        .rev()
        .find(|&k| p_values[order[k - 1]] <= k as f64 * alpha / m as f64);
    let mut rejected = alloc::vec![false; m];
    if let Some(k) = k {
        for &i in &order[..k] {
            rejected[i] = true;
        }
    }
    FdrResult {
        rejected,
        threshold_index: k,
        alpha,
    }
}

/// Fraction of p-values rejected by [`bh_fdr`] at `alpha`.
pub fn significance_rate(p_values: &[f64], alpha: f64) -> f64 {
    if p_values.is_empty() {
        return 0.0;
    }
    bh_fdr(p_values, alpha).rejections() as f64 / p_values.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson_coefficient(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewPoints(x.len()));
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Trapezoidal area under `value(k)` divided by the k range.
pub fn auc_over_k(points: &[(f64, f64)]) -> Result<f64, StatsError> {
    if points.len() < 2 {
        return Err(StatsError::TooFewGridPoints(points.len()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (i, &(k, _)) in pts.iter().enumerate() {
        if !(k > 0.0 && k <= 1.0) || (i > 0 && pts[i - 1].0 == k) {
            return Err(StatsError::BadGridPoint(k));
        }
    }
    let area: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / (pts[pts.len() - 1].0 - pts[0].0))
}
