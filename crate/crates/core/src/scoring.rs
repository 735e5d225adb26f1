//! Proper scoring rules and error summaries for probabilistic predictions.

use crate::error::{Error, Result};

const SQRT_PI: f64 = 1.772453850905516;
const SQRT_2: f64 = 1.4142135623730951;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

#[inline]
fn phi(x: f64) -> f64 {
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

#[inline]
fn cap_phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        Err(Error::DimensionMismatch { expected: a, got: b })
    } else {
        Ok(())
    }
}

/// Mean absolute prediction error.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_same_len(truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::EmptyInput("mape needs at least one pair".into()));
    }
    let n = truth.len() as f64;
    Ok(truth
        .iter()
        .zip(pred)
        .map(|(t, p)| libm::fabs(t - p))
        .sum::<f64>()
        / n)
}

/// Root mean squared prediction error.
pub fn rmspe(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_same_len(truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::EmptyInput("rmspe needs at least one pair".into()));
    }
    let n = truth.len() as f64;
    let mse = truth
        .iter()
        .zip(pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        / n;
    Ok(libm::sqrt(mse))
}

/// Continuous ranked probability score of a Gaussian `N(mean, sd^2)`
/// against a realised value (closed form).
pub fn crps_gaussian(y: f64, mean: f64, sd: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::InvalidParameter("crps_gaussian needs sd > 0".into()));
    }
    let z = (y - mean) / sd;
    Ok(sd * (z * (2.0 * cap_phi(z) - 1.0) + 2.0 * phi(z) - 1.0 / SQRT_PI))
}

/// Sample-based CRPS estimator:
/// `mean |x_i - y| - (1/(2 M^2)) sum_ij |x_i - x_j|`.
pub fn crps_samples(y: f64, samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("crps_samples needs samples".into()));
    }
    let m = samples.len() as f64;
    let term1 = samples.iter().map(|&x| libm::fabs(x - y)).sum::<f64>() / m;
    let mut term2 = 0.0;
    for &a in samples {
        for &b in samples {
            term2 += libm::fabs(a - b);
        }
    }
    Ok(term1 - term2 / (2.0 * m * m))
}

/// 95% interval score: width plus `2/0.05 = 40` times any exceedance.
pub fn interval_score95(y: f64, lower: f64, upper: f64) -> Result<f64> {
    if lower > upper {
        return Err(Error::InvalidParameter(
            "interval bounds must satisfy lower <= upper".into(),
        ));
    }
    let mut s = upper - lower;
    if y < lower {
        s += 40.0 * (lower - y);
    }
    if y > upper {
        s += 40.0 * (y - upper);
    }
    Ok(s)
}

/// Threat score (critical success index) for exceedance-below-threshold
/// events: positives are values strictly below `threshold`; returns
/// `TP / (TP + FP + FN)`, or 0 when that denominator is 0.
pub fn threat_score(truth: &[f64], pred: &[f64], threshold: f64) -> Result<f64> {
    check_same_len(truth.len(), pred.len())?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&t, &p) in truth.iter().zip(pred) {
        let obs = t < threshold;
        let hit = p < threshold;
        match (obs, hit) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = tp + fp + fn_;
    if denom == 0 {
        Ok(0.0)
    } else {
        Ok(tp as f64 / denom as f64)
    }
}

/// Aggregate scores over a vector of predictive summaries.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoreReport {
    pub mape: f64,
    pub rmspe: f64,
    pub crps: f64,
    pub interval_score95: f64,
}

/// Mean scores of Gaussian predictions against held-out truth.
pub fn score_gaussian_predictions(
    truth: &[f64],
    summary: &crate::domain::PredictiveSummary,
) -> Result<ScoreReport> {
    check_same_len(truth.len(), summary.mean.len())?;
    if truth.is_empty() {
        return Err(Error::EmptyInput("scoring needs at least one pair".into()));
    }
    let n = truth.len() as f64;
    let mut crps = 0.0;
    let mut is95 = 0.0;
    for i in 0..truth.len() {
        crps += crps_gaussian(truth[i], summary.mean[i], summary.sd[i])?;
        is95 += interval_score95(truth[i], summary.lower95[i], summary.upper95[i])?;
    }
    Ok(ScoreReport {
        mape: mape(truth, &summary.mean)?,
        rmspe: rmspe(truth, &summary.mean)?,
        crps: crps / n,
        interval_score95: is95 / n,
    })
}
