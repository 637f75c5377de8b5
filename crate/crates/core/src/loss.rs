//! Training objectives: count regression, density classification and
//! segmentation-map supervision, plus their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Slack allowed on probabilities before they are rejected as malformed.
const PROB_TOLERANCE: f64 = 1e-9;

/// The three loss terms and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub regressor: f64,
    pub ch: f64,
    pub sm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(regressor: f64, ch: f64, sm: f64) -> Self {
        LossBreakdown {
            regressor,
            ch,
            sm,
            total: regressor + ch + sm,
        }
    }
}

/// Per-term weights; the unweighted sum is the default objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub regressor: f64,
    pub ch: f64,
    pub sm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            regressor: 1.0,
            ch: 1.0,
            sm: 1.0,
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn check_probability(p: f64) -> Result<()> {
    if !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p) {
        return Err(Error::Argument(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// `(1/T)·Σ (pred − gt)²`.
pub fn regression_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Argument(format!(
            "regression loss needs equal nonempty inputs, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(sum / pred.len() as f64)
}

/// Batch mean of `−Σᵢ yᵢ·log ŷᵢ` over rows of `k` probabilities.
pub fn classification_loss(probs: &[f64], onehot: &[f64], k: usize, eps: f64) -> Result<f64> {
    if probs.len() != onehot.len() || probs.is_empty() || !probs.len().is_multiple_of(k) {
        return Err(Error::Argument(format!(
            "classification loss needs matching rows of {k}, got {} and {}",
            probs.len(),
            onehot.len()
        )));
    }
    let mut sum = 0.0;
    for (&p, &y) in probs.iter().zip(onehot) {
        check_probability(p)?;
        if y != 0.0 {
            sum -= y * p.clamp(eps, 1.0 - eps).ln();
        }
    }
    Ok(sum / (probs.len() / k) as f64)
}

/// Mean binary cross entropy over all pixels.
pub fn segmentation_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Argument(format!(
            "segmentation loss needs equal nonempty inputs, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let mut sum = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        check_probability(p)?;
        let q = p.clamp(eps, 1.0 - eps);
        sum -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
    }
    Ok(sum / pred.len() as f64)
}

/// Full objective evaluated on plain values.
///
/// `pred_sms`/`gt_segmaps` hold one flattened map per supervised branch; the
/// segmentation term is the mean of the per-branch BCEs (zero when empty).
pub fn loss_total(
    pred_count: &[f64],
    gt_count: &[f64],
    pred_probs: &[f64],
    gt_class_onehot: &[f64],
    pred_sms: &[Vec<f64>],
    gt_segmaps: &[Vec<f64>],
) -> Result<LossBreakdown> {
    if pred_sms.len() != gt_segmaps.len() {
        return Err(Error::Argument(format!(
            "{} segmentation maps against {} targets",
            pred_sms.len(),
            gt_segmaps.len()
        )));
    }
    let regressor = regression_loss(pred_count, gt_count)?;
    let ch = classification_loss(pred_probs, gt_class_onehot, 4, PROB_EPS)?;
    let sm = if pred_sms.is_empty() {
        0.0
    } else {
        let mut s = 0.0;
        for (p, t) in pred_sms.iter().zip(gt_segmaps) {
            s += segmentation_loss(p, t, PROB_EPS)?;
        }
        s / pred_sms.len() as f64
    };
    Ok(LossBreakdown::new(regressor, ch, sm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_prediction_has_near_zero_ce() {
        let ce =
            classification_loss(&[0.0, 1.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], 4, PROB_EPS).unwrap();
        assert!(ce <= 2.0 * PROB_EPS);
    }

    #[test]
    fn uniform_prediction_has_ln4_ce() {
        for class in 0..4 {
            let mut y = [0.0; 4];
            y[class] = 1.0;
            let ce = classification_loss(&[0.25; 4], &y, 4, PROB_EPS).unwrap();
            assert_abs_diff_eq!(ce, 4f64.ln(), epsilon = 1e-12);
            assert_abs_diff_eq!(ce, 1.3863, epsilon = 1e-4);
        }
    }

    #[test]
    fn single_sample_squared_error() {
        assert_eq!(regression_loss(&[3.0], &[5.0]).unwrap(), 4.0);
    }

    #[test]
    fn rejects_malformed_probability() {
        assert!(
            classification_loss(&[1.5, -0.5, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], 4, PROB_EPS)
                .is_err()
        );
        assert!(segmentation_loss(&[f64::NAN], &[1.0], PROB_EPS).is_err());
    }

    #[test]
    fn breakdown_sums_exactly() {
        let b = loss_total(
            &[3.0, 1.0],
            &[5.0, 1.5],
            &[0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25],
            &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            &[vec![0.2, 0.9], vec![0.5]],
            &[vec![0.0, 1.0], vec![1.0]],
        )
        .unwrap();
        assert_eq!(b.total, b.regressor + b.ch + b.sm);
        assert!(b.regressor >= 0.0 && b.ch >= 0.0 && b.sm >= 0.0);
    }

    #[test]
    fn mismatched_segmaps_rejected() {
        let r = loss_total(
            &[1.0],
            &[1.0],
            &[0.25; 4],
            &[1.0, 0.0, 0.0, 0.0],
            &[vec![0.5]],
            &[],
        );
        assert!(r.is_err());
    }
}
