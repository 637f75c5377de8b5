//! Count-error metrics and the classifier confusion analysis.

use serde::{Deserialize, Serialize};

use crate::data::CrowdClass;
use crate::error::{Error, Result};

/// `(MAE, RMSE)` over paired predicted and ground-truth counts.
pub fn mae_rmse(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Argument(format!(
            "metrics need equal nonempty lists, got {} predictions and {} ground truths",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let d = g - p;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Fraction of patches predicted as this class.
    pub usage: f64,
    pub support: usize,
}

/// 4×4 confusion matrix, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[usize; 4]; 4],
}

impl Confusion {
    pub fn record(&mut self, gt: CrowdClass, pred: CrowdClass) {
        self.counts[gt.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Per-class precision, recall and predicted-class usage. Classes with no
    /// predictions (or no support) report `None` precision (recall).
    pub fn per_class(&self) -> Vec<ClassStats> {
        let total = self.total();
        CrowdClass::ALL
            .iter()
            .map(|&c| {
                let i = c.index();
                let tp = self.counts[i][i];
                let predicted: usize = (0..4).map(|r| self.counts[r][i]).sum();
                let support: usize = self.counts[i].iter().sum();
                ClassStats {
                    class: c.to_string(),
                    precision: (predicted > 0).then(|| tp as f64 / predicted as f64),
                    recall: (support > 0).then(|| tp as f64 / support as f64),
                    usage: if total > 0 {
                        predicted as f64 / total as f64
                    } else {
                        0.0
                    },
                    support,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_lists_have_zero_error() {
        assert_eq!(
            mae_rmse(&[1.0, 2.0, 3.5], &[1.0, 2.0, 3.5]).unwrap(),
            (0.0, 0.0)
        );
    }

    #[test]
    fn hand_case() {
        let (mae, rmse) = mae_rmse(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert_abs_diff_eq!(mae, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rmse, 10f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn single_element_mae_equals_rmse() {
        assert_eq!(mae_rmse(&[5.0], &[9.0]).unwrap(), (4.0, 4.0));
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(mae_rmse(&[], &[]).is_err());
        assert!(mae_rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn usage_partitions_patches() {
        let mut c = Confusion::default();
        c.record(CrowdClass::Ncp, CrowdClass::Ncp);
        c.record(CrowdClass::Hcp, CrowdClass::Mcp);
        c.record(CrowdClass::Lcp, CrowdClass::Lcp);
        let stats = c.per_class();
        let usage: f64 = stats.iter().map(|s| s.usage).sum();
        assert_abs_diff_eq!(usage, 1.0, epsilon = 1e-12);
        assert_eq!(stats[3].recall, Some(0.0));
        assert_eq!(stats[3].precision, None);
        assert_eq!(stats[2].precision, Some(0.0));
    }
}
