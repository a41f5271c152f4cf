//! Ranking and calibration metrics.

use crate::error::{PhnError, Result};
use crate::scalar::Scalar;

fn class_counts(scores_len: usize, labels: &[u8]) -> Result<(usize, usize)> {
    if scores_len != labels.len() {
        return Err(PhnError::Dimension {
            op: "auc",
            left: vec![scores_len],
            right: vec![labels.len()],
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PhnError::UndefinedMetric(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve from the Mann–Whitney statistic, giving tied
/// scores their average rank: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn auc<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores.len(), labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].as_f64().total_cmp(&scores[b].as_f64()));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        let s = scores[order[i]].as_f64();
        while j < order.len() && scores[order[j]].as_f64() == s {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        positive_rank_sum += rank * tied_pos as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Brute-force AUC over every positive/negative pair.
pub fn auc_naive<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores.len(), labels)?;
    let mut credit = 0.0;
    for (si, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (sj, _) in scores.iter().zip(labels).filter(|(_, &l)| l != 1) {
            if si > sj {
                credit += 1.0;
            } else if si == sj {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (pos as f64 * neg as f64))
}
