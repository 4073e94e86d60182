use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("length mismatch: {a} predictions, {b} labels")));
    }
    if a == 0 {
        return Err(Error::Metric("no samples".into()));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    same_len(pred.len(), labels.len())?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Row-wise argmax of `[n, c]` logits; ties go to the lower class.
pub fn argmax_rows(logits: &[f64], c: usize) -> Vec<usize> {
    logits
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Area under the ROC curve as the Mann-Whitney statistic, with tied scores
/// given their mid-rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    same_len(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn mse(pred: &[f64], targets: &[f64]) -> Result<f64> {
    same_len(pred.len(), targets.len())?;
    Ok(pred.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Evaluation summary; fields that do not apply to the task are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 2, 2]).unwrap(), 0.5);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert_eq!(argmax_rows(&[0.1, 0.9, 0.5, 0.5, 3.0, -1.0], 2), vec![1, 0, 0]);
    }

    #[test]
    fn auc_separation_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3, 0.3, 0.3], &[true, false, true]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.3, 0.4], &[true, true]), Err(Error::Metric(_))));
    }

    #[test]
    fn auc_matches_pair_count() {
        let s = [0.2, 0.5, 0.5, 0.9, 0.1, 0.5];
        let l = [false, true, false, true, false, true];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if l[i] && !l[j] {
                    pairs += 1.0;
                    wins += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((auc(&s, &l).unwrap() - wins / pairs).abs() < 1e-15);
    }

    #[test]
    fn mse_forced() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 2.0);
    }
}
