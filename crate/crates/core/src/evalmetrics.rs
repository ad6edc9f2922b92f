//! ROC analysis, AUC, Youden thresholds and confusion matrices.
//!
//! A score at or above the threshold predicts the positive (malignant) class.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Points sorted by descending threshold. The first point sits just above the
/// highest score, where nothing is predicted positive.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(invalid!("non-finite score {s}"));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(invalid!("label {l} is not 0 or 1"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(invalid!(
            "ROC analysis needs both classes ({positives} positive, {negatives} negative)"
        ));
    }
    Ok((positives, negatives))
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let top = scores[order[0]];
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: top.next_up(),
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        });
    }
    Ok(RocCurve {
        points,
        positives,
        negatives,
    })
}

/// Trapezoidal area under the ROC curve.
pub fn auc_from_curve(rc: &RocCurve) -> f64 {
    rc.points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(auc_from_curve(&roc_curve(scores, labels)?))
}

/// Threshold maximizing `tpr - fpr` over the observed scores; ties go to the
/// higher threshold.
pub fn youden_threshold(rc: &RocCurve) -> f64 {
    let mut best = rc.points[1];
    for p in &rc.points[2..] {
        if p.tpr - p.fpr > best.tpr - best.fpr {
            best = *p;
        }
    }
    best.threshold
}

pub fn confusion_matrix(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    if scores.is_empty() {
        return Err(invalid!("confusion matrix of an empty set"));
    }
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ordering() {
        let rc = roc_curve(&[0.9, 0.1], &[1, 0]).unwrap();
        let pts: Vec<_> = rc.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(auc_from_curve(&rc), 1.0);
    }

    #[test]
    fn equal_scores_collapse() {
        let rc = roc_curve(&[0.3; 4], &[0, 1, 0, 1]).unwrap();
        assert_eq!(rc.points.len(), 2);
        assert_eq!(auc_from_curve(&rc), 0.5);
        assert_eq!(youden_threshold(&rc), 0.3);
    }

    #[test]
    fn hand_auc_and_youden() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        let rc = roc_curve(&[0.2, 0.6, 0.7, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(youden_threshold(&rc), 0.7);
    }

    #[test]
    fn confusion_counts() {
        let c = confusion_matrix(&[0.9, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 0, 1, 0));
        assert_eq!(c.accuracy(), 1.0);
        let c = confusion_matrix(&[0.9, 0.2], &[1, 0], 0.95).unwrap();
        assert_eq!(c.tp + c.fp, 0);
    }

    #[test]
    fn single_class_rejected() {
        assert!(roc_curve(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(confusion_matrix(&[], &[], 0.5).is_err());
    }
}
