//! Evaluation reports in canonical JSON.
//!
//! Schema, in key order:
//! `{auc, roc_points:[{fpr,tpr,threshold}], chosen_threshold,
//!   confusion:{tp,fp,tn,fn}, accuracy, positives, negatives}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::error::{invalid, Result};
use crate::evalmetrics::{auc_from_curve, confusion_matrix, roc_curve, youden_threshold, Confusion, RocPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub auc: f64,
    pub roc_points: Vec<RocPoint>,
    pub chosen_threshold: f64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl MetricsReport {
    /// Scores `scores` against `labels`. Without a threshold, the Youden
    /// threshold of these same scores is used.
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: Option<f64>) -> Result<Self> {
        let rc = roc_curve(scores, labels)?;
        let chosen_threshold = threshold.unwrap_or_else(|| youden_threshold(&rc));
        let confusion = confusion_matrix(scores, labels, chosen_threshold)?;
        Ok(Self {
            auc: auc_from_curve(&rc),
            accuracy: confusion.accuracy(),
            roc_points: rc.points,
            chosen_threshold,
            confusion,
            positives: rc.positives,
            negatives: rc.negatives,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.confusion;
        if c.tp + c.fn_ != self.positives {
            return Err(invalid!(
                "tp + fn = {} but there are {} positives",
                c.tp + c.fn_,
                self.positives
            ));
        }
        if c.tn + c.fp != self.negatives {
            return Err(invalid!(
                "tn + fp = {} but there are {} negatives",
                c.tn + c.fp,
                self.negatives
            ));
        }
        for (name, v) in [("auc", self.auc), ("accuracy", self.accuracy)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid!("{name} = {v} outside [0, 1]"));
            }
        }
        if !self.chosen_threshold.is_finite() {
            return Err(invalid!("chosen threshold is not finite"));
        }
        let monotone = self
            .roc_points
            .windows(2)
            .all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        if !monotone {
            return Err(invalid!("roc_points are not monotone in fpr and tpr"));
        }
        Ok(())
    }
}

pub fn write_metrics(m: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    m.validate()?;
    canonical::write(m, path)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let m: MetricsReport = canonical::read(path)?;
    m.validate()?;
    Ok(m)
}
