//! Discrimination, calibration and group-fairness metrics.
//!
//! Rates whose denominator is zero are `None` ("NotDefined") and render as
//! `NaN` in report files.

mod calibration;
mod fairness;
mod metrics;

pub use calibration::{calibration, Calibration, CalibrationBin, DEFAULT_CALIBRATION_BINS};
pub use fairness::{
    age_band, fairness, parse_fairness_report, render_fairness_gaps, render_fairness_report, AttributeReport,
    FairnessReport, FairnessRow, GroupRates, FAIRNESS_HEADER,
};
pub use metrics::{
    auprc, auroc, confusion_metrics, evaluate, render_metrics, ConfusionCounts, ConfusionMetrics, MetricReport,
    DEFAULT_THRESHOLD,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("{labels} labels but {scores} scores")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("score {value} at position {index} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("label {value} at position {index} is not 0 or 1")]
    LabelNotBinary { index: usize, value: u8 },
    #[error("attribute {attribute}: {groups} group assignments for {samples} samples")]
    GroupLength {
        attribute: String,
        groups: usize,
        samples: usize,
    },
    #[error("malformed fairness report: {0}")]
    Parse(String),
}

pub(crate) fn check_inputs(labels: &[u8], scores: &[f64]) -> Result<(), EvalError> {
    if labels.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
        return Err(EvalError::LabelNotBinary { index, value });
    }
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::ScoreOutOfRange { index, value });
    }
    Ok(())
}

pub(crate) fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}
