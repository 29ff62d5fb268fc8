use serde::Serialize;

use super::{check_inputs, EvalError};

pub const DEFAULT_CALIBRATION_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_score: f64,
    pub positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub ece: f64,
    pub mce: f64,
    /// Non-empty bins only.
    pub bins: Vec<CalibrationBin>,
}

/// Equal-width binning over `[0, 1]`; a score of exactly 1 falls in the last
/// bin. ECE weights each bin's |mean score − positive rate| by its share of
/// samples; MCE is the largest such gap.
pub fn calibration(labels: &[u8], scores: &[f64], n_bins: usize) -> Result<Calibration, EvalError> {
    check_inputs(labels, scores)?;
    let n_bins = n_bins.max(1);
    let mut count = vec![0usize; n_bins];
    let mut score_sum = vec![0.0f64; n_bins];
    let mut positives = vec![0usize; n_bins];
    for (&l, &s) in labels.iter().zip(scores) {
        let b = ((s * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        score_sum[b] += s;
        positives[b] += usize::from(l);
    }
    let n = labels.len() as f64;
    let mut out = Calibration {
        ece: 0.0,
        mce: 0.0,
        bins: Vec::new(),
    };
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let c = count[b] as f64;
        let mean_score = score_sum[b] / c;
        let positive_rate = positives[b] as f64 / c;
        let gap = (mean_score - positive_rate).abs();
        out.ece += c / n * gap;
        out.mce = out.mce.max(gap);
        out.bins.push(CalibrationBin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count: count[b],
            mean_score,
            positive_rate,
        });
    }
    Ok(out)
}
