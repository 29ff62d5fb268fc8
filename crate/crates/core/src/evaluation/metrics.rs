use serde::Serialize;

use super::{calibration, check_inputs, ratio, EvalError, DEFAULT_CALIBRATION_BINS};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Predicted positive when `score >= threshold`.
    pub fn tally(labels: &[u8], scores: &[f64], threshold: f64) -> Self {
        let mut c = ConfusionCounts::default();
        for (&l, &s) in labels.iter().zip(scores) {
            match (l == 1, s >= threshold) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.fn_ + self.tp)
    }

    /// Positive (prediction) rate.
    pub fn pr(&self) -> Option<f64> {
        ratio(self.tp + self.fp, self.n())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn npv(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fn_)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.n())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub npv: Option<f64>,
    pub threshold: f64,
}

pub fn confusion_metrics(labels: &[u8], scores: &[f64], threshold: f64) -> Result<ConfusionMetrics, EvalError> {
    check_inputs(labels, scores)?;
    let counts = ConfusionCounts::tally(labels, scores, threshold);
    Ok(ConfusionMetrics {
        counts,
        accuracy: counts.accuracy().expect("non-empty"),
        precision: counts.precision(),
        recall: counts.tpr(),
        npv: counts.npv(),
        threshold,
    })
}

/// Indices sorted by descending score, ties adjacent.
fn by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn auroc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // walk ascending; u accumulates doubled pair wins so it stays integral
    let mut idx = by_score_desc(scores);
    idx.reverse();
    let mut negatives_below = 0u64;
    let mut doubled_u = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (mut p, mut n) = (0u64, 0u64);
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        doubled_u += 2 * p * negatives_below + p * n;
        negatives_below += n;
    }
    Some(doubled_u as f64 / (2 * pos as u64 * neg as u64) as f64)
}

/// Average precision: step-wise sum of precision × recall increment over the
/// distinct score thresholds, highest first.
pub fn auprc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return None;
    }
    let idx = by_score_desc(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub n: usize,
    pub positives: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub npv: Option<f64>,
    pub ece: f64,
    pub mce: f64,
    pub threshold: f64,
    pub calibration_bins: usize,
}

pub fn evaluate(
    labels: &[u8],
    scores: &[f64],
    threshold: f64,
    calibration_bins: usize,
) -> Result<MetricReport, EvalError> {
    let cm = confusion_metrics(labels, scores, threshold)?;
    let bins = if calibration_bins == 0 {
        DEFAULT_CALIBRATION_BINS
    } else {
        calibration_bins
    };
    let cal = calibration(labels, scores, bins)?;
    Ok(MetricReport {
        n: labels.len(),
        positives: labels.iter().filter(|&&l| l == 1).count(),
        auroc: auroc(labels, scores),
        auprc: auprc(labels, scores),
        accuracy: cm.accuracy,
        precision: cm.precision,
        recall: cm.recall,
        npv: cm.npv,
        ece: cal.ece,
        mce: cal.mce,
        threshold,
        calibration_bins: bins,
    })
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| format!("{x:.4}"))
}

/// `metric,value` table, four decimals, `NaN` for undefined metrics.
pub fn render_metrics(r: &MetricReport) -> String {
    let rows: [(&str, String); 12] = [
        ("n", r.n.to_string()),
        ("positives", r.positives.to_string()),
        ("auroc", fmt_rate(r.auroc)),
        ("auprc", fmt_rate(r.auprc)),
        ("accuracy", fmt_rate(Some(r.accuracy))),
        ("precision", fmt_rate(r.precision)),
        ("recall", fmt_rate(r.recall)),
        ("npv", fmt_rate(r.npv)),
        ("ece", fmt_rate(Some(r.ece))),
        ("mce", fmt_rate(Some(r.mce))),
        ("threshold", r.threshold.to_string()),
        ("calibration_bins", r.calibration_bins.to_string()),
    ];
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        s.push_str(k);
        s.push(',');
        s.push_str(&v);
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    // O(n²) pair count.
    fn pairs_oracle(labels: &[u8], scores: &[f64]) -> Option<f64> {
        let (mut wins, mut total) = (0.0, 0.0);
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    total += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        (total > 0.0).then(|| wins / total)
    }

    #[test]
    fn auroc_canonical_instance() {
        let labels = [0, 0, 1, 1];
        let scores = [0.1, 0.4, 0.35, 0.8];
        assert_eq!(pairs_oracle(&labels, &scores), Some(0.75));
        assert_eq!(auroc(&labels, &scores), Some(0.75));
        assert_eq!(auroc(&labels, &[0.1, 0.2, 0.3, 0.4]), Some(1.0));
        assert_eq!(auroc(&labels, &[0.3; 4]), Some(0.5));
        assert_eq!(auroc(&[1, 1], &[0.3, 0.4]), None);
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0, 1], &[0.1, 0.9]), Some(1.0));
        // ranking 1,0,1: recall .5 at precision 1, recall 1 at precision 2/3
        let ap = auprc(&[1, 0, 1], &[0.9, 0.8, 0.7]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        // all tied: single threshold, precision = prevalence
        assert_eq!(auprc(&[1, 0, 0, 0], &[0.5; 4]), Some(0.25));
        assert_eq!(auprc(&[0, 0], &[0.5, 0.6]), None);
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_metrics(&[1, 0, 1, 0], &[0.9, 0.1, 0.8, 0.2], 0.5).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall), (1.0, Some(1.0), Some(1.0)));

        let m = confusion_metrics(&[1, 0, 0], &[0.1, 0.2, 0.3], 0.5).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.npv, Some(2.0 / 3.0));

        let m = confusion_metrics(&[1, 0], &[0.4, 0.6], 0.5).unwrap();
        assert_eq!(m.accuracy, 0.0);

        assert_eq!(confusion_metrics(&[], &[], 0.5), Err(EvalError::Empty));
        assert!(matches!(
            confusion_metrics(&[1], &[1.3], 0.5),
            Err(EvalError::ScoreOutOfRange { .. })
        ));
    }

    #[test]
    fn metrics_render_with_nan() {
        let r = evaluate(&[0, 0, 0], &[0.1, 0.2, 0.3], 0.5, 10).unwrap();
        let text = render_metrics(&r);
        assert!(text.contains("auroc,NaN\n"));
        assert!(text.contains("precision,NaN\n"));
        assert!(text.contains("accuracy,1.0000\n"));
    }

    proptest::proptest! {
        #[test]
        fn auroc_matches_pairs(pairs in proptest::collection::vec((0u8..2, 0u32..20), 2..120)) {
            let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.1) / 19.0).collect();
            let got = auroc(&labels, &scores);
            let want = pairs_oracle(&labels, &scores);
            match (got, want) {
                (Some(g), Some(w)) => proptest::prop_assert!((g - w).abs() <= 1e-12),
                (g, w) => proptest::prop_assert_eq!(g, w),
            }
        }

        #[test]
        fn auroc_invariant_under_monotone_transform(pairs in proptest::collection::vec((0u8..2, 0.0f64..1.0), 2..80)) {
            let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let scores: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let squashed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
            proptest::prop_assert_eq!(auroc(&labels, &scores), auroc(&labels, &squashed));
        }
    }
}
