use std::collections::BTreeMap;

use serde::Serialize;

use super::{check_inputs, ConfusionCounts, EvalError};

pub const FAIRNESS_HEADER: &str = "Sensitive Attribute,Group,TPR,TNR,FPR,FNR,PR";

/// Decade band; the first band starts at the adult cutoff and everything
/// from 90 up lands in "90-100".
pub fn age_band(age: i64) -> String {
    match age {
        a if a < 18 => "0-18".to_string(),
        a if a < 30 => "18-30".to_string(),
        a if a >= 90 => "90-100".to_string(),
        a => {
            let lo = a / 10 * 10;
            format!("{}-{}", lo, lo + 10)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRates {
    pub group: String,
    pub counts: ConfusionCounts,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub pr: Option<f64>,
}

impl GroupRates {
    pub fn from_counts(group: impl Into<String>, counts: ConfusionCounts) -> Self {
        GroupRates {
            group: group.into(),
            counts,
            tpr: counts.tpr(),
            tnr: counts.tnr(),
            fpr: counts.fpr(),
            fnr: counts.fnr(),
            pr: counts.pr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeReport {
    pub attribute: String,
    pub groups: Vec<GroupRates>,
    pub demographic_parity_gap: f64,
    pub equalized_opportunity_gap: f64,
    pub equalized_odds_gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FairnessReport {
    pub attributes: Vec<AttributeReport>,
    pub warnings: Vec<String>,
}

fn spread(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.len() < 2 {
        return 0.0;
    }
    let max = defined.iter().copied().fold(f64::MIN, f64::max);
    let min = defined.iter().copied().fold(f64::MAX, f64::min);
    max - min
}

impl AttributeReport {
    pub fn from_groups(attribute: impl Into<String>, groups: Vec<GroupRates>) -> Self {
        let tpr_gap = spread(groups.iter().map(|g| g.tpr));
        let fpr_gap = spread(groups.iter().map(|g| g.fpr));
        AttributeReport {
            attribute: attribute.into(),
            demographic_parity_gap: spread(groups.iter().map(|g| g.pr)),
            equalized_opportunity_gap: tpr_gap,
            equalized_odds_gap: tpr_gap.max(fpr_gap),
            groups,
        }
    }
}

/// Per-group confusion rates for each `(attribute, assignment)` pair, groups
/// listed in lexicographic order.
pub fn fairness(
    labels: &[u8],
    scores: &[f64],
    threshold: f64,
    attributes: &[(String, Vec<String>)],
) -> Result<FairnessReport, EvalError> {
    check_inputs(labels, scores)?;
    let mut report = FairnessReport::default();
    for (attribute, assignment) in attributes {
        if assignment.len() != labels.len() {
            return Err(EvalError::GroupLength {
                attribute: attribute.clone(),
                groups: assignment.len(),
                samples: labels.len(),
            });
        }
        let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, g) in assignment.iter().enumerate() {
            members.entry(g.as_str()).or_default().push(i);
        }
        if members.len() < 2 {
            report.warnings.push(format!(
                "attribute {attribute} has a single group; fairness gaps reported as 0"
            ));
        }
        let groups = members
            .into_iter()
            .map(|(g, idx)| {
                let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                GroupRates::from_counts(g, ConfusionCounts::tally(&l, &s, threshold))
            })
            .collect();
        report
            .attributes
            .push(AttributeReport::from_groups(attribute.clone(), groups));
    }
    Ok(report)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| format!("{x:.4}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_fairness_report(report: &FairnessReport) -> String {
    let mut out = String::from(FAIRNESS_HEADER);
    out.push('\n');
    for a in &report.attributes {
        for g in &a.groups {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&a.attribute),
                csv_field(&g.group),
                cell(g.tpr),
                cell(g.tnr),
                cell(g.fpr),
                cell(g.fnr),
                cell(g.pr)
            ));
        }
    }
    out
}

pub fn render_fairness_gaps(report: &FairnessReport) -> String {
    let mut out =
        String::from("Sensitive Attribute,Demographic Parity Gap,Equalized Opportunity Gap,Equalized Odds Gap\n");
    for a in &report.attributes {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4}\n",
            csv_field(&a.attribute),
            a.demographic_parity_gap,
            a.equalized_opportunity_gap,
            a.equalized_odds_gap
        ));
    }
    out
}

/// One parsed line of a rendered fairness report.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessRow {
    pub attribute: String,
    pub group: String,
    /// TPR, TNR, FPR, FNR, PR.
    pub rates: [Option<f64>; 5],
}

pub fn parse_fairness_report(text: &str) -> Result<Vec<FairnessRow>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| EvalError::Parse(e.to_string()))?;
    let expected: Vec<&str> = FAIRNESS_HEADER.split(',').collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(EvalError::Parse(format!("unexpected header {:?}", headers)));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EvalError::Parse(e.to_string()))?;
        let mut rates = [None; 5];
        for (k, slot) in rates.iter_mut().enumerate() {
            let raw = &rec[k + 2];
            *slot = if raw == "NaN" {
                None
            } else {
                Some(
                    raw.parse::<f64>()
                        .map_err(|_| EvalError::Parse(format!("bad rate {raw:?}")))?,
                )
            };
        }
        rows.push(FairnessRow {
            attribute: rec[0].to_string(),
            group: rec[1].to_string(),
            rates,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn two_group_example() {
        let labels = [1, 0, 1, 0, 1, 0];
        let scores = [1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let attrs = vec![("g".to_string(), groups(&["A", "A", "A", "A", "B", "B"]))];
        let r = fairness(&labels, &scores, 0.5, &attrs).unwrap();
        let a = &r.attributes[0];
        assert_eq!(
            (a.groups[0].tpr, a.groups[0].fpr, a.groups[0].pr),
            (Some(0.5), Some(0.5), Some(0.5))
        );
        assert_eq!(
            (a.groups[1].tpr, a.groups[1].fpr, a.groups[1].pr),
            (Some(1.0), Some(0.0), Some(0.5))
        );
        assert_eq!(a.demographic_parity_gap, 0.0);
        assert_eq!(a.equalized_opportunity_gap, 0.5);
        assert_eq!(a.equalized_odds_gap, 0.5);
    }

    #[test]
    fn no_positives_is_undefined() {
        let attrs = vec![("e".to_string(), groups(&["X", "X", "Y"]))];
        let r = fairness(&[0, 0, 1], &[0.2, 0.7, 0.9], 0.5, &attrs).unwrap();
        assert_eq!(r.attributes[0].groups[0].tpr, None);
        let text = render_fairness_report(&r);
        assert!(text.contains("e,X,NaN,0.5000,0.5000,NaN,0.5000\n"), "{text}");
    }

    #[test]
    fn single_group_warns() {
        let attrs = vec![("g".to_string(), groups(&["F", "F"]))];
        let r = fairness(&[1, 0], &[0.9, 0.1], 0.5, &attrs).unwrap();
        assert_eq!(r.attributes[0].equalized_odds_gap, 0.0);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn empty_report_is_header_only() {
        let text = render_fairness_report(&FairnessReport::default());
        assert_eq!(text, format!("{FAIRNESS_HEADER}\n"));
        assert!(parse_fairness_report(&text).unwrap().is_empty());
    }

    #[test]
    fn rendered_report_parses_back() {
        let attrs = vec![
            (
                "ethnicity".to_string(),
                groups(&["WHITE", "ASIAN", "WHITE", "OTHER, MIXED"]),
            ),
            ("gender".to_string(), groups(&["F", "M", "M", "F"])),
        ];
        let r = fairness(&[1, 0, 1, 0], &[0.9, 0.6, 0.2, 0.1], 0.5, &attrs).unwrap();
        let rows = parse_fairness_report(&render_fairness_report(&r)).unwrap();
        let mut k = 0;
        for a in &r.attributes {
            for g in &a.groups {
                let row = &rows[k];
                assert_eq!((&row.attribute, &row.group), (&a.attribute, &g.group));
                for (got, want) in row.rates.iter().zip([g.tpr, g.tnr, g.fpr, g.fnr, g.pr]) {
                    match (got, want) {
                        (Some(x), Some(y)) => assert!((x - y).abs() <= 5e-5),
                        (x, y) => assert_eq!(*x, y),
                    }
                }
                k += 1;
            }
        }
        assert_eq!(k, rows.len());
    }

    #[test]
    fn age_bands() {
        assert_eq!(age_band(18), "18-30");
        assert_eq!(age_band(29), "18-30");
        assert_eq!(age_band(30), "30-40");
        assert_eq!(age_band(89), "80-90");
        assert_eq!(age_band(91), "90-100");
    }

    proptest::proptest! {
        #[test]
        fn weighted_pr_equals_overall(rows in proptest::collection::vec((0u8..2, 0.0f64..1.0, 0usize..4), 1..150)) {
            let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
            let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let assign: Vec<String> = rows.iter().map(|r| format!("g{}", r.2)).collect();
            let r = fairness(&labels, &scores, 0.5, &[("a".to_string(), assign)]).unwrap();
            let n = labels.len() as f64;
            let weighted: f64 = r.attributes[0].groups.iter()
                .map(|g| g.counts.n() as f64 * g.pr.unwrap()).sum::<f64>() / n;
            let overall = ConfusionCounts::tally(&labels, &scores, 0.5).pr().unwrap();
            proptest::prop_assert!((weighted - overall).abs() < 1e-12);
        }

        #[test]
        fn parity_gap_ignores_group_names(rows in proptest::collection::vec((0u8..2, 0.0f64..1.0, 0usize..4), 1..100)) {
            let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
            let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let a: Vec<String> = rows.iter().map(|r| format!("g{}", r.2)).collect();
            let b: Vec<String> = rows.iter().map(|r| format!("h{}", 3 - r.2)).collect();
            let ra = fairness(&labels, &scores, 0.5, &[("x".to_string(), a)]).unwrap();
            let rb = fairness(&labels, &scores, 0.5, &[("x".to_string(), b)]).unwrap();
            proptest::prop_assert_eq!(ra.attributes[0].demographic_parity_gap, rb.attributes[0].demographic_parity_gap);
        }

        #[test]
        fn identical_predictions_have_no_gap(scores in proptest::collection::vec(0.0f64..1.0, 1..40)) {
            // groups A and B are exact copies of each other
            let n = scores.len();
            let labels: Vec<u8> = (0..2 * n).map(|i| (i % n % 2) as u8).collect();
            let s: Vec<f64> = scores.iter().chain(scores.iter()).copied().collect();
            let g: Vec<String> = (0..2 * n).map(|i| if i < n { "A".into() } else { "B".into() }).collect();
            let r = fairness(&labels, &s, 0.5, &[("x".to_string(), g)]).unwrap();
            let a = &r.attributes[0];
            proptest::prop_assert_eq!((a.demographic_parity_gap, a.equalized_opportunity_gap, a.equalized_odds_gap), (0.0, 0.0, 0.0));
        }
    }
}
