//! Unit harmonization and percentile-based outlier handling.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::MeasurementRow;
use crate::reference::{self, ReferenceError};

const BUILTIN_UNIT_RULES: &str = include_str!("../data/unit_rules.csv");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conversion {
    pub factor: f64,
    pub offset: f64,
}

impl Conversion {
    pub fn apply(&self, v: f64) -> f64 {
        v * self.factor + self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRule {
    pub item_id: i64,
    pub canonical_unit: String,
    /// Keyed by lower-cased source unit.
    pub conversions: HashMap<String, Conversion>,
}

fn unit_key(u: &str) -> String {
    u.trim().to_lowercase()
}

#[derive(Debug, Clone, Default)]
pub struct UnitRules {
    rules: HashMap<i64, UnitRule>,
}

impl UnitRules {
    pub fn add(&mut self, item_id: i64, canonical: &str, source: &str, conv: Conversion) -> Result<(), String> {
        if !conv.factor.is_finite() || conv.factor == 0.0 || !conv.offset.is_finite() {
            return Err(format!("item {item_id}: factor must be finite and nonzero"));
        }
        let rule = self.rules.entry(item_id).or_insert_with(|| UnitRule {
            item_id,
            canonical_unit: canonical.trim().to_string(),
            conversions: HashMap::new(),
        });
        if unit_key(&rule.canonical_unit) != unit_key(canonical) {
            return Err(format!(
                "item {item_id}: conflicting canonical units {:?} and {canonical:?}",
                rule.canonical_unit
            ));
        }
        rule.conversions.insert(unit_key(source), conv);
        Ok(())
    }

    pub fn from_reader<R: std::io::Read>(input: R) -> Result<Self, ReferenceError> {
        let mut rules = UnitRules::default();
        for (line, r) in reference::read_records("unit rules", input, 5)? {
            let bad = |reason: String| ReferenceError::BadRow {
                table: "unit rules".into(),
                line,
                reason,
            };
            let item: i64 = r[0].parse().map_err(|_| bad(format!("bad item_id {:?}", &r[0])))?;
            let factor: f64 = r[3].parse().map_err(|_| bad(format!("bad factor {:?}", &r[3])))?;
            let offset: f64 = if r[4].is_empty() {
                0.0
            } else {
                r[4].parse().map_err(|_| bad(format!("bad offset {:?}", &r[4])))?
            };
            rules
                .add(item, &r[1], &r[2], Conversion { factor, offset })
                .map_err(bad)?;
        }
        Ok(rules)
    }

    pub fn load(path: &Path) -> Result<Self, ReferenceError> {
        Self::from_reader(reference::open(path)?)
    }

    pub fn builtin() -> Self {
        Self::from_reader(BUILTIN_UNIT_RULES.as_bytes()).expect("bundled unit rules parse")
    }

    pub fn get(&self, item_id: i64) -> Option<&UnitRule> {
        self.rules.get(&item_id)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct UnitTally {
    pub converted: usize,
    pub unknown_unit: usize,
}

/// Converts values to each item's canonical unit. Rows in an unknown unit are
/// dropped and tallied. Items without a rule, rows without a value and rows
/// without a unit pass through unchanged.
pub fn harmonize_units(rows: Vec<MeasurementRow>, rules: &UnitRules) -> (Vec<MeasurementRow>, UnitTally) {
    let mut tally = UnitTally::default();
    let mut out = Vec::with_capacity(rows.len());
    for mut row in rows {
        let (Some(rule), Some(value), Some(unit)) = (rules.get(row.item_id), row.value, row.unit.as_deref()) else {
            out.push(row);
            continue;
        };
        let key = unit_key(unit);
        if key == unit_key(&rule.canonical_unit) {
            out.push(row);
        } else if let Some(conv) = rule.conversions.get(&key) {
            row.value = Some(conv.apply(value));
            row.unit = Some(rule.canonical_unit.clone());
            tally.converted += 1;
            out.push(row);
        } else {
            tally.unknown_unit += 1;
        }
    }
    (out, tally)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutlierMode {
    Remove,
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierPolicy {
    /// Lower percentile `t`; the upper boundary is `100 - t`.
    pub threshold_percentile: f64,
    pub mode: OutlierMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cleaning.outlier_threshold = {0} is outside the valid range [0, 50)")]
pub struct PolicyError(pub String);

impl OutlierPolicy {
    pub fn new(threshold_percentile: f64, mode: OutlierMode) -> Result<Self, PolicyError> {
        if !(0.0..50.0).contains(&threshold_percentile) {
            return Err(PolicyError(threshold_percentile.to_string()));
        }
        Ok(OutlierPolicy {
            threshold_percentile,
            mode,
        })
    }
}

/// 1-based nearest rank `⌈p/100 · n⌉`, clamped to `[1, n]`.
///
/// Products that are integral up to rounding noise are snapped so that, for
/// example, `p = 0.07, n = 100 000` yields rank 70 rather than 71.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    let x = p * n as f64 / 100.0;
    let r = x.round();
    let rank = if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    };
    (rank.max(1.0) as usize).min(n.max(1))
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    sorted[nearest_rank(p, sorted.len()) - 1]
}

/// `(p_t, p_{100-t})` of `values`, or `None` for an empty input.
pub fn outlier_bounds(values: &[f64], threshold: f64) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some((
        percentile_sorted(&sorted, threshold),
        percentile_sorted(&sorted, 100.0 - threshold),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierOutcome {
    pub values: Vec<f64>,
    pub bounds: Option<(f64, f64)>,
    pub removed: usize,
    pub capped: usize,
}

/// Applies the policy to bounds computed from the same sequence.
pub fn remove_outliers(values: &[f64], policy: OutlierPolicy) -> OutlierOutcome {
    let bounds = outlier_bounds(values, policy.threshold_percentile);
    let Some((lo, hi)) = bounds else {
        return OutlierOutcome {
            values: Vec::new(),
            bounds,
            removed: 0,
            capped: 0,
        };
    };
    let mut out = OutlierOutcome {
        values: Vec::with_capacity(values.len()),
        bounds,
        removed: 0,
        capped: 0,
    };
    for &v in values {
        match apply_bounds(v, lo, hi, policy.mode) {
            Some(c) => {
                if c != v {
                    out.capped += 1;
                }
                out.values.push(c);
            }
            None => out.removed += 1,
        }
    }
    out
}

/// `None` if the value is removed; the (possibly clamped) value otherwise.
pub fn apply_bounds(v: f64, lo: f64, hi: f64, mode: OutlierMode) -> Option<f64> {
    if v >= lo && v <= hi {
        return Some(v);
    }
    match mode {
        OutlierMode::Remove => None,
        OutlierMode::Cap => Some(v.clamp(lo, hi)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::EventKey;
    use crate::time::Timestamp;

    fn row(item: i64, v: f64, unit: &str) -> MeasurementRow {
        MeasurementRow {
            key: EventKey::Admission(1),
            item_id: item,
            chart_time: Timestamp::from_seconds(0),
            value: Some(v),
            unit: Some(unit.into()),
        }
    }

    #[test]
    fn pounds_to_kilograms() {
        let rules = UnitRules::builtin();
        let (out, t) = harmonize_units(
            vec![
                row(226512, 150.0, "lb"),
                row(226512, 70.0, "kg"),
                row(226512, 1.0, "???"),
            ],
            &rules,
        );
        assert_eq!(out.len(), 2);
        // hand multiplication: 150 * 0.453592 = 68.0388
        assert!((out[0].value.unwrap() - 68.0388).abs() < 1e-12);
        assert_eq!(out[0].unit.as_deref(), Some("kg"));
        assert_eq!(out[1].value, Some(70.0));
        assert_eq!(
            t,
            UnitTally {
                converted: 1,
                unknown_unit: 1
            }
        );
    }

    #[test]
    fn fahrenheit_offset_rule() {
        let rules = UnitRules::builtin();
        let (out, _) = harmonize_units(vec![row(223762, 212.0, "°F")], &rules);
        assert!((out[0].value.unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_zero_factor() {
        let mut r = UnitRules::default();
        assert!(r
            .add(
                1,
                "kg",
                "lb",
                Conversion {
                    factor: 0.0,
                    offset: 0.0
                }
            )
            .is_err());
    }

    #[test]
    fn one_to_hundred_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let rm = remove_outliers(&v, OutlierPolicy::new(2.0, OutlierMode::Remove).unwrap());
        assert_eq!(rm.values, (2..=98).map(f64::from).collect::<Vec<_>>());
        assert_eq!(rm.removed, 3);
        let cap = remove_outliers(&v, OutlierPolicy::new(2.0, OutlierMode::Cap).unwrap());
        assert_eq!(cap.values.len(), 100);
        assert_eq!(cap.values[0], 2.0);
        assert_eq!(cap.values[98], 98.0);
        assert_eq!(cap.values[99], 98.0);
        assert_eq!(cap.capped, 3);
    }

    #[test]
    fn zero_threshold_and_constant_input_are_noops() {
        let v = vec![3.0, -1.0, 8.5, 2.0];
        let out = remove_outliers(&v, OutlierPolicy::new(0.0, OutlierMode::Remove).unwrap());
        assert_eq!(out.values, v);
        let c = vec![4.0; 9];
        let out = remove_outliers(&c, OutlierPolicy::new(10.0, OutlierMode::Remove).unwrap());
        assert_eq!(out.values, c);
    }

    #[test]
    fn policy_range() {
        assert!(OutlierPolicy::new(50.0, OutlierMode::Cap).is_err());
        assert!(OutlierPolicy::new(-1.0, OutlierMode::Cap).is_err());
    }

    #[test]
    fn nearest_rank_snaps_float_noise() {
        assert_eq!(nearest_rank(2.0, 100), 2);
        assert_eq!(nearest_rank(0.07, 100_000), 70);
        assert_eq!(nearest_rank(0.0, 5), 1);
        assert_eq!(nearest_rank(100.0, 5), 5);
        assert_eq!(nearest_rank(2.5, 7), 1);
    }

    proptest::proptest! {
        #[test]
        fn modes_preserve_or_shrink_length_and_stay_in_bounds(
            v in proptest::collection::vec(-1e3f64..1e3, 1..200),
            t in 0.0f64..49.0,
        ) {
            let cap = remove_outliers(&v, OutlierPolicy::new(t, OutlierMode::Cap).unwrap());
            let rm = remove_outliers(&v, OutlierPolicy::new(t, OutlierMode::Remove).unwrap());
            let (lo, hi) = cap.bounds.unwrap();
            proptest::prop_assert_eq!(cap.values.len(), v.len());
            proptest::prop_assert!(rm.values.len() <= v.len());
            proptest::prop_assert!(cap.values.iter().chain(&rm.values).all(|x| *x >= lo && *x <= hi));
        }

        #[test]
        fn larger_threshold_retains_a_subset(
            v in proptest::collection::vec(-50i32..50, 1..200),
            t1 in 0.0f64..25.0,
            dt in 0.0f64..24.0,
        ) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let (lo1, hi1) = outlier_bounds(&v, t1).unwrap();
            let (lo2, hi2) = outlier_bounds(&v, t1 + dt).unwrap();
            for x in &v {
                if *x >= lo2 && *x <= hi2 {
                    proptest::prop_assert!(*x >= lo1 && *x <= hi1);
                }
            }
        }
    }
}
