use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use super::{Dataset, EventKey};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub count: usize,
    /// One entry per offending row, e.g. `labevents hadm_id=123`.
    pub rows: Vec<String>,
}

/// Foreign-key violations by category. Report-only; the dataset is untouched.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IntegrityReport {
    pub violations: BTreeMap<&'static str, Violation>,
}

impl IntegrityReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, category: &str) -> usize {
        self.violations.get(category).map_or(0, |v| v.count)
    }

    pub fn total(&self) -> usize {
        self.violations.values().map(|v| v.count).sum()
    }

    fn push(&mut self, category: &'static str, row: String) {
        let v = self.violations.entry(category).or_default();
        v.count += 1;
        v.rows.push(row);
    }
}

pub fn check_referential_integrity(data: &Dataset) -> IntegrityReport {
    let subjects: HashSet<i64> = data.patients.iter().map(|p| p.subject_id).collect();
    let admissions: HashSet<i64> = data.admissions.iter().map(|a| a.hadm_id).collect();
    let stays: HashSet<i64> = data.icustays.iter().map(|s| s.stay_id).collect();
    let mut report = IntegrityReport::default();

    for a in &data.admissions {
        if !subjects.contains(&a.subject_id) {
            report.push(
                "orphan_admission",
                format!("admissions hadm_id={} subject_id={}", a.hadm_id, a.subject_id),
            );
        }
    }
    for s in &data.icustays {
        if !admissions.contains(&s.hadm_id) {
            report.push(
                "orphan_stay",
                format!("icustays stay_id={} hadm_id={}", s.stay_id, s.hadm_id),
            );
        }
    }
    for d in &data.diagnoses {
        if !admissions.contains(&d.hadm_id) {
            report.push("orphan_diagnosis", format!("diagnoses_icd hadm_id={}", d.hadm_id));
        }
    }

    let mut check_key = |table: &str, key: EventKey| {
        let known = match key {
            EventKey::Admission(id) => admissions.contains(&id),
            EventKey::Stay(id) => stays.contains(&id),
        };
        if !known {
            let desc = match key {
                EventKey::Admission(id) => format!("{table} hadm_id={id}"),
                EventKey::Stay(id) => format!("{table} stay_id={id}"),
            };
            report.push("orphan_event", desc);
        }
    };
    for m in &data.labevents {
        check_key("labevents", m.key);
    }
    for m in &data.chartevents {
        check_key("chartevents", m.key);
    }
    for m in &data.prescriptions {
        check_key("prescriptions", m.key);
    }
    for m in &data.inputevents {
        check_key("inputevents", m.key);
    }
    for p in &data.procedures_icd {
        check_key("procedures_icd", p.key);
    }
    for p in &data.procedureevents {
        check_key("procedureevents", p.key);
    }
    report
}
