//! Task definitions, inclusion criteria and labeling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grouping::IcdRoot;
use crate::ingest::{AdmissionRow, Dataset, Gender, HadmId, IcuStayRow, PatientRow, StayId, SubjectId};
use crate::time::{Timestamp, SECONDS_PER_DAY, SECONDS_PER_HOUR};
use crate::timeseries::interval_valid;

pub const GAP_DAYS_RANGE: std::ops::RangeInclusive<u32> = 10..=150;
pub const LOS_DAYS_RANGE: std::ops::RangeInclusive<u32> = 1..=10;
pub const ADULT_AGE: i32 = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Readmission,
    Mortality,
    LengthOfStay,
    Phenotype,
}

impl TaskKind {
    pub fn default_anchor(self) -> WindowAnchor {
        match self {
            TaskKind::Mortality | TaskKind::LengthOfStay => WindowAnchor::FirstHours,
            TaskKind::Readmission | TaskKind::Phenotype => WindowAnchor::LastHours,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    Icu,
    NonIcu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WindowAnchor {
    FirstHours,
    LastHours,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub anchor: WindowAnchor,
    pub hours: u32,
}

impl ObservationWindow {
    pub fn seconds(&self) -> i64 {
        i64::from(self.hours) * SECONDS_PER_HOUR
    }

    /// Window placed inside `[start, end]`; `None` when the stay is too short.
    pub fn place(&self, start: Timestamp, end: Timestamp) -> Option<(Timestamp, Timestamp)> {
        if end.seconds_since(start) < self.seconds() {
            return None;
        }
        Some(match self.anchor {
            WindowAnchor::FirstHours => (start, start.plus_seconds(self.seconds())),
            WindowAnchor::LastHours => (end.plus_seconds(-self.seconds()), end),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub setting: Setting,
    pub disease_filter: Option<IcdRoot>,
    pub gap_days: u32,
    pub los_threshold_days: u32,
    pub window: ObservationWindow,
    pub phenotype_target: Option<IcdRoot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("task.gap_days = {0} is outside the valid range 10–150")]
    GapDays(u32),
    #[error("task.los_threshold_days = {0} is outside the valid range 1–10")]
    LosThreshold(u32),
    #[error("task.window_hours must be a positive number of hours")]
    EmptyWindow,
    #[error("{kind:?} requires {expected:?} window anchoring")]
    Anchor { kind: TaskKind, expected: WindowAnchor },
    #[error("phenotype task requires task.phenotype_target")]
    MissingPhenotypeTarget,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !GAP_DAYS_RANGE.contains(&self.gap_days) {
            return Err(TaskError::GapDays(self.gap_days));
        }
        if !LOS_DAYS_RANGE.contains(&self.los_threshold_days) {
            return Err(TaskError::LosThreshold(self.los_threshold_days));
        }
        if self.window.hours == 0 {
            return Err(TaskError::EmptyWindow);
        }
        let expected = self.kind.default_anchor();
        if self.window.anchor != expected {
            return Err(TaskError::Anchor {
                kind: self.kind,
                expected,
            });
        }
        if self.kind == TaskKind::Phenotype && self.phenotype_target.is_none() {
            return Err(TaskError::MissingPhenotypeTarget);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: Gender,
    pub ethnicity: String,
    pub insurance: String,
    pub age: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSample {
    /// `stay_id` for ICU cohorts, `hadm_id` otherwise.
    pub sample_id: i64,
    pub subject_id: SubjectId,
    pub hadm_id: HadmId,
    pub stay_id: Option<StayId>,
    pub label: u8,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    /// Admission or ICU stay bounds the window was placed in.
    pub stay_start: Timestamp,
    pub stay_end: Timestamp,
    pub age_at_admission: i32,
    pub demographics: Demographics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    InvalidTimes,
    MissingAdmission,
    MissingPatient,
    NegativeAge,
    Under18,
    DiseaseFilter,
    OverlappingAdmission,
    DeathBeforeAdmission,
    NoNextAdmission,
    StayShorterThanWindow,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::InvalidTimes => "invalid_times",
            ExclusionReason::MissingAdmission => "missing_admission",
            ExclusionReason::MissingPatient => "missing_patient",
            ExclusionReason::NegativeAge => "negative_age",
            ExclusionReason::Under18 => "under_18",
            ExclusionReason::DiseaseFilter => "disease_filter",
            ExclusionReason::OverlappingAdmission => "overlapping_admission",
            ExclusionReason::DeathBeforeAdmission => "death_before_admission",
            ExclusionReason::NoNextAdmission => "no_next_admission",
            ExclusionReason::StayShorterThanWindow => "stay_shorter_than_window",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CohortReport {
    pub input_units: usize,
    pub included: usize,
    pub positives: usize,
    pub exclusions: BTreeMap<ExclusionReason, usize>,
    pub warnings: Vec<String>,
}

impl CohortReport {
    pub fn excluded(&self) -> usize {
        self.exclusions.values().sum()
    }

    fn exclude(&mut self, reason: ExclusionReason) {
        *self.exclusions.entry(reason).or_default() += 1;
    }

    fn merge(&mut self, other: CohortReport) {
        self.input_units += other.input_units;
        self.included += other.included;
        self.positives += other.positives;
        for (k, v) in other.exclusions {
            *self.exclusions.entry(k).or_default() += v;
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "input_units: {}\nincluded: {}\npositives: {}\n",
            self.input_units, self.included, self.positives
        );
        for (k, v) in &self.exclusions {
            s.push_str(&format!("excluded.{k}: {v}\n"));
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("admission year {admit_year} precedes birth year {birth_year}")]
pub struct AgeError {
    pub admit_year: i32,
    pub birth_year: i32,
}

/// Age in whole years: admission year minus birth year, where the birth
/// year is `anchor_year - anchor_age`.
pub fn compute_age(anchor_age: i32, anchor_year: i32, admit_time: Timestamp) -> Result<i32, AgeError> {
    let birth_year = anchor_year - anchor_age;
    let admit_year = admit_time.year();
    let age = admit_year - birth_year;
    if age < 0 {
        return Err(AgeError { admit_year, birth_year });
    }
    Ok(age)
}

pub fn has_root(roots: &HashMap<HadmId, BTreeSet<IcdRoot>>, hadm_id: HadmId, root: IcdRoot) -> bool {
    roots.get(&hadm_id).is_some_and(|r| r.contains(&root))
}

/// Admissions having at least one diagnosis in the `root` category.
pub fn filter_disease<'a>(
    admissions: &'a [AdmissionRow],
    roots: &HashMap<HadmId, BTreeSet<IcdRoot>>,
    root: IcdRoot,
) -> Vec<&'a AdmissionRow> {
    admissions.iter().filter(|a| has_root(roots, a.hadm_id, root)).collect()
}

/// Labels each admission of one patient (sorted by admit time): 1 when the
/// next admission starts within `gap_days` of this discharge, boundary
/// inclusive. An admission overlapped by its successor is excluded.
pub fn label_readmission(sorted: &[&AdmissionRow], gap_days: u32) -> Vec<Result<u8, ExclusionReason>> {
    let gap = i64::from(gap_days) * SECONDS_PER_DAY;
    sorted
        .iter()
        .enumerate()
        .map(|(i, cur)| match sorted.get(i + 1) {
            None => Ok(0),
            Some(next) => {
                let delta = next.admit_time.seconds_since(cur.discharge_time);
                if delta < 0 {
                    Err(ExclusionReason::OverlappingAdmission)
                } else {
                    Ok(u8::from(delta <= gap))
                }
            }
        })
        .collect()
}

/// In-hospital mortality over the stay `[start, end]`. Stays shorter than the
/// observation window are excluded.
pub fn label_mortality(
    adm: &AdmissionRow,
    start: Timestamp,
    end: Timestamp,
    window_hours: u32,
) -> Result<u8, ExclusionReason> {
    if let Some(death) = adm.death_time {
        if death < adm.admit_time {
            return Err(ExclusionReason::DeathBeforeAdmission);
        }
    }
    if end.seconds_since(start) < i64::from(window_hours) * SECONDS_PER_HOUR {
        return Err(ExclusionReason::StayShorterThanWindow);
    }
    let died_in_stay = adm
        .death_time
        .is_some_and(|d| d >= adm.admit_time && d <= adm.discharge_time);
    Ok(u8::from(adm.hospital_expire_flag || died_in_stay))
}

/// 1 iff the stay lasts strictly longer than `threshold_days`.
pub fn label_los(start: Timestamp, end: Timestamp, threshold_days: u32) -> u8 {
    u8::from(end.seconds_since(start) > i64::from(threshold_days) * SECONDS_PER_DAY)
}

/// 1 iff the next admission carries a `target` diagnosis; the last admission
/// has no label and is excluded.
pub fn label_phenotype(
    sorted: &[&AdmissionRow],
    roots: &HashMap<HadmId, BTreeSet<IcdRoot>>,
    target: IcdRoot,
) -> Vec<Result<u8, ExclusionReason>> {
    sorted
        .iter()
        .enumerate()
        .map(|(i, _)| match sorted.get(i + 1) {
            None => Err(ExclusionReason::NoNextAdmission),
            Some(next) => Ok(u8::from(has_root(roots, next.hadm_id, target))),
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct Cohort {
    pub samples: Vec<CohortSample>,
    pub report: CohortReport,
}

struct PatientInput<'a> {
    subject_id: SubjectId,
    admissions: Vec<&'a AdmissionRow>,
}

fn sort_admissions(adms: &mut [&AdmissionRow]) {
    adms.sort_by_key(|a| (a.admit_time, a.discharge_time, a.hadm_id));
}

/// Applies the adult filter, disease filter, labeler and window anchoring.
///
/// Sample units are ICU stays for [`Setting::Icu`] and admissions otherwise;
/// every unit is either emitted or counted under exactly one exclusion reason.
pub fn extract_cohort(
    data: &Dataset,
    roots: &HashMap<HadmId, BTreeSet<IcdRoot>>,
    spec: &TaskSpec,
) -> Result<Cohort, TaskError> {
    spec.validate()?;

    let patients: HashMap<SubjectId, &PatientRow> = data.patients.iter().map(|p| (p.subject_id, p)).collect();
    let mut by_patient: BTreeMap<SubjectId, Vec<&AdmissionRow>> = BTreeMap::new();
    for a in &data.admissions {
        by_patient.entry(a.subject_id).or_default().push(a);
    }
    let mut stays_by_adm: HashMap<HadmId, Vec<&IcuStayRow>> = HashMap::new();
    for s in &data.icustays {
        stays_by_adm.entry(s.hadm_id).or_default().push(s);
    }
    let known_adm: std::collections::HashSet<HadmId> = data.admissions.iter().map(|a| a.hadm_id).collect();

    let inputs: Vec<PatientInput<'_>> = by_patient
        .into_iter()
        .map(|(subject_id, admissions)| PatientInput { subject_id, admissions })
        .collect();

    let per_patient: Vec<(Vec<CohortSample>, CohortReport)> = inputs
        .par_iter()
        .map(|p| label_patient(p, patients.get(&p.subject_id).copied(), roots, &stays_by_adm, spec))
        .collect();

    let mut cohort = Cohort::default();
    for (samples, report) in per_patient {
        cohort.samples.extend(samples);
        cohort.report.merge(report);
    }

    if spec.setting == Setting::Icu {
        // stays whose admission does not exist never reach a patient group
        let orphans = data.icustays.iter().filter(|s| !known_adm.contains(&s.hadm_id)).count();
        cohort.report.input_units += orphans;
        for _ in 0..orphans {
            cohort.report.exclude(ExclusionReason::MissingAdmission);
        }
    }

    cohort.samples.sort_by_key(|s| s.sample_id);
    if cohort.samples.is_empty() {
        let msg = "cohort is empty after applying inclusion criteria".to_string();
        log::warn!("{msg}");
        cohort.report.warnings.push(msg);
    }
    Ok(cohort)
}

fn label_patient(
    p: &PatientInput<'_>,
    patient: Option<&PatientRow>,
    roots: &HashMap<HadmId, BTreeSet<IcdRoot>>,
    stays_by_adm: &HashMap<HadmId, Vec<&IcuStayRow>>,
    spec: &TaskSpec,
) -> (Vec<CohortSample>, CohortReport) {
    let mut report = CohortReport::default();
    let mut samples = Vec::new();

    let (mut valid, invalid): (Vec<&AdmissionRow>, Vec<&AdmissionRow>) = p
        .admissions
        .iter()
        .partition(|a| interval_valid(a.admit_time, a.discharge_time));
    sort_admissions(&mut valid);

    let unit_count = |a: &AdmissionRow| match spec.setting {
        Setting::NonIcu => 1,
        Setting::Icu => stays_by_adm.get(&a.hadm_id).map_or(0, Vec::len),
    };
    for a in &invalid {
        let n = unit_count(a);
        report.input_units += n;
        for _ in 0..n {
            report.exclude(ExclusionReason::InvalidTimes);
        }
    }

    let task_labels: Vec<Result<u8, ExclusionReason>> = match spec.kind {
        TaskKind::Readmission => label_readmission(&valid, spec.gap_days),
        TaskKind::Phenotype => label_phenotype(
            &valid,
            roots,
            spec.phenotype_target.expect("validated phenotype target"),
        ),
        TaskKind::Mortality | TaskKind::LengthOfStay => vec![Ok(0); valid.len()],
    };

    for (adm, task_label) in valid.iter().zip(task_labels) {
        let units: Vec<(i64, Option<StayId>, Timestamp, Timestamp, bool)> = match spec.setting {
            Setting::NonIcu => vec![(adm.hadm_id, None, adm.admit_time, adm.discharge_time, true)],
            Setting::Icu => {
                let mut stays = stays_by_adm.get(&adm.hadm_id).cloned().unwrap_or_default();
                stays.sort_by_key(|s| (s.in_time, s.stay_id));
                stays
                    .into_iter()
                    .map(|s| {
                        (
                            s.stay_id,
                            Some(s.stay_id),
                            s.in_time,
                            s.out_time,
                            interval_valid(s.in_time, s.out_time),
                        )
                    })
                    .collect()
            }
        };

        for (sample_id, stay_id, start, end, times_ok) in units {
            report.input_units += 1;
            match build_sample(
                adm, patient, roots, spec, task_label, sample_id, stay_id, start, end, times_ok,
            ) {
                Ok(s) => {
                    report.included += 1;
                    report.positives += usize::from(s.label);
                    samples.push(s);
                }
                Err(reason) => report.exclude(reason),
            }
        }
    }
    (samples, report)
}

#[allow(clippy::too_many_arguments)]
fn build_sample(
    adm: &AdmissionRow,
    patient: Option<&PatientRow>,
    roots: &HashMap<HadmId, BTreeSet<IcdRoot>>,
    spec: &TaskSpec,
    task_label: Result<u8, ExclusionReason>,
    sample_id: i64,
    stay_id: Option<StayId>,
    start: Timestamp,
    end: Timestamp,
    times_ok: bool,
) -> Result<CohortSample, ExclusionReason> {
    if !times_ok {
        return Err(ExclusionReason::InvalidTimes);
    }
    let patient = patient.ok_or(ExclusionReason::MissingPatient)?;
    let age = compute_age(patient.anchor_age, patient.anchor_year, adm.admit_time)
        .map_err(|_| ExclusionReason::NegativeAge)?;
    if age < ADULT_AGE {
        return Err(ExclusionReason::Under18);
    }
    if let Some(root) = spec.disease_filter {
        if !has_root(roots, adm.hadm_id, root) {
            return Err(ExclusionReason::DiseaseFilter);
        }
    }
    let label = match spec.kind {
        TaskKind::Readmission | TaskKind::Phenotype => task_label?,
        TaskKind::Mortality => label_mortality(adm, start, end, spec.window.hours)?,
        TaskKind::LengthOfStay => label_los(start, end, spec.los_threshold_days),
    };
    let (window_start, window_end) = spec
        .window
        .place(start, end)
        .ok_or(ExclusionReason::StayShorterThanWindow)?;

    Ok(CohortSample {
        sample_id,
        subject_id: adm.subject_id,
        hadm_id: adm.hadm_id,
        stay_id,
        label,
        window_start,
        window_end,
        stay_start: start,
        stay_end: end,
        age_at_admission: age,
        demographics: Demographics {
            gender: patient.gender,
            ethnicity: adm.ethnicity.clone(),
            insurance: adm.insurance.clone(),
            age,
        },
    })
}
