//! Deterministic synthetic dataset generator.
//!
//! Every patient draws from its own ChaCha stream keyed by `(seed, index)`,
//! so patients are generated in parallel and output never depends on thread
//! scheduling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::schema::{self, TableSchema};
use crate::ingest::{
    write_table, AdmissionRow, DiagnosisRow, EventKey, Gender, IcdVersion, IcuStayRow, IngestError, MeasurementRow,
    MedicationRow, PatientRow, ProcedureRow, Record,
};
use crate::time::{Timestamp, SECONDS_PER_DAY, SECONDS_PER_HOUR};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("cannot create output directory {path}: {source}")]
    Dir {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Write(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_patients: usize,
    pub mean_admissions_per_patient: f64,
    /// ICD-10 root → per-admission probability of a matching diagnosis.
    pub disease_prevalence: BTreeMap<String, f64>,
    pub event_rate_per_hour: f64,
    /// Share of medication and ICU rows given inconsistent timestamps.
    pub corrupt_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 42,
            n_patients: 1000,
            mean_admissions_per_patient: 2.0,
            disease_prevalence: [("I50", 0.3), ("N18", 0.3), ("J44", 0.2), ("I25", 0.25)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            event_rate_per_hour: 0.25,
            corrupt_fraction: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_patients == 0 {
            return bad("n_patients must be > 0".into());
        }
        if !(self.mean_admissions_per_patient >= 1.0 && self.mean_admissions_per_patient <= 10.0) {
            return bad(format!(
                "mean_admissions_per_patient = {} is outside 1–10",
                self.mean_admissions_per_patient
            ));
        }
        if !(self.event_rate_per_hour > 0.0 && self.event_rate_per_hour <= 10.0) {
            return bad(format!(
                "event_rate_per_hour = {} is outside (0, 10]",
                self.event_rate_per_hour
            ));
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return bad(format!(
                "corrupt_fraction = {} is outside [0, 1]",
                self.corrupt_fraction
            ));
        }
        for (root, p) in &self.disease_prevalence {
            if root.len() != 3 || !root.chars().all(|c| c.is_ascii_alphanumeric()) {
                return bad(format!("disease root {root:?} is not a 3-character ICD-10 root"));
            }
            if !(0.0..=1.0).contains(p) {
                return bad(format!("prevalence of {root} = {p} is outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// ICD-9 codes whose mapped ICD-10 code shares the root.
const ICD9_FORMS: &[(&str, &[&str])] = &[
    ("I50", &["4280", "42822", "42832", "4289"]),
    ("N18", &["5853", "5854", "5859"]),
    ("J44", &["49121", "496"]),
    ("I25", &["41401", "412"]),
];

const ICD10_FORMS: &[(&str, &[&str])] = &[
    ("I50", &["I5023", "I509", "I5032", "I5042"]),
    ("N18", &["N183", "N184", "N185", "N189"]),
    ("J44", &["J449", "J441", "J440"]),
    ("I25", &["I2510", "I252", "I25810"]),
];

/// (ICD-9, ICD-10) decoy pairs outside the target roots.
const DECOYS: &[(&str, &str)] = &[
    ("4019", "I10"),
    ("25000", "E119"),
    ("2724", "E785"),
    ("53081", "K219"),
    ("5849", "N179"),
    ("486", "J189"),
    ("42731", "I4891"),
    ("2859", "D649"),
    ("5990", "N390"),
    ("2762", "E872"),
    ("V5861", "Z7901"),
];

/// (item, unit, mean, sd, alternate unit, factor from canonical to alternate)
type LabItem = (i64, &'static str, f64, f64, Option<(&'static str, f64)>);

const LAB_ITEMS: &[LabItem] = &[
    (50912, "mg/dL", 1.2, 0.5, Some(("umol/L", 88.4))),
    (50931, "mg/dL", 120.0, 35.0, Some(("mmol/L", 1.0 / 18.0))),
    (50971, "mEq/L", 4.2, 0.5, None),
    (51222, "g/dL", 11.5, 1.8, None),
    (51301, "K/uL", 9.0, 3.0, None),
];

const VITAL_ITEMS: &[LabItem] = &[
    (220045, "bpm", 85.0, 15.0, None),
    (220179, "mmHg", 120.0, 20.0, None),
    (220210, "insp/min", 18.0, 4.0, None),
    (223762, "°C", 37.0, 0.6, Some(("°F", 0.0))),
    (226512, "kg", 80.0, 18.0, Some(("lb", 1.0 / 0.453592))),
];

/// (drug name, NDC shapes): several dash layouts of the same product, plus
/// products missing from the bundled directory.
const DRUGS: &[(&str, &[&str])] = &[
    ("Trulicity", &["0002-1433-80", "00002-1433-80", "00002143380"]),
    ("Activase", &["50242-040-62", "50242-0040-62"]),
    ("Sodium Chloride 0.9%", &["0409-4888-02", "00409488802"]),
    ("Heparin", &["63323-262-01", "63323-0262-1"]),
    ("Furosemide", &["0054-3297-25", "00054329725"]),
    ("Insulin Glargine", &["0088-2220-33"]),
    ("Metoprolol Tartrate", &["0904-2244-61"]),
    ("Acetaminophen", &["51079-255-20"]),
    ("Potassium Chloride", &["0338-0049-04"]),
    ("Vancomycin", &["68084-198-01"]),
    ("Ondansetron", &["60505-0130-0"]),
    ("Pantoprazole", &[]),
];

const INPUT_ITEMS: &[(&str, &str)] = &[("225158", "mL"), ("221906", "mg"), ("225166", "mEq"), ("220949", "mL")];
const PROCEDURE_ICD: &[&str] = &["5A1945Z", "0BH17EZ", "3E0G76Z", "02HV33Z", "5A1D70Z"];
const PROCEDURE_ITEMS: &[&str] = &["225792", "224275", "225459", "221214"];
const INSURANCE: &[&str] = &["Medicare", "Medicaid", "Other"];
const ETHNICITY: &[&str] = &[
    "WHITE",
    "WHITE",
    "WHITE",
    "BLACK/AFRICAN AMERICAN",
    "HISPANIC/LATINO",
    "ASIAN",
    "OTHER",
    "AMERICAN INDIAN/ALASKA NATIVE",
];

#[derive(Default)]
struct PatientTables {
    patients: Vec<PatientRow>,
    admissions: Vec<AdmissionRow>,
    diagnoses: Vec<DiagnosisRow>,
    labevents: Vec<MeasurementRow>,
    chartevents: Vec<MeasurementRow>,
    prescriptions: Vec<MedicationRow>,
    inputevents: Vec<MedicationRow>,
    procedures_icd: Vec<ProcedureRow>,
    procedureevents: Vec<ProcedureRow>,
    icustays: Vec<IcuStayRow>,
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    mean + sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (v * f).round() / f
}

/// Whole minutes so timestamps look like charted data.
fn minutes(secs: i64) -> i64 {
    secs / 60 * 60
}

fn uniform_time(rng: &mut ChaCha8Rng, start: Timestamp, end: Timestamp) -> Timestamp {
    let span = end.seconds_since(start).max(0);
    start.plus_seconds(minutes(rng.gen_range(0..=span)))
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    // Knuth; means here stay small per item
    let l = (-mean.min(500.0)).exp();
    let (mut k, mut p) = (0usize, 1.0);
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

fn measurement(
    rng: &mut ChaCha8Rng,
    key: EventKey,
    item: &LabItem,
    t: Timestamp,
    shift: f64,
    missing: f64,
) -> MeasurementRow {
    let (item_id, unit, mean, sd, alt) = *item;
    let canonical = (normal(rng, mean, sd) + shift * sd).max(0.0);
    let (value, unit) = match alt {
        Some((alt_unit, factor)) if rng.gen_bool(0.2) => {
            let v = if alt_unit == "°F" {
                canonical * 9.0 / 5.0 + 32.0
            } else {
                canonical * factor
            };
            (v, alt_unit)
        }
        _ => (canonical, unit),
    };
    MeasurementRow {
        key,
        item_id,
        chart_time: t,
        value: (!rng.gen_bool(missing)).then(|| round_to(value, 2)),
        unit: Some(unit.to_string()),
    }
}

fn generate_patient(spec: &SynthSpec, index: usize) -> PatientTables {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let mut out = PatientTables::default();

    let subject_id = 10_000_000 + index as i64;
    let gender = if rng.gen_bool(0.5) { Gender::F } else { Gender::M };
    let anchor_year = rng.gen_range(2110..2180);
    let anchor_age = if rng.gen_bool(0.08) {
        rng.gen_range(10..18)
    } else {
        rng.gen_range(18..90)
    };
    let insurance = pick(&mut rng, INSURANCE).to_string();
    let ethnicity = pick(&mut rng, ETHNICITY).to_string();

    let extra_p = 1.0 - 1.0 / spec.mean_admissions_per_patient;
    let mut n_adm = 1;
    while n_adm < 12 && rng.gen_bool(extra_p) {
        n_adm += 1;
    }

    let mut cursor = Timestamp::from_ymd_hms(anchor_year, 1, 1, 0, 0, 0)
        .expect("valid date")
        .plus_seconds(minutes(rng.gen_range(0..3 * 365 * SECONDS_PER_DAY)));
    let mut date_of_death = None;
    for j in 0..n_adm {
        let hadm_id = 20_000_000 + index as i64 * 100 + j as i64;
        let admit = cursor;
        let los_hours: i64 = rng.gen_range(12..=14 * 24);
        let discharge = admit.plus_seconds(minutes(los_hours * SECONDS_PER_HOUR + rng.gen_range(0..3600)));

        let mut roots = Vec::new();
        for (root, &p) in &spec.disease_prevalence {
            if rng.gen_bool(p) {
                roots.push(root.as_str());
            }
        }
        let last = j + 1 == n_adm;
        let risk = 0.05 + 0.1 * roots.len() as f64;
        let dies = last && rng.gen_bool(risk.min(0.9));
        let shift = if dies { 1.0 } else { 0.0 };

        out.admissions.push(AdmissionRow {
            hadm_id,
            subject_id,
            admit_time: admit,
            discharge_time: discharge,
            death_time: dies.then_some(discharge),
            hospital_expire_flag: dies,
            insurance: insurance.clone(),
            ethnicity: ethnicity.clone(),
        });
        if dies {
            date_of_death = Some(discharge);
        }

        for root in &roots {
            let (code, version) = if rng.gen_bool(0.4) {
                match ICD9_FORMS.iter().find(|(r, _)| r == root) {
                    Some((_, codes)) => (pick(&mut rng, codes).to_string(), IcdVersion::Icd9),
                    None => (format!("{root}9"), IcdVersion::Icd10),
                }
            } else {
                match ICD10_FORMS.iter().find(|(r, _)| r == root) {
                    Some((_, codes)) => (pick(&mut rng, codes).to_string(), IcdVersion::Icd10),
                    None => (format!("{root}9"), IcdVersion::Icd10),
                }
            };
            out.diagnoses.push(DiagnosisRow {
                hadm_id,
                icd_code: code,
                icd_version: version,
            });
        }
        for _ in 0..rng.gen_range(0..4) {
            let (v9, v10) = *pick(&mut rng, DECOYS);
            if spec.disease_prevalence.contains_key(&v10[..3]) {
                continue;
            }
            let row = if rng.gen_bool(0.5) {
                DiagnosisRow {
                    hadm_id,
                    icd_code: v9.to_string(),
                    icd_version: IcdVersion::Icd9,
                }
            } else {
                DiagnosisRow {
                    hadm_id,
                    icd_code: v10.to_string(),
                    icd_version: IcdVersion::Icd10,
                }
            };
            out.diagnoses.push(row);
        }

        let hours = discharge.seconds_since(admit) as f64 / SECONDS_PER_HOUR as f64;
        let key = EventKey::Admission(hadm_id);
        for item in LAB_ITEMS {
            let n = poisson(&mut rng, spec.event_rate_per_hour * hours / LAB_ITEMS.len() as f64) + 1;
            for _ in 0..n {
                let t = uniform_time(&mut rng, admit, discharge);
                out.labevents.push(measurement(&mut rng, key, item, t, shift, 0.05));
            }
        }

        for _ in 0..rng.gen_range(0..5) {
            let (name, ndcs) = *pick(&mut rng, DRUGS);
            let start = uniform_time(&mut rng, admit, discharge);
            let mut stop = start.plus_seconds(minutes(rng.gen_range(2..=72) * SECONDS_PER_HOUR));
            if stop > discharge {
                stop = discharge;
            }
            let (start, stop) = corrupt_interval(&mut rng, spec.corrupt_fraction, start, stop, discharge);
            out.prescriptions.push(MedicationRow {
                key,
                drug_name: name.to_string(),
                ndc: (!ndcs.is_empty()).then(|| pick(&mut rng, ndcs).to_string()),
                start_time: start,
                stop_time: stop,
                dose: rng.gen_bool(0.95).then(|| f64::from(rng.gen_range(1..=40)) * 2.5),
                dose_unit: Some("mg".to_string()),
            });
        }

        for _ in 0..rng.gen_range(0..3) {
            out.procedures_icd.push(ProcedureRow {
                key,
                code: pick(&mut rng, PROCEDURE_ICD).to_string(),
                event_time: Timestamp::from_seconds(
                    uniform_time(&mut rng, admit, discharge).seconds() / SECONDS_PER_DAY * SECONDS_PER_DAY,
                ),
            });
        }

        if hours >= 30.0 && rng.gen_bool(0.6) {
            let stay_id = 30_000_000 + index as i64 * 100 + j as i64;
            let in_time = admit.plus_seconds(minutes(rng.gen_range(0..6 * SECONDS_PER_HOUR)));
            let max_len = discharge.seconds_since(in_time);
            let out_time = in_time.plus_seconds(minutes(rng.gen_range(24 * SECONDS_PER_HOUR..=max_len)));
            let (s_in, s_out) = if rng.gen_bool(spec.corrupt_fraction) {
                (out_time, in_time)
            } else {
                (in_time, out_time)
            };
            out.icustays.push(IcuStayRow {
                stay_id,
                hadm_id,
                in_time: s_in,
                out_time: s_out,
            });

            let skey = EventKey::Stay(stay_id);
            let stay_hours = out_time.seconds_since(in_time) as f64 / SECONDS_PER_HOUR as f64;
            for item in VITAL_ITEMS {
                let n = poisson(
                    &mut rng,
                    spec.event_rate_per_hour * stay_hours / VITAL_ITEMS.len() as f64 * 2.0,
                ) + 1;
                for _ in 0..n {
                    let t = uniform_time(&mut rng, in_time, out_time);
                    out.chartevents.push(measurement(&mut rng, skey, item, t, shift, 0.03));
                }
            }
            for _ in 0..rng.gen_range(0..6) {
                let (item, unit) = *pick(&mut rng, INPUT_ITEMS);
                let start = uniform_time(&mut rng, in_time, out_time);
                let mut stop = start.plus_seconds(minutes(rng.gen_range(1..=24) * SECONDS_PER_HOUR));
                if stop > out_time {
                    stop = out_time;
                }
                let (start, stop) = corrupt_interval(&mut rng, spec.corrupt_fraction, start, stop, discharge);
                out.inputevents.push(MedicationRow {
                    key: skey,
                    drug_name: item.to_string(),
                    ndc: None,
                    start_time: start,
                    stop_time: stop,
                    dose: Some(round_to(rng.gen_range(1.0..250.0), 1)),
                    dose_unit: Some(unit.to_string()),
                });
            }
            for _ in 0..rng.gen_range(0..3) {
                out.procedureevents.push(ProcedureRow {
                    key: skey,
                    code: pick(&mut rng, PROCEDURE_ITEMS).to_string(),
                    event_time: uniform_time(&mut rng, in_time, out_time),
                });
            }
        }

        if dies {
            break;
        }
        cursor = discharge.plus_seconds(minutes(rng.gen_range(SECONDS_PER_HOUR..=200 * SECONDS_PER_DAY)));
    }

    out.patients.push(PatientRow {
        subject_id,
        gender,
        anchor_age,
        anchor_year,
        date_of_death,
    });
    out
}

/// With probability `fraction`, breaks the interval: either reversed or
/// starting after discharge.
fn corrupt_interval(
    rng: &mut ChaCha8Rng,
    fraction: f64,
    start: Timestamp,
    stop: Timestamp,
    discharge: Timestamp,
) -> (Timestamp, Timestamp) {
    if !rng.gen_bool(fraction) {
        return (start, stop);
    }
    if rng.gen_bool(0.5) && stop > start {
        (stop, start)
    } else {
        let s = discharge.plus_seconds(SECONDS_PER_DAY);
        (s, s.plus_seconds(SECONDS_PER_HOUR))
    }
}

/// Summary of what was written.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub rows: BTreeMap<&'static str, usize>,
}

/// Writes all ten input tables under `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary, SynthError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| SynthError::Dir {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let parts: Vec<PatientTables> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(spec, i))
        .collect();

    let mut all = PatientTables::default();
    for p in parts {
        all.patients.extend(p.patients);
        all.admissions.extend(p.admissions);
        all.diagnoses.extend(p.diagnoses);
        all.labevents.extend(p.labevents);
        all.chartevents.extend(p.chartevents);
        all.prescriptions.extend(p.prescriptions);
        all.inputevents.extend(p.inputevents);
        all.procedures_icd.extend(p.procedures_icd);
        all.procedureevents.extend(p.procedureevents);
        all.icustays.extend(p.icustays);
    }

    let mut summary = SynthSummary::default();
    fn emit<R: Record>(dir: &Path, s: TableSchema, rows: &[R], summary: &mut SynthSummary) -> Result<(), SynthError> {
        write_table(&dir.join(format!("{}.csv", s.name)), s, rows)?;
        summary.rows.insert(s.name, rows.len());
        Ok(())
    }
    emit(out_dir, schema::PATIENTS, &all.patients, &mut summary)?;
    emit(out_dir, schema::ADMISSIONS, &all.admissions, &mut summary)?;
    emit(out_dir, schema::DIAGNOSES_ICD, &all.diagnoses, &mut summary)?;
    emit(out_dir, schema::LABEVENTS, &all.labevents, &mut summary)?;
    emit(out_dir, schema::CHARTEVENTS, &all.chartevents, &mut summary)?;
    emit(out_dir, schema::PRESCRIPTIONS, &all.prescriptions, &mut summary)?;
    emit(out_dir, schema::INPUTEVENTS, &all.inputevents, &mut summary)?;
    emit(out_dir, schema::PROCEDURES_ICD, &all.procedures_icd, &mut summary)?;
    emit(out_dir, schema::PROCEDUREEVENTS, &all.procedureevents, &mut summary)?;
    emit(out_dir, schema::ICUSTAYS, &all.icustays, &mut summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let mut s = SynthSpec::default();
        s.disease_prevalence.insert("N18".into(), 1.5);
        assert!(s.validate().is_err());
        let s = SynthSpec {
            n_patients: 0,
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn admissions_are_ordered_and_positive_length() {
        let spec = SynthSpec {
            n_patients: 50,
            ..SynthSpec::default()
        };
        for i in 0..spec.n_patients {
            let p = generate_patient(&spec, i);
            for w in p.admissions.windows(2) {
                assert!(w[0].discharge_time < w[1].admit_time);
            }
            assert!(p.admissions.iter().all(|a| a.admit_time < a.discharge_time));
        }
    }
}
