//! End-to-end orchestration of the pipeline stages.
//!
//! [`prepare`] covers extraction up to the feature summaries, [`build`] applies
//! selection, cleaning and time-series regularization, and [`write_outputs`] /
//! [`model_and_evaluate`] persist results. The wizard pauses between
//! `prepare` and `build` to show summaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cleaning::{apply_bounds, harmonize_units, outlier_bounds, UnitRules, UnitTally};
use crate::cohort::{extract_cohort, Cohort, CohortSample, Setting, TaskError};
use crate::config::{ConfigError, PipelineConfig, Selection, Source};
use crate::evaluation::{
    age_band, evaluate, fairness, render_fairness_gaps, render_fairness_report, render_metrics, EvalError,
    FairnessReport, MetricReport,
};
use crate::features::{Family, FeatureColumn, FeatureRegistry};
use crate::grouping::{group_diagnoses, medication_code, GroupingTally, IcdMapTable, IcdRoot, NdcDirectory};
use crate::ingest::{check_referential_integrity, Dataset, EventKey, IngestError, IntegrityReport, MeasurementRow};
use crate::modeling::{cross_validate, shape, ModelError};
use crate::reference::ReferenceError;
use crate::store::{self, Layout, StoreError};
use crate::summary::{apply_selection, summarize, FeatureSummary, KeepList, Occurrence};
use crate::time::Timestamp;
use crate::timeseries::{
    build_dynamic, verify_times, DoseInterval, GridError, ImputeTally, MeasurementPoint, ProcedurePoint, SampleEvents,
    SampleTensor, VerificationReport,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{what} {path}: {source}")]
    Reference {
        what: &'static str,
        path: PathBuf,
        source: ReferenceError,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {reason}")]
    Input { path: PathBuf, reason: String },
    #[error("no demographics for sample ids {0:?}")]
    JoinMiss(Vec<String>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// 1 for invalid user choices, 2 for problems with the data.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Task(_)
            | PipelineError::Grid(_)
            | PipelineError::Reference { .. } => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reference tables resolved from the configuration.
pub struct References {
    pub icd_map: IcdMapTable,
    pub ndc_directory: NdcDirectory,
    pub unit_rules: UnitRules,
}

impl References {
    pub fn load(config: &PipelineConfig) -> Result<Self, PipelineError> {
        fn load<T>(
            what: &'static str,
            src: &Source,
            builtin: fn() -> T,
            file: fn(&Path) -> Result<T, ReferenceError>,
        ) -> Result<T, PipelineError> {
            match src {
                Source::Builtin => Ok(builtin()),
                Source::File(p) => file(p).map_err(|source| PipelineError::Reference {
                    what,
                    path: p.clone(),
                    source,
                }),
            }
        }
        Ok(References {
            icd_map: load("ICD map", &config.icd_map, IcdMapTable::builtin, IcdMapTable::load)?,
            ndc_directory: load(
                "NDC directory",
                &config.ndc_directory,
                NdcDirectory::builtin,
                NdcDirectory::load,
            )?,
            unit_rules: load("unit rules", &config.unit_rules, UnitRules::builtin, UnitRules::load)?,
        })
    }
}

/// Keep-lists for every family whose selection names a file.
pub fn load_keep_lists(config: &PipelineConfig) -> Result<BTreeMap<Family, KeepList>, PipelineError> {
    let mut out = BTreeMap::new();
    for (fam, sel) in &config.selection {
        if let Selection::File(p) = sel {
            let list = KeepList::load(p).map_err(|source| PipelineError::Reference {
                what: "keep-list",
                path: p.clone(),
                source,
            })?;
            out.insert(*fam, list);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventValue {
    Measurement(Option<f64>),
    Dose { stop: Timestamp, dose: Option<f64> },
    Procedure,
}

/// A dynamic event, already windowed and coded.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedEvent {
    pub family: Family,
    pub code: String,
    pub time: Timestamp,
    pub value: EventValue,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleRecord {
    pub roots: BTreeSet<IcdRoot>,
    pub events: Vec<CodedEvent>,
}

/// Counters gathered across the run, rendered into `pipeline_report.txt`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunReport {
    pub tables: Vec<(String, usize, usize)>,
    pub integrity: BTreeMap<String, usize>,
    pub grouping: GroupingTally,
    pub verification: VerificationReport,
    pub units: UnitTally,
    pub outliers_removed: usize,
    pub outliers_capped: usize,
    pub unobserved_features: usize,
    pub imputed_cells: usize,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, records, q) in &self.tables {
            let _ = writeln!(s, "table.{t}: {records} rows, {q} quarantined");
        }
        for (k, v) in &self.integrity {
            let _ = writeln!(s, "integrity.{k}: {v}");
        }
        let g = &self.grouping;
        let _ = writeln!(s, "grouping.icd9_unmapped: {}", g.icd9_unmapped);
        let _ = writeln!(s, "grouping.icd10_malformed: {}", g.icd10_malformed);
        let _ = writeln!(s, "grouping.ndc_malformed: {}", g.ndc_malformed);
        let _ = writeln!(s, "grouping.ndc_unmapped: {}", g.ndc_unmapped);
        let v = &self.verification;
        for (k, n) in [
            ("admissions_excluded", v.admissions_excluded),
            ("stays_excluded", v.stays_excluded),
            ("meds_start_after_stop", v.meds_start_after_stop),
            ("meds_start_after_discharge", v.meds_start_after_discharge),
            ("meds_stop_before_admit", v.meds_stop_before_admit),
            ("meds_without_valid_stay", v.meds_without_valid_stay),
            ("meds_start_clamped", v.meds_start_clamped),
            ("meds_stop_clamped", v.meds_stop_clamped),
        ] {
            let _ = writeln!(s, "verification.{k}: {n}");
        }
        let _ = writeln!(s, "cleaning.units_converted: {}", self.units.converted);
        let _ = writeln!(s, "cleaning.unknown_unit_rows: {}", self.units.unknown_unit);
        let _ = writeln!(s, "cleaning.outliers_removed: {}", self.outliers_removed);
        let _ = writeln!(s, "cleaning.outliers_capped: {}", self.outliers_capped);
        let _ = writeln!(s, "timeseries.unobserved_features: {}", self.unobserved_features);
        let _ = writeln!(s, "timeseries.imputed_cells: {}", self.imputed_cells);
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

/// Everything up to (and including) feature summaries.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cohort: Cohort,
    pub records: Vec<SampleRecord>,
    pub summaries: Vec<FeatureSummary>,
    pub integrity: IntegrityReport,
    pub report: RunReport,
}

fn in_window(t: Timestamp, s: &CohortSample) -> bool {
    t >= s.window_start && t <= s.window_end
}

fn index_by_key<T>(rows: &[T], key: impl Fn(&T) -> EventKey) -> HashMap<EventKey, Vec<&T>> {
    let mut m: HashMap<EventKey, Vec<&T>> = HashMap::new();
    for r in rows {
        m.entry(key(r)).or_default().push(r);
    }
    m
}

fn push_measurements(out: &mut Vec<CodedEvent>, family: Family, rows: Option<&Vec<&MeasurementRow>>, s: &CohortSample) {
    for r in rows.into_iter().flatten() {
        if in_window(r.chart_time, s) {
            out.push(CodedEvent {
                family,
                code: r.item_id.to_string(),
                time: r.chart_time,
                value: EventValue::Measurement(r.value),
            });
        }
    }
}

/// Loads nothing from disk: runs extraction, grouping, verification, cohort
/// selection, windowing and summaries over an in-memory dataset.
pub fn prepare(data: &Dataset, config: &PipelineConfig, refs: &References) -> Result<Prepared, PipelineError> {
    config.task.validate()?;
    let mut report = RunReport {
        tables: data
            .reports
            .iter()
            .map(|r| (r.table.clone(), r.records, r.quarantined.len()))
            .collect(),
        ..RunReport::default()
    };
    let integrity = check_referential_integrity(data);
    report.integrity = integrity
        .violations
        .iter()
        .map(|(k, v)| (k.to_string(), v.count))
        .collect();
    if !integrity.is_empty() {
        report.warnings.push(format!(
            "{} referential integrity violations; orphan rows are ignored",
            integrity.total()
        ));
    }

    let (roots, mut grouping) = group_diagnoses(&data.diagnoses, &refs.icd_map);
    let icu = config.task.setting == Setting::Icu;
    let families: BTreeSet<Family> = config.families.iter().copied().collect();
    if !icu && families.contains(&Family::Vitals) {
        report
            .warnings
            .push("vitals are charted only during ICU stays; the family is empty for non-ICU cohorts".into());
    }

    let meds_table = if icu { &data.inputevents } else { &data.prescriptions };
    let verified = verify_times(&data.admissions, &data.icustays, meds_table);
    report.verification = verified.report;

    let cohort = extract_cohort(data, &roots, &config.task)?;
    report.warnings.extend(cohort.report.warnings.iter().cloned());
    info!(
        "cohort: {} samples, {} positive",
        cohort.samples.len(),
        cohort.report.positives
    );

    let (labs, units_a) = if families.contains(&Family::Labs) {
        harmonize_units(data.labevents.clone(), &refs.unit_rules)
    } else {
        (Vec::new(), UnitTally::default())
    };
    let (vitals, units_b) = if icu && families.contains(&Family::Vitals) {
        harmonize_units(data.chartevents.clone(), &refs.unit_rules)
    } else {
        (Vec::new(), UnitTally::default())
    };
    report.units = UnitTally {
        converted: units_a.converted + units_b.converted,
        unknown_unit: units_a.unknown_unit + units_b.unknown_unit,
    };

    let labs_ix = index_by_key(&labs, |r| r.key);
    let vitals_ix = index_by_key(&vitals, |r| r.key);
    let meds_ix = index_by_key(&verified.medications, |r| r.key);
    let procs = if icu {
        &data.procedureevents
    } else {
        &data.procedures_icd
    };
    let procs_ix = index_by_key(procs, |r| r.key);

    let mut records = Vec::with_capacity(cohort.samples.len());
    for s in &cohort.samples {
        let adm_key = EventKey::Admission(s.hadm_id);
        let unit_key = match s.stay_id {
            Some(id) if icu => EventKey::Stay(id),
            _ => adm_key,
        };
        let mut rec = SampleRecord::default();
        if families.contains(&Family::Diagnoses) {
            rec.roots = roots.get(&s.hadm_id).cloned().unwrap_or_default();
        }
        if families.contains(&Family::Labs) {
            push_measurements(&mut rec.events, Family::Labs, labs_ix.get(&adm_key), s);
        }
        if families.contains(&Family::Vitals) {
            push_measurements(&mut rec.events, Family::Vitals, vitals_ix.get(&unit_key), s);
        }
        if families.contains(&Family::Medications) {
            for m in meds_ix.get(&unit_key).into_iter().flatten() {
                if m.start_time <= s.window_end && m.stop_time >= s.window_start {
                    let code = if icu {
                        m.drug_name.clone()
                    } else {
                        medication_code(m, &refs.ndc_directory, &mut grouping)
                    };
                    rec.events.push(CodedEvent {
                        family: Family::Medications,
                        code,
                        time: m.start_time,
                        value: EventValue::Dose {
                            stop: m.stop_time,
                            dose: m.dose,
                        },
                    });
                }
            }
        }
        if families.contains(&Family::Procedures) {
            for p in procs_ix.get(&unit_key).into_iter().flatten() {
                if in_window(p.event_time, s) {
                    rec.events.push(CodedEvent {
                        family: Family::Procedures,
                        code: p.code.clone(),
                        time: p.event_time,
                        value: EventValue::Procedure,
                    });
                }
            }
        }
        records.push(rec);
    }
    report.grouping = grouping;

    let summaries = summarize_records(&cohort.samples, &records, &families);
    Ok(Prepared {
        cohort,
        records,
        summaries,
        integrity,
        report,
    })
}

fn summarize_records(
    samples: &[CohortSample],
    records: &[SampleRecord],
    families: &BTreeSet<Family>,
) -> Vec<FeatureSummary> {
    let root_strings: Vec<Vec<String>> = records
        .iter()
        .map(|r| r.roots.iter().map(IcdRoot::to_string).collect())
        .collect();
    families
        .iter()
        .map(|&fam| {
            let occ: Vec<Occurrence<'_>> = if fam == Family::Diagnoses {
                samples
                    .iter()
                    .zip(&root_strings)
                    .flat_map(|(s, roots)| {
                        roots.iter().map(move |c| Occurrence {
                            sample_id: s.sample_id,
                            code: c,
                            value_missing: None,
                        })
                    })
                    .collect()
            } else {
                samples
                    .iter()
                    .zip(records)
                    .flat_map(|(s, r)| {
                        r.events
                            .iter()
                            .filter(move |e| e.family == fam)
                            .map(move |e| Occurrence {
                                sample_id: s.sample_id,
                                code: &e.code,
                                value_missing: match e.value {
                                    EventValue::Measurement(v) => Some(v.is_none()),
                                    _ => None,
                                },
                            })
                    })
                    .collect()
            };
            summarize(fam, samples.len(), occ)
        })
        .collect()
}

/// Cohort tensors ready for writing and modeling.
#[derive(Debug, Clone)]
pub struct Built {
    pub samples: Vec<CohortSample>,
    pub tensors: Vec<SampleTensor>,
    pub layout: Layout,
    pub n_bins: usize,
    pub report: RunReport,
}

/// Demographic columns: age, a male indicator, then one-hot ethnicity and
/// insurance over the values seen in the cohort.
fn demographic_layout(samples: &[CohortSample]) -> (Vec<String>, Vec<String>, Vec<String>) {
    let eth: BTreeSet<&str> = samples.iter().map(|s| s.demographics.ethnicity.as_str()).collect();
    let ins: BTreeSet<&str> = samples.iter().map(|s| s.demographics.insurance.as_str()).collect();
    let eth: Vec<String> = eth.into_iter().map(str::to_string).collect();
    let ins: Vec<String> = ins.into_iter().map(str::to_string).collect();
    let mut headers = vec!["age".to_string(), "gender:M".to_string()];
    headers.extend(eth.iter().map(|e| format!("ethnicity:{e}")));
    headers.extend(ins.iter().map(|i| format!("insurance:{i}")));
    (headers, eth, ins)
}

/// Applies keep-lists and outlier cleaning, then bins and imputes every
/// sample in parallel.
pub fn build(
    prepared: &Prepared,
    config: &PipelineConfig,
    keep: &BTreeMap<Family, KeepList>,
) -> Result<Built, PipelineError> {
    let grid = crate::timeseries::GridSpec::new(config.resolution_hours, config.task.window.hours)?;
    let policy = config.outlier_policy();
    let mut report = prepared.report.clone();
    let samples = &prepared.cohort.samples;

    let mut records: Vec<SampleRecord> = prepared.records.clone();
    for fam in &config.families {
        let Some(list) = keep.get(fam) else { continue };
        if *fam == Family::Diagnoses {
            let present: BTreeSet<String> = records
                .iter()
                .flat_map(|r| r.roots.iter().map(IcdRoot::to_string))
                .collect();
            for c in list.codes().filter(|c| !present.contains(*c)) {
                report
                    .warnings
                    .push(format!("keep-list code {c:?} not present in data"));
            }
            for r in &mut records {
                r.roots.retain(|root| list.contains(&root.to_string()));
            }
            continue;
        }
        // warnings only need the union of codes, selection is per-sample
        let union: Vec<String> = records
            .iter()
            .flat_map(|r| r.events.iter().filter(|e| e.family == *fam).map(|e| e.code.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let (_, w) = apply_selection(union, |c| c.as_str(), Some(list));
        report.warnings.extend(w.into_iter().map(|m| format!("{fam}: {m}")));
        for r in &mut records {
            let events = std::mem::take(&mut r.events);
            r.events = events
                .into_iter()
                .filter(|e| e.family != *fam || list.contains(&e.code))
                .collect();
        }
    }

    // outlier bounds per (family, item) over in-window cohort values
    let mut pools: BTreeMap<(Family, &str), Vec<f64>> = BTreeMap::new();
    for r in &records {
        for e in &r.events {
            if let EventValue::Measurement(Some(v)) = e.value {
                pools.entry((e.family, e.code.as_str())).or_default().push(v);
            }
        }
    }
    let bounds: HashMap<(Family, String), (f64, f64)> = pools
        .into_iter()
        .filter_map(|((f, c), vals)| {
            outlier_bounds(&vals, policy.threshold_percentile).map(|b| ((f, c.to_string()), b))
        })
        .collect();
    for r in &mut records {
        let events = std::mem::take(&mut r.events);
        for mut e in events {
            if let EventValue::Measurement(Some(v)) = e.value {
                let (lo, hi) = bounds[&(e.family, e.code.clone())];
                match apply_bounds(v, lo, hi, policy.mode) {
                    Some(c) => {
                        if c != v {
                            report.outliers_capped += 1;
                        }
                        e.value = EventValue::Measurement(Some(c));
                    }
                    None => {
                        report.outliers_removed += 1;
                        continue;
                    }
                }
            }
            r.events.push(e);
        }
    }

    let registry = FeatureRegistry::new(records.iter().flat_map(|r| {
        r.events.iter().map(|e| FeatureColumn {
            family: e.family,
            code: e.code.clone(),
        })
    }));
    let static_cols: Vec<IcdRoot> = records
        .iter()
        .flat_map(|r| r.roots.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (demo_headers, eth, ins) = demographic_layout(samples);
    let kinds = registry.kinds();

    let results: Vec<(SampleTensor, ImputeTally)> = samples
        .par_iter()
        .zip(records.par_iter())
        .map(|(s, r)| {
            let events = to_sample_events(r, &registry);
            let (g, tally) = build_dynamic(
                &events,
                s.window_start,
                &grid,
                &kinds,
                config.aggregation,
                config.imputation,
            );
            let static_features = static_cols.iter().map(|c| u8::from(r.roots.contains(c))).collect();
            let d = &s.demographics;
            let mut demographic = vec![
                f64::from(s.age_at_admission),
                if d.gender.as_str() == "M" { 1.0 } else { 0.0 },
            ];
            demographic.extend(eth.iter().map(|e| if *e == d.ethnicity { 1.0 } else { 0.0 }));
            demographic.extend(ins.iter().map(|i| if *i == d.insurance { 1.0 } else { 0.0 }));
            let tensor = SampleTensor {
                n_bins: g.n_bins,
                n_dynamic: g.n_cols,
                dynamic: g.values,
                presence: g.presence,
                static_features,
                demographic,
            };
            (tensor, tally)
        })
        .collect();
    let mut tensors = Vec::with_capacity(results.len());
    for (t, tally) in results {
        report.unobserved_features += tally.unobserved_features;
        report.imputed_cells += tally.imputed_cells;
        tensors.push(t);
    }
    let layout = Layout {
        dynamic: registry.headers(),
        static_: static_cols.iter().map(|r| format!("diagnoses:{r}")).collect(),
        demographic: demo_headers,
    };
    Ok(Built {
        samples: samples.clone(),
        tensors,
        layout,
        n_bins: grid.n_bins(),
        report,
    })
}

/// Maps a sample's coded events onto registry columns.
pub fn to_sample_events(record: &SampleRecord, registry: &FeatureRegistry) -> SampleEvents {
    let mut out = SampleEvents::default();
    for e in &record.events {
        let Some(col) = registry.get(e.family, &e.code) else {
            continue;
        };
        match e.value {
            EventValue::Measurement(Some(value)) => out.measurements.push(MeasurementPoint {
                col,
                time: e.time,
                value,
            }),
            EventValue::Measurement(None) => {}
            EventValue::Dose { stop, dose } => out.medications.push(DoseInterval {
                col,
                start: e.time,
                stop,
                dose,
            }),
            EventValue::Procedure => out.procedures.push(ProcedurePoint { col, time: e.time }),
        }
    }
    out
}

pub fn render_demographics(samples: &[CohortSample]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "gender", "ethnicity", "insurance", "age"])
        .expect("in-memory write");
    for s in samples {
        let d = &s.demographics;
        w.write_record([
            &s.sample_id.to_string(),
            d.gender.as_str(),
            &d.ethnicity,
            &d.insurance,
            &s.age_at_admission.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Writes sample files, manifest, bundle, summaries, reports and provenance.
pub fn write_outputs(
    out: &Path,
    prepared: &Prepared,
    built: &Built,
    config: &PipelineConfig,
) -> Result<(), PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let pairs: Vec<(i64, &SampleTensor)> = built.samples.iter().map(|s| s.sample_id).zip(&built.tensors).collect();
    store::write_samples(out, &pairs, &built.layout)?;
    store::write_manifest(out, &built.samples)?;
    if config.write_bundle {
        let pairs: Vec<(&CohortSample, &SampleTensor)> = built.samples.iter().zip(&built.tensors).collect();
        let bundle = store::build_bundle(built.n_bins, &built.layout, &pairs)?;
        if bundle.samples.is_empty() {
            warn!("empty cohort: bundle has no samples");
        }
        store::write_bundle(out, &bundle)?;
    }
    let sdir = out.join("summaries");
    fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
    for s in &prepared.summaries {
        let p = sdir.join(format!("{}.csv", s.family));
        fs::write(&p, s.to_csv()).map_err(io_err(&p))?;
    }
    let write = |name: &str, body: String| -> Result<(), PipelineError> {
        let p = out.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    write("demographics.csv", render_demographics(&built.samples))?;
    write("cohort_report.txt", prepared.cohort.report.to_text())?;
    write("pipeline_report.txt", built.report.to_text())?;
    store::write_provenance(out, &config.to_record())?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub metrics: MetricReport,
    pub fairness: FairnessReport,
}

/// Sensitive attributes used for the fairness audit.
pub fn fairness_attributes(samples: &[CohortSample]) -> Vec<(String, Vec<String>)> {
    vec![
        (
            "ethnicity".to_string(),
            samples.iter().map(|s| s.demographics.ethnicity.clone()).collect(),
        ),
        (
            "gender".to_string(),
            samples
                .iter()
                .map(|s| s.demographics.gender.as_str().to_string())
                .collect(),
        ),
        (
            "age".to_string(),
            samples
                .iter()
                .map(|s| age_band(i64::from(s.age_at_admission)))
                .collect(),
        ),
    ]
}

pub fn write_evaluation(out: &Path, ids: &[String], labels: &[u8], eval: &Evaluation) -> Result<(), PipelineError> {
    let write = |name: &str, body: String| -> Result<(), PipelineError> {
        let p = out.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    let mut preds = String::from("sample_id,label,score\n");
    for ((id, l), s) in ids.iter().zip(labels).zip(&eval.scores) {
        let _ = writeln!(preds, "{id},{l},{s}");
    }
    if !eval.scores.is_empty() {
        write("predictions.csv", preds)?;
    }
    write("metrics.csv", render_metrics(&eval.metrics))?;
    write("fairness.csv", render_fairness_report(&eval.fairness))?;
    write("fairness_gaps.csv", render_fairness_gaps(&eval.fairness))?;
    Ok(())
}

/// Cross-validated out-of-fold scoring followed by the metric and fairness
/// reports. Returns `None` (with a warning) when the cohort cannot support
/// the configured folds.
pub fn model_and_evaluate(
    out: &Path,
    built: &Built,
    config: &PipelineConfig,
) -> Result<Option<Evaluation>, PipelineError> {
    if !config.model.enabled {
        return Ok(None);
    }
    let labels: Vec<u8> = built.samples.iter().map(|s| s.label).collect();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.len() < config.model.folds || pos == 0 || pos == labels.len() {
        let msg = format!(
            "modeling skipped: {} samples, {} positive, {} folds requested",
            labels.len(),
            pos,
            config.model.folds
        );
        warn!("{msg}");
        let p = out.join("modeling_skipped.txt");
        fs::write(&p, format!("{msg}\n")).map_err(io_err(&p))?;
        return Ok(None);
    }
    let x = shape(&built.tensors, config.model.shaping)?;
    let cv = cross_validate(
        &config.model.params,
        &x,
        &labels,
        config.model.folds,
        config.model.oversample,
        config.seed,
    )?;
    for w in &cv.warnings {
        warn!("{w}");
    }
    let metrics = evaluate(&labels, &cv.scores, config.threshold, config.calibration_bins)?;
    let fairness = fairness(
        &labels,
        &cv.scores,
        config.threshold,
        &fairness_attributes(&built.samples),
    )?;
    for w in &fairness.warnings {
        warn!("{w}");
    }
    let eval = Evaluation {
        scores: cv.scores,
        metrics,
        fairness,
    };
    let ids: Vec<String> = built.samples.iter().map(|s| s.sample_id.to_string()).collect();
    write_evaluation(out, &ids, &labels, &eval)?;
    Ok(Some(eval))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub samples: usize,
    pub positives: usize,
    pub evaluation: Option<Evaluation>,
    pub warnings: Vec<String>,
}

/// The whole pipeline for one configuration.
pub fn run(input: &Path, out: &Path, config: &PipelineConfig) -> Result<RunOutcome, PipelineError> {
    let refs = References::load(config)?;
    let keep = load_keep_lists(config)?;
    let data = Dataset::load(input)?;
    let prepared = prepare(&data, config, &refs)?;
    drop(data);
    let built = build(&prepared, config, &keep)?;
    write_outputs(out, &prepared, &built, config)?;
    let evaluation = model_and_evaluate(out, &built, config)?;
    Ok(RunOutcome {
        samples: built.samples.len(),
        positives: prepared.cohort.report.positives,
        evaluation,
        warnings: built.report.warnings.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct StandaloneOutcome {
    pub metrics: MetricReport,
    pub fairness: Option<FairnessReport>,
    pub rejected: Vec<String>,
    pub warnings: Vec<String>,
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>), PipelineError> {
    let bad = |reason: String| PipelineError::Input {
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_lowercase())
        .collect();
    let rows = rdr
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    Ok((headers, rows))
}

fn column(path: &Path, headers: &[String], name: &str) -> Result<usize, PipelineError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| PipelineError::Input {
            path: path.to_path_buf(),
            reason: format!("missing column {name}"),
        })
}

/// Scores an existing predictions file (`sample_id,label,score`) and, when a
/// demographics file is given, audits fairness. Bad rows are rejected and
/// reported rather than aborting.
pub fn evaluate_standalone(
    predictions: &Path,
    demographics: Option<&Path>,
    threshold: f64,
    calibration_bins: usize,
    out: &Path,
) -> Result<StandaloneOutcome, PipelineError> {
    let (headers, rows) = read_csv(predictions)?;
    let (ci, cl, cs) = (
        column(predictions, &headers, "sample_id")?,
        column(predictions, &headers, "label")?,
        column(predictions, &headers, "score")?,
    );
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    let mut rejected = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let line = i + 2;
        let id = r.get(ci).unwrap_or("").trim().to_string();
        let label = match r.get(cl).map(str::trim) {
            Some("0") => 0u8,
            Some("1") => 1,
            other => {
                rejected.push(format!("line {line}: label {other:?} is not 0 or 1"));
                continue;
            }
        };
        match r.get(cs).map(str::trim).and_then(|s| s.parse::<f64>().ok()) {
            Some(s) if (0.0..=1.0).contains(&s) => {
                ids.push(id);
                labels.push(label);
                scores.push(s);
            }
            Some(s) => rejected.push(format!("line {line}: score {s} is outside [0, 1]")),
            None => rejected.push(format!(
                "line {line}: score {:?} is not a number",
                r.get(cs).unwrap_or("")
            )),
        }
    }
    for m in &rejected {
        warn!("{}: {m}", predictions.display());
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let metrics = evaluate(&labels, &scores, threshold, calibration_bins)?;
    let mut warnings = Vec::new();
    let fairness_report = match demographics {
        None => {
            warnings.push("no demographics file; fairness audit skipped".to_string());
            None
        }
        Some(dpath) => {
            let (dh, drows) = read_csv(dpath)?;
            let di = column(dpath, &dh, "sample_id")?;
            let dg = column(dpath, &dh, "gender")?;
            let de = column(dpath, &dh, "ethnicity")?;
            let da = column(dpath, &dh, "age")?;
            let by_id: HashMap<&str, &csv::StringRecord> =
                drows.iter().map(|r| (r.get(di).unwrap_or("").trim(), r)).collect();
            let missing: Vec<String> = ids
                .iter()
                .filter(|id| !by_id.contains_key(id.as_str()))
                .cloned()
                .collect();
            if !missing.is_empty() {
                let p = out.join("metrics.csv");
                fs::write(&p, render_metrics(&metrics)).map_err(io_err(&p))?;
                return Err(PipelineError::JoinMiss(missing));
            }
            let field = |id: &str, c: usize| by_id[id].get(c).unwrap_or("").trim().to_string();
            let attrs = vec![
                ("ethnicity".to_string(), ids.iter().map(|id| field(id, de)).collect()),
                ("gender".to_string(), ids.iter().map(|id| field(id, dg)).collect()),
                (
                    "age".to_string(),
                    ids.iter()
                        .map(|id| {
                            field(id, da)
                                .parse::<i64>()
                                .map(age_band)
                                .unwrap_or_else(|_| "unknown".to_string())
                        })
                        .collect(),
                ),
            ];
            Some(fairness(&labels, &scores, threshold, &attrs)?)
        }
    };
    let p = out.join("metrics.csv");
    fs::write(&p, render_metrics(&metrics)).map_err(io_err(&p))?;
    if let Some(f) = &fairness_report {
        let p = out.join("fairness.csv");
        fs::write(&p, render_fairness_report(f)).map_err(io_err(&p))?;
        let p = out.join("fairness_gaps.csv");
        fs::write(&p, render_fairness_gaps(f)).map_err(io_err(&p))?;
        warnings.extend(f.warnings.iter().cloned());
    }
    Ok(StandaloneOutcome {
        metrics,
        fairness: fairness_report,
        rejected,
        warnings,
    })
}
