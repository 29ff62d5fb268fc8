//! Pipeline configuration and its provenance record.
//!
//! One line-oriented `stage.key = value` format serves both roles: a
//! finished run writes every resolved choice, and that file replays the run.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Display};
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::cleaning::{OutlierMode, OutlierPolicy};
use crate::cohort::{ObservationWindow, Setting, TaskKind, TaskSpec, WindowAnchor};
use crate::features::Family;
use crate::grouping::IcdRoot;
use crate::modeling::{LogisticParams, Shaping};
use crate::synth::SynthSpec;
use crate::timeseries::{Aggregation, GridSpec, Imputation};

pub const TOOL_VERSION: &str = concat!("ehrpipe ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `stage.key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("configuration key `{0}` given twice")]
    DuplicateKey(String),
    #[error("required key `{0}` is missing")]
    Missing(String),
    #[error("incomplete record: no entry for {0}")]
    Incomplete(String),
    #[error("`{key}` = {value:?}: {reason}")]
    Invalid { key: String, value: String, reason: String },
    #[error("{key} = {value} is outside the valid range {range}")]
    OutOfRange { key: String, value: String, range: String },
    #[error("record written by {found}, this is {expected}; refusing to replay")]
    ToolVersion { found: String, expected: String },
}

/// Ordered `(stage, key, value)` entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProvenanceRecord {
    entries: Vec<(String, String, String)>,
}

impl ProvenanceRecord {
    pub fn push(&mut self, stage: &str, key: &str, value: impl Display) {
        self.entries
            .push((stage.to_string(), key.to_string(), value.to_string()));
    }

    pub fn pop(&mut self) -> Option<(String, String, String)> {
        self.entries.pop()
    }

    pub fn entries(&self) -> &[(String, String, String)] {
        &self.entries
    }

    pub fn get(&self, full_key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(s, k, _)| full_key.split_once('.') == Some((s.as_str(), k.as_str())))
            .map(|(_, _, v)| v.as_str())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut rec = ProvenanceRecord::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = || ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            };
            let (lhs, value) = line.split_once('=').ok_or_else(syntax)?;
            let (stage, key) = lhs.trim().split_once('.').ok_or_else(syntax)?;
            if stage.is_empty() || key.is_empty() {
                return Err(syntax());
            }
            let full = format!("{stage}.{key}");
            if !seen.insert(full.clone()) {
                return Err(ConfigError::DuplicateKey(full));
            }
            rec.push(stage, key, value.trim());
        }
        Ok(rec)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (s, k, v) in &self.entries {
            out.push_str(&format!("{s}.{k} = {v}\n"));
        }
        out
    }
}

/// A bundled reference table or a user file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Builtin,
    File(PathBuf),
}

impl Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Builtin => f.write_str("builtin"),
            Source::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl From<&str> for Source {
    fn from(s: &str) -> Self {
        if s == "builtin" {
            Source::Builtin
        } else {
            Source::File(PathBuf::from(s))
        }
    }
}

/// Per-family feature selection: everything, or the codes in a keep-list file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    All,
    File(PathBuf),
}

impl Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::All => f.write_str("all"),
            Selection::File(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub enabled: bool,
    pub shaping: Shaping,
    pub folds: usize,
    pub oversample: bool,
    pub params: LogisticParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset_version: String,
    pub seed: u64,
    pub task: TaskSpec,
    pub families: Vec<Family>,
    pub icd_map: Source,
    pub ndc_directory: Source,
    pub selection: BTreeMap<Family, Selection>,
    pub unit_rules: Source,
    pub outlier_threshold: f64,
    pub outlier_mode: OutlierMode,
    pub resolution_hours: f64,
    pub aggregation: Aggregation,
    pub imputation: Imputation,
    pub write_bundle: bool,
    pub model: ModelConfig,
    pub threshold: f64,
    pub calibration_bins: usize,
}

/// Every key a complete record carries, in rendering order.
pub const KNOWN_KEYS: &[&str] = &[
    "tool.version",
    "dataset.version",
    "run.seed",
    "task.kind",
    "task.setting",
    "task.disease_filter",
    "task.gap_days",
    "task.readmission_boundary",
    "task.los_threshold_days",
    "task.window_anchor",
    "task.window_hours",
    "task.phenotype_target",
    "features.families",
    "grouping.icd_map",
    "grouping.icd_tie_rule",
    "grouping.unmapped_icd9",
    "grouping.ndc_directory",
    "selection.diagnoses",
    "selection.labs",
    "selection.vitals",
    "selection.medications",
    "selection.procedures",
    "cleaning.unit_rules",
    "cleaning.outlier_threshold",
    "cleaning.outlier_mode",
    "cleaning.percentile_method",
    "cleaning.outlier_population",
    "timeseries.resolution_hours",
    "timeseries.aggregation",
    "timeseries.imputation",
    "timeseries.med_overlap",
    "output.bundle",
    "model.enabled",
    "model.shaping",
    "model.folds",
    "model.oversample",
    "model.learning_rate",
    "model.epochs",
    "model.l2",
    "model.patience",
    "model.validation_fraction",
    "evaluation.threshold",
    "evaluation.calibration_bins",
];

/// Keys documenting fixed behavior; any other value is rejected.
const FIXED: &[(&str, &str)] = &[
    ("task.readmission_boundary", "inclusive"),
    ("grouping.icd_tie_rule", "lexicographic_min"),
    ("grouping.unmapped_icd9", "drop"),
    ("cleaning.percentile_method", "nearest_rank"),
    ("cleaning.outlier_population", "cohort_per_item"),
    ("timeseries.med_overlap", "sum"),
];

pub fn task_kind_str(k: TaskKind) -> &'static str {
    match k {
        TaskKind::Readmission => "readmission",
        TaskKind::Mortality => "mortality",
        TaskKind::LengthOfStay => "los",
        TaskKind::Phenotype => "phenotype",
    }
}

pub fn parse_task_kind(s: &str) -> Option<TaskKind> {
    match s {
        "readmission" => Some(TaskKind::Readmission),
        "mortality" => Some(TaskKind::Mortality),
        "los" | "length_of_stay" => Some(TaskKind::LengthOfStay),
        "phenotype" => Some(TaskKind::Phenotype),
        _ => None,
    }
}

fn setting_str(s: Setting) -> &'static str {
    match s {
        Setting::Icu => "icu",
        Setting::NonIcu => "non_icu",
    }
}

fn anchor_str(a: WindowAnchor) -> &'static str {
    match a {
        WindowAnchor::FirstHours => "first",
        WindowAnchor::LastHours => "last",
    }
}

fn aggregation_str(a: Aggregation) -> &'static str {
    match a {
        Aggregation::Mean => "mean",
        Aggregation::Last => "last",
        Aggregation::Max => "max",
    }
}

fn imputation_str(i: Imputation) -> &'static str {
    match i {
        Imputation::ForwardFillMean => "ffill_mean",
        Imputation::None => "none",
    }
}

fn outlier_mode_str(m: OutlierMode) -> &'static str {
    match m {
        OutlierMode::Remove => "remove",
        OutlierMode::Cap => "cap",
    }
}

fn opt_root(r: Option<IcdRoot>) -> String {
    r.map_or_else(|| "none".to_string(), |r| r.to_string())
}

impl PipelineConfig {
    /// Defaults for a task; windows follow the usual per-task choices.
    pub fn for_task(kind: TaskKind) -> Self {
        let hours = if kind == TaskKind::LengthOfStay { 24 } else { 48 };
        PipelineConfig {
            dataset_version: "unspecified".to_string(),
            seed: 0,
            task: TaskSpec {
                kind,
                setting: Setting::Icu,
                disease_filter: None,
                gap_days: 30,
                los_threshold_days: 3,
                window: ObservationWindow {
                    anchor: kind.default_anchor(),
                    hours,
                },
                phenotype_target: None,
            },
            families: Family::ALL.to_vec(),
            icd_map: Source::Builtin,
            ndc_directory: Source::Builtin,
            selection: Family::ALL.into_iter().map(|f| (f, Selection::All)).collect(),
            unit_rules: Source::Builtin,
            outlier_threshold: 2.0,
            outlier_mode: OutlierMode::Remove,
            resolution_hours: 2.0,
            aggregation: Aggregation::Mean,
            imputation: Imputation::ForwardFillMean,
            write_bundle: true,
            model: ModelConfig {
                enabled: true,
                shaping: Shaping::Aggregate,
                folds: 5,
                oversample: true,
                params: LogisticParams {
                    learning_rate: 0.1,
                    epochs: 200,
                    l2: 1e-3,
                    patience: 10,
                    validation_fraction: 0.1,
                },
            },
            threshold: 0.5,
            calibration_bins: 10,
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.resolution_hours, self.task.window.hours).expect("validated")
    }

    pub fn outlier_policy(&self) -> OutlierPolicy {
        OutlierPolicy::new(self.outlier_threshold, self.outlier_mode).expect("validated")
    }

    /// The full, ordered record of this configuration.
    pub fn to_record(&self) -> ProvenanceRecord {
        let t = &self.task;
        let p = &self.model.params;
        let families: Vec<&str> = self.families.iter().map(|f| f.as_str()).collect();
        let values: Vec<String> = vec![
            TOOL_VERSION.to_string(),
            self.dataset_version.clone(),
            self.seed.to_string(),
            task_kind_str(t.kind).to_string(),
            setting_str(t.setting).to_string(),
            opt_root(t.disease_filter),
            t.gap_days.to_string(),
            "inclusive".to_string(),
            t.los_threshold_days.to_string(),
            anchor_str(t.window.anchor).to_string(),
            t.window.hours.to_string(),
            opt_root(t.phenotype_target),
            families.join(","),
            self.icd_map.to_string(),
            "lexicographic_min".to_string(),
            "drop".to_string(),
            self.ndc_directory.to_string(),
            self.selection[&Family::Diagnoses].to_string(),
            self.selection[&Family::Labs].to_string(),
            self.selection[&Family::Vitals].to_string(),
            self.selection[&Family::Medications].to_string(),
            self.selection[&Family::Procedures].to_string(),
            self.unit_rules.to_string(),
            self.outlier_threshold.to_string(),
            outlier_mode_str(self.outlier_mode).to_string(),
            "nearest_rank".to_string(),
            "cohort_per_item".to_string(),
            self.resolution_hours.to_string(),
            aggregation_str(self.aggregation).to_string(),
            imputation_str(self.imputation).to_string(),
            "sum".to_string(),
            self.write_bundle.to_string(),
            self.model.enabled.to_string(),
            self.model.shaping.as_str().to_string(),
            self.model.folds.to_string(),
            self.model.oversample.to_string(),
            p.learning_rate.to_string(),
            p.epochs.to_string(),
            p.l2.to_string(),
            p.patience.to_string(),
            p.validation_fraction.to_string(),
            self.threshold.to_string(),
            self.calibration_bins.to_string(),
        ];
        debug_assert_eq!(values.len(), KNOWN_KEYS.len());
        let mut rec = ProvenanceRecord::default();
        for (full, v) in KNOWN_KEYS.iter().zip(values) {
            let (s, k) = full.split_once('.').expect("dotted key");
            rec.push(s, k, v);
        }
        rec
    }

    /// Builds a configuration from a (possibly partial) record. Absent keys
    /// take task defaults; `task.kind` is always required.
    pub fn from_record(rec: &ProvenanceRecord) -> Result<Self, ConfigError> {
        let mut map: BTreeMap<String, &str> = BTreeMap::new();
        for (s, k, v) in rec.entries() {
            let full = format!("{s}.{k}");
            if !KNOWN_KEYS.contains(&full.as_str()) {
                return Err(ConfigError::UnknownKey(full));
            }
            map.insert(full, v.as_str());
        }
        if let Some(v) = map.get("tool.version") {
            if *v != TOOL_VERSION {
                return Err(ConfigError::ToolVersion {
                    found: v.to_string(),
                    expected: TOOL_VERSION.to_string(),
                });
            }
        }
        for (key, fixed) in FIXED {
            if let Some(v) = map.get(*key) {
                if v != fixed {
                    return Err(invalid(key, v, &format!("only `{fixed}` is supported")));
                }
            }
        }
        let kind_raw = map
            .get("task.kind")
            .ok_or_else(|| ConfigError::Missing("task.kind".into()))?;
        let kind = parse_task_kind(kind_raw).ok_or_else(|| {
            invalid(
                "task.kind",
                kind_raw,
                "expected readmission, mortality, los or phenotype",
            )
        })?;
        let mut c = PipelineConfig::for_task(kind);
        let get = |k: &str| map.get(k).copied();

        if let Some(v) = get("dataset.version") {
            c.dataset_version = v.to_string();
        }
        if let Some(v) = get("run.seed") {
            c.seed = parse_num("run.seed", v)?;
        }
        if let Some(v) = get("task.setting") {
            c.task.setting = match v {
                "icu" => Setting::Icu,
                "non_icu" => Setting::NonIcu,
                _ => return Err(invalid("task.setting", v, "expected icu or non_icu")),
            };
        }
        if let Some(v) = get("task.disease_filter") {
            c.task.disease_filter = parse_opt_root("task.disease_filter", v)?;
        }
        if let Some(v) = get("task.gap_days") {
            c.task.gap_days = parse_num("task.gap_days", v)?;
        }
        if let Some(v) = get("task.los_threshold_days") {
            c.task.los_threshold_days = parse_num("task.los_threshold_days", v)?;
        }
        if let Some(v) = get("task.window_anchor") {
            c.task.window.anchor = match v {
                "first" => WindowAnchor::FirstHours,
                "last" => WindowAnchor::LastHours,
                _ => return Err(invalid("task.window_anchor", v, "expected first or last")),
            };
        }
        if let Some(v) = get("task.window_hours") {
            c.task.window.hours = parse_num("task.window_hours", v)?;
            range_check("task.window_hours", c.task.window.hours as f64, 1.0, 720.0, "1–720")?;
        }
        if let Some(v) = get("task.phenotype_target") {
            c.task.phenotype_target = parse_opt_root("task.phenotype_target", v)?;
        }
        if !crate::cohort::GAP_DAYS_RANGE.contains(&c.task.gap_days) {
            return Err(out_of_range("task.gap_days", c.task.gap_days, "10–150"));
        }
        if !crate::cohort::LOS_DAYS_RANGE.contains(&c.task.los_threshold_days) {
            return Err(out_of_range(
                "task.los_threshold_days",
                c.task.los_threshold_days,
                "1–10",
            ));
        }
        c.task.validate().map_err(|e| ConfigError::Invalid {
            key: "task".into(),
            value: task_kind_str(kind).into(),
            reason: e.to_string(),
        })?;

        if let Some(v) = get("features.families") {
            let mut fams = Vec::new();
            for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let f = Family::from_str(part).map_err(|e| invalid("features.families", v, &e))?;
                if !fams.contains(&f) {
                    fams.push(f);
                }
            }
            fams.sort();
            c.families = fams;
        }
        if let Some(v) = get("grouping.icd_map") {
            c.icd_map = Source::from(v);
        }
        if let Some(v) = get("grouping.ndc_directory") {
            c.ndc_directory = Source::from(v);
        }
        for f in Family::ALL {
            if let Some(v) = get(&format!("selection.{}", f.as_str())) {
                let sel = if v == "all" {
                    Selection::All
                } else {
                    Selection::File(PathBuf::from(v))
                };
                c.selection.insert(f, sel);
            }
        }
        if let Some(v) = get("cleaning.unit_rules") {
            c.unit_rules = Source::from(v);
        }
        if let Some(v) = get("cleaning.outlier_threshold") {
            c.outlier_threshold = parse_num("cleaning.outlier_threshold", v)?;
            if !(0.0..50.0).contains(&c.outlier_threshold) {
                return Err(out_of_range("cleaning.outlier_threshold", v, "[0, 50)"));
            }
        }
        if let Some(v) = get("cleaning.outlier_mode") {
            c.outlier_mode = match v {
                "remove" => OutlierMode::Remove,
                "cap" => OutlierMode::Cap,
                _ => return Err(invalid("cleaning.outlier_mode", v, "expected remove or cap")),
            };
        }
        if let Some(v) = get("timeseries.resolution_hours") {
            c.resolution_hours = parse_num("timeseries.resolution_hours", v)?;
        }
        let window = f64::from(c.task.window.hours);
        if !(c.resolution_hours > 0.0 && c.resolution_hours <= window) {
            return Err(out_of_range(
                "timeseries.resolution_hours",
                c.resolution_hours,
                &format!("(0, {}] (the observation window)", c.task.window.hours),
            ));
        }
        GridSpec::new(c.resolution_hours, c.task.window.hours).map_err(|e| {
            invalid(
                "timeseries.resolution_hours",
                &c.resolution_hours.to_string(),
                &e.to_string(),
            )
        })?;
        if let Some(v) = get("timeseries.aggregation") {
            c.aggregation = match v {
                "mean" => Aggregation::Mean,
                "last" => Aggregation::Last,
                "max" => Aggregation::Max,
                _ => return Err(invalid("timeseries.aggregation", v, "expected mean, last or max")),
            };
        }
        if let Some(v) = get("timeseries.imputation") {
            c.imputation = match v {
                "ffill_mean" => Imputation::ForwardFillMean,
                "none" => Imputation::None,
                _ => return Err(invalid("timeseries.imputation", v, "expected ffill_mean or none")),
            };
        }
        if let Some(v) = get("output.bundle") {
            c.write_bundle = parse_bool("output.bundle", v)?;
        }
        if let Some(v) = get("model.enabled") {
            c.model.enabled = parse_bool("model.enabled", v)?;
        }
        if let Some(v) = get("model.shaping") {
            c.model.shaping = v.parse().map_err(|e: String| invalid("model.shaping", v, &e))?;
        }
        if let Some(v) = get("model.folds") {
            c.model.folds = parse_num("model.folds", v)?;
            range_check("model.folds", c.model.folds as f64, 2.0, 20.0, "2–20")?;
        }
        if let Some(v) = get("model.oversample") {
            c.model.oversample = parse_bool("model.oversample", v)?;
        }
        let p = &mut c.model.params;
        if let Some(v) = get("model.learning_rate") {
            p.learning_rate = parse_num("model.learning_rate", v)?;
            if !(p.learning_rate > 0.0 && p.learning_rate <= 10.0) {
                return Err(out_of_range("model.learning_rate", v, "(0, 10]"));
            }
        }
        if let Some(v) = get("model.epochs") {
            p.epochs = parse_num("model.epochs", v)?;
            range_check("model.epochs", p.epochs as f64, 1.0, 100_000.0, "1–100000")?;
        }
        if let Some(v) = get("model.l2") {
            p.l2 = parse_num("model.l2", v)?;
            range_check("model.l2", p.l2, 0.0, 100.0, "[0, 100]")?;
        }
        if let Some(v) = get("model.patience") {
            p.patience = parse_num("model.patience", v)?;
            range_check("model.patience", p.patience as f64, 1.0, 100_000.0, "1–100000")?;
        }
        if let Some(v) = get("model.validation_fraction") {
            p.validation_fraction = parse_num("model.validation_fraction", v)?;
            range_check("model.validation_fraction", p.validation_fraction, 0.0, 0.5, "[0, 0.5]")?;
        }
        if let Some(v) = get("evaluation.threshold") {
            c.threshold = parse_num("evaluation.threshold", v)?;
            range_check("evaluation.threshold", c.threshold, 0.0, 1.0, "[0, 1]")?;
        }
        if let Some(v) = get("evaluation.calibration_bins") {
            c.calibration_bins = parse_num("evaluation.calibration_bins", v)?;
            range_check(
                "evaluation.calibration_bins",
                c.calibration_bins as f64,
                1.0,
                1000.0,
                "1–1000",
            )?;
        }
        Ok(c)
    }

    /// Replay entry point: every known key must be present and the record
    /// must come from this tool version.
    pub fn from_complete_record(rec: &ProvenanceRecord) -> Result<Self, ConfigError> {
        match rec.get("tool.version") {
            None => return Err(ConfigError::Incomplete("tool.version".into())),
            Some(v) if v != TOOL_VERSION => {
                return Err(ConfigError::ToolVersion {
                    found: v.to_string(),
                    expected: TOOL_VERSION.to_string(),
                })
            }
            _ => {}
        }
        if let Some(missing) = KNOWN_KEYS.iter().find(|k| rec.get(k).is_none()) {
            return Err(ConfigError::Incomplete(missing.to_string()));
        }
        Self::from_record(rec)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_record(&ProvenanceRecord::parse(text)?)
    }
}

fn invalid(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn out_of_range(key: &str, value: impl Display, range: &str) -> ConfigError {
    ConfigError::OutOfRange {
        key: key.to_string(),
        value: value.to_string(),
        range: range.to_string(),
    }
}

fn range_check(key: &str, v: f64, lo: f64, hi: f64, range: &str) -> Result<(), ConfigError> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(out_of_range(key, v, range))
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| invalid(key, v, "not a valid number"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" => Ok(true),
        "false" | "no" => Ok(false),
        _ => Err(invalid(key, v, "expected true or false")),
    }
}

fn parse_opt_root(key: &str, v: &str) -> Result<Option<IcdRoot>, ConfigError> {
    if v == "none" || v.is_empty() {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| invalid(key, v, "expected a 3-character ICD-10 root or none"))
}

impl SynthSpec {
    pub fn to_record(&self) -> ProvenanceRecord {
        let mut rec = ProvenanceRecord::default();
        rec.push("synth", "seed", self.seed);
        rec.push("synth", "n_patients", self.n_patients);
        rec.push("synth", "mean_admissions_per_patient", self.mean_admissions_per_patient);
        let prev: Vec<String> = self
            .disease_prevalence
            .iter()
            .map(|(k, v)| format!("{k}:{v}"))
            .collect();
        rec.push("synth", "disease_prevalence", prev.join(","));
        rec.push("synth", "event_rate_per_hour", self.event_rate_per_hour);
        rec.push("synth", "corrupt_fraction", self.corrupt_fraction);
        rec
    }

    pub fn from_record(rec: &ProvenanceRecord) -> Result<Self, ConfigError> {
        let mut spec = SynthSpec::default();
        for (s, k, v) in rec.entries() {
            let full = format!("{s}.{k}");
            match full.as_str() {
                "synth.seed" => spec.seed = parse_num(&full, v)?,
                "synth.n_patients" => spec.n_patients = parse_num(&full, v)?,
                "synth.mean_admissions_per_patient" => spec.mean_admissions_per_patient = parse_num(&full, v)?,
                "synth.event_rate_per_hour" => spec.event_rate_per_hour = parse_num(&full, v)?,
                "synth.corrupt_fraction" => spec.corrupt_fraction = parse_num(&full, v)?,
                "synth.disease_prevalence" => {
                    spec.disease_prevalence.clear();
                    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                        let (root, p) = part
                            .split_once(':')
                            .ok_or_else(|| invalid(&full, v, "expected ROOT:probability pairs"))?;
                        spec.disease_prevalence
                            .insert(root.trim().to_uppercase(), parse_num(&full, p.trim())?);
                    }
                }
                _ => return Err(ConfigError::UnknownKey(full)),
            }
        }
        spec.validate().map_err(|e| invalid("synth", "", &e.to_string()))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let mut c = PipelineConfig::for_task(TaskKind::Readmission);
        c.task.gap_days = 10;
        c.selection
            .insert(Family::Labs, Selection::File("keep/labs.txt".into()));
        let text = c.to_record().render();
        let back = PipelineConfig::from_complete_record(&ProvenanceRecord::parse(&text).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_record().render(), text);
    }

    #[test]
    fn errors_name_the_key_or_range() {
        let e = PipelineConfig::parse("task.kind = mortality\ntask.colour = red\n").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey("task.colour".into()));

        let e = PipelineConfig::parse("task.kind = readmission\ntask.gap_days = 200\n").unwrap_err();
        assert!(e.to_string().contains("10–150"), "{e}");

        let e = PipelineConfig::parse("run.seed = 1\n").unwrap_err();
        assert_eq!(e, ConfigError::Missing("task.kind".into()));

        let e = PipelineConfig::parse("task.kind = mortality\ncleaning.outlier_threshold = 60\n").unwrap_err();
        assert!(e.to_string().contains("[0, 50)"), "{e}");

        assert!(matches!(
            ProvenanceRecord::parse("oops"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            ProvenanceRecord::parse("task.kind = a\ntask.kind = b"),
            Err(ConfigError::DuplicateKey(_))
        ));
    }

    #[test]
    fn replay_needs_everything() {
        let text = PipelineConfig::for_task(TaskKind::Mortality).to_record().render();
        let partial: String = text
            .lines()
            .filter(|l| !l.starts_with("timeseries.aggregation"))
            .map(|l| format!("{l}\n"))
            .collect();
        let e = PipelineConfig::from_complete_record(&ProvenanceRecord::parse(&partial).unwrap()).unwrap_err();
        assert_eq!(e, ConfigError::Incomplete("timeseries.aggregation".into()));

        let old = text.replace(TOOL_VERSION, "ehrpipe 0.0.1");
        let e = PipelineConfig::from_complete_record(&ProvenanceRecord::parse(&old).unwrap()).unwrap_err();
        assert!(matches!(e, ConfigError::ToolVersion { .. }));
    }

    #[test]
    fn worked_mortality_example() {
        let text = "\
            # mortality, ICU, chronic kidney disease\n\
            dataset.version = mimic-iv-1.0\n\
            task.kind = mortality\n\
            task.setting = icu\n\
            task.disease_filter = N18\n\
            task.window_anchor = first\n\
            task.window_hours = 48\n\
            features.families = diagnoses,labs,vitals\n\
            cleaning.outlier_threshold = 2\n\
            timeseries.resolution_hours = 2\n\
            timeseries.imputation = ffill_mean\n";
        let c = PipelineConfig::parse(text).unwrap();
        assert_eq!(c.grid().n_bins(), 24);
        assert_eq!(c.families, vec![Family::Diagnoses, Family::Labs, Family::Vitals]);
        assert_eq!(c.task.disease_filter, Some("N18".parse().unwrap()));
    }

    #[test]
    fn synth_spec_round_trip() {
        let s = SynthSpec {
            seed: 9,
            n_patients: 12,
            ..SynthSpec::default()
        };
        assert_eq!(SynthSpec::from_record(&s.to_record()).unwrap(), s);
    }
}
