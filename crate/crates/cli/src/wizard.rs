//! Interactive session that walks the pipeline stages in order and writes the
//! same provenance file a replay consumes.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use ehrpipe::cohort::TaskKind;
use ehrpipe::config::{parse_task_kind, PipelineConfig, ProvenanceRecord};
use ehrpipe::features::Family;
use ehrpipe::ingest::Dataset;
use ehrpipe::pipeline::{self, PipelineError, References};
use ehrpipe::summary::FeatureSummary;

/// Stages in the order the wizard visits them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Extraction,
    Grouping,
    Selection,
    Cleaning,
    TimeSeries,
    Output,
    Model,
    Evaluate,
}

impl Stage {
    fn title(self) -> &'static str {
        match self {
            Stage::Extraction => "Data extraction",
            Stage::Grouping => "Code grouping",
            Stage::Selection => "Feature summaries and selection",
            Stage::Cleaning => "Cleaning",
            Stage::TimeSeries => "Time-series representation",
            Stage::Output => "Output",
            Stage::Model => "Modeling (optional)",
            Stage::Evaluate => "Evaluation",
        }
    }
}

#[derive(Debug)]
pub struct WizardOutcome {
    pub config: PipelineConfig,
    pub samples: usize,
    pub modeled: bool,
}

/// Shown rows per family summary.
const SUMMARY_ROWS: usize = 15;

struct Session<'a, R, W> {
    input: &'a mut R,
    output: &'a mut W,
    record: ProvenanceRecord,
    stage: Stage,
}

impl<R: BufRead, W: Write> Session<'_, R, W> {
    fn enter(&mut self, stage: Stage) -> io::Result<()> {
        debug_assert!(stage >= self.stage, "stages advance in pipeline order");
        self.stage = stage;
        writeln!(self.output, "\n== {} ==", stage.title())
    }

    fn read_answer(&mut self, prompt: &str, default: &str) -> io::Result<String> {
        write!(self.output, "{prompt} [{default}]: ")?;
        self.output.flush()?;
        let mut line = String::new();
        let n = self.input.read_line(&mut line)?;
        let answer = line.trim();
        // end of input accepts the default
        Ok(if n == 0 || answer.is_empty() {
            default.to_string()
        } else {
            answer.to_string()
        })
    }

    /// Asks until the record with this answer validates. Rejections repeat
    /// the validator's message, which names the valid range.
    fn ask(&mut self, key: &str, prompt: &str, default: &str) -> io::Result<String> {
        let (stage, k) = key.split_once('.').expect("dotted key");
        loop {
            let answer = self.read_answer(prompt, default)?;
            self.record.push(stage, k, &answer);
            match PipelineConfig::from_record(&self.record) {
                Ok(_) => return Ok(answer),
                Err(e) => {
                    self.record.pop();
                    writeln!(self.output, "  invalid: {e}")?;
                    if answer == default {
                        return Err(io::Error::new(io::ErrorKind::InvalidInput, e.to_string()));
                    }
                }
            }
        }
    }

    fn set(&mut self, key: &str, value: &str) {
        let (stage, k) = key.split_once('.').expect("dotted key");
        self.record.push(stage, k, value);
    }

    fn config(&self) -> PipelineConfig {
        PipelineConfig::from_record(&self.record).expect("validated on every answer")
    }
}

fn show_summary<W: Write>(out: &mut W, s: &FeatureSummary) -> io::Result<()> {
    writeln!(
        out,
        "-- {} ({} codes over {} samples)",
        s.family,
        s.rows.len(),
        s.cohort_size
    )?;
    writeln!(
        out,
        "   {:<28} {:>10} {:>10} {:>8}",
        "code", "mean/adm", "missing", "present"
    )?;
    for r in s.rows.iter().take(SUMMARY_ROWS) {
        writeln!(
            out,
            "   {:<28} {:>10.3} {:>10.3} {:>8}",
            r.code, r.mean_frequency_per_admission, r.missing_fraction, r.n_admissions_present
        )?;
    }
    if s.rows.len() > SUMMARY_ROWS {
        writeln!(
            out,
            "   ... {} more in summaries/{}.csv",
            s.rows.len() - SUMMARY_ROWS,
            s.family
        )?;
    }
    Ok(())
}

fn wizard_io(e: io::Error) -> PipelineError {
    PipelineError::Io {
        path: "<terminal>".into(),
        source: e,
    }
}

/// Runs an interactive session over `input`, writing everything (including
/// `provenance.cfg`) under `out`.
pub fn run_wizard<R: BufRead, W: Write>(
    data_dir: &Path,
    out: &Path,
    seed: u64,
    input: &mut R,
    output: &mut W,
) -> Result<WizardOutcome, PipelineError> {
    let mut s = Session {
        input,
        output,
        record: ProvenanceRecord::default(),
        stage: Stage::Extraction,
    };
    s.enter(Stage::Extraction).map_err(wizard_io)?;
    let kind = loop {
        let a = s
            .read_answer("Prediction task (readmission, mortality, los, phenotype)", "mortality")
            .map_err(wizard_io)?;
        match parse_task_kind(&a) {
            Some(k) => break k,
            None => {
                writeln!(s.output, "  invalid: expected readmission, mortality, los or phenotype").map_err(wizard_io)?
            }
        }
    };
    s.set("task.kind", ehrpipe::config::task_kind_str(kind));
    if kind == TaskKind::Phenotype {
        // the target must exist before the record validates
        loop {
            let a = s
                .read_answer("Phenotype target ICD-10 root", "I50")
                .map_err(wizard_io)?;
            s.set("task.phenotype_target", &a);
            match PipelineConfig::from_record(&s.record) {
                Ok(_) => break,
                Err(e) => {
                    s.record.pop();
                    writeln!(s.output, "  invalid: {e}").map_err(wizard_io)?;
                }
            }
        }
    }
    s.set("run.seed", &seed.to_string());
    s.ask("dataset.version", "Dataset version label", "unspecified")
        .map_err(wizard_io)?;
    s.ask("task.setting", "Setting (icu, non_icu)", "icu")
        .map_err(wizard_io)?;
    s.ask(
        "task.disease_filter",
        "Disease filter ICD-10 root (e.g. I50, N18, J44, I25) or none",
        "none",
    )
    .map_err(wizard_io)?;
    match kind {
        TaskKind::Readmission => {
            s.ask("task.gap_days", "Readmission gap in days (10–150)", "30")
                .map_err(wizard_io)?;
        }
        TaskKind::LengthOfStay => {
            s.ask(
                "task.los_threshold_days",
                "Length-of-stay threshold in days (1–10)",
                "3",
            )
            .map_err(wizard_io)?;
        }
        _ => {}
    }
    let defaults = PipelineConfig::for_task(kind);
    let anchor = if kind.default_anchor() == ehrpipe::cohort::WindowAnchor::FirstHours {
        "first"
    } else {
        "last"
    };
    s.set("task.window_anchor", anchor);
    s.ask(
        "task.window_hours",
        &format!("Observation window: {anchor} N hours of the stay (1–720)"),
        &defaults.task.window.hours.to_string(),
    )
    .map_err(wizard_io)?;
    let fam_default = if s.config().task.setting == ehrpipe::cohort::Setting::Icu {
        "diagnoses,labs,vitals,medications,procedures"
    } else {
        "diagnoses,labs,medications,procedures"
    };
    s.ask("features.families", "Feature families", fam_default)
        .map_err(wizard_io)?;

    s.enter(Stage::Grouping).map_err(wizard_io)?;
    s.ask("grouping.icd_map", "ICD-9 → ICD-10 map (builtin or file)", "builtin")
        .map_err(wizard_io)?;
    s.ask("grouping.ndc_directory", "NDC directory (builtin or file)", "builtin")
        .map_err(wizard_io)?;

    s.enter(Stage::Selection).map_err(wizard_io)?;
    writeln!(s.output, "Extracting cohort ...").map_err(wizard_io)?;
    let partial = s.config();
    let refs = References::load(&partial)?;
    let data = Dataset::load(data_dir)?;
    // grouping choices are fixed from here on; later answers never change the cohort
    let prepared = pipeline::prepare(&data, &partial, &refs)?;
    drop(data);
    writeln!(
        s.output,
        "Cohort: {} samples, {} positive, {} excluded",
        prepared.cohort.samples.len(),
        prepared.cohort.report.positives,
        prepared.cohort.report.excluded()
    )
    .map_err(wizard_io)?;
    for summary in &prepared.summaries {
        show_summary(&mut *s.output, summary).map_err(wizard_io)?;
    }
    fs::create_dir_all(out).map_err(|e| PipelineError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    for summary in &prepared.summaries {
        let fam = summary.family;
        let a = s
            .read_answer(&format!("Codes to keep for {fam} (comma-separated, or all)"), "all")
            .map_err(wizard_io)?;
        if a == "all" {
            s.set(&format!("selection.{fam}"), "all");
            continue;
        }
        let codes: Vec<&str> = a.split(',').map(str::trim).filter(|c| !c.is_empty()).collect();
        let dir = out.join("selection");
        fs::create_dir_all(&dir).map_err(|e| PipelineError::Io {
            path: dir.clone(),
            source: e,
        })?;
        let path = dir.join(format!("{fam}.txt"));
        let mut body = codes.join("\n");
        body.push('\n');
        fs::write(&path, body).map_err(|e| PipelineError::Io {
            path: path.clone(),
            source: e,
        })?;
        s.set(&format!("selection.{fam}"), &path.display().to_string());
    }
    for fam in Family::ALL {
        if s.record.get(&format!("selection.{fam}")).is_none() {
            s.set(&format!("selection.{fam}"), "all");
        }
    }

    s.enter(Stage::Cleaning).map_err(wizard_io)?;
    s.ask(
        "cleaning.unit_rules",
        "Unit conversion rules (builtin or file)",
        "builtin",
    )
    .map_err(wizard_io)?;
    s.ask(
        "cleaning.outlier_threshold",
        "Outlier percentile t: values below p_t and above p_(100-t) are outliers [0, 50)",
        "2",
    )
    .map_err(wizard_io)?;
    s.ask("cleaning.outlier_mode", "Outlier handling (remove, cap)", "remove")
        .map_err(wizard_io)?;

    s.enter(Stage::TimeSeries).map_err(wizard_io)?;
    s.ask("timeseries.resolution_hours", "Time-series resolution in hours", "2")
        .map_err(wizard_io)?;
    s.ask(
        "timeseries.aggregation",
        "Within-bin aggregation for measurements (mean, last, max)",
        "mean",
    )
    .map_err(wizard_io)?;
    s.ask("timeseries.imputation", "Imputation (ffill_mean, none)", "ffill_mean")
        .map_err(wizard_io)?;

    s.enter(Stage::Output).map_err(wizard_io)?;
    s.ask("output.bundle", "Write bundle.ehrf (true, false)", "true")
        .map_err(wizard_io)?;

    s.enter(Stage::Model).map_err(wizard_io)?;
    let train = s
        .ask("model.enabled", "Train the baseline model? (true, false)", "true")
        .map_err(wizard_io)?;
    let modeled = matches!(train.as_str(), "true" | "yes");
    if modeled {
        s.ask("model.shaping", "Shaping (concat, aggregate)", "aggregate")
            .map_err(wizard_io)?;
        s.ask("model.folds", "Cross-validation folds (2–20)", "5")
            .map_err(wizard_io)?;
        s.ask(
            "model.oversample",
            "Oversample the minority class (true, false)",
            "true",
        )
        .map_err(wizard_io)?;
        s.enter(Stage::Evaluate).map_err(wizard_io)?;
        s.ask("evaluation.threshold", "Decision threshold [0, 1]", "0.5")
            .map_err(wizard_io)?;
        s.ask("evaluation.calibration_bins", "Calibration bins (1–1000)", "10")
            .map_err(wizard_io)?;
    }

    let config = s.config();
    let keep = pipeline::load_keep_lists(&config)?;
    let built = pipeline::build(&prepared, &config, &keep)?;
    pipeline::write_outputs(out, &prepared, &built, &config)?;
    let evaluation = pipeline::model_and_evaluate(out, &built, &config)?;
    if let Some(e) = &evaluation {
        writeln!(
            s.output,
            "AUROC {}  AUPRC {}  ECE {:.4}",
            e.metrics.auroc.map_or("NaN".into(), |v| format!("{v:.4}")),
            e.metrics.auprc.map_or("NaN".into(), |v| format!("{v:.4}")),
            e.metrics.ece
        )
        .map_err(wizard_io)?;
    }
    writeln!(
        s.output,
        "Wrote {} samples and provenance.cfg to {}",
        built.samples.len(),
        out.display()
    )
    .map_err(wizard_io)?;
    Ok(WizardOutcome {
        config,
        samples: built.samples.len(),
        modeled: evaluation.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use ehrpipe::config::Selection;
    use ehrpipe::synth::{generate, SynthSpec};

    use super::*;

    fn dataset() -> (tempfile::TempDir, PathBuf) {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        generate(
            &SynthSpec {
                seed: 5,
                n_patients: 150,
                ..SynthSpec::default()
            },
            &data,
        )
        .unwrap();
        (tmp, data)
    }

    fn session(data: &Path, out: &Path, answers: &str) -> (Result<WizardOutcome, PipelineError>, String) {
        let mut input = answers.as_bytes();
        let mut shown = Vec::new();
        let r = run_wizard(data, out, 9, &mut input, &mut shown);
        (r, String::from_utf8(shown).unwrap())
    }

    fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(&dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn defaults_replay_to_identical_output() {
        let (tmp, data) = dataset();
        let out = tmp.path().join("wizard");
        let (r, shown) = session(&data, &out, "");
        let outcome = r.unwrap();
        assert!(outcome.modeled);
        assert!(shown.contains("== Cleaning =="), "{shown}");
        let text = fs::read_to_string(out.join("provenance.cfg")).unwrap();
        let replayed = PipelineConfig::from_complete_record(&ProvenanceRecord::parse(&text).unwrap()).unwrap();
        assert_eq!(replayed, outcome.config);

        let again = tmp.path().join("replay");
        pipeline::run(&data, &again, &replayed).unwrap();
        assert_eq!(files(&out), files(&again));
    }

    #[test]
    fn out_of_range_gap_is_reprompted_with_range() {
        let (tmp, data) = dataset();
        let out = tmp.path().join("w");
        // kind, version, setting, filter, then gap twice
        let (r, shown) = session(&data, &out, "readmission\n\n\n\n200\n45\n");
        let cfg = r.unwrap().config;
        assert!(
            shown.contains("task.gap_days = 200 is outside the valid range 10–150"),
            "{shown}"
        );
        assert_eq!(shown.matches("Readmission gap in days").count(), 2);
        assert_eq!(cfg.task.gap_days, 45);
    }

    #[test]
    fn model_can_be_skipped() {
        let (tmp, data) = dataset();
        let out = tmp.path().join("w");
        // 19 stage answers precede the model question for mortality
        let answers = format!("mortality\n{}no\n", "\n".repeat(19));
        let (r, shown) = session(&data, &out, &answers);
        let outcome = r.unwrap();
        assert!(!outcome.modeled && !outcome.config.model.enabled);
        assert!(!shown.contains("== Evaluation =="), "{shown}");
        assert!(!out.join("metrics.csv").exists());
        assert!(out.join("provenance.cfg").exists());
    }

    #[test]
    fn selection_list_is_written_and_recorded() {
        let (tmp, data) = dataset();
        let out = tmp.path().join("w");
        // kind + 7 extraction/grouping answers, then diagnoses=all, labs=two codes
        let answers = format!("mortality\n{}all\n50912, 51222\n", "\n".repeat(7));
        let (r, _) = session(&data, &out, &answers);
        let cfg = r.unwrap().config;
        let list = out.join("selection").join("labs.txt");
        assert_eq!(fs::read_to_string(&list).unwrap(), "50912\n51222\n");
        assert_eq!(cfg.selection[&Family::Labs], Selection::File(list));
        assert_eq!(cfg.selection[&Family::Diagnoses], Selection::All);
        let header = fs::read_to_string(out.join("bundle.ehrf")).unwrap();
        assert!(header.contains("labs:50912") && !header.contains("labs:50931"));
    }

    #[test]
    fn unknown_task_is_reprompted() {
        let (tmp, data) = dataset();
        let (r, shown) = session(&data, &tmp.path().join("w"), "survival\nlos\n");
        assert!(shown.contains("invalid: expected readmission"), "{shown}");
        assert_eq!(r.unwrap().config.task.kind, TaskKind::LengthOfStay);
    }
}
