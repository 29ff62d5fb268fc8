//! Subcommand bodies. Each returns a `CliError` whose exit code separates
//! invalid choices (1) from data problems (2).

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ehrpipe::config::{ConfigError, PipelineConfig, ProvenanceRecord};
use ehrpipe::pipeline::{self, PipelineError};
use ehrpipe::synth::{self, SynthError, SynthSpec};
use log::{info, warn};
use thiserror::Error;

use crate::wizard;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Pipeline(e) => e.exit_code(),
            CliError::Config { .. } | CliError::Usage(_) | CliError::Synth(SynthError::Spec(_)) => 1,
            CliError::Synth(_) | CliError::Io { .. } => 2,
        }
    }
}

fn read_record(path: &Path) -> Result<ProvenanceRecord, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ProvenanceRecord::parse(&text).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })
}

fn report(outcome: &pipeline::RunOutcome, out: &Path) {
    for w in &outcome.warnings {
        warn!("{w}");
    }
    info!(
        "{} samples ({} positive) written to {}",
        outcome.samples,
        outcome.positives,
        out.display()
    );
    if let Some(e) = &outcome.evaluation {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |v| format!("{v:.4}"));
        info!(
            "AUROC {}  AUPRC {}  ECE {:.4}",
            fmt(e.metrics.auroc),
            fmt(e.metrics.auprc),
            e.metrics.ece
        );
    }
}

/// Runs a (possibly partial) configuration; absent keys take task defaults.
pub fn extract(input: &Path, output: &Path, config: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let rec = read_record(config)?;
    let mut cfg = PipelineConfig::from_record(&rec).map_err(|source| CliError::Config {
        path: config.to_path_buf(),
        source,
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = pipeline::run(input, output, &cfg)?;
    report(&outcome, output);
    Ok(())
}

/// Reruns a complete provenance file exactly.
pub fn replay(input: &Path, output: &Path, config: &Path) -> Result<(), CliError> {
    let rec = read_record(config)?;
    let cfg = PipelineConfig::from_complete_record(&rec).map_err(|source| CliError::Config {
        path: config.to_path_buf(),
        source,
    })?;
    let outcome = pipeline::run(input, output, &cfg)?;
    report(&outcome, output);
    Ok(())
}

pub fn wizard<R: BufRead, W: Write>(
    input: &Path,
    output: &Path,
    seed: u64,
    stdin: &mut R,
    stdout: &mut W,
) -> Result<wizard::WizardOutcome, CliError> {
    Ok(wizard::run_wizard(input, output, seed, stdin, stdout)?)
}

#[derive(Debug, Default, Clone)]
pub struct SynthOverrides {
    pub seed: Option<u64>,
    pub patients: Option<usize>,
    pub corrupt_fraction: Option<f64>,
}

pub fn synth(output: &Path, config: Option<&Path>, overrides: &SynthOverrides) -> Result<(), CliError> {
    let mut spec = match config {
        Some(p) => SynthSpec::from_record(&read_record(p)?).map_err(|source| CliError::Config {
            path: p.to_path_buf(),
            source,
        })?,
        None => SynthSpec::default(),
    };
    if let Some(s) = overrides.seed {
        spec.seed = s;
    }
    if let Some(n) = overrides.patients {
        spec.n_patients = n;
    }
    if let Some(c) = overrides.corrupt_fraction {
        spec.corrupt_fraction = c;
    }
    let summary = synth::generate(&spec, output)?;
    let spec_path = output.join("synth.cfg");
    fs::write(&spec_path, spec.to_record().render()).map_err(|source| CliError::Io {
        path: spec_path,
        source,
    })?;
    for (table, rows) in &summary.rows {
        info!("{table}: {rows} rows");
    }
    Ok(())
}

pub fn evaluate(
    predictions: &Path,
    demographics: Option<&Path>,
    output: &Path,
    threshold: f64,
    bins: usize,
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("--threshold {threshold} is outside [0, 1]")));
    }
    if bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let outcome = pipeline::evaluate_standalone(predictions, demographics, threshold, bins, output)?;
    for r in &outcome.rejected {
        warn!("rejected {r}");
    }
    for w in &outcome.warnings {
        warn!("{w}");
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |v| format!("{v:.4}"));
    info!(
        "n={} AUROC {} AUPRC {} ECE {:.4}",
        outcome.metrics.n,
        fmt(outcome.metrics.auroc),
        fmt(outcome.metrics.auprc),
        outcome.metrics.ece
    );
    Ok(())
}
