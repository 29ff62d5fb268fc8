use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ehrpipe::config::{PipelineConfig, ProvenanceRecord};
use ehrpipe::evaluation::parse_fairness_report;
use ehrpipe::pipeline::run;
use ehrpipe::store::{read_bundle, read_sample, BUNDLE_FILE};
use ehrpipe::synth::{generate, SynthSpec};

const WORKED: &str = "\
dataset.version = synthetic
run.seed = 11
task.kind = mortality
task.setting = icu
task.disease_filter = N18
task.window_anchor = first
task.window_hours = 48
features.families = diagnoses,labs,vitals
cleaning.outlier_threshold = 2
timeseries.resolution_hours = 2
timeseries.imputation = ffill_mean
";

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn worked_configuration_runs_and_replays() {
    let input = tempfile::tempdir().unwrap();
    generate(
        &SynthSpec {
            n_patients: 400,
            seed: 5,
            ..SynthSpec::default()
        },
        input.path(),
    )
    .unwrap();
    let config = PipelineConfig::parse(WORKED).unwrap();

    let out1 = tempfile::tempdir().unwrap();
    let outcome = run(input.path(), out1.path(), &config).unwrap();
    assert!(outcome.samples > 20, "{} samples", outcome.samples);
    let eval = outcome.evaluation.expect("model ran");
    eprintln!(
        "samples {} positives {} metrics {:?}",
        outcome.samples, outcome.positives, eval.metrics
    );

    for f in [
        "metrics.csv",
        "fairness.csv",
        "fairness_gaps.csv",
        "provenance.cfg",
        "cohort_manifest.csv",
        BUNDLE_FILE,
    ] {
        assert!(out1.path().join(f).is_file(), "{f} missing");
    }
    let fairness = fs::read_to_string(out1.path().join("fairness.csv")).unwrap();
    assert!(!parse_fairness_report(&fairness).unwrap().is_empty());

    // replay from the written provenance into a fresh directory
    let text = fs::read_to_string(out1.path().join("provenance.cfg")).unwrap();
    let replayed = PipelineConfig::from_complete_record(&ProvenanceRecord::parse(&text).unwrap()).unwrap();
    assert_eq!(replayed, config);
    let out2 = tempfile::tempdir().unwrap();
    run(input.path(), out2.path(), &replayed).unwrap();
    assert_eq!(tree(out1.path()), tree(out2.path()));

    // bundle agrees with the per-sample files
    let bundle = read_bundle(&out1.path().join(BUNDLE_FILE)).unwrap();
    assert_eq!(bundle.samples.len(), outcome.samples);
    for (id, b) in bundle.samples.iter().take(10) {
        let s = read_sample(out1.path(), id.parse().unwrap()).unwrap();
        assert_eq!(s.dynamic, b.dynamic.concat());
        assert_eq!(s.static_features, b.static_);
        assert_eq!(s.demographic, b.demographic);
        assert_eq!(s.n_bins, 24);
    }
}
