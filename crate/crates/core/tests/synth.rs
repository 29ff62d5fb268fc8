use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ehrpipe::grouping::{group_diagnoses, IcdMapTable, IcdRoot};
use ehrpipe::ingest::{check_referential_integrity, Dataset};
use ehrpipe::synth::{generate, SynthSpec};

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn same_seed_same_bytes() {
    let spec = SynthSpec {
        n_patients: 60,
        corrupt_fraction: 0.1,
        ..SynthSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&spec, a.path()).unwrap();
    generate(&spec, b.path()).unwrap();
    let (da, db) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(da.len(), 10);
    assert_eq!(da, db);

    let c = tempfile::tempdir().unwrap();
    generate(&SynthSpec { seed: 7, ..spec }, c.path()).unwrap();
    assert_ne!(dir_bytes(c.path())["admissions.csv"], da["admissions.csv"]);
}

#[test]
fn ten_patients_ten_rows() {
    let out = tempfile::tempdir().unwrap();
    let summary = generate(
        &SynthSpec {
            n_patients: 10,
            ..SynthSpec::default()
        },
        out.path(),
    )
    .unwrap();
    assert_eq!(summary.rows["patients"], 10);
    let text = fs::read_to_string(out.path().join("patients.csv")).unwrap();
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn certain_disease_on_every_admission() {
    let spec = SynthSpec {
        n_patients: 40,
        disease_prevalence: [("N18".to_string(), 1.0)].into_iter().collect(),
        ..SynthSpec::default()
    };
    let out = tempfile::tempdir().unwrap();
    generate(&spec, out.path()).unwrap();
    let data = Dataset::load(out.path()).unwrap();
    let (roots, _) = group_diagnoses(&data.diagnoses, &IcdMapTable::builtin());
    let n18: IcdRoot = "N18".parse().unwrap();
    for a in &data.admissions {
        assert!(
            roots.get(&a.hadm_id).is_some_and(|r| r.contains(&n18)),
            "admission {} lacks N18",
            a.hadm_id
        );
    }
}

#[test]
fn output_ingests_cleanly_and_matches_prevalence() {
    let spec = SynthSpec {
        n_patients: 1000,
        corrupt_fraction: 0.05,
        ..SynthSpec::default()
    };
    let out = tempfile::tempdir().unwrap();
    generate(&spec, out.path()).unwrap();
    let data = Dataset::load(out.path()).unwrap();
    assert_eq!(data.quarantined_rows(), 0);
    assert!(check_referential_integrity(&data).is_empty());
    assert!(data.admissions.iter().all(|a| a.admit_time < a.discharge_time));

    let (roots, tally) = group_diagnoses(&data.diagnoses, &IcdMapTable::builtin());
    assert_eq!(tally.icd9_unmapped, 0);
    let n = data.admissions.len() as f64;
    for (root, p) in &spec.disease_prevalence {
        let r: IcdRoot = root.parse().unwrap();
        let hits = data
            .admissions
            .iter()
            .filter(|a| roots.get(&a.hadm_id).is_some_and(|s| s.contains(&r)))
            .count() as f64;
        let observed = hits / n;
        assert!((observed - p).abs() <= 0.05, "{root}: observed {observed:.3} vs {p}");
    }
}
