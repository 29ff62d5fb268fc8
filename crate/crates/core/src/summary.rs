//! Per-code summaries that guide manual feature selection, and keep-lists.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Serialize;

use crate::features::Family;
use crate::reference::{self, ReferenceError};

/// One recorded code occurrence in a cohort sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Occurrence<'a> {
    pub sample_id: i64,
    pub code: &'a str,
    /// `Some(true)` when a value-bearing row lacks its value; `None` for
    /// families that carry no values.
    pub value_missing: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub code: String,
    pub mean_frequency_per_admission: f64,
    pub missing_fraction: f64,
    pub n_admissions_present: usize,
    pub occurrences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSummary {
    pub family: Family,
    pub cohort_size: usize,
    /// Sorted by descending mean frequency, then code.
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

#[derive(Default)]
struct Acc {
    occurrences: usize,
    missing: usize,
    valued_rows: usize,
    samples: BTreeSet<i64>,
}

/// Mean frequency is occurrences over the number of cohort samples; the
/// missing fraction is taken over value-bearing rows only.
pub fn summarize<'a>(
    family: Family,
    cohort_size: usize,
    occurrences: impl IntoIterator<Item = Occurrence<'a>>,
) -> FeatureSummary {
    let mut warnings = Vec::new();
    if cohort_size == 0 {
        warnings.push(format!("{family}: empty cohort, summary is empty"));
        return FeatureSummary {
            family,
            cohort_size,
            rows: Vec::new(),
            warnings,
        };
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for o in occurrences {
        let a = acc.entry(o.code).or_default();
        a.occurrences += 1;
        a.samples.insert(o.sample_id);
        if let Some(missing) = o.value_missing {
            a.valued_rows += 1;
            a.missing += usize::from(missing);
        }
    }
    let mut rows: Vec<SummaryRow> = acc
        .into_iter()
        .map(|(code, a)| SummaryRow {
            code: code.to_string(),
            mean_frequency_per_admission: a.occurrences as f64 / cohort_size as f64,
            missing_fraction: if a.valued_rows == 0 {
                0.0
            } else {
                a.missing as f64 / a.valued_rows as f64
            },
            n_admissions_present: a.samples.len(),
            occurrences: a.occurrences,
        })
        .collect();
    rows.sort_by(|a, b| b.occurrences.cmp(&a.occurrences).then_with(|| a.code.cmp(&b.code)));
    FeatureSummary {
        family,
        cohort_size,
        rows,
        warnings,
    }
}

impl FeatureSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("code,mean_frequency_per_admission,missing_fraction,n_admissions_present\n");
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in &self.rows {
            w.write_record([
                r.code.as_str(),
                &r.mean_frequency_per_admission.to_string(),
                &r.missing_fraction.to_string(),
                &r.n_admissions_present.to_string(),
            ])
            .expect("in-memory write");
        }
        s.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf8"));
        s
    }
}

/// Codes to keep for one family.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeepList {
    codes: BTreeSet<String>,
}

impl KeepList {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(codes: I) -> Self {
        KeepList {
            codes: codes.into_iter().map(|c| c.into().trim().to_string()).collect(),
        }
    }

    /// One code per line; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self, ReferenceError> {
        let file = reference::open(path)?;
        let mut codes = BTreeSet::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|source| ReferenceError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                codes.insert(t.to_string());
            }
        }
        Ok(KeepList { codes })
    }

    pub fn contains(&self, code: &str) -> bool {
        self.codes.contains(code)
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.codes.iter().map(String::as_str)
    }
}

/// Restricts items to the keep-list; no list keeps everything. Listed codes
/// absent from the data produce warnings.
pub fn apply_selection<T>(
    items: Vec<T>,
    code_of: impl Fn(&T) -> &str,
    keep: Option<&KeepList>,
) -> (Vec<T>, Vec<String>) {
    let Some(keep) = keep else {
        return (items, Vec::new());
    };
    let present: HashSet<&str> = items.iter().map(&code_of).collect();
    let warnings = keep
        .codes()
        .filter(|c| !present.contains(c))
        .map(|c| format!("keep-list code {c:?} not present in data"))
        .collect();
    drop(present);
    let kept = items.into_iter().filter(|t| keep.contains(code_of(t))).collect();
    (kept, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occ(sample_id: i64, code: &str, value_missing: Option<bool>) -> Occurrence<'_> {
        Occurrence {
            sample_id,
            code,
            value_missing,
        }
    }

    #[test]
    fn mean_frequency_and_missing_fraction() {
        let mut occs: Vec<Occurrence<'_>> = (0..6).map(|i| occ(i % 3, "A", None)).collect();
        let s = summarize(Family::Procedures, 3, occs.clone());
        assert_eq!(s.rows.len(), 1);
        assert_eq!(s.rows[0].mean_frequency_per_admission, 2.0);
        assert_eq!(s.rows[0].n_admissions_present, 3);
        assert!(s.rows.iter().all(|r| r.code != "Z"));

        occs = (0..10).map(|i| occ(i, "50912", Some(i < 4))).collect();
        let s = summarize(Family::Labs, 10, occs);
        assert_eq!(s.rows[0].missing_fraction, 0.4);
    }

    #[test]
    fn sorted_by_descending_frequency() {
        let occs = vec![
            occ(1, "b", None),
            occ(1, "a", None),
            occ(2, "a", None),
            occ(1, "c", None),
        ];
        let s = summarize(Family::Procedures, 2, occs);
        let codes: Vec<_> = s.rows.iter().map(|r| r.code.as_str()).collect();
        assert_eq!(codes, vec!["a", "b", "c"]);
        let text = s.to_csv();
        assert!(text.starts_with("code,mean_frequency_per_admission,missing_fraction,n_admissions_present\na,1,0,2\n"));
    }

    #[test]
    fn empty_cohort_warns() {
        let s = summarize(Family::Labs, 0, vec![occ(1, "x", None)]);
        assert!(s.rows.is_empty());
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn selection_examples() {
        let items = vec!["A", "B", "A"];
        let (out, w) = apply_selection(items.clone(), |s| s, None);
        assert_eq!(out, items);
        assert!(w.is_empty());

        let keep = KeepList::new(["A"]);
        let (out, w) = apply_selection(items.clone(), |s| s, Some(&keep));
        assert_eq!(out, vec!["A", "A"]);
        assert!(w.is_empty());

        let keep = KeepList::new(["Z"]);
        let (out, w) = apply_selection(items, |s| s, Some(&keep));
        assert!(out.is_empty());
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn keep_list_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labs.txt");
        std::fs::write(&p, "50912\n\n# comment\n 51222 \n").unwrap();
        let k = KeepList::load(&p).unwrap();
        assert_eq!(k.codes().collect::<Vec<_>>(), vec!["50912", "51222"]);
    }

    proptest::proptest! {
        #[test]
        fn selection_is_a_projection(items in proptest::collection::vec("[a-d]", 0..40), keep in proptest::collection::vec("[a-e]", 0..4)) {
            let keep = KeepList::new(keep);
            let (once, _) = apply_selection(items.clone(), |s| s.as_str(), Some(&keep));
            let (twice, _) = apply_selection(once.clone(), |s| s.as_str(), Some(&keep));
            proptest::prop_assert_eq!(once, twice);
        }

        #[test]
        fn frequencies_account_for_every_event(events in proptest::collection::vec((0i64..20, "[a-f]"), 0..200), n in 20usize..40) {
            let s = summarize(Family::Procedures, n, events.iter().map(|(id, c)| occ(*id, c, None)));
            let total: f64 = s.rows.iter().map(|r| r.mean_frequency_per_admission * n as f64).sum();
            proptest::prop_assert!((total - events.len() as f64).abs() < 1e-9);
        }
    }
}
