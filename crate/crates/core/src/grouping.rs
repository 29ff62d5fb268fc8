//! Clinical code normalization.
//!
//! Diagnoses are converted to ICD-10 and grouped by their three-character
//! category. Drugs are grouped by non-proprietary name through the labeler and
//! product segments of the 11-digit NDC.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ingest::{DiagnosisRow, HadmId, IcdVersion, MedicationRow};
use crate::reference::{self, ReferenceError};

const BUILTIN_ICD_MAP: &str = include_str!("../data/icd9_to_icd10.csv");
const BUILTIN_NDC_DIRECTORY: &str = include_str!("../data/ndc_directory.csv");

/// Three-character ICD-10 category, upper-cased.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct IcdRoot([u8; 3]);

impl IcdRoot {
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("ascii root")
    }
}

impl fmt::Display for IcdRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for IcdRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IcdRoot({})", self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed ICD-10 code {0:?}")]
pub struct MalformedCode(pub String);

impl FromStr for IcdRoot {
    type Err = MalformedCode;

    /// Accepts exactly a three-character category (used for configuration).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.len() != 3 {
            return Err(MalformedCode(s.to_string()));
        }
        icd10_root(t)
    }
}

impl TryFrom<String> for IcdRoot {
    type Error = MalformedCode;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<IcdRoot> for String {
    fn from(r: IcdRoot) -> String {
        r.as_str().to_string()
    }
}

/// First three characters of an ICD-10 code, upper-cased. Dots are ignored.
pub fn icd10_root(code: &str) -> Result<IcdRoot, MalformedCode> {
    let mut root = [0u8; 3];
    let mut n = 0;
    for b in code.trim().bytes().filter(|&b| b != b'.') {
        if n == 3 {
            break;
        }
        if !b.is_ascii_alphanumeric() {
            return Err(MalformedCode(code.to_string()));
        }
        root[n] = b.to_ascii_uppercase();
        n += 1;
    }
    if n < 3 {
        return Err(MalformedCode(code.to_string()));
    }
    Ok(IcdRoot(root))
}

fn normalize_icd9(code: &str) -> String {
    code.trim()
        .chars()
        .filter(|&c| c != '.')
        .map(|c| c.to_ascii_uppercase())
        .collect()
}

/// ICD-9 → ICD-10 lookup, one target per source code.
#[derive(Debug, Clone, Default)]
pub struct IcdMapTable {
    entries: HashMap<String, String>,
}

impl IcdMapTable {
    /// Builds the table from (icd9, icd10) pairs. A source code listed with
    /// several targets keeps the lexicographically smallest one.
    pub fn from_pairs<I, S, T>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let mut entries: HashMap<String, String> = HashMap::new();
        for (k, v) in pairs {
            let key = normalize_icd9(k.as_ref());
            let val = v.as_ref().trim().replace('.', "").to_ascii_uppercase();
            entries
                .entry(key)
                .and_modify(|cur| {
                    if val < *cur {
                        *cur = val.clone();
                    }
                })
                .or_insert(val);
        }
        IcdMapTable { entries }
    }

    pub fn from_reader<R: std::io::Read>(input: R) -> Result<Self, ReferenceError> {
        let rows = reference::read_records("icd map", input, 2)?;
        Ok(Self::from_pairs(
            rows.iter().map(|(_, r)| (r[0].to_string(), r[1].to_string())),
        ))
    }

    pub fn load(path: &Path) -> Result<Self, ReferenceError> {
        Self::from_reader(reference::open(path)?)
    }

    pub fn builtin() -> Self {
        Self::from_reader(BUILTIN_ICD_MAP.as_bytes()).expect("bundled ICD map parses")
    }

    pub fn get(&self, icd9: &str) -> Option<&str> {
        self.entries.get(&normalize_icd9(icd9)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Converted {
    Icd10(String),
    Unmapped,
}

/// ICD-10 codes pass through; ICD-9 codes are looked up by exact key.
pub fn convert_icd9_to_icd10(code: &str, version: IcdVersion, map: &IcdMapTable) -> Converted {
    match version {
        IcdVersion::Icd10 => Converted::Icd10(code.trim().to_string()),
        IcdVersion::Icd9 => match map.get(code) {
            Some(c) => Converted::Icd10(c.to_string()),
            None => Converted::Unmapped,
        },
    }
}

/// Normalized 11-digit NDC in 5-4-2 layout.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ndc11([u8; 11]);

impl Ndc11 {
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("ascii digits")
    }

    pub fn labeler(&self) -> &str {
        &self.as_str()[0..5]
    }

    pub fn product(&self) -> &str {
        &self.as_str()[5..9]
    }

    pub fn package(&self) -> &str {
        &self.as_str()[9..11]
    }
}

impl fmt::Display for Ndc11 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for Ndc11 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ndc11({})", self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed NDC {0:?}")]
pub struct MalformedNdc(pub String);

/// Zero-pads a dashed NDC (segments {4,5}-{3,4}-{1,2}) to 5-4-2 and joins it.
/// An undashed 11-digit string is taken as already normalized.
pub fn normalize_ndc_11(raw: &str) -> Result<Ndc11, MalformedNdc> {
    let raw_t = raw.trim();
    let bad = || MalformedNdc(raw.to_string());
    let all_digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());

    let mut out = [b'0'; 11];
    if !raw_t.contains('-') {
        if raw_t.len() == 11 && all_digits(raw_t) {
            out.copy_from_slice(raw_t.as_bytes());
            return Ok(Ndc11(out));
        }
        return Err(bad());
    }

    let segs: Vec<&str> = raw_t.split('-').collect();
    let [labeler, product, package] = segs.as_slice() else {
        return Err(bad());
    };
    let shape_ok = matches!(labeler.len(), 4 | 5) && matches!(product.len(), 3 | 4) && matches!(package.len(), 1 | 2);
    if !shape_ok || ![labeler, product, package].iter().all(|s| all_digits(s)) {
        return Err(bad());
    }
    let mut place = |seg: &str, start: usize, width: usize| {
        let off = start + width - seg.len();
        out[off..start + width].copy_from_slice(seg.as_bytes());
    };
    place(labeler, 0, 5);
    place(product, 5, 4);
    place(package, 9, 2);
    Ok(Ndc11(out))
}

/// Non-proprietary drug names keyed by (labeler, product).
#[derive(Debug, Clone, Default)]
pub struct NdcDirectory {
    entries: HashMap<(String, String), String>,
}

fn pad_digits(s: &str, width: usize) -> Option<String> {
    let s = s.trim();
    if s.is_empty() || s.len() > width || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(format!("{s:0>width$}"))
}

impl NdcDirectory {
    pub fn insert(&mut self, labeler: &str, product: &str, name: &str) -> Result<(), String> {
        let l = pad_digits(labeler, 5).ok_or_else(|| format!("bad labeler {labeler:?}"))?;
        let p = pad_digits(product, 4).ok_or_else(|| format!("bad product {product:?}"))?;
        self.entries.insert((l, p), name.trim().to_string());
        Ok(())
    }

    pub fn from_reader<R: std::io::Read>(input: R) -> Result<Self, ReferenceError> {
        let mut dir = NdcDirectory::default();
        for (line, r) in reference::read_records("ndc directory", input, 3)? {
            dir.insert(&r[0], &r[1], &r[2])
                .map_err(|reason| ReferenceError::BadRow {
                    table: "ndc directory".into(),
                    line,
                    reason,
                })?;
        }
        Ok(dir)
    }

    pub fn load(path: &Path) -> Result<Self, ReferenceError> {
        Self::from_reader(reference::open(path)?)
    }

    pub fn builtin() -> Self {
        Self::from_reader(BUILTIN_NDC_DIRECTORY.as_bytes()).expect("bundled NDC directory parses")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lookup ignores the package segment.
    pub fn map_ndc_to_nonproprietary(&self, ndc: &Ndc11) -> Option<&str> {
        self.entries
            .get(&(ndc.labeler().to_string(), ndc.product().to_string()))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GroupingTally {
    pub icd9_unmapped: usize,
    pub icd10_malformed: usize,
    pub ndc_malformed: usize,
    pub ndc_unmapped: usize,
}

/// Diagnosis roots per admission after ICD-9 conversion.
pub fn group_diagnoses(
    diagnoses: &[DiagnosisRow],
    map: &IcdMapTable,
) -> (HashMap<HadmId, BTreeSet<IcdRoot>>, GroupingTally) {
    let mut roots: HashMap<HadmId, BTreeSet<IcdRoot>> = HashMap::new();
    let mut tally = GroupingTally::default();
    for d in diagnoses {
        let code = match convert_icd9_to_icd10(&d.icd_code, d.icd_version, map) {
            Converted::Icd10(c) => c,
            Converted::Unmapped => {
                tally.icd9_unmapped += 1;
                continue;
            }
        };
        match icd10_root(&code) {
            Ok(r) => {
                roots.entry(d.hadm_id).or_default().insert(r);
            }
            Err(_) => tally.icd10_malformed += 1,
        }
    }
    (roots, tally)
}

/// Feature code for a medication row: the non-proprietary name when its NDC
/// resolves, otherwise the lower-cased recorded drug name.
pub fn medication_code(row: &MedicationRow, dir: &NdcDirectory, tally: &mut GroupingTally) -> String {
    if let Some(raw) = row.ndc.as_deref() {
        match normalize_ndc_11(raw) {
            Ok(ndc) => match dir.map_ndc_to_nonproprietary(&ndc) {
                Some(name) => return name.to_string(),
                None => tally.ndc_unmapped += 1,
            },
            Err(_) => tally.ndc_malformed += 1,
        }
    }
    row.drug_name.trim().to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn heart_failure_nos_maps_to_i509() {
        let map = IcdMapTable::builtin();
        assert_eq!(
            convert_icd9_to_icd10("4280", IcdVersion::Icd9, &map),
            Converted::Icd10("I509".into())
        );
        assert_eq!(
            convert_icd9_to_icd10("428.0", IcdVersion::Icd9, &map),
            Converted::Icd10("I509".into())
        );
    }

    #[test]
    fn icd10_passes_through_and_unknown_is_unmapped() {
        let map = IcdMapTable::builtin();
        assert_eq!(
            convert_icd9_to_icd10("N184", IcdVersion::Icd10, &map),
            Converted::Icd10("N184".into())
        );
        assert_eq!(
            convert_icd9_to_icd10("9999X", IcdVersion::Icd9, &map),
            Converted::Unmapped
        );
    }

    #[test]
    fn one_to_many_keeps_smallest_target() {
        let map = IcdMapTable::from_pairs([("4254", "I428"), ("4254", "I425"), ("4254", "I429")]);
        assert_eq!(map.get("4254"), Some("I425"));
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn roots() {
        assert_eq!(icd10_root("I5023").unwrap().as_str(), "I50");
        assert_eq!(icd10_root("N18").unwrap().as_str(), "N18");
        assert_eq!(icd10_root("j449").unwrap().as_str(), "J44");
        assert_eq!(icd10_root("I50.23").unwrap().as_str(), "I50");
        assert!(icd10_root("I5").is_err());
        assert!(icd10_root("").is_err());
        assert!("I5023".parse::<IcdRoot>().is_err());
        assert_eq!("n18".parse::<IcdRoot>().unwrap().as_str(), "N18");
    }

    // Independent 5-4-2 zero-pad oracle.
    fn pad_oracle(raw: &str) -> String {
        let p: Vec<&str> = raw.split('-').collect();
        format!("{:0>5}{:0>4}{:0>2}", p[0], p[1], p[2])
    }

    #[test]
    fn ndc_segment_patterns() {
        for (raw, want) in [
            ("0002-1433-80", "00002143380"),
            ("50242-040-62", "50242004062"),
            ("50242-0040-6", "50242004006"),
        ] {
            assert_eq!(pad_oracle(raw), want);
            assert_eq!(normalize_ndc_11(raw).unwrap().as_str(), want);
        }
        assert_eq!(normalize_ndc_11("00002143380").unwrap().as_str(), "00002143380");
    }

    #[test]
    fn ndc_malformed_shapes() {
        for raw in [
            "",
            "0",
            "123-45-6",
            "123456-1234-12",
            "0002-1433-800",
            "00a2-1433-80",
            "1-2-3-4",
            "0002143380",
        ] {
            assert!(normalize_ndc_11(raw).is_err(), "{raw}");
        }
    }

    #[test]
    fn ndc_lookup_ignores_package() {
        let dir = NdcDirectory::builtin();
        let a = normalize_ndc_11("0002-1433-80").unwrap();
        let b = normalize_ndc_11("0002-1433-01").unwrap();
        assert_eq!(dir.map_ndc_to_nonproprietary(&a), Some("dulaglutide"));
        assert_eq!(dir.map_ndc_to_nonproprietary(&a), dir.map_ndc_to_nonproprietary(&b));
        let missing = normalize_ndc_11("99999-9999-99").unwrap();
        assert_eq!(dir.map_ndc_to_nonproprietary(&missing), None);

        let mut one = NdcDirectory::default();
        one.insert("123", "45", "testdrug").unwrap();
        let k = normalize_ndc_11("00123-0045-11").unwrap();
        assert_eq!(one.map_ndc_to_nonproprietary(&k), Some("testdrug"));
        assert!(one.insert("123456", "1", "x").is_err());
    }

    #[test]
    fn grouping_tallies_unmapped_and_malformed() {
        let map = IcdMapTable::builtin();
        let rows = vec![
            DiagnosisRow {
                hadm_id: 1,
                icd_code: "4280".into(),
                icd_version: IcdVersion::Icd9,
            },
            DiagnosisRow {
                hadm_id: 1,
                icd_code: "I5023".into(),
                icd_version: IcdVersion::Icd10,
            },
            DiagnosisRow {
                hadm_id: 1,
                icd_code: "9999X".into(),
                icd_version: IcdVersion::Icd9,
            },
            DiagnosisRow {
                hadm_id: 2,
                icd_code: "N1".into(),
                icd_version: IcdVersion::Icd10,
            },
        ];
        let (roots, tally) = group_diagnoses(&rows, &map);
        assert_eq!(roots[&1].len(), 1);
        assert!(!roots.contains_key(&2));
        assert_eq!(tally.icd9_unmapped, 1);
        assert_eq!(tally.icd10_malformed, 1);
    }

    proptest! {
        #[test]
        fn root_is_idempotent(code in "[A-Za-z][0-9A-Za-z]{2,6}") {
            let r = icd10_root(&code).unwrap();
            let padded = format!("{}XX", r);
            prop_assert_eq!(icd10_root(&padded).unwrap(), r);
            prop_assert_eq!(icd10_root(r.as_str()).unwrap(), r);
        }

        #[test]
        fn normalized_ndc_reformatted_is_fixed_point(l in "[0-9]{5}", p in "[0-9]{4}", k in "[0-9]{2}") {
            let dashed = format!("{l}-{p}-{k}");
            let once = normalize_ndc_11(&dashed).unwrap();
            let again = normalize_ndc_11(&format!("{}-{}-{}", once.labeler(), once.product(), once.package())).unwrap();
            prop_assert_eq!(once, again);
            prop_assert_eq!(once.as_str(), format!("{l}{p}{k}"));
        }
    }
}
