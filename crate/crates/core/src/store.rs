//! Output directory: per-sample CSVs, cohort manifest, bundle and provenance.
//!
//! Reals are written with Rust's shortest round-trip formatting so the same
//! values always produce the same bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::CohortSample;
use crate::config::ProvenanceRecord;
use crate::time::Timestamp;
use crate::timeseries::SampleTensor;

pub const BUNDLE_FILE: &str = "bundle.ehrf";
pub const MANIFEST_FILE: &str = "cohort_manifest.csv";
pub const PROVENANCE_FILE: &str = "provenance.cfg";
pub const BUNDLE_FORMAT: &str = "ehrf";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("sample {sample}: {path}: {source}")]
    SampleIo {
        sample: i64,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("duplicate sample id {0}")]
    DuplicateSample(i64),
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Column names shared by every sample of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub dynamic: Vec<String>,
    #[serde(rename = "static")]
    pub static_: Vec<String>,
    pub demographic: Vec<String>,
}

fn join_reals(vals: &[f64]) -> String {
    let parts: Vec<String> = vals.iter().map(f64::to_string).collect();
    parts.join(",")
}

fn csv_header(cols: &[String]) -> String {
    let parts: Vec<String> = cols
        .iter()
        .map(|c| {
            if c.contains([',', '"']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        })
        .collect();
    parts.join(",")
}

/// Writes `dynamic.csv` (one row per bin), `static.csv` and `demo.csv` under
/// `<out>/<sample_id>/`. With no dynamic columns the dynamic file holds only
/// its (empty) header line.
pub fn write_sample(out: &Path, sample_id: i64, tensor: &SampleTensor, layout: &Layout) -> Result<(), StoreError> {
    let dir = out.join(sample_id.to_string());
    let wrap = |path: PathBuf| {
        move |source| StoreError::SampleIo {
            sample: sample_id,
            path,
            source,
        }
    };
    fs::create_dir_all(&dir).map_err(wrap(dir.clone()))?;

    let mut dynamic = csv_header(&layout.dynamic);
    dynamic.push('\n');
    if tensor.n_dynamic > 0 {
        for b in 0..tensor.n_bins {
            dynamic.push_str(&join_reals(tensor.dynamic_row(b)));
            dynamic.push('\n');
        }
    }
    let stat: Vec<String> = tensor.static_features.iter().map(u8::to_string).collect();
    let files = [
        ("dynamic.csv", dynamic),
        (
            "static.csv",
            format!("{}\n{}\n", csv_header(&layout.static_), stat.join(",")),
        ),
        (
            "demo.csv",
            format!(
                "{}\n{}\n",
                csv_header(&layout.demographic),
                join_reals(&tensor.demographic)
            ),
        ),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(wrap(path.clone()))?;
    }
    Ok(())
}

/// What the three per-sample files hold.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub layout: Layout,
    pub n_bins: usize,
    pub dynamic: Vec<f64>,
    pub static_features: Vec<u8>,
    pub demographic: Vec<f64>,
}

impl StoredSample {
    pub fn matches(&self, t: &SampleTensor) -> bool {
        let bins_ok = t.n_dynamic == 0 || self.n_bins == t.n_bins;
        bins_ok
            && self.dynamic == t.dynamic
            && self.static_features == t.static_features
            && self.demographic == t.demographic
    }
}

fn parse_header(line: &str) -> Vec<String> {
    if line.is_empty() {
        return Vec::new();
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(line.as_bytes());
    rdr.records()
        .next()
        .and_then(Result::ok)
        .map(|r| r.iter().map(str::to_string).collect())
        .unwrap_or_default()
}

fn parse_row<T: std::str::FromStr>(path: &Path, line: &str) -> Result<Vec<T>, StoreError> {
    if line.is_empty() {
        return Ok(Vec::new());
    }
    line.split(',')
        .map(|v| {
            v.parse().map_err(|_| StoreError::Malformed {
                path: path.to_path_buf(),
                reason: format!("bad value {v:?}"),
            })
        })
        .collect()
}

pub fn read_sample(out: &Path, sample_id: i64) -> Result<StoredSample, StoreError> {
    let dir = out.join(sample_id.to_string());
    let read = |name: &str| -> Result<(PathBuf, String), StoreError> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|source| StoreError::SampleIo {
            sample: sample_id,
            path: path.clone(),
            source,
        })?;
        Ok((path, text))
    };
    let (dpath, dtext) = read("dynamic.csv")?;
    let mut lines = dtext.lines();
    let dynamic_cols = parse_header(lines.next().unwrap_or(""));
    let mut dynamic = Vec::new();
    let mut n_bins = 0;
    for l in lines {
        let row: Vec<f64> = parse_row(&dpath, l)?;
        if row.len() != dynamic_cols.len() {
            return Err(StoreError::Malformed {
                path: dpath,
                reason: format!("row {} has {} values", n_bins + 1, row.len()),
            });
        }
        dynamic.extend(row);
        n_bins += 1;
    }
    let (spath, stext) = read("static.csv")?;
    let mut sl = stext.lines();
    let static_cols = parse_header(sl.next().unwrap_or(""));
    let static_features = parse_row(&spath, sl.next().unwrap_or(""))?;
    let (mpath, mtext) = read("demo.csv")?;
    let mut ml = mtext.lines();
    let demo_cols = parse_header(ml.next().unwrap_or(""));
    let demographic = parse_row(&mpath, ml.next().unwrap_or(""))?;
    Ok(StoredSample {
        layout: Layout {
            dynamic: dynamic_cols,
            static_: static_cols,
            demographic: demo_cols,
        },
        n_bins,
        dynamic,
        static_features,
        demographic,
    })
}

/// Writes every sample's files in parallel.
pub fn write_samples(out: &Path, samples: &[(i64, &SampleTensor)], layout: &Layout) -> Result<(), StoreError> {
    samples
        .par_iter()
        .try_for_each(|(id, t)| write_sample(out, *id, t, layout))
}

pub fn render_manifest(samples: &[CohortSample]) -> String {
    let mut s = String::from("sample_id,subject_id,hadm_id,stay_id,label,window_start,window_end\n");
    for c in samples {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.sample_id,
            c.subject_id,
            c.hadm_id,
            c.stay_id.map(|v| v.to_string()).unwrap_or_default(),
            c.label,
            c.window_start,
            c.window_end
        ));
    }
    s
}

pub fn write_manifest(out: &Path, samples: &[CohortSample]) -> Result<(), StoreError> {
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, render_manifest(samples)).map_err(io_err(&path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSample {
    pub label: u8,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    /// One inner array per time bin.
    pub dynamic: Vec<Vec<f64>>,
    #[serde(rename = "static")]
    pub static_: Vec<u8>,
    pub demographic: Vec<f64>,
}

/// Self-describing JSON document keyed by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub format: String,
    pub version: u32,
    pub n_bins: usize,
    pub columns: Layout,
    pub samples: BTreeMap<String, BundleSample>,
}

pub fn build_bundle(
    n_bins: usize,
    layout: &Layout,
    samples: &[(&CohortSample, &SampleTensor)],
) -> Result<Bundle, StoreError> {
    let mut seen = HashSet::new();
    let mut out = BTreeMap::new();
    for (c, t) in samples {
        if !seen.insert(c.sample_id) {
            return Err(StoreError::DuplicateSample(c.sample_id));
        }
        let dynamic = (0..t.n_bins).map(|b| t.dynamic_row(b).to_vec()).collect();
        out.insert(
            c.sample_id.to_string(),
            BundleSample {
                label: c.label,
                window_start: c.window_start,
                window_end: c.window_end,
                dynamic,
                static_: t.static_features.clone(),
                demographic: t.demographic.clone(),
            },
        );
    }
    Ok(Bundle {
        format: BUNDLE_FORMAT.to_string(),
        version: 1,
        n_bins,
        columns: layout.clone(),
        samples: out,
    })
}

pub fn write_bundle(out: &Path, bundle: &Bundle) -> Result<(), StoreError> {
    let path = out.join(BUNDLE_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, bundle).map_err(|e| StoreError::Malformed {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(&path))
}

pub fn read_bundle(path: &Path) -> Result<Bundle, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let b: Bundle = serde_json::from_str(&text).map_err(|e| StoreError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if b.format != BUNDLE_FORMAT {
        return Err(StoreError::Malformed {
            path: path.to_path_buf(),
            reason: format!("format {:?}", b.format),
        });
    }
    Ok(b)
}

pub fn write_provenance(out: &Path, record: &ProvenanceRecord) -> Result<(), StoreError> {
    let path = out.join(PROVENANCE_FILE);
    fs::write(&path, record.render()).map_err(io_err(&path))
}

pub fn read_provenance(path: &Path) -> Result<String, StoreError> {
    fs::read_to_string(path).map_err(io_err(path))
}
