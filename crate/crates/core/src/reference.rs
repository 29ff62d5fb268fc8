//! Loading of small run-time reference tables (code maps, unit rules).

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{table}: {source}")]
    Csv {
        table: String,
        #[source]
        source: csv::Error,
    },
    #[error("{table} line {line}: {reason}")]
    BadRow { table: String, line: u64, reason: String },
}

/// Reads a headed CSV into records paired with their line numbers.
pub(crate) fn read_records<R: Read>(
    table: &str,
    input: R,
    min_fields: usize,
) -> Result<Vec<(u64, csv::StringRecord)>, ReferenceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|source| ReferenceError::Csv {
            table: table.to_string(),
            source,
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < min_fields {
            return Err(ReferenceError::BadRow {
                table: table.to_string(),
                line,
                reason: format!("expected {min_fields} fields, found {}", rec.len()),
            });
        }
        out.push((line, rec));
    }
    Ok(out)
}

pub(crate) fn open(path: &Path) -> Result<File, ReferenceError> {
    File::open(path).map_err(|source| ReferenceError::Io {
        path: path.to_path_buf(),
        source,
    })
}
