//! Ingestion of MIMIC-IV-shaped delimited tables.
//!
//! Every data record of a table ends up either as a typed row or as a
//! quarantine entry in the table's [`ParseReport`]; nothing is dropped silently.

mod integrity;
pub mod rows;
pub mod schema;

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::Serialize;
use thiserror::Error;

pub use integrity::{check_referential_integrity, IntegrityReport, Violation};
pub use rows::*;
pub use schema::{ColumnSpec, Field, TableSchema};

use schema::FIELD_COUNT;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{table}: {column} absent")]
    MissingColumn { table: String, column: &'static str },
    #[error("required table {name} not found in {dir}")]
    MissingTable { name: &'static str, dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QuarantinedRow {
    /// 1-based physical line of the record in the file.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub table: String,
    /// Data records read (header excluded).
    pub records: usize,
    pub emitted: usize,
    pub quarantined: Vec<QuarantinedRow>,
}

impl ParseReport {
    pub fn is_clean(&self) -> bool {
        self.quarantined.is_empty()
    }
}

/// Streaming reader yielding typed rows in file order.
///
/// Rows failing their invariants are recorded in [`TableReader::report`]
/// instead of being yielded. `Err` items are reserved for I/O failures.
pub struct TableReader<R> {
    reader: csv::Reader<Box<dyn Read + Send>>,
    path: PathBuf,
    schema: TableSchema,
    index: [Option<usize>; FIELD_COUNT],
    record: csv::StringRecord,
    seen_keys: HashSet<i64>,
    report: ParseReport,
    _row: PhantomData<fn() -> R>,
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read + Send>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let is_gz = path.extension().is_some_and(|e| e == "gz");
    Ok(if is_gz {
        Box::new(BufReader::new(GzDecoder::new(file)))
    } else {
        Box::new(BufReader::with_capacity(1 << 16, file))
    })
}

impl<R: Record> TableReader<R> {
    pub fn open(path: &Path, schema: TableSchema) -> Result<Self, IngestError> {
        Self::from_reader(open_maybe_gz(path)?, path, schema)
    }

    pub fn from_reader(input: Box<dyn Read + Send>, path: &Path, schema: TableSchema) -> Result<Self, IngestError> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(true)
            .from_reader(input);
        let headers = reader
            .headers()
            .map_err(|source| IngestError::Csv {
                path: path.to_path_buf(),
                source,
            })?
            .clone();

        let mut index = [None; FIELD_COUNT];
        for col in schema.columns {
            let pos = headers.iter().position(|h| {
                let h = h.trim();
                col.names.iter().any(|n| h.eq_ignore_ascii_case(n))
            });
            match pos {
                Some(i) => index[col.field as usize] = Some(i),
                None if col.required => {
                    return Err(IngestError::MissingColumn {
                        table: schema.name.to_string(),
                        column: col.names[0],
                    })
                }
                None => {}
            }
        }

        Ok(TableReader {
            reader,
            path: path.to_path_buf(),
            schema,
            index,
            record: csv::StringRecord::new(),
            seen_keys: HashSet::new(),
            report: ParseReport {
                table: schema.name.to_string(),
                ..ParseReport::default()
            },
            _row: PhantomData,
        })
    }

    pub fn report(&self) -> &ParseReport {
        &self.report
    }

    pub fn into_report(self) -> ParseReport {
        self.report
    }

    fn quarantine(&mut self, line: u64, reason: String) {
        self.report.quarantined.push(QuarantinedRow { line, reason });
    }
}

impl<R: Record> Iterator for TableReader<R> {
    type Item = Result<R, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.reader.read_record(&mut self.record) {
                Ok(false) => return None,
                Ok(true) => {}
                Err(e) => {
                    if let csv::ErrorKind::Io(_) = e.kind() {
                        return Some(Err(IngestError::Csv {
                            path: self.path.clone(),
                            source: e,
                        }));
                    }
                    self.report.records += 1;
                    let line = e.position().map_or(0, |p| p.line());
                    self.quarantine(line, e.to_string());
                    continue;
                }
            }
            self.report.records += 1;
            let line = self.record.position().map_or(0, |p| p.line());
            let view = RowView {
                record: &self.record,
                index: &self.index,
                schema: &self.schema,
            };
            match R::from_row(&view) {
                Ok(row) => {
                    if let Some(key) = row.unique_key() {
                        if !self.seen_keys.insert(key) {
                            self.quarantine(line, format!("duplicate key {key}"));
                            continue;
                        }
                    }
                    self.report.emitted += 1;
                    return Some(Ok(row));
                }
                Err(reason) => self.quarantine(line, reason),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedTable<R> {
    pub rows: Vec<R>,
    pub report: ParseReport,
}

pub fn load_table<R: Record>(path: &Path, schema: TableSchema) -> Result<LoadedTable<R>, IngestError> {
    let mut reader = TableReader::<R>::open(path, schema)?;
    let rows = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(LoadedTable {
        rows,
        report: reader.into_report(),
    })
}

/// Writes rows with the schema's canonical header names.
pub fn write_table<R: Record>(path: &Path, schema: TableSchema, rows: &[R]) -> Result<(), IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let csv_err = |source| IngestError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(schema.columns.iter().map(|c| c.names[0]))
        .map_err(csv_err)?;
    let mut buf: Vec<String> = Vec::with_capacity(schema.columns.len());
    for row in rows {
        buf.clear();
        buf.extend(schema.columns.iter().map(|c| row.field(c.field).unwrap_or_default()));
        w.write_record(&buf).map_err(csv_err)?;
    }
    w.flush().map_err(io_err)
}

/// Finds `<name>.csv` or `<name>.csv.gz` under `dir`.
pub fn locate_table(dir: &Path, name: &str) -> Option<PathBuf> {
    [format!("{name}.csv"), format!("{name}.csv.gz")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
}

/// All input tables of one dataset directory.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub patients: Vec<PatientRow>,
    pub admissions: Vec<AdmissionRow>,
    pub diagnoses: Vec<DiagnosisRow>,
    pub labevents: Vec<MeasurementRow>,
    pub chartevents: Vec<MeasurementRow>,
    pub prescriptions: Vec<MedicationRow>,
    pub inputevents: Vec<MedicationRow>,
    pub procedures_icd: Vec<ProcedureRow>,
    pub procedureevents: Vec<ProcedureRow>,
    pub icustays: Vec<IcuStayRow>,
    pub reports: Vec<ParseReport>,
}

fn load_optional<R: Record>(dir: &Path, schema: TableSchema) -> Result<LoadedTable<R>, IngestError> {
    match locate_table(dir, schema.name) {
        Some(path) => load_table(&path, schema),
        None => Ok(LoadedTable {
            rows: Vec::new(),
            report: ParseReport {
                table: schema.name.to_string(),
                ..ParseReport::default()
            },
        }),
    }
}

fn load_required<R: Record>(dir: &Path, schema: TableSchema) -> Result<LoadedTable<R>, IngestError> {
    let path = locate_table(dir, schema.name).ok_or_else(|| IngestError::MissingTable {
        name: schema.name,
        dir: dir.to_path_buf(),
    })?;
    load_table(&path, schema)
}

impl Dataset {
    /// Loads every known table from `dir`, parsing tables concurrently.
    /// `patients` and `admissions` are mandatory; other tables default to empty.
    pub fn load(dir: &Path) -> Result<Self, IngestError> {
        use schema::*;
        std::thread::scope(|s| {
            let patients = s.spawn(|| load_required::<PatientRow>(dir, PATIENTS));
            let admissions = s.spawn(|| load_required::<AdmissionRow>(dir, ADMISSIONS));
            let diagnoses = s.spawn(|| load_optional::<DiagnosisRow>(dir, DIAGNOSES_ICD));
            let labevents = s.spawn(|| load_optional::<MeasurementRow>(dir, LABEVENTS));
            let chartevents = s.spawn(|| load_optional::<MeasurementRow>(dir, CHARTEVENTS));
            let prescriptions = s.spawn(|| load_optional::<MedicationRow>(dir, PRESCRIPTIONS));
            let inputevents = s.spawn(|| load_optional::<MedicationRow>(dir, INPUTEVENTS));
            let procedures_icd = s.spawn(|| load_optional::<ProcedureRow>(dir, PROCEDURES_ICD));
            let procedureevents = s.spawn(|| load_optional::<ProcedureRow>(dir, PROCEDUREEVENTS));
            let icustays = s.spawn(|| load_optional::<IcuStayRow>(dir, ICUSTAYS));

            fn join<T>(h: std::thread::ScopedJoinHandle<'_, T>) -> T {
                h.join().expect("table loader panicked")
            }

            fn take_any<R>(reports: &mut Vec<ParseReport>, t: LoadedTable<R>) -> Vec<R> {
                reports.push(t.report);
                t.rows
            }

            let mut reports = Vec::new();
            let patients = take_any(&mut reports, join(patients)?);
            let admissions = take_any(&mut reports, join(admissions)?);
            let diagnoses = take_any(&mut reports, join(diagnoses)?);
            let labevents = take_any(&mut reports, join(labevents)?);
            let chartevents = take_any(&mut reports, join(chartevents)?);
            let prescriptions = take_any(&mut reports, join(prescriptions)?);
            let inputevents = take_any(&mut reports, join(inputevents)?);
            let procedures_icd = take_any(&mut reports, join(procedures_icd)?);
            let procedureevents = take_any(&mut reports, join(procedureevents)?);
            let icustays = take_any(&mut reports, join(icustays)?);
            Ok(Dataset {
                patients,
                admissions,
                diagnoses,
                labevents,
                chartevents,
                prescriptions,
                inputevents,
                procedures_icd,
                procedureevents,
                icustays,
                reports,
            })
        })
    }

    pub fn quarantined_rows(&self) -> usize {
        self.reports.iter().map(|r| r.quarantined.len()).sum()
    }
}
