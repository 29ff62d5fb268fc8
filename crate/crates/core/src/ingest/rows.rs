//! Typed rows and their parse/validation rules.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::schema::{Field, TableSchema, FIELD_COUNT};
use crate::time::Timestamp;

pub type SubjectId = i64;
pub type HadmId = i64;
pub type StayId = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::F => "F",
            Gender::M => "M",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Foreign key of an event row: hospital admission or ICU stay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKey {
    Admission(HadmId),
    Stay(StayId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRow {
    pub subject_id: SubjectId,
    pub gender: Gender,
    pub anchor_age: i32,
    pub anchor_year: i32,
    pub date_of_death: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissionRow {
    pub hadm_id: HadmId,
    pub subject_id: SubjectId,
    pub admit_time: Timestamp,
    pub discharge_time: Timestamp,
    pub death_time: Option<Timestamp>,
    pub hospital_expire_flag: bool,
    pub insurance: String,
    pub ethnicity: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IcdVersion {
    Icd9,
    Icd10,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisRow {
    pub hadm_id: HadmId,
    pub icd_code: String,
    pub icd_version: IcdVersion,
}

/// Lab event (keyed by admission) or ICU chart event (keyed by stay).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub key: EventKey,
    pub item_id: i64,
    pub chart_time: Timestamp,
    pub value: Option<f64>,
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedicationRow {
    pub key: EventKey,
    pub drug_name: String,
    pub ndc: Option<String>,
    pub start_time: Timestamp,
    pub stop_time: Timestamp,
    pub dose: Option<f64>,
    pub dose_unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcedureRow {
    pub key: EventKey,
    pub code: String,
    pub event_time: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcuStayRow {
    pub stay_id: StayId,
    pub hadm_id: HadmId,
    pub in_time: Timestamp,
    pub out_time: Timestamp,
}

/// Read-only view of one delimited record, addressed by logical field.
pub struct RowView<'a> {
    pub(crate) record: &'a csv::StringRecord,
    pub(crate) index: &'a [Option<usize>; FIELD_COUNT],
    pub(crate) schema: &'a TableSchema,
}

impl<'a> RowView<'a> {
    pub fn has(&self, field: Field) -> bool {
        self.index[field as usize].is_some()
    }

    /// Trimmed text of a field; `None` if the column is absent or the cell empty.
    pub fn text(&self, field: Field) -> Option<&'a str> {
        let idx = self.index[field as usize]?;
        let s = self.record.get(idx)?.trim();
        (!s.is_empty()).then_some(s)
    }

    fn name(&self, field: Field) -> &'static str {
        self.schema.column(field).map(|c| c.names[0]).unwrap_or("?")
    }

    pub fn required(&self, field: Field) -> Result<&'a str, String> {
        self.text(field)
            .ok_or_else(|| format!("{}: empty value", self.name(field)))
    }

    pub fn int(&self, field: Field) -> Result<Option<i64>, String> {
        match self.text(field) {
            None => Ok(None),
            Some(s) => s
                .parse::<i64>()
                .map(Some)
                .map_err(|_| format!("{}: not an integer: {s:?}", self.name(field))),
        }
    }

    pub fn required_int(&self, field: Field) -> Result<i64, String> {
        self.int(field)?
            .ok_or_else(|| format!("{}: empty value", self.name(field)))
    }

    pub fn real(&self, field: Field) -> Result<Option<f64>, String> {
        match self.text(field) {
            None => Ok(None),
            Some(s) => match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                Ok(_) => Err(format!("{}: non-finite value {s:?}", self.name(field))),
                Err(_) => Err(format!("{}: not a number: {s:?}", self.name(field))),
            },
        }
    }

    pub fn time(&self, field: Field) -> Result<Option<Timestamp>, String> {
        match self.text(field) {
            None => Ok(None),
            Some(s) => Timestamp::parse(s)
                .map(Some)
                .ok_or_else(|| format!("{}: bad timestamp {s:?}", self.name(field))),
        }
    }

    pub fn required_time(&self, field: Field) -> Result<Timestamp, String> {
        self.time(field)?
            .ok_or_else(|| format!("{}: empty value", self.name(field)))
    }

    pub fn key(&self) -> Result<EventKey, String> {
        match self.schema.key {
            Some(Field::StayId) => self.required_int(Field::StayId).map(EventKey::Stay),
            Some(f) => self.required_int(f).map(EventKey::Admission),
            None => Err(format!("{}: table has no event key", self.schema.name)),
        }
    }
}

/// A row type that can be parsed from, and written to, a delimited table.
pub trait Record: Sized + Send {
    fn from_row(row: &RowView<'_>) -> Result<Self, String>;

    /// Value of a logical field for writing; `None` renders as an empty cell.
    fn field(&self, field: Field) -> Option<String>;

    /// Primary key for tables that require uniqueness.
    fn unique_key(&self) -> Option<i64> {
        None
    }
}

fn key_field(key: EventKey, field: Field) -> Option<String> {
    match (key, field) {
        (EventKey::Admission(id), Field::HadmId) | (EventKey::Stay(id), Field::StayId) => Some(id.to_string()),
        _ => None,
    }
}

fn opt_string<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

impl Record for PatientRow {
    fn from_row(row: &RowView<'_>) -> Result<Self, String> {
        let gender = match row.required(Field::Gender)? {
            "F" | "f" => Gender::F,
            "M" | "m" => Gender::M,
            other => return Err(format!("gender: expected F or M, got {other:?}")),
        };
        let anchor_age = row.required_int(Field::AnchorAge)?;
        if anchor_age < 0 {
            return Err(format!("anchor_age: negative ({anchor_age})"));
        }
        let anchor_year = row.required_int(Field::AnchorYear)?;
        if !(1900..=2300).contains(&anchor_year) {
            return Err(format!("anchor_year: {anchor_year} outside [1900, 2300]"));
        }
        Ok(PatientRow {
            subject_id: row.required_int(Field::SubjectId)?,
            gender,
            anchor_age: anchor_age as i32,
            anchor_year: anchor_year as i32,
            date_of_death: row.time(Field::DateOfDeath)?,
        })
    }

    fn field(&self, field: Field) -> Option<String> {
        match field {
            Field::SubjectId => Some(self.subject_id.to_string()),
            Field::Gender => Some(self.gender.to_string()),
            Field::AnchorAge => Some(self.anchor_age.to_string()),
            Field::AnchorYear => Some(self.anchor_year.to_string()),
            Field::DateOfDeath => self.date_of_death.map(Timestamp::date_string),
            _ => None,
        }
    }

    fn unique_key(&self) -> Option<i64> {
        Some(self.subject_id)
    }
}

impl Record for AdmissionRow {
    fn from_row(row: &RowView<'_>) -> Result<Self, String> {
        let hospital_expire_flag = match row.required(Field::ExpireFlag)? {
            "0" => false,
            "1" => true,
            other => return Err(format!("hospital_expire_flag: expected 0 or 1, got {other:?}")),
        };
        Ok(AdmissionRow {
            hadm_id: row.required_int(Field::HadmId)?,
            subject_id: row.required_int(Field::SubjectId)?,
            admit_time: row.required_time(Field::AdmitTime)?,
            discharge_time: row.required_time(Field::DischargeTime)?,
            death_time: row.time(Field::DeathTime)?,
            hospital_expire_flag,
            insurance: row.text(Field::Insurance).unwrap_or("UNKNOWN").to_string(),
            ethnicity: row.text(Field::Ethnicity).unwrap_or("UNKNOWN").to_string(),
        })
    }

    fn field(&self, field: Field) -> Option<String> {
        match field {
            Field::HadmId => Some(self.hadm_id.to_string()),
            Field::SubjectId => Some(self.subject_id.to_string()),
            Field::AdmitTime => Some(self.admit_time.to_string()),
            Field::DischargeTime => Some(self.discharge_time.to_string()),
            Field::DeathTime => opt_string(&self.death_time),
            Field::ExpireFlag => Some(if self.hospital_expire_flag { "1" } else { "0" }.into()),
            Field::Insurance => Some(self.insurance.clone()),
            Field::Ethnicity => Some(self.ethnicity.clone()),
            _ => None,
        }
    }

    fn unique_key(&self) -> Option<i64> {
        Some(self.hadm_id)
    }
}

impl Record for DiagnosisRow {
    fn from_row(row: &RowView<'_>) -> Result<Self, String> {
        let icd_version = match row.required_int(Field::IcdVersion)? {
            9 => IcdVersion::Icd9,
            10 => IcdVersion::Icd10,
            v => return Err(format!("icd_version: expected 9 or 10, got {v}")),
        };
        Ok(DiagnosisRow {
            hadm_id: row.required_int(Field::HadmId)?,
            icd_code: row.required(Field::IcdCode)?.to_string(),
            icd_version,
        })
    }

    fn field(&self, field: Field) -> Option<String> {
        match field {
            Field::HadmId => Some(self.hadm_id.to_string()),
            Field::IcdCode => Some(self.icd_code.clone()),
            Field::IcdVersion => Some(
                match self.icd_version {
                    IcdVersion::Icd9 => "9",
                    IcdVersion::Icd10 => "10",
                }
                .into(),
            ),
            _ => None,
        }
    }
}

impl Record for MeasurementRow {
    fn from_row(row: &RowView<'_>) -> Result<Self, String> {
        Ok(MeasurementRow {
            key: row.key()?,
            item_id: row.required_int(Field::ItemId)?,
            chart_time: row.required_time(Field::ChartTime)?,
            value: row.real(Field::Value)?,
            unit: row.text(Field::Unit).map(str::to_string),
        })
    }

    fn field(&self, field: Field) -> Option<String> {
        match field {
            Field::HadmId | Field::StayId => key_field(self.key, field),
            Field::ItemId => Some(self.item_id.to_string()),
            Field::ChartTime => Some(self.chart_time.to_string()),
            Field::Value => opt_string(&self.value),
            Field::Unit => self.unit.clone(),
            _ => None,
        }
    }
}

impl Record for MedicationRow {
    fn from_row(row: &RowView<'_>) -> Result<Self, String> {
        Ok(MedicationRow {
            key: row.key()?,
            drug_name: row.required(Field::DrugName)?.to_string(),
            ndc: row.text(Field::Ndc).map(str::to_string),
            start_time: row.required_time(Field::StartTime)?,
            stop_time: row.required_time(Field::StopTime)?,
            dose: row.real(Field::Dose)?,
            dose_unit: row.text(Field::DoseUnit).map(str::to_string),
        })
    }

    fn field(&self, field: Field) -> Option<String> {
        match field {
            Field::HadmId | Field::StayId => key_field(self.key, field),
            Field::DrugName => Some(self.drug_name.clone()),
            Field::Ndc => self.ndc.clone(),
            Field::StartTime => Some(self.start_time.to_string()),
            Field::StopTime => Some(self.stop_time.to_string()),
            Field::Dose => opt_string(&self.dose),
            Field::DoseUnit => self.dose_unit.clone(),
            _ => None,
        }
    }
}

impl Record for ProcedureRow {
    fn from_row(row: &RowView<'_>) -> Result<Self, String> {
        Ok(ProcedureRow {
            key: row.key()?,
            code: row.required(Field::Code)?.to_string(),
            event_time: row.required_time(Field::EventTime)?,
        })
    }

    fn field(&self, field: Field) -> Option<String> {
        match field {
            Field::HadmId | Field::StayId => key_field(self.key, field),
            Field::Code => Some(self.code.clone()),
            Field::EventTime => Some(self.event_time.to_string()),
            _ => None,
        }
    }
}

impl Record for IcuStayRow {
    fn from_row(row: &RowView<'_>) -> Result<Self, String> {
        Ok(IcuStayRow {
            stay_id: row.required_int(Field::StayId)?,
            hadm_id: row.required_int(Field::HadmId)?,
            in_time: row.required_time(Field::InTime)?,
            out_time: row.required_time(Field::OutTime)?,
        })
    }

    fn field(&self, field: Field) -> Option<String> {
        match field {
            Field::StayId => Some(self.stay_id.to_string()),
            Field::HadmId => Some(self.hadm_id.to_string()),
            Field::InTime => Some(self.in_time.to_string()),
            Field::OutTime => Some(self.out_time.to_string()),
            _ => None,
        }
    }

    fn unique_key(&self) -> Option<i64> {
        Some(self.stay_id)
    }
}
