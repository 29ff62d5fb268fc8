//! Column layouts of the MIMIC-IV-shaped input tables.
//!
//! Each physical column maps to a logical [`Field`]. A table may list several
//! accepted header names for one field (v1.0 `ethnicity` vs v2.0 `race`).
//! Columns not named here are ignored.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    SubjectId,
    HadmId,
    StayId,
    Gender,
    AnchorAge,
    AnchorYear,
    DateOfDeath,
    AdmitTime,
    DischargeTime,
    DeathTime,
    ExpireFlag,
    Insurance,
    Ethnicity,
    IcdCode,
    IcdVersion,
    ItemId,
    ChartTime,
    Value,
    Unit,
    DrugName,
    Ndc,
    StartTime,
    StopTime,
    Dose,
    DoseUnit,
    Code,
    EventTime,
    InTime,
    OutTime,
}

pub(crate) const FIELD_COUNT: usize = Field::OutTime as usize + 1;

#[derive(Debug, Clone, Copy)]
pub struct ColumnSpec {
    pub field: Field,
    /// Accepted header names; the first is used when writing.
    pub names: &'static [&'static str],
    pub required: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TableSchema {
    pub name: &'static str,
    /// Foreign key tying event rows to an admission or an ICU stay.
    pub key: Option<Field>,
    pub columns: &'static [ColumnSpec],
}

impl TableSchema {
    pub fn column(&self, field: Field) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.field == field)
    }
}

const fn req(field: Field, names: &'static [&'static str]) -> ColumnSpec {
    ColumnSpec {
        field,
        names,
        required: true,
    }
}

const fn opt(field: Field, names: &'static [&'static str]) -> ColumnSpec {
    ColumnSpec {
        field,
        names,
        required: false,
    }
}

pub const PATIENTS: TableSchema = TableSchema {
    name: "patients",
    key: None,
    columns: &[
        req(Field::SubjectId, &["subject_id"]),
        req(Field::Gender, &["gender"]),
        req(Field::AnchorAge, &["anchor_age"]),
        req(Field::AnchorYear, &["anchor_year"]),
        opt(Field::DateOfDeath, &["dod", "date_of_death"]),
    ],
};

pub const ADMISSIONS: TableSchema = TableSchema {
    name: "admissions",
    key: None,
    columns: &[
        req(Field::HadmId, &["hadm_id"]),
        req(Field::SubjectId, &["subject_id"]),
        req(Field::AdmitTime, &["admittime"]),
        req(Field::DischargeTime, &["dischtime"]),
        opt(Field::DeathTime, &["deathtime"]),
        req(Field::ExpireFlag, &["hospital_expire_flag"]),
        req(Field::Insurance, &["insurance"]),
        req(Field::Ethnicity, &["ethnicity", "race"]),
    ],
};

pub const DIAGNOSES_ICD: TableSchema = TableSchema {
    name: "diagnoses_icd",
    key: Some(Field::HadmId),
    columns: &[
        req(Field::HadmId, &["hadm_id"]),
        req(Field::IcdCode, &["icd_code"]),
        req(Field::IcdVersion, &["icd_version"]),
    ],
};

pub const LABEVENTS: TableSchema = TableSchema {
    name: "labevents",
    key: Some(Field::HadmId),
    columns: &[
        req(Field::HadmId, &["hadm_id"]),
        req(Field::ItemId, &["itemid"]),
        req(Field::ChartTime, &["charttime"]),
        opt(Field::Value, &["valuenum"]),
        opt(Field::Unit, &["valueuom"]),
    ],
};

pub const CHARTEVENTS: TableSchema = TableSchema {
    name: "chartevents",
    key: Some(Field::StayId),
    columns: &[
        req(Field::StayId, &["stay_id"]),
        req(Field::ItemId, &["itemid"]),
        req(Field::ChartTime, &["charttime"]),
        opt(Field::Value, &["valuenum"]),
        opt(Field::Unit, &["valueuom"]),
    ],
};

pub const PRESCRIPTIONS: TableSchema = TableSchema {
    name: "prescriptions",
    key: Some(Field::HadmId),
    columns: &[
        req(Field::HadmId, &["hadm_id"]),
        req(Field::DrugName, &["drug"]),
        opt(Field::Ndc, &["ndc"]),
        req(Field::StartTime, &["starttime"]),
        req(Field::StopTime, &["stoptime"]),
        opt(Field::Dose, &["dose_val_rx"]),
        opt(Field::DoseUnit, &["dose_unit_rx"]),
    ],
};

pub const INPUTEVENTS: TableSchema = TableSchema {
    name: "inputevents",
    key: Some(Field::StayId),
    columns: &[
        req(Field::StayId, &["stay_id"]),
        req(Field::DrugName, &["itemid"]),
        req(Field::StartTime, &["starttime"]),
        req(Field::StopTime, &["endtime"]),
        opt(Field::Dose, &["amount"]),
        opt(Field::DoseUnit, &["amountuom"]),
    ],
};

pub const PROCEDURES_ICD: TableSchema = TableSchema {
    name: "procedures_icd",
    key: Some(Field::HadmId),
    columns: &[
        req(Field::HadmId, &["hadm_id"]),
        req(Field::Code, &["icd_code"]),
        req(Field::EventTime, &["chartdate"]),
    ],
};

pub const PROCEDUREEVENTS: TableSchema = TableSchema {
    name: "procedureevents",
    key: Some(Field::StayId),
    columns: &[
        req(Field::StayId, &["stay_id"]),
        req(Field::Code, &["itemid"]),
        req(Field::EventTime, &["starttime"]),
    ],
};

pub const ICUSTAYS: TableSchema = TableSchema {
    name: "icustays",
    key: None,
    columns: &[
        req(Field::StayId, &["stay_id"]),
        req(Field::HadmId, &["hadm_id"]),
        req(Field::InTime, &["intime"]),
        req(Field::OutTime, &["outtime"]),
    ],
};
