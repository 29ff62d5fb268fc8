//! Feature families and the frozen code → column registry.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Diagnoses,
    Labs,
    Vitals,
    Medications,
    Procedures,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Diagnoses,
        Family::Labs,
        Family::Vitals,
        Family::Medications,
        Family::Procedures,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Diagnoses => "diagnoses",
            Family::Labs => "labs",
            Family::Vitals => "vitals",
            Family::Medications => "medications",
            Family::Procedures => "procedures",
        }
    }

    pub fn column_kind(self) -> Option<ColumnKind> {
        match self {
            Family::Diagnoses => None,
            Family::Labs | Family::Vitals => Some(ColumnKind::Measurement),
            Family::Medications => Some(ColumnKind::Medication),
            Family::Procedures => Some(ColumnKind::Procedure),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s.trim())
            .ok_or_else(|| format!("unknown feature family {s:?}"))
    }
}

/// How a dynamic column is binned and imputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Measurement,
    Medication,
    Procedure,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub family: Family,
    pub code: String,
}

impl FeatureColumn {
    pub fn header(&self) -> String {
        format!("{}:{}", self.family, self.code)
    }
}

/// Dynamic feature columns in (family, code) order; immutable once built.
#[derive(Debug, Clone, Default)]
pub struct FeatureRegistry {
    columns: Vec<FeatureColumn>,
    index: HashMap<(Family, String), usize>,
}

impl FeatureRegistry {
    pub fn new(columns: impl IntoIterator<Item = FeatureColumn>) -> Self {
        let sorted: BTreeSet<FeatureColumn> = columns
            .into_iter()
            .filter(|c| c.family.column_kind().is_some())
            .collect();
        let columns: Vec<FeatureColumn> = sorted.into_iter().collect();
        let index = columns
            .iter()
            .enumerate()
            .map(|(i, c)| ((c.family, c.code.clone()), i))
            .collect();
        FeatureRegistry { columns, index }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[FeatureColumn] {
        &self.columns
    }

    pub fn get(&self, family: Family, code: &str) -> Option<usize> {
        self.index.get(&(family, code.to_string())).copied()
    }

    pub fn kinds(&self) -> Vec<ColumnKind> {
        self.columns
            .iter()
            .map(|c| c.family.column_kind().expect("dynamic family"))
            .collect()
    }

    pub fn headers(&self) -> Vec<String> {
        self.columns.iter().map(FeatureColumn::header).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_orders_by_family_then_code_and_drops_static() {
        let reg = FeatureRegistry::new([
            FeatureColumn {
                family: Family::Medications,
                code: "heparin".into(),
            },
            FeatureColumn {
                family: Family::Labs,
                code: "51222".into(),
            },
            FeatureColumn {
                family: Family::Diagnoses,
                code: "I50".into(),
            },
            FeatureColumn {
                family: Family::Labs,
                code: "50912".into(),
            },
            FeatureColumn {
                family: Family::Labs,
                code: "50912".into(),
            },
        ]);
        assert_eq!(reg.headers(), vec!["labs:50912", "labs:51222", "medications:heparin"]);
        assert_eq!(reg.get(Family::Labs, "51222"), Some(1));
        assert_eq!(reg.get(Family::Diagnoses, "I50"), None);
        assert_eq!(
            reg.kinds(),
            vec![ColumnKind::Measurement, ColumnKind::Measurement, ColumnKind::Medication]
        );
    }
}
