//! Clinical demographic tables.
//!
//! One row per subject with the columns
//! `subject_id, gender, bmi, age_started_smoking, age_quit_smoking,
//! cigs_per_day, smoker_status, pack_years, smoking_duration, label`.
//! Empty numeric cells are kept as missing; `label` may be empty or the
//! column omitted for unlabeled tables.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const COLUMNS: [&str; 10] = [
    "subject_id",
    "gender",
    "bmi",
    "age_started_smoking",
    "age_quit_smoking",
    "cigs_per_day",
    "smoker_status",
    "pack_years",
    "smoking_duration",
    "label",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmokerStatus {
    Current,
    Ex,
    Never,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl SmokerStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SmokerStatus::Current => "current",
            SmokerStatus::Ex => "ex",
            SmokerStatus::Never => "never",
        }
    }
}

/// Binary histology label: 0 benign, 1 malignant.
pub type Label = u8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub subject_id: String,
    pub gender: Gender,
    pub bmi: f64,
    pub age_started_smoking: Option<f64>,
    pub age_quit_smoking: Option<f64>,
    pub cigs_per_day: Option<f64>,
    pub smoker_status: SmokerStatus,
    pub pack_years: Option<f64>,
    pub smoking_duration: Option<f64>,
    pub label: Option<Label>,
}

impl ClinicalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.subject_id.is_empty() {
            return Err(invalid!("empty subject_id"));
        }
        let numeric = [
            Some(self.bmi),
            self.age_started_smoking,
            self.age_quit_smoking,
            self.cigs_per_day,
            self.pack_years,
            self.smoking_duration,
        ];
        if numeric.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid!("subject {}: non-finite clinical value", self.subject_id));
        }
        if matches!(self.label, Some(l) if l > 1) {
            return Err(invalid!("subject {}: label must be 0 or 1", self.subject_id));
        }
        Ok(())
    }
}

struct Cell<'a> {
    path: &'a Path,
    line: u64,
    column: &'static str,
    raw: &'a str,
}

impl Cell<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Csv {
            path: self.path.to_path_buf(),
            line: self.line,
            column: self.column.to_string(),
            message: message.into(),
        }
    }

    fn optional_number(&self) -> Result<Option<f64>> {
        if self.raw.is_empty() {
            return Ok(None);
        }
        match self.raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            Ok(_) => Err(self.err(format!("non-finite value `{}`", self.raw))),
            Err(_) => Err(self.err(format!("`{}` is not a number", self.raw))),
        }
    }

    fn number(&self) -> Result<f64> {
        self.optional_number()?
            .ok_or_else(|| self.err("required value is missing"))
    }
}

pub fn read_clinical_csv(path: impl AsRef<Path>) -> Result<Vec<ClinicalRecord>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();

    let mut index: HashMap<&'static str, usize> = HashMap::new();
    for (i, name) in headers.iter().enumerate() {
        let Some(&known) = COLUMNS.iter().find(|&&c| c == name) else {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line: 1,
                column: name.to_string(),
                message: "unknown column".into(),
            });
        };
        if index.insert(known, i).is_some() {
            return Err(Error::format(path, format!("duplicate column `{name}`")));
        }
    }
    if let Some(missing) = COLUMNS.iter().take(9).find(|c| !index.contains_key(*c)) {
        return Err(Error::format(path, format!("missing column `{missing}`")));
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let cell = |column: &'static str| Cell {
            path,
            line,
            column,
            raw: index.get(column).and_then(|&i| row.get(i)).unwrap_or(""),
        };

        let id = cell("subject_id");
        if id.raw.is_empty() {
            return Err(id.err("empty subject_id"));
        }
        if !seen.insert(id.raw.to_string()) {
            return Err(id.err(format!("duplicate subject_id `{}`", id.raw)));
        }
        let gender = cell("gender");
        let gender = match gender.raw {
            "male" => Gender::Male,
            "female" => Gender::Female,
            other => return Err(gender.err(format!("`{other}` is not one of male, female"))),
        };
        let status = cell("smoker_status");
        let smoker_status = match status.raw {
            "current" => SmokerStatus::Current,
            "ex" => SmokerStatus::Ex,
            "never" => SmokerStatus::Never,
            other => return Err(status.err(format!("`{other}` is not one of current, ex, never"))),
        };
        let label = cell("label");
        let label = match label.raw {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => return Err(label.err(format!("`{other}` is not 0 or 1"))),
        };
        records.push(ClinicalRecord {
            subject_id: id.raw.to_string(),
            gender,
            bmi: cell("bmi").number()?,
            age_started_smoking: cell("age_started_smoking").optional_number()?,
            age_quit_smoking: cell("age_quit_smoking").optional_number()?,
            cigs_per_day: cell("cigs_per_day").optional_number()?,
            smoker_status,
            pack_years: cell("pack_years").optional_number()?,
            smoking_duration: cell("smoking_duration").optional_number()?,
            label,
        });
    }
    Ok(records)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_clinical_csv(records: &[ClinicalRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.subject_id.as_str()) {
            return Err(invalid!("duplicate subject_id `{}`", r.subject_id));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let io = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(COLUMNS).map_err(io)?;
    for r in records {
        w.write_record([
            r.subject_id.clone(),
            r.gender.as_str().into(),
            r.bmi.to_string(),
            fmt_opt(r.age_started_smoking),
            fmt_opt(r.age_quit_smoking),
            fmt_opt(r.cigs_per_day),
            r.smoker_status.as_str().into(),
            fmt_opt(r.pack_years),
            fmt_opt(r.smoking_duration),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
