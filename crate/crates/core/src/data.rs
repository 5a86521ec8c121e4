//! Health-camp records: loading, per-worker filtering and monthly windowing.
//!
//! The CSV layout is one row per patient encounter. The first four columns are
//! `anm_id,camp_id,date,patient_id`; every further column is a measurement. A
//! measurement header may carry a unit in brackets (`hb[g/dL]`). Cells are
//! decoded as follows:
//!
//! | cell            | value                          |
//! |-----------------|--------------------------------|
//! | empty           | `Absent`                       |
//! | `NO_EQUIPMENT`  | `Marker(NoEquipment)`          |
//! | `NOT_DONE`      | `Marker(NotDone)`              |
//! | `120/80`        | `Pair { systolic, diastolic }` |
//! | `11.5`          | `Numeric { value, unit }`      |
//! | anything else   | `Text`                         |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const ID_COLUMNS: [&str; 4] = ["anm_id", "camp_id", "date", "patient_id"];

/// A calendar month, rendered as `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    year: i32,
    month: u32,
}

impl Month {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::InvalidArgument(format!(
                "month {month} outside 1..=12"
            )));
        }
        Ok(Month { year, month })
    }

    pub fn of(date: NaiveDate) -> Self {
        Month {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u32 {
        self.month
    }

    fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    fn from_ordinal(ord: i64) -> Self {
        Month {
            year: ord.div_euclid(12) as i32,
            month: (ord.rem_euclid(12) + 1) as u32,
        }
    }

    /// Month shifted by `n` (negative moves backwards).
    pub fn offset(self, n: i64) -> Self {
        Self::from_ordinal(self.ordinal() + n)
    }

    pub fn next(self) -> Self {
        self.offset(1)
    }

    pub fn prev(self) -> Self {
        self.offset(-1)
    }

    /// Signed number of months from `self` to `other`.
    pub fn months_until(self, other: Month) -> i64 {
        other.ordinal() - self.ordinal()
    }

    /// First day of the month.
    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("valid month")
    }

    /// Inclusive range of months.
    pub fn range_inclusive(start: Month, end: Month) -> Vec<Month> {
        let n = start.months_until(end);
        (0..=n.max(-1)).map(|i| start.offset(i)).collect()
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("`{s}` is not a YYYY-MM month label"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year = y.parse().map_err(|_| bad())?;
        let month = m.parse().map_err(|_| bad())?;
        Month::new(year, month).map_err(|_| bad())
    }
}

impl Serialize for Month {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Marker {
    NoEquipment,
    NotDone,
}

impl Marker {
    pub fn sentinel(self) -> &'static str {
        match self {
            Marker::NoEquipment => "NO_EQUIPMENT",
            Marker::NotDone => "NOT_DONE",
        }
    }

    pub fn from_sentinel(s: &str) -> Option<Self> {
        match s {
            "NO_EQUIPMENT" => Some(Marker::NoEquipment),
            "NOT_DONE" => Some(Marker::NotDone),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementValue {
    Numeric { value: f64, unit: String },
    Pair { systolic: f64, diastolic: f64 },
    Marker(Marker),
    Text(String),
    Absent,
}

impl MeasurementValue {
    /// Decodes one CSV cell. `unit` comes from the column header.
    pub fn parse_cell(cell: &str, unit: &str) -> std::result::Result<Self, String> {
        let cell = cell.trim();
        if cell.is_empty() {
            return Ok(MeasurementValue::Absent);
        }
        if let Some(marker) = Marker::from_sentinel(cell) {
            return Ok(MeasurementValue::Marker(marker));
        }
        if let Some((a, b)) = cell.split_once('/') {
            if let (Ok(systolic), Ok(diastolic)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
                if !(systolic.is_finite() && diastolic.is_finite() && systolic > 0.0 && diastolic > 0.0)
                {
                    return Err(format!("pair `{cell}` must have positive finite components"));
                }
                return Ok(MeasurementValue::Pair {
                    systolic,
                    diastolic,
                });
            }
        }
        if let Ok(value) = cell.parse::<f64>() {
            if !value.is_finite() {
                return Err(format!("numeric value `{cell}` is not finite"));
            }
            return Ok(MeasurementValue::Numeric {
                value,
                unit: unit.to_string(),
            });
        }
        Ok(MeasurementValue::Text(cell.to_string()))
    }

    /// Encodes the value back into a CSV cell (inverse of [`parse_cell`](Self::parse_cell)).
    pub fn to_cell(&self) -> String {
        match self {
            MeasurementValue::Numeric { value, .. } => format_number(*value),
            MeasurementValue::Pair {
                systolic,
                diastolic,
            } => format!("{}/{}", format_number(*systolic), format_number(*diastolic)),
            MeasurementValue::Marker(m) => m.sentinel().to_string(),
            MeasurementValue::Text(t) => t.clone(),
            MeasurementValue::Absent => String::new(),
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, MeasurementValue::Absent)
    }

    pub fn unit(&self) -> Option<&str> {
        match self {
            MeasurementValue::Numeric { unit, .. } if !unit.is_empty() => Some(unit),
            _ => None,
        }
    }
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// One patient encounter at one camp.
#[derive(Debug, Clone, PartialEq)]
pub struct HealthRecord {
    pub anm_id: String,
    pub camp_id: String,
    pub date: NaiveDate,
    pub patient_id: String,
    pub fields: BTreeMap<String, MeasurementValue>,
}

impl HealthRecord {
    pub fn month(&self) -> Month {
        Month::of(self.date)
    }

    /// The value of `field`, with a missing key reported as `Absent`.
    pub fn field(&self, field: &str) -> &MeasurementValue {
        static ABSENT: MeasurementValue = MeasurementValue::Absent;
        self.fields.get(field).unwrap_or(&ABSENT)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordSet {
    records: Vec<HealthRecord>,
    anm_ids: BTreeSet<String>,
    months: BTreeSet<Month>,
}

impl RecordSet {
    pub fn new(records: Vec<HealthRecord>) -> Self {
        let anm_ids = records.iter().map(|r| r.anm_id.clone()).collect();
        let months = records.iter().map(HealthRecord::month).collect();
        RecordSet {
            records,
            anm_ids,
            months,
        }
    }

    pub fn records(&self) -> &[HealthRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<HealthRecord> {
        self.records
    }

    pub fn anm_ids(&self) -> &BTreeSet<String> {
        &self.anm_ids
    }

    /// Month labels covering every record date, ascending.
    pub fn months(&self) -> &BTreeSet<Month> {
        &self.months
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Keeps only records whose month satisfies `keep`.
    pub fn retain_months(self, keep: impl Fn(Month) -> bool) -> Self {
        RecordSet::new(
            self.records
                .into_iter()
                .filter(|r| keep(r.month()))
                .collect(),
        )
    }
}

fn split_header(h: &str) -> (String, String) {
    let h = h.trim();
    match (h.find('['), h.ends_with(']')) {
        (Some(i), true) => (h[..i].trim().to_string(), h[i + 1..h.len() - 1].trim().to_string()),
        _ => (h.to_string(), String::new()),
    }
}

/// Loads a record CSV. See [`load_records_excluding`].
pub fn load_records(path: impl AsRef<Path>) -> Result<RecordSet> {
    load_records_excluding(path, &[])
}

/// Loads a record CSV, dropping every record dated in one of `excluded_months`.
pub fn load_records_excluding(path: impl AsRef<Path>, excluded_months: &[Month]) -> Result<RecordSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(file, excluded_months)
}

/// Parses records from any reader holding the CSV layout described at module level.
pub fn read_records(reader: impl Read, excluded_months: &[Month]) -> Result<RecordSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();

    let header = match rows.next() {
        None => return Ok(RecordSet::default()),
        Some(h) => h.map_err(|e| csv_error(1, e))?,
    };
    for (i, want) in ID_COLUMNS.iter().enumerate() {
        let got = header.get(i).map(str::trim).unwrap_or("");
        if got != *want {
            return Err(Error::Parse {
                row: 1,
                column: want.to_string(),
                message: format!("expected header column {} to be `{want}`, found `{got}`", i + 1),
            });
        }
    }
    let measurements: Vec<(String, String)> = header.iter().skip(4).map(split_header).collect();
    if let Some((name, _)) = measurements.iter().find(|(n, _)| n.is_empty()) {
        return Err(Error::Parse {
            row: 1,
            column: name.clone(),
            message: "empty measurement column name".into(),
        });
    }

    let mut records = Vec::new();
    for (idx, row) in rows.enumerate() {
        let row_no = idx + 2;
        let row = row.map_err(|e| csv_error(row_no, e))?;
        if row.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        if row.len() != header.len() {
            return Err(Error::Parse {
                row: row_no,
                column: String::new(),
                message: format!("expected {} columns, found {}", header.len(), row.len()),
            });
        }
        let id = |i: usize| -> Result<String> {
            let v = row[i].trim();
            if v.is_empty() {
                return Err(Error::Parse {
                    row: row_no,
                    column: ID_COLUMNS[i].into(),
                    message: "must not be empty".into(),
                });
            }
            Ok(v.to_string())
        };
        let anm_id = id(0)?;
        let camp_id = id(1)?;
        let date_cell = id(2)?;
        let patient_id = id(3)?;
        let date = NaiveDate::parse_from_str(&date_cell, "%Y-%m-%d").map_err(|e| Error::Parse {
            row: row_no,
            column: "date".into(),
            message: format!("invalid date `{date_cell}`: {e}"),
        })?;
        if excluded_months.contains(&Month::of(date)) {
            continue;
        }
        let mut fields = BTreeMap::new();
        for ((name, unit), cell) in measurements.iter().zip(row.iter().skip(4)) {
            let value = MeasurementValue::parse_cell(cell, unit).map_err(|message| Error::Parse {
                row: row_no,
                column: name.clone(),
                message,
            })?;
            if !value.is_absent() {
                fields.insert(name.clone(), value);
            }
        }
        records.push(HealthRecord {
            anm_id,
            camp_id,
            date,
            patient_id,
            fields,
        });
    }
    Ok(RecordSet::new(records))
}

fn csv_error(row: usize, e: csv::Error) -> Error {
    Error::Parse {
        row,
        column: String::new(),
        message: e.to_string(),
    }
}

/// Writes records in the layout [`read_records`] accepts. Measurement columns
/// are the sorted union of field names; units are taken from the first
/// numeric value seen in each column.
pub fn write_records(rs: &RecordSet, writer: impl Write) -> Result<()> {
    let mut columns: BTreeMap<&str, Option<&str>> = BTreeMap::new();
    for r in rs.records() {
        for (name, value) in &r.fields {
            let unit = columns.entry(name.as_str()).or_insert(None);
            if unit.is_none() {
                *unit = value.unit();
            }
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ID_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(columns.iter().map(|(name, unit)| match unit {
        Some(u) => format!("{name}[{u}]"),
        None => name.to_string(),
    }));
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(&header).map_err(ser)?;
    for r in rs.records() {
        let mut row = vec![
            r.anm_id.clone(),
            r.camp_id.clone(),
            r.date.format("%Y-%m-%d").to_string(),
            r.patient_id.clone(),
        ];
        row.extend(columns.keys().map(|c| r.field(c).to_cell()));
        w.write_record(&row).map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterConfig {
    pub monthly_min_patients: usize,
    pub yearly_min_patients: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterReason {
    /// Below the monthly minimum in every month with records.
    Monthly,
    /// Below the minimum over the whole loaded span.
    Yearly,
}

impl fmt::Display for FilterReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterReason::Monthly => "monthly",
            FilterReason::Yearly => "yearly",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterReport {
    pub removed: BTreeMap<String, Vec<FilterReason>>,
    pub retained: BTreeSet<String>,
}

/// Removes workers with too few distinct patients. A worker goes if either
/// criterion fires; both are reported when both do.
pub fn filter_anms(rs: &RecordSet, cfg: &FilterConfig) -> (RecordSet, FilterReport) {
    let mut monthly: BTreeMap<&str, BTreeMap<Month, BTreeSet<&str>>> = BTreeMap::new();
    let mut total: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in rs.records() {
        monthly
            .entry(&r.anm_id)
            .or_default()
            .entry(r.month())
            .or_default()
            .insert(&r.patient_id);
        total.entry(&r.anm_id).or_default().insert(&r.patient_id);
    }

    let mut report = FilterReport::default();
    for (anm, months) in &monthly {
        let mut reasons = Vec::new();
        if months.values().all(|p| p.len() < cfg.monthly_min_patients) {
            reasons.push(FilterReason::Monthly);
        }
        if total[anm].len() < cfg.yearly_min_patients {
            reasons.push(FilterReason::Yearly);
        }
        if reasons.is_empty() {
            report.retained.insert(anm.to_string());
        } else {
            report.removed.insert(anm.to_string(), reasons);
        }
    }

    let kept = rs
        .records()
        .iter()
        .filter(|r| report.retained.contains(&r.anm_id))
        .cloned()
        .collect();
    (RecordSet::new(kept), report)
}

/// All records of one worker in one month.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<'a> {
    pub anm_id: &'a str,
    pub month: Month,
    pub records: Vec<&'a HealthRecord>,
}

/// Partitions records by `(anm, month)`, ordered by worker then month.
pub fn window_by_month(rs: &RecordSet) -> Vec<Window<'_>> {
    let mut groups: BTreeMap<(&str, Month), Vec<&HealthRecord>> = BTreeMap::new();
    for r in rs.records() {
        groups.entry((&r.anm_id, r.month())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((anm_id, month), records)| Window {
            anm_id,
            month,
            records,
        })
        .collect()
}
