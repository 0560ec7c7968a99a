//! Subject-level follow-up data: one record per patient holding the time to
//! the first event of interest or to its censoring.
//!
//! Files are UTF-8 CSV with the header `subject_id,group,time,event` and an
//! optional fifth column `exposure_time`. Event codes are small integers
//! (`0` censored, `1` AE, `2` death, `3` treatment discontinuation); the
//! symbolic names are accepted case-insensitively.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::fmt::g17;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("row {row}: duplicate subject id `{id}`")]
    DuplicateSubject { row: usize, id: String },
    #[error("row {row}: time must be positive and finite, got {time}")]
    NonPositiveTime { row: usize, time: f64 },
    #[error("row {row}: exposure time {exposure} must lie in (0, {time}]")]
    ExposureExceedsTime { row: usize, exposure: f64, time: f64 },
    #[error("header must start with subject_id,group,time,event (optionally exposure_time), got `{0}`")]
    BadHeader(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// Outcome recorded for a subject's follow-up. Exactly one per record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EventCode {
    Censored,
    #[serde(rename = "AE")]
    Ae,
    Death,
    Discontinuation,
}

impl EventCode {
    pub const ALL: [EventCode; 4] = [
        EventCode::Censored,
        EventCode::Ae,
        EventCode::Death,
        EventCode::Discontinuation,
    ];

    /// Integer code used in files.
    pub fn code(self) -> u8 {
        match self {
            EventCode::Censored => 0,
            EventCode::Ae => 1,
            EventCode::Death => 2,
            EventCode::Discontinuation => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EventCode::Censored => "Censored",
            EventCode::Ae => "AE",
            EventCode::Death => "Death",
            EventCode::Discontinuation => "Discontinuation",
        }
    }
}

impl fmt::Display for EventCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(code) = s.parse::<u8>() {
            return Self::from_code(code).ok_or_else(|| format!("unknown event code {code}"));
        }
        match s.to_ascii_lowercase().as_str() {
            "censored" => Ok(EventCode::Censored),
            "ae" => Ok(EventCode::Ae),
            "death" => Ok(EventCode::Death),
            "discontinuation" => Ok(EventCode::Discontinuation),
            _ => Err(format!("unknown event `{s}`")),
        }
    }
}

/// A set of event codes, used to say which outcomes count as the target,
/// which compete with it, and which only end follow-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct EventSet(u8);

impl EventSet {
    pub const EMPTY: EventSet = EventSet(0);

    pub fn of(codes: &[EventCode]) -> Self {
        codes.iter().fold(Self::EMPTY, |s, &c| s.with(c))
    }

    pub fn with(self, code: EventCode) -> Self {
        EventSet(self.0 | (1 << code.code()))
    }

    pub fn contains(self, code: EventCode) -> bool {
        self.0 & (1 << code.code()) != 0
    }

    pub fn union(self, other: EventSet) -> Self {
        EventSet(self.0 | other.0)
    }

    pub fn intersects(self, other: EventSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = EventCode> {
        EventCode::ALL.into_iter().filter(move |c| self.contains(*c))
    }
}

impl From<EventCode> for EventSet {
    fn from(code: EventCode) -> Self {
        EventSet::EMPTY.with(code)
    }
}

impl Serialize for EventSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter().map(EventCode::name))
    }
}

/// Randomised arm: `Control` is group 0 (reference), `Treatment` is group 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Group {
    Control,
    Treatment,
}

impl Group {
    pub const BOTH: [Group; 2] = [Group::Control, Group::Treatment];

    pub fn index(self) -> usize {
        match self {
            Group::Control => 0,
            Group::Treatment => 1,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Group::Control),
            1 => Some(Group::Treatment),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Group::Control => Group::Treatment,
            Group::Treatment => Group::Control,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub group: Group,
    /// Observed time (event or censoring), in the dataset's time unit.
    pub time: f64,
    pub event: EventCode,
    /// Time on study drug; `None` means the whole follow-up was exposed.
    pub exposure_time: Option<f64>,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, group: Group, time: f64, event: EventCode) -> Self {
        Self {
            subject_id: id.into(),
            group,
            time,
            event,
            exposure_time: None,
        }
    }

    pub fn exposure(&self) -> f64 {
        self.exposure_time.unwrap_or(self.time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetMeta {
    pub label: String,
    pub time_unit: String,
    /// Whether AEs were still collected after treatment discontinuation.
    /// A treatment-policy analysis needs this.
    pub ae_collection_after_discontinuation: bool,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self {
            label: String::new(),
            time_unit: "days".to_string(),
            ae_collection_after_discontinuation: false,
        }
    }
}

/// An ordered collection of subject records. Not validated on construction;
/// use [`validate`] or build through [`parse_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<SubjectRecord>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(records: Vec<SubjectRecord>) -> Self {
        Self {
            records,
            meta: DatasetMeta::default(),
        }
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn group(&self, g: Group) -> impl Iterator<Item = &SubjectRecord> + '_ {
        self.records.iter().filter(move |r| r.group == g)
    }

    pub fn group_size(&self, g: Group) -> usize {
        self.group(g).count()
    }

    /// Copy of the dataset with every time (and exposure time) multiplied by `c`.
    pub fn rescaled(&self, c: f64) -> Self {
        self.map_times(|t| t * c)
    }

    /// Copy of the dataset with `f` applied to every time and exposure time.
    pub fn map_times(&self, f: impl Fn(f64) -> f64) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| SubjectRecord {
                time: f(r.time),
                exposure_time: r.exposure_time.map(&f),
                ..r.clone()
            })
            .collect();
        Self {
            records,
            meta: self.meta.clone(),
        }
    }

    /// Copy of the dataset with the two group labels exchanged.
    pub fn swapped_groups(&self) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| SubjectRecord {
                group: r.group.other(),
                ..r.clone()
            })
            .collect();
        Self {
            records,
            meta: self.meta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// 1-based data row, when the violation belongs to one row.
    pub row: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// `group0`/`group1` -> event name -> count.
    pub group_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub time_range: Option<TimeRange>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, g: Group, code: EventCode) -> usize {
        self.group_counts
            .get(&group_key(g))
            .and_then(|m| m.get(code.name()))
            .copied()
            .unwrap_or(0)
    }
}

fn group_key(g: Group) -> String {
    format!("group{}", g.index())
}

fn record_violations(row: usize, r: &SubjectRecord) -> Option<DataError> {
    if !(r.time.is_finite() && r.time > 0.0) {
        return Some(DataError::NonPositiveTime { row, time: r.time });
    }
    if let Some(e) = r.exposure_time {
        if !(e.is_finite() && e > 0.0 && e <= r.time) {
            return Some(DataError::ExposureExceedsTime {
                row,
                exposure: e,
                time: r.time,
            });
        }
    }
    None
}

/// Checks every dataset invariant and summarises the data. Never fails;
/// problems are listed in the report.
pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut group_counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    let mut range: Option<TimeRange> = None;

    if ds.is_empty() {
        violations.push(Violation {
            row: None,
            message: "empty dataset".to_string(),
        });
    }
    for (i, r) in ds.records.iter().enumerate() {
        let row = i + 1;
        *group_counts
            .entry(group_key(r.group))
            .or_default()
            .entry(r.event.name().to_string())
            .or_default() += 1;
        if r.time.is_finite() {
            range = Some(match range {
                None => TimeRange { min: r.time, max: r.time },
                Some(tr) => TimeRange {
                    min: tr.min.min(r.time),
                    max: tr.max.max(r.time),
                },
            });
        }
        if let Some(err) = record_violations(row, r) {
            violations.push(Violation {
                row: Some(row),
                message: strip_row(&err),
            });
        }
        if !seen.insert(r.subject_id.as_str()) {
            violations.push(Violation {
                row: Some(row),
                message: format!("duplicate subject id `{}`", r.subject_id),
            });
        }
    }
    ValidationReport {
        group_counts,
        time_range: range,
        violations,
    }
}

fn strip_row(err: &DataError) -> String {
    let s = err.to_string();
    match s.split_once(": ") {
        Some((head, tail)) if head.starts_with("row ") => tail.to_string(),
        _ => s,
    }
}

/// Records read from a CSV file together with the rows that could not be
/// turned into records. Used by `validate` to report everything at once.
#[derive(Debug, Default)]
pub struct LenientRead {
    pub records: Vec<SubjectRecord>,
    pub malformed: Vec<DataError>,
}

fn check_header(headers: &csv::StringRecord) -> Result<bool, DataError> {
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    let base = ["subject_id", "group", "time", "event"];
    let ok4 = cols.len() >= 4 && cols[..4] == base;
    match (ok4, cols.len()) {
        (true, 4) => Ok(false),
        (true, 5) if cols[4] == "exposure_time" => Ok(true),
        _ => Err(DataError::BadHeader(cols.join(","))),
    }
}

fn parse_row(row: usize, rec: &csv::StringRecord, ncols: usize) -> Result<SubjectRecord, DataError> {
    let bad = |reason: String| DataError::MalformedRow { row, reason };
    if rec.len() != ncols && !(ncols == 5 && rec.len() == 4) {
        return Err(bad(format!("expected {} fields, found {}", ncols, rec.len())));
    }
    let id = rec[0].trim();
    if id.is_empty() {
        return Err(bad("empty subject_id".into()));
    }
    let group = rec[1]
        .trim()
        .parse::<u8>()
        .ok()
        .and_then(Group::from_index)
        .ok_or_else(|| bad(format!("group must be 0 or 1, got `{}`", &rec[1])))?;
    let time: f64 = rec[2]
        .trim()
        .parse()
        .map_err(|_| bad(format!("time is not a number: `{}`", &rec[2])))?;
    let event: EventCode = rec[3].parse().map_err(bad)?;
    let exposure_time = match rec.get(4).map(str::trim) {
        None | Some("") => None,
        Some(s) => Some(
            s.parse::<f64>()
                .map_err(|_| bad(format!("exposure_time is not a number: `{s}`")))?,
        ),
    };
    Ok(SubjectRecord {
        subject_id: id.to_string(),
        group,
        time,
        event,
        exposure_time,
    })
}

/// Reads every row it can; rows that do not parse are collected as errors.
/// Invariants between rows (uniqueness, positive times) are not checked.
pub fn read_csv_lenient<R: Read>(input: R) -> Result<LenientRead, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let headers = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let ncols = if check_header(&headers)? { 5 } else { 4 };
    let mut out = LenientRead::default();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        match rec {
            Ok(rec) => match parse_row(row, &rec, ncols) {
                Ok(r) => out.records.push(r),
                Err(e) => out.malformed.push(e),
            },
            Err(e) => out.malformed.push(DataError::MalformedRow {
                row,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Parses a CSV file into a dataset, failing on the first row that breaks an
/// invariant. Row order is preserved.
pub fn parse_csv<R: Read>(input: R) -> Result<Dataset, DataError> {
    let read = read_csv_lenient(input)?;
    if let Some(e) = read.malformed.into_iter().next() {
        return Err(e);
    }
    let mut seen = HashSet::new();
    for (i, r) in read.records.iter().enumerate() {
        if let Some(e) = record_violations(i + 1, r) {
            return Err(e);
        }
        if !seen.insert(r.subject_id.as_str()) {
            return Err(DataError::DuplicateSubject {
                row: i + 1,
                id: r.subject_id.clone(),
            });
        }
    }
    Ok(Dataset::new(read.records))
}

/// Writes a dataset in the same CSV layout [`parse_csv`] reads. The
/// `exposure_time` column is written only when some record carries one.
pub fn write_csv<W: Write>(ds: &Dataset, out: W) -> Result<(), DataError> {
    let with_exposure = ds.records.iter().any(|r| r.exposure_time.is_some());
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| DataError::Csv(e.to_string());
    let mut header = vec!["subject_id", "group", "time", "event"];
    if with_exposure {
        header.push("exposure_time");
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in &ds.records {
        let mut row = vec![
            r.subject_id.clone(),
            r.group.index().to_string(),
            g17(r.time),
            r.event.code().to_string(),
        ];
        if with_exposure {
            row.push(r.exposure_time.map(g17).unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DataError::Csv(e.to_string()))
}
