//! Record ingestion: JSONL (`{"t": 1, "p": 0.3, "y": 0}`) or CSV with a
//! `t,p,y` header, grouped into [`TimeBatch`]es.
//!
//! Records sharing a time index must be adjacent and the index may never
//! decrease. Extra CSV columns and a JSONL `tags` object are kept as tags.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probability::{Probability, TimeBatch};

/// One observed prediction/outcome pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub t: u64,
    pub p: f64,
    #[serde(with = "outcome_bit")]
    pub y: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    #[default]
    Jsonl,
    Csv,
}

impl RecordFormat {
    /// Guess from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Jsonl,
        }
    }
}

impl fmt::Display for RecordFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Jsonl => "jsonl",
            Self::Csv => "csv",
        })
    }
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" | "ndjson" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown record format '{other}'"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawOutcome {
    Int(i64),
    Bool(bool),
}

/// Outcomes are written as `0`/`1`; `true`/`false` is accepted on input.
mod outcome_bit {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(y: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*y))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match super::RawOutcome::deserialize(d)? {
            super::RawOutcome::Int(0) | super::RawOutcome::Bool(false) => Ok(false),
            super::RawOutcome::Int(1) | super::RawOutcome::Bool(true) => Ok(true),
            super::RawOutcome::Int(v) => Err(serde::de::Error::custom(format!("outcome must be 0 or 1, got {v}"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJsonRecord {
    t: i64,
    p: f64,
    y: RawOutcome,
    #[serde(default)]
    tags: BTreeMap<String, String>,
}

fn invalid(line: usize, message: impl Into<String>) -> Error {
    Error::Validation {
        line,
        message: message.into(),
    }
}

fn check_record(line: usize, t: i64, p: f64, y: i64, tags: BTreeMap<String, String>) -> Result<MonitorRecord> {
    if t < 1 {
        return Err(invalid(line, format!("time index must be a positive integer, got {t}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(line, format!("prediction {p} outside [0, 1]")));
    }
    let y = match y {
        0 => false,
        1 => true,
        other => return Err(invalid(line, format!("outcome must be 0 or 1, got {other}"))),
    };
    Ok(MonitorRecord { t: t as u64, p, y, tags })
}

fn parse_json_line(line: usize, text: &str) -> Result<MonitorRecord> {
    let raw: RawJsonRecord =
        serde_json::from_str(text).map_err(|e| invalid(line, format!("malformed record: {e}")))?;
    let y = match raw.y {
        RawOutcome::Int(v) => v,
        RawOutcome::Bool(b) => i64::from(b),
    };
    check_record(line, raw.t, raw.p, y, raw.tags)
}

/// Streaming record reader. Yields records with their 1-based source line.
pub struct RecordReader {
    inner: Inner,
}

enum Inner {
    Jsonl {
        lines: std::io::Lines<Box<dyn BufRead>>,
        line: usize,
    },
    Csv {
        records: csv::StringRecordsIntoIter<Box<dyn Read>>,
        columns: [usize; 3],
        extra: Vec<(usize, String)>,
    },
    Empty,
}

impl RecordReader {
    pub fn new<R: Read + 'static>(reader: R, format: RecordFormat) -> Result<Self> {
        let inner = match format {
            RecordFormat::Jsonl => Inner::Jsonl {
                lines: (Box::new(BufReader::new(reader)) as Box<dyn BufRead>).lines(),
                line: 0,
            },
            RecordFormat::Csv => {
                let mut rdr = csv::ReaderBuilder::new()
                    .trim(csv::Trim::All)
                    .from_reader(Box::new(reader) as Box<dyn Read>);
                let header = rdr.headers()?.clone();
                if header.is_empty() {
                    return Ok(Self { inner: Inner::Empty });
                }
                let find = |name: &str| {
                    header
                        .iter()
                        .position(|h| h == name)
                        .ok_or_else(|| invalid(1, format!("CSV header lacks a '{name}' column")))
                };
                let columns = [find("t")?, find("p")?, find("y")?];
                let extra = header
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !columns.contains(i))
                    .map(|(i, h)| (i, h.to_string()))
                    .collect();
                Inner::Csv {
                    records: rdr.into_records(),
                    columns,
                    extra,
                }
            }
        };
        Ok(Self { inner })
    }

    pub fn open(path: &Path, format: RecordFormat) -> Result<Self> {
        Self::new(File::open(path)?, format)
    }
}

impl Iterator for RecordReader {
    type Item = Result<(usize, MonitorRecord)>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.inner {
            Inner::Empty => None,
            Inner::Jsonl { lines, line } => loop {
                let text = match lines.next()? {
                    Ok(text) => text,
                    Err(e) => return Some(Err(e.into())),
                };
                *line += 1;
                if text.trim().is_empty() {
                    continue;
                }
                let n = *line;
                return Some(parse_json_line(n, &text).map(|r| (n, r)));
            },
            Inner::Csv {
                records,
                columns,
                extra,
            } => {
                let row = match records.next()? {
                    Ok(row) => row,
                    Err(e) => {
                        let line = e.position().map_or(0, |p| p.line() as usize);
                        return Some(Err(invalid(line, format!("malformed row: {e}"))));
                    }
                };
                let line = row.position().map_or(0, |p| p.line() as usize);
                let field = |i: usize| row.get(i).unwrap_or("");
                let parsed = (|| {
                    let t: i64 = field(columns[0])
                        .parse()
                        .map_err(|_| invalid(line, format!("bad time index '{}'", field(columns[0]))))?;
                    let p: f64 = field(columns[1])
                        .parse()
                        .map_err(|_| invalid(line, format!("bad prediction '{}'", field(columns[1]))))?;
                    let y: i64 = match field(columns[2]) {
                        "true" => 1,
                        "false" => 0,
                        s => s.parse().map_err(|_| invalid(line, format!("bad outcome '{s}'")))?,
                    };
                    let tags = extra
                        .iter()
                        .filter(|(i, _)| !field(*i).is_empty())
                        .map(|(i, name)| (name.clone(), field(*i).to_string()))
                        .collect();
                    check_record(line, t, p, y, tags)
                })();
                Some(parsed.map(|r| (line, r)))
            }
        }
    }
}

/// Groups a record stream into batches, checking time order.
pub struct BatchStream<I> {
    records: I,
    pending: Option<(usize, MonitorRecord)>,
    last_t: u64,
    failed: bool,
}

impl<I> BatchStream<I>
where
    I: Iterator<Item = Result<(usize, MonitorRecord)>>,
{
    pub fn new(records: I) -> Self {
        Self {
            records,
            pending: None,
            last_t: 0,
            failed: false,
        }
    }

    fn next_record(&mut self) -> Option<Result<(usize, MonitorRecord)>> {
        let item = self.pending.take().map(Ok).or_else(|| self.records.next())?;
        if let Ok((line, record)) = &item {
            if record.t < self.last_t {
                return Some(Err(Error::Sequencing(format!(
                    "line {line}: time index {} follows {}",
                    record.t, self.last_t
                ))));
            }
            self.last_t = record.t;
        }
        Some(item)
    }
}

impl<I> Iterator for BatchStream<I>
where
    I: Iterator<Item = Result<(usize, MonitorRecord)>>,
{
    type Item = Result<TimeBatch<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let first = match self.next_record()? {
            Ok((_, r)) => r,
            Err(e) => {
                self.failed = true;
                return Some(Err(e));
            }
        };
        let t = first.t;
        let mut predictions = vec![Probability::new(first.p).expect("range checked")];
        let mut outcomes = vec![first.y];
        while let Some(item) = self.next_record() {
            match item {
                Ok((_, r)) if r.t == t => {
                    predictions.push(Probability::new(r.p).expect("range checked"));
                    outcomes.push(r.y);
                }
                Ok(other) => {
                    self.pending = Some(other);
                    break;
                }
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
        Some(TimeBatch::new(t, predictions, outcomes))
    }
}

/// Streaming batches from a reader.
pub fn batches<R: Read + 'static>(reader: R, format: RecordFormat) -> Result<BatchStream<RecordReader>> {
    Ok(BatchStream::new(RecordReader::new(reader, format)?))
}

/// Read a whole input into batches.
pub fn ingest<R: Read + 'static>(reader: R, format: RecordFormat) -> Result<Vec<TimeBatch<f64>>> {
    batches(reader, format)?.collect()
}

pub fn ingest_path(path: &Path, format: RecordFormat) -> Result<Vec<TimeBatch<f64>>> {
    ingest(File::open(path)?, format)
}

/// Write records as canonical JSONL.
pub fn write_jsonl<W: std::io::Write>(mut out: W, records: &[MonitorRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Flatten batches back into records (no tags).
pub fn records_from_batches(batches: &[TimeBatch<f64>]) -> Vec<MonitorRecord> {
    batches
        .iter()
        .flat_map(|b| {
            b.predictions().iter().zip(b.outcomes()).map(move |(p, &y)| MonitorRecord {
                t: b.time_index(),
                p: p.value(),
                y,
                tags: BTreeMap::new(),
            })
        })
        .collect()
}
