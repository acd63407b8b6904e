//! Per-update training log, stored as CSV.
//!
//! Columns: `step,objective,clip_fraction,train_reward_mean,eval_pass1,eval_majN`.
//! The eval columns are empty on updates without an evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 6] = ["step", "objective", "clip_fraction", "train_reward_mean", "eval_pass1", "eval_majN"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub objective: f64,
    pub clip_fraction: f64,
    pub train_reward_mean: f64,
    pub eval_pass1: Option<f64>,
    #[serde(rename = "eval_majN")]
    pub eval_maj_n: Option<f64>,
}

impl RunRecord {
    /// Value of a named column; `None` for an empty eval cell.
    pub fn metric(&self, column: &str) -> Result<Option<f64>> {
        Ok(match column {
            "step" => Some(self.step as f64),
            "objective" => Some(self.objective),
            "clip_fraction" => Some(self.clip_fraction),
            "train_reward_mean" => Some(self.train_reward_mean),
            "eval_pass1" => self.eval_pass1,
            "eval_majN" => self.eval_maj_n,
            _ => return Err(Error::Config(format!("unknown metric column {column:?} (expected one of {COLUMNS:?})"))),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

impl RunLog {
    pub fn push(&mut self, record: RunRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step < record.step));
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(step, value)` for every row where the column is populated.
    pub fn series(&self, column: &str) -> Result<Vec<(u64, f64)>> {
        let mut out = Vec::new();
        for r in &self.records {
            if let Some(v) = r.metric(column)? {
                out.push((r.step, v));
            }
        }
        Ok(out)
    }

    pub fn truncate_to_step(&mut self, step: u64) {
        self.records.retain(|r| r.step <= step);
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        write_records(&mut buf, &self.records, true).expect("in-memory write");
        String::from_utf8(buf).expect("utf8 csv")
    }

    pub fn from_csv_str(s: &str) -> Result<Self> {
        Self::read(s.as_bytes())
    }

    fn read<R: std::io::Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != COLUMNS {
            return Err(Error::Schema(format!("run log columns {:?}, expected {COLUMNS:?}", headers.iter().collect::<Vec<_>>())));
        }
        let mut log = RunLog::default();
        for (i, rec) in reader.deserialize().enumerate() {
            let rec: RunRecord = rec.map_err(|e| Error::Schema(format!("row {}: {e}", i + 1)))?;
            if log.records.last().is_some_and(|r| r.step >= rec.step) {
                return Err(Error::Schema(format!("row {}: steps must be strictly increasing", i + 1)));
            }
            log.records.push(rec);
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file)
    }

    /// Rewrites the whole file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_records(&mut w, &self.records, true).and_then(|_| w.flush().map_err(csv::Error::from)).map_err(|e| Error::io(path, e.into()))
    }
}

/// Appends rows to a CSV log, writing the header when the file is new or empty.
pub fn append_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_records(&mut w, records, fresh).and_then(|_| w.flush().map_err(csv::Error::from)).map_err(|e| Error::io(path, e.into()))
}

fn write_records<W: Write>(w: W, records: &[RunRecord], header: bool) -> csv::Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        writer.write_record(COLUMNS)?;
    }
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}
