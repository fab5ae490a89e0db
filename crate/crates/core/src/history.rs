//! Per-epoch search history as CSV.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::write_atomic;

pub const HISTORY_HEADER: &str = "epoch,mean,max,min,std,inserted,lr,train_loss";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based: the row describes the population after this many epochs.
    pub epoch: usize,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub std: f64,
    pub inserted: usize,
    pub lr: f64,
    pub train_loss: f64,
}

impl HistoryRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6}",
            self.epoch,
            self.mean,
            self.max,
            self.min,
            self.std,
            self.inserted,
            self.lr,
            self.train_loss
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!(
                "history row has {} fields: {line:?}",
                f.len()
            )));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Format(format!("{s:?}: {e}")))
        };
        let real = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("{s:?}: {e}")))
        };
        Ok(HistoryRow {
            epoch: int(f[0])?,
            mean: real(f[1])?,
            max: real(f[2])?,
            min: real(f[3])?,
            std: real(f[4])?,
            inserted: int(f[5])?,
            lr: real(f[6])?,
            train_loss: real(f[7])?,
        })
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

/// Parses a history file. A trailing line without its newline is treated as
/// a torn write and dropped; any other malformed line is an error.
pub fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    // the piece after the last newline is empty unless a write was torn
    lines.pop();
    let mut it = lines.into_iter();
    match it.next() {
        Some(h) if h.trim_end_matches('\r') == HISTORY_HEADER => {}
        Some(h) => return Err(Error::Format(format!("unexpected history header {h:?}"))),
        None => return Ok(Vec::new()),
    }
    it.map(HistoryRow::parse).collect()
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_history(&text)
}

/// Append-only CSV sink; every row is written and flushed through a fresh
/// append handle so a crash loses at most the row being written.
#[derive(Debug, Clone)]
pub struct HistorySink {
    path: PathBuf,
}

impl HistorySink {
    /// Starts the file over with the header and `rows`.
    pub fn create(path: &Path, rows: &[HistoryRow]) -> Result<Self> {
        write_atomic(path, history_csv(rows).as_bytes())?;
        Ok(HistorySink {
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, row: &HistoryRow) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", row.to_csv_line()).map_err(|e| Error::io(&self.path, e))?;
        f.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}
