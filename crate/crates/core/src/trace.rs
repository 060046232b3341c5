//! Per-step, per-node CSV traces.
//!
//! Columns: `time_s,epoch,step,generation,node_id,throughput,
//! cluster_throughput,event,decision,batch_size,cpu`. `time_s` is the
//! completion time of the step. `event` carries workload changes that took
//! effect at the start of the step on that node (`cores_taken=6`), `decision`
//! the controller label (`FLAG`, `TERMINATE`, `UPSCALE`).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace is empty")]
    Empty,
    #[error("trace row {row}: {msg}")]
    Malformed { row: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time_s: f64,
    pub epoch: u32,
    pub step: u64,
    pub generation: u64,
    pub node_id: String,
    pub throughput: f64,
    pub cluster_throughput: f64,
    pub event: String,
    pub decision: String,
    pub batch_size: u32,
    pub cpu: f64,
}

/// Rows of one synchronous step, in trace order.
#[derive(Debug, Clone, Copy)]
pub struct StepRows<'a> {
    pub rows: &'a [TraceRow],
}

impl<'a> StepRows<'a> {
    pub fn epoch(&self) -> u32 {
        self.rows[0].epoch
    }

    pub fn step(&self) -> u64 {
        self.rows[0].step
    }

    pub fn generation(&self) -> u64 {
        self.rows[0].generation
    }

    pub fn time_s(&self) -> f64 {
        self.rows[0].time_s
    }

    pub fn total_batch(&self) -> u64 {
        self.rows.iter().map(|r| r.batch_size as u64).sum()
    }

    /// Wall time of the step, recovered from the cluster throughput.
    pub fn wall(&self) -> f64 {
        let thr = self.rows[0].cluster_throughput;
        if thr > 0.0 {
            self.total_batch() as f64 / thr
        } else {
            0.0
        }
    }

    pub fn has_event(&self) -> bool {
        self.rows.iter().any(|r| !r.event.is_empty())
    }

    pub fn decisions(&self) -> impl Iterator<Item = (&'a str, &'a str)> {
        self.rows
            .iter()
            .filter(|r| !r.decision.is_empty())
            .map(|r| (r.node_id.as_str(), r.decision.as_str()))
    }
}

/// Splits rows into steps: consecutive rows sharing epoch, step, generation
/// and completion time.
pub fn steps(rows: &[TraceRow]) -> Vec<StepRows<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        let boundary = i == rows.len() || {
            let (a, b) = (&rows[start], &rows[i]);
            a.epoch != b.epoch || a.step != b.step || a.generation != b.generation || a.time_s != b.time_s
        };
        if boundary {
            if start < i {
                out.push(StepRows {
                    rows: &rows[start..i],
                });
            }
            start = i;
        }
    }
    out
}

pub fn write_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "time_s",
            "epoch",
            "step",
            "generation",
            "node_id",
            "throughput",
            "cluster_throughput",
            "event",
            "decision",
            "batch_size",
            "cpu",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<TraceRow>, TraceError> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let row: TraceRow = rec?;
        if !row.time_s.is_finite() || row.node_id.is_empty() {
            return Err(TraceError::Malformed {
                row: i + 1,
                msg: "non-finite time or empty node id".into(),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(rows)
}

pub fn save(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<(), TraceError> {
    let file = std::fs::File::create(path)?;
    write_csv(rows, std::io::BufWriter::new(file))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<TraceRow>, TraceError> {
    read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}
