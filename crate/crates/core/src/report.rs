//! Run summaries computed from trace rows.

use std::fmt;

use thiserror::Error;

use crate::scenario::Scenario;
use crate::simengine::{coverage_report, CoverageReport, SimTrace};
use crate::trace::{steps, StepRows, TraceRow};

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("trace has no rows")]
    EmptyTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub label: String,
    pub start_s: f64,
    pub duration_s: f64,
    pub steps: u64,
    pub samples: u64,
    /// Samples over wall time across the phase's steps.
    pub mean_throughput: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetuneEvent {
    pub time_s: f64,
    pub node_id: String,
    pub old_batch: u32,
    pub new_batch: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub phases: Vec<Phase>,
    /// First post-retune phase over the phase preceding it.
    pub tuned_over_untuned: Option<f64>,
    /// First phase over the standalone throughput of the baseline node.
    pub distributed_over_single: Option<f64>,
    pub single_node_throughput: Option<f64>,
    pub retunes: Vec<RetuneEvent>,
    pub coverage: Option<CoverageReport>,
}

/// Segments a trace into phases. A phase starts at the first step, at any
/// step carrying a workload event, and at any step whose plan generation
/// differs from the previous step's.
pub fn phases(rows: &[TraceRow]) -> Vec<Phase> {
    let mut out: Vec<Phase> = Vec::new();
    let mut prev: Option<StepRows> = None;
    for s in steps(rows) {
        let gen_change = prev.is_some_and(|p| p.generation() != s.generation());
        let mut labels = Vec::new();
        if s.has_event() {
            for r in s.rows.iter().filter(|r| !r.event.is_empty()) {
                labels.push(format!("{} {}", r.node_id, r.event));
            }
        }
        if gen_change {
            labels.push(format!("generation {}", s.generation()));
        }
        if prev.is_none() || !labels.is_empty() {
            let label = if labels.is_empty() {
                "normal".to_string()
            } else {
                labels.join("; ")
            };
            out.push(Phase {
                label,
                start_s: s.time_s() - s.wall(),
                duration_s: 0.0,
                steps: 0,
                samples: 0,
                mean_throughput: 0.0,
            });
        }
        let p = out.last_mut().expect("phase opened");
        p.duration_s += s.wall();
        p.steps += 1;
        p.samples += s.total_batch();
        prev = Some(s);
    }
    for p in &mut out {
        p.mean_throughput = if p.duration_s > 0.0 {
            p.samples as f64 / p.duration_s
        } else {
            0.0
        };
    }
    out
}

/// Batch changes between consecutive generations, timed at the end of the
/// last step of the old generation.
pub fn retune_events(rows: &[TraceRow]) -> Vec<RetuneEvent> {
    let mut out = Vec::new();
    let all = steps(rows);
    for w in all.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.generation() == b.generation() {
            continue;
        }
        for rb in b.rows {
            if let Some(ra) = a.rows.iter().find(|r| r.node_id == rb.node_id) {
                if ra.batch_size != rb.batch_size {
                    out.push(RetuneEvent {
                        time_s: a.time_s(),
                        node_id: rb.node_id.clone(),
                        old_batch: ra.batch_size,
                        new_batch: rb.batch_size,
                    });
                }
            }
        }
    }
    out
}

impl RunReport {
    /// Builds a report from rows; `single_node` is the standalone throughput
    /// of the reference node, when one exists.
    pub fn from_rows(
        scenario: &str,
        rows: &[TraceRow],
        single_node: Option<f64>,
        coverage: Option<&[u32]>,
    ) -> Result<Self, ReportError> {
        if rows.is_empty() {
            return Err(ReportError::EmptyTrace);
        }
        let phases = phases(rows);
        let tuned_over_untuned = phases
            .iter()
            .position(|p| p.label.contains("generation "))
            .filter(|&i| i > 0)
            .map(|i| phases[i].mean_throughput / phases[i - 1].mean_throughput);
        let distributed_over_single = single_node
            .filter(|s| *s > 0.0)
            .map(|s| phases[0].mean_throughput / s);
        Ok(Self {
            scenario: scenario.to_string(),
            tuned_over_untuned,
            distributed_over_single,
            single_node_throughput: single_node,
            retunes: retune_events(rows),
            coverage: coverage.map(coverage_report),
            phases,
        })
    }
}

/// Report for a simulated run. The single-node reference is the peak of the
/// baseline node's nominal model, i.e. that node training alone at its best
/// batch size.
pub fn emit_report(trace: &SimTrace, scenario: &Scenario) -> Result<RunReport, ReportError> {
    let single = scenario
        .baseline_node
        .as_deref()
        .and_then(|b| scenario.node(b))
        .and_then(|n| scenario.models.get(&n.node_class))
        .map(|m| m.peak_throughput());
    RunReport::from_rows(
        &scenario.name,
        &trace.rows,
        single,
        Some(&trace.summary.coverage),
    )
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", self.scenario)?;
        writeln!(
            f,
            "{:<36} {:>10} {:>10} {:>8} {:>12}",
            "phase", "start_s", "duration_s", "steps", "throughput"
        )?;
        for p in &self.phases {
            writeln!(
                f,
                "{:<36} {:>10.1} {:>10.1} {:>8} {:>12.2}",
                p.label, p.start_s, p.duration_s, p.steps, p.mean_throughput
            )?;
        }
        if let Some(r) = self.tuned_over_untuned {
            writeln!(f, "tuned / untuned: {r:.3}")?;
        }
        if let (Some(r), Some(s)) = (self.distributed_over_single, self.single_node_throughput) {
            writeln!(f, "distributed / single-node ({s:.2}): {r:.3}")?;
        }
        for r in &self.retunes {
            writeln!(
                f,
                "retune t={:.1}s {}: {} -> {}",
                r.time_s, r.node_id, r.old_batch, r.new_batch
            )?;
        }
        if let Some(c) = &self.coverage {
            writeln!(
                f,
                "coverage: {} samples, never trained {} ({:.3}%), per-sample epochs min {} mean {:.2} max {}",
                c.samples,
                c.never,
                if c.samples == 0 { 0.0 } else { 100.0 * c.never as f64 / c.samples as f64 },
                c.min,
                c.mean,
                c.max
            )?;
        }
        Ok(())
    }
}
