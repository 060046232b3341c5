//! Offline replay of a recorded trace through a fresh controller.
//!
//! Each recorded step is turned back into step reports and fed to the same
//! [`Controller`] the run used. Agreement means identical per-node decision
//! labels at every step and identical batch sizes in every generation.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::control::{ControlError, Controller};
use crate::monitor::StepReport;
use crate::planner::{Cluster, DatasetSpec, NodeId};
use crate::scenario::ControllerSettings;
use crate::trace::{steps, TraceRow};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("trace is empty")]
    Empty,
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub epoch: u32,
    pub step: u64,
    pub generation: u64,
    pub node_id: NodeId,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub steps: usize,
    pub recorded: Vec<Decision>,
    pub replayed: Vec<Decision>,
    /// Rows whose batch size or generation differs from the replayed plan.
    pub plan_mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn agrees(&self) -> bool {
        self.recorded == self.replayed && self.plan_mismatches.is_empty()
    }

    pub fn first_divergence(&self) -> Option<String> {
        if let Some(m) = self.plan_mismatches.first() {
            return Some(m.clone());
        }
        let n = self.recorded.len().max(self.replayed.len());
        (0..n)
            .find(|&i| self.recorded.get(i) != self.replayed.get(i))
            .map(|i| {
                format!(
                    "decision #{i}: recorded {:?}, replayed {:?}",
                    self.recorded.get(i),
                    self.replayed.get(i)
                )
            })
    }
}

pub fn replay(
    rows: &[TraceRow],
    cluster: Cluster,
    dataset: DatasetSpec,
    settings: ControllerSettings,
    normal_cpu: BTreeMap<NodeId, f64>,
) -> Result<ReplayReport, ReplayError> {
    if rows.is_empty() {
        return Err(ReplayError::Empty);
    }
    let mut ctl = Controller::new(cluster, dataset, settings, normal_cpu)?;
    let mut recorded = Vec::new();
    let mut replayed = Vec::new();
    let mut plan_mismatches = Vec::new();
    let all = steps(rows);
    for s in &all {
        let plan = ctl.plan().clone();
        for r in s.rows {
            if r.generation != plan.generation || r.batch_size != plan.batch(&r.node_id) {
                plan_mismatches.push(format!(
                    "epoch {} step {} {}: recorded gen {} batch {}, replay gen {} batch {}",
                    r.epoch,
                    r.step,
                    r.node_id,
                    r.generation,
                    r.batch_size,
                    plan.generation,
                    plan.batch(&r.node_id)
                ));
            }
        }
        let decision = |node: &str, label: &str| Decision {
            epoch: s.epoch(),
            step: s.step(),
            generation: s.generation(),
            node_id: node.to_string(),
            label: label.to_string(),
        };
        recorded.extend(s.decisions().map(|(n, l)| decision(n, l)));
        let reports: Vec<StepReport> = s
            .rows
            .iter()
            .map(|r| StepReport {
                node_id: r.node_id.clone(),
                generation: r.generation,
                step_index: r.step,
                measured_throughput: r.throughput,
                cpu_utilization: r.cpu,
                wall_time: r.batch_size as f64 / r.throughput,
            })
            .collect();
        let outcome = ctl.on_step(&reports)?;
        // trace rows list nodes in recording order; compare in that order
        for r in s.rows {
            if let Some(l) = outcome.labels.get(&r.node_id) {
                replayed.push(decision(&r.node_id, l.as_str()));
            }
        }
    }
    Ok(ReplayReport {
        steps: all.len(),
        recorded,
        replayed,
        plan_mismatches,
    })
}
