//! Real-process execution: a coordinator drives worker processes over TCP.
//!
//! The coordinator gathers one `STEP_REPORT` per worker per step (a barrier),
//! runs the same [`Controller`](crate::control::Controller) as the simulator,
//! and broadcasts a new `PLAN` when batches change. Workers time a
//! [`SyntheticKernel`] at their planned batch size.

pub mod coordinator;
pub mod kernel;
pub mod wire;
pub mod worker;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::control::ControlError;
use crate::planner::{NodeClass, NodeId, NodeProfile, PlannerError};
use crate::scenario::ScenarioError;
use crate::speedmodel::{SpeedModel, SpeedModelError};

pub use coordinator::{coordinator_run, CoordinatorConfig, LiveFailure, LiveRun};
pub use kernel::{SyntheticKernel, Throttle};
pub use wire::{Message, WireError};
pub use worker::{worker_run, WorkerConfig};

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("cannot connect to {endpoint}: {source}")]
    ConnectFailure {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("worker `{0}` lost")]
    WorkerLost(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("benchmark: {0}")]
    Bench(#[from] SpeedModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// What a live run learned about its cluster; enough to replay its trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub nodes: Vec<NodeProfile>,
    pub models: BTreeMap<NodeClass, SpeedModel>,
    pub normal_cpu: BTreeMap<NodeId, f64>,
}

impl Session {
    /// `node <id> <class> <cores> <normal_cpu>` lines followed by
    /// `speedmodel` blocks.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let cpu = self.normal_cpu.get(&n.node_id).copied().unwrap_or(f64::NAN);
            s.push_str(&format!("node {} {} {} {}\n", n.node_id, n.node_class, n.core_count, cpu));
        }
        for m in self.models.values() {
            s.push_str(&m.to_text());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, LiveError> {
        let mut nodes = Vec::new();
        let mut normal_cpu = BTreeMap::new();
        let mut rest = String::new();
        for (i, line) in text.lines().enumerate() {
            let Some(body) = line.trim().strip_prefix("node ") else {
                rest.push_str(line);
                rest.push('\n');
                continue;
            };
            let f: Vec<&str> = body.split_whitespace().collect();
            let bad = || LiveError::Protocol(format!("session line {}: `{}`", i + 1, line));
            if f.len() != 4 {
                return Err(bad());
            }
            let cores: u32 = f[2].parse().map_err(|_| bad())?;
            let cpu: f64 = f[3].parse().map_err(|_| bad())?;
            nodes.push(NodeProfile::new(f[0], f[1], cores));
            normal_cpu.insert(f[0].to_string(), cpu);
            rest.push('\n');
        }
        let models = SpeedModel::parse_all(&rest)?
            .into_iter()
            .map(|m| (m.node_class().to_string(), m))
            .collect();
        Ok(Self {
            nodes,
            models,
            normal_cpu,
        })
    }
}
