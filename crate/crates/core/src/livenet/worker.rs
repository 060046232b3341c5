//! Worker side of the live protocol.

use std::net::TcpStream;
use std::time::{Duration, Instant};

use log::{debug, info};

use super::kernel::SyntheticKernel;
use super::wire::{read_message, write_message, Message, WireError, PROTOCOL_VERSION};
use super::LiveError;
use crate::monitor::StepReport;
use crate::speedmodel::probe_points;

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub node_id: String,
    pub node_class: String,
    pub core_count: u32,
    /// How long to keep retrying the initial connection.
    pub connect_timeout: Duration,
    /// Test hook: drop the connection after this many training steps.
    pub fail_after_steps: Option<u64>,
}

impl WorkerConfig {
    pub fn new(node_id: impl Into<String>, node_class: impl Into<String>, core_count: u32) -> Self {
        Self {
            node_id: node_id.into(),
            node_class: node_class.into(),
            core_count,
            connect_timeout: Duration::from_secs(10),
            fail_after_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerSummary {
    pub steps: u64,
    pub plans: u64,
}

fn connect(endpoint: &str, timeout: Duration) -> Result<TcpStream, LiveError> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(endpoint) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(LiveError::ConnectFailure {
                    endpoint: endpoint.to_string(),
                    source: e,
                })
            }
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}

/// Serves one coordinator until `SHUTDOWN`.
pub fn worker_run(
    endpoint: &str,
    config: &WorkerConfig,
    mut kernel: SyntheticKernel,
) -> Result<WorkerSummary, LiveError> {
    let stream = connect(endpoint, config.connect_timeout)?;
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let mut writer = stream;
    write_message(
        &mut writer,
        &Message::Hello {
            version: PROTOCOL_VERSION,
            node_id: config.node_id.clone(),
            core_count: config.core_count,
            node_class: config.node_class.clone(),
        },
    )?;
    info!("{} joined {endpoint}", config.node_id);

    let mut batch: Option<u32> = None;
    let mut summary = WorkerSummary { steps: 0, plans: 0 };
    loop {
        let msg = read_message(&mut reader)
            .map_err(|e| match e {
                WireError::Io(io) => LiveError::Io(io),
                other => LiveError::Protocol(other.to_string()),
            })?
            .ok_or_else(|| LiveError::Protocol("coordinator closed the connection".into()))?;
        match msg {
            Message::BenchRequest {
                batch_sizes,
                steps_per_probe,
            } => {
                let (points, normal_cpu) = probe_points(&mut kernel, &batch_sizes, steps_per_probe)?;
                debug!("{} bench: {:?}", config.node_id, points);
                write_message(
                    &mut writer,
                    &Message::BenchResult {
                        node_id: config.node_id.clone(),
                        normal_cpu,
                        points: points.iter().map(|p| (p.batch_size, p.throughput)).collect(),
                    },
                )?;
            }
            Message::Plan { entries, generation, .. } => {
                let mine = entries
                    .iter()
                    .find(|e| e.node_id == config.node_id)
                    .ok_or_else(|| {
                        LiveError::Protocol(format!("plan {generation} has no entry for {}", config.node_id))
                    })?;
                batch = Some(mine.batch_size);
                summary.plans += 1;
                debug!("{} plan gen {generation}: batch {}", config.node_id, mine.batch_size);
            }
            Message::StepBegin { generation, step } => {
                if config.fail_after_steps.is_some_and(|n| summary.steps >= n) {
                    info!("{} dropping connection (test hook)", config.node_id);
                    return Err(LiveError::WorkerLost(config.node_id.clone()));
                }
                let bs = batch.ok_or_else(|| LiveError::Protocol("STEP_BEGIN before PLAN".into()))?;
                let probe = kernel.train_step(bs);
                summary.steps += 1;
                write_message(
                    &mut writer,
                    &Message::StepReport(StepReport {
                        node_id: config.node_id.clone(),
                        generation,
                        step_index: step,
                        measured_throughput: bs as f64 / probe.wall_secs,
                        cpu_utilization: probe.cpu_cores,
                        wall_time: probe.wall_secs,
                    }),
                )?;
            }
            Message::RetuneNotice { generation } => {
                debug!("{} retune notice gen {generation}", config.node_id)
            }
            Message::EpochEnd { epoch } => debug!("{} epoch {epoch} done", config.node_id),
            Message::Shutdown => {
                info!("{} shutting down after {} steps", config.node_id, summary.steps);
                return Ok(summary);
            }
            other => {
                return Err(LiveError::Protocol(format!(
                    "unexpected {} from coordinator",
                    other.name()
                )))
            }
        }
    }
}
