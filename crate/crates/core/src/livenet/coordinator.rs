//! Coordinator side of the live protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::wire::{read_message, write_message, Message, PlanEntry, WireError, PROTOCOL_VERSION};
use super::{LiveError, Session};
use crate::control::Controller;
use crate::monitor::StepReport;
use crate::planner::{BatchPlan, DatasetSpec, NodeId, NodeProfile};
use crate::scenario::Scenario;
use crate::speedmodel::{SpeedModel, SpeedPoint};
use crate::trace::TraceRow;

/// Floor on the per-step deadline.
const MIN_STEP_TIMEOUT: Duration = Duration::from_secs(1);

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub expected_workers: usize,
    pub join_timeout: Duration,
    pub bench_timeout: Duration,
    /// Fixed per-step deadline; when unset the deadline is the scenario's
    /// `step_timeout_factor` times the predicted step time.
    pub step_timeout: Option<Duration>,
}

impl CoordinatorConfig {
    pub fn new(expected_workers: usize) -> Self {
        Self {
            expected_workers,
            join_timeout: Duration::from_secs(60),
            bench_timeout: Duration::from_secs(600),
            step_timeout: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LiveRun {
    pub rows: Vec<TraceRow>,
    pub session: Session,
    /// Reports dropped for carrying a stale generation.
    pub discarded: u64,
    pub initial_plan: BatchPlan,
    pub final_plan: BatchPlan,
}

/// A failed run with whatever trace it produced before failing.
#[derive(Debug)]
pub struct LiveFailure {
    pub error: LiveError,
    pub rows: Vec<TraceRow>,
    pub session: Option<Session>,
}

impl fmt::Display for LiveFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} trace rows)", self.error, self.rows.len())
    }
}

impl std::error::Error for LiveFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

enum Inbound {
    Msg(usize, Message),
    Closed(usize),
    Failed(usize, WireError),
}

struct Conn {
    node_id: String,
    writer: TcpStream,
}

struct Hub {
    conns: Vec<Conn>,
    rx: Receiver<Inbound>,
}

impl Hub {
    fn name(&self, i: usize) -> String {
        let id = &self.conns[i].node_id;
        if id.is_empty() {
            format!("connection #{i}")
        } else {
            id.clone()
        }
    }

    fn send(&mut self, i: usize, msg: &Message) -> Result<(), LiveError> {
        write_message(&mut self.conns[i].writer, msg).map_err(|e| match e {
            WireError::Io(_) => LiveError::WorkerLost(self.name(i)),
            other => other.into(),
        })
    }

    fn broadcast(&mut self, msg: &Message) -> Result<(), LiveError> {
        for i in 0..self.conns.len() {
            self.send(i, msg)?;
        }
        Ok(())
    }

    fn recv(&self, deadline: Instant, what: &str) -> Result<(usize, Message), LiveError> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.rx.recv_timeout(wait) {
            Ok(Inbound::Msg(i, m)) => Ok((i, m)),
            Ok(Inbound::Closed(i)) => Err(LiveError::WorkerLost(self.name(i))),
            Ok(Inbound::Failed(i, WireError::Io(e))) => {
                debug!("read from {} failed: {e}", self.name(i));
                Err(LiveError::WorkerLost(self.name(i)))
            }
            Ok(Inbound::Failed(i, e)) => {
                Err(LiveError::Protocol(format!("from {}: {e}", self.name(i))))
            }
            Err(RecvTimeoutError::Timeout) => Err(LiveError::Timeout(what.to_string())),
            Err(RecvTimeoutError::Disconnected) => Err(LiveError::Protocol("all readers ended".into())),
        }
    }

    fn shutdown(&mut self) {
        for c in &mut self.conns {
            let _ = write_message(&mut c.writer, &Message::Shutdown);
        }
    }
}

fn spawn_reader(i: usize, stream: TcpStream, tx: Sender<Inbound>) {
    std::thread::spawn(move || {
        let mut stream = stream;
        loop {
            let ev = match read_message(&mut stream) {
                Ok(Some(m)) => Inbound::Msg(i, m),
                Ok(None) => Inbound::Closed(i),
                Err(e) => Inbound::Failed(i, e),
            };
            let last = !matches!(ev, Inbound::Msg(..));
            if tx.send(ev).is_err() || last {
                return;
            }
        }
    });
}

fn accept_all(listener: &TcpListener, cfg: &CoordinatorConfig) -> Result<Hub, LiveError> {
    let (tx, rx) = mpsc::channel();
    let deadline = Instant::now() + cfg.join_timeout;
    listener.set_nonblocking(true)?;
    let mut conns = Vec::new();
    while conns.len() < cfg.expected_workers {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                debug!("connection from {peer}");
                spawn_reader(conns.len(), stream.try_clone()?, tx.clone());
                conns.push(Conn {
                    node_id: String::new(),
                    writer: stream,
                });
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(LiveError::Timeout(format!(
                        "{} of {} workers to connect",
                        cfg.expected_workers - conns.len(),
                        cfg.expected_workers
                    )));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
    listener.set_nonblocking(false)?;
    Ok(Hub { conns, rx })
}

fn plan_message(plan: &BatchPlan) -> Message {
    Message::Plan {
        generation: plan.generation,
        steps_per_epoch: plan.steps_per_epoch,
        entries: plan
            .share_ranges()
            .into_iter()
            .map(|(node_id, offset, len)| PlanEntry {
                batch_size: plan.batch(&node_id),
                node_id,
                share_offset: offset,
                share_len: len,
            })
            .collect(),
    }
}

/// Pointwise mean of the class members' sweeps, lifted to a monotone
/// envelope when measurement noise breaks monotonicity.
fn class_model(class: &str, sweeps: &[&Vec<(u32, f64)>]) -> Result<SpeedModel, LiveError> {
    let first = sweeps[0];
    let mut points = Vec::with_capacity(first.len());
    for (k, &(bs, _)) in first.iter().enumerate() {
        let mut sum = 0.0;
        for s in sweeps {
            match s.get(k) {
                Some(&(b, t)) if b == bs => sum += t,
                _ => {
                    return Err(LiveError::Protocol(format!(
                        "class `{class}` sweeps probed different batch sizes"
                    )))
                }
            }
        }
        points.push(SpeedPoint::new(bs, sum / sweeps.len() as f64));
    }
    match SpeedModel::new(class, points.clone()) {
        Ok(m) => Ok(m),
        Err(e) => {
            warn!("class `{class}` sweep is not monotone ({e}); using its running maximum");
            Ok(SpeedModel::monotone_envelope(class, points)?)
        }
    }
}

/// Runs a full live session: join, benchmark, plan, then train for the
/// scenario's epochs under the controller.
pub fn coordinator_run(
    listener: TcpListener,
    scenario: &Scenario,
    cfg: &CoordinatorConfig,
) -> Result<LiveRun, Box<LiveFailure>> {
    let mut rows = Vec::new();
    let mut session = None;
    match drive(&listener, scenario, cfg, &mut rows, &mut session) {
        Ok(run) => Ok(run),
        Err(error) => Err(Box::new(LiveFailure {
            error,
            rows,
            session,
        })),
    }
}

fn drive(
    listener: &TcpListener,
    scenario: &Scenario,
    cfg: &CoordinatorConfig,
    rows: &mut Vec<TraceRow>,
    session_out: &mut Option<Session>,
) -> Result<LiveRun, LiveError> {
    if cfg.expected_workers == 0 {
        return Err(LiveError::Protocol("expected_workers must be >= 1".into()));
    }
    let mut hub = accept_all(listener, cfg)?;
    let result = drive_joined(&mut hub, scenario, cfg, rows, session_out);
    hub.shutdown();
    result
}

fn drive_joined(
    hub: &mut Hub,
    scenario: &Scenario,
    cfg: &CoordinatorConfig,
    rows: &mut Vec<TraceRow>,
    session_out: &mut Option<Session>,
) -> Result<LiveRun, LiveError> {
    let n = hub.conns.len();

    // join
    let deadline = Instant::now() + cfg.join_timeout;
    let mut hellos: BTreeMap<usize, (String, u32, String)> = BTreeMap::new();
    while hellos.len() < n {
        match hub.recv(deadline, "HELLO")? {
            (i, Message::Hello {
                version,
                node_id,
                core_count,
                node_class,
            }) => {
                if version != PROTOCOL_VERSION {
                    return Err(LiveError::Protocol(format!(
                        "{node_id} speaks protocol {version}, expected {PROTOCOL_VERSION}"
                    )));
                }
                if hellos.values().any(|h| h.0 == node_id) {
                    return Err(LiveError::Protocol(format!("duplicate node id `{node_id}`")));
                }
                info!("{node_id} joined ({node_class}, {core_count} cores)");
                hub.conns[i].node_id = node_id.clone();
                hellos.insert(i, (node_id, core_count, node_class));
            }
            (i, m) => {
                return Err(LiveError::Protocol(format!(
                    "expected HELLO from {}, got {}",
                    hub.name(i),
                    m.name()
                )))
            }
        }
    }

    // benchmark
    hub.broadcast(&Message::BenchRequest {
        batch_sizes: scenario.bench.batch_sizes.clone(),
        steps_per_probe: scenario.bench.steps_per_probe,
    })?;
    let deadline = Instant::now() + cfg.bench_timeout;
    let mut sweeps: BTreeMap<usize, (f64, Vec<(u32, f64)>)> = BTreeMap::new();
    while sweeps.len() < n {
        match hub.recv(deadline, "BENCH_RESULT")? {
            (i, Message::BenchResult {
                normal_cpu, points, ..
            }) => {
                sweeps.insert(i, (normal_cpu, points));
            }
            (i, m) => {
                return Err(LiveError::Protocol(format!(
                    "expected BENCH_RESULT from {}, got {}",
                    hub.name(i),
                    m.name()
                )))
            }
        }
    }
    let mut by_class: BTreeMap<&str, Vec<&Vec<(u32, f64)>>> = BTreeMap::new();
    for (i, (_, pts)) in &sweeps {
        by_class.entry(hellos[i].2.as_str()).or_default().push(pts);
    }
    let mut models = BTreeMap::new();
    for (class, s) in by_class {
        let m = class_model(class, &s)?;
        info!("benchmarked {m}");
        models.insert(class.to_string(), m);
    }

    let mut nodes: Vec<NodeProfile> = hellos
        .values()
        .map(|(id, cores, class)| {
            let mut p = NodeProfile::new(id.clone(), class.clone(), *cores);
            if let Some(s) = scenario.node(id) {
                p.is_storage_node = s.is_storage_node;
                p.owned_private_samples = s.owned_private_samples;
            }
            p
        })
        .collect();
    nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    let normal_cpu: BTreeMap<NodeId, f64> = sweeps
        .iter()
        .map(|(i, (cpu, _))| (hellos[i].0.clone(), *cpu))
        .collect();
    let session = Session {
        nodes: nodes.clone(),
        models: models.clone(),
        normal_cpu: normal_cpu.clone(),
    };
    *session_out = Some(session.clone());

    let dataset = DatasetSpec::for_nodes(scenario.dataset.total_samples, &nodes)?;
    let cluster = crate::planner::Cluster::new(nodes, models)?;
    let mut ctl = Controller::new(cluster, dataset, scenario.controller.clone(), normal_cpu)?;
    let initial_plan = ctl.plan().clone();
    info!(
        "initial plan: {:?}, {} steps/epoch",
        initial_plan.batch_sizes, initial_plan.steps_per_epoch
    );
    hub.broadcast(&plan_message(&initial_plan))?;

    let conn_of: BTreeMap<String, usize> = hellos.iter().map(|(i, h)| (h.0.clone(), *i)).collect();
    let start = Instant::now();
    let mut discarded = 0u64;
    for epoch in 0..scenario.epochs {
        let plan = ctl.plan().clone();
        let timeout = cfg.step_timeout.unwrap_or_else(|| {
            Duration::from_secs_f64(plan.predicted_step_time * scenario.controller.step_timeout_factor)
                .max(MIN_STEP_TIMEOUT)
        });
        for step in 0..plan.steps_per_epoch {
            let began = Instant::now();
            hub.broadcast(&Message::StepBegin {
                generation: plan.generation,
                step,
            })?;
            let deadline = began + timeout;
            let mut got: BTreeMap<usize, StepReport> = BTreeMap::new();
            while got.len() < n {
                let (i, m) = hub.recv(deadline, &format!("reports of step {step}"))?;
                let Message::StepReport(r) = m else {
                    return Err(LiveError::Protocol(format!(
                        "expected STEP_REPORT from {}, got {}",
                        hub.name(i),
                        m.name()
                    )));
                };
                if r.generation < plan.generation {
                    discarded += 1;
                    continue;
                }
                if r.generation != plan.generation || r.step_index != step || conn_of.get(&r.node_id) != Some(&i)
                {
                    return Err(LiveError::Protocol(format!(
                        "report ({}, gen {}, step {}) does not match step {step} of gen {}",
                        r.node_id, r.generation, r.step_index, plan.generation
                    )));
                }
                if got.insert(i, r).is_some() {
                    return Err(LiveError::Protocol(format!("duplicate report from {}", hub.name(i))));
                }
            }
            let wall = began.elapsed().as_secs_f64();
            let now = start.elapsed().as_secs_f64();
            let mut reports: Vec<StepReport> = got.into_values().collect();
            reports.sort_by(|a, b| a.node_id.cmp(&b.node_id));
            let outcome = ctl.on_step(&reports)?;
            let cluster_thr = plan.total_batch() as f64 / wall;
            for r in &reports {
                rows.push(TraceRow {
                    time_s: now,
                    epoch,
                    step,
                    generation: plan.generation,
                    node_id: r.node_id.clone(),
                    throughput: r.measured_throughput,
                    cluster_throughput: cluster_thr,
                    event: String::new(),
                    decision: outcome
                        .labels
                        .get(&r.node_id)
                        .map(|l| l.as_str().to_string())
                        .unwrap_or_default(),
                    batch_size: plan.batch(&r.node_id),
                    cpu: r.cpu_utilization,
                });
            }
            if outcome.action.ends_epoch() {
                let next = ctl.plan().clone();
                info!("epoch {epoch} ended at step {step}; new plan {:?}", next.batch_sizes);
                hub.broadcast(&Message::RetuneNotice {
                    generation: next.generation,
                })?;
                hub.broadcast(&plan_message(&next))?;
                break;
            }
        }
        hub.broadcast(&Message::EpochEnd { epoch: epoch as u64 })?;
    }
    let discarded = discarded + ctl.state().discarded();
    Ok(LiveRun {
        rows: std::mem::take(rows),
        session,
        discarded,
        initial_plan,
        final_plan: ctl.plan().clone(),
    })
}
