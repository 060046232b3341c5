//! Discrete-step simulation of synchronous training over modeled nodes.
//!
//! Each step every node processes its batch at the speed of its active
//! model (nominal, or degraded while a workload event holds cores),
//! stretched by multiplicative jitter drawn from a seeded stream. The step
//! ends when the slowest node finishes. Runs are bit-for-bit reproducible
//! for a given scenario and seed.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::control::{Action, ControlError, Controller};
use crate::monitor::StepReport;
use crate::planner::{BatchPlan, DatasetSpec, NodeId};
use crate::retuner::BatchChange;
use crate::scenario::{Scenario, ScenarioError};
use crate::speedmodel::SpeedModelError;
use crate::trace::TraceRow;

const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;
const FORCED_STREAM: u64 = 0x666f_7263_6500_0002;
const SHUFFLE_STREAM: u64 = 0x7368_7566_6600_0003;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("node `{node}` cannot run batch {batch}: {source}")]
    Model {
        node: NodeId,
        batch: u32,
        #[source]
        source: SpeedModelError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetuneRecord {
    pub time_s: f64,
    pub epoch: u32,
    pub step: u64,
    pub upscale: bool,
    pub changes: Vec<BatchChange>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSummary {
    pub epochs_run: u32,
    /// Epochs ended by the controller.
    pub controller_terminations: u32,
    /// Epochs cut short by injected forced termination.
    pub forced_terminations: u32,
    pub retunes: Vec<RetuneRecord>,
    pub total_time: f64,
    pub samples_processed: u64,
    /// Per sample id: number of epochs in which it was trained.
    pub coverage: Vec<u32>,
    pub initial_plan: BatchPlan,
    pub final_plan: BatchPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub rows: Vec<TraceRow>,
    pub summary: SimSummary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageReport {
    pub samples: u64,
    pub never: u64,
    pub min: u32,
    pub max: u32,
    pub mean: f64,
}

pub fn coverage_report(coverage: &[u32]) -> CoverageReport {
    let samples = coverage.len() as u64;
    CoverageReport {
        samples,
        never: coverage.iter().filter(|&&c| c == 0).count() as u64,
        min: coverage.iter().copied().min().unwrap_or(0),
        max: coverage.iter().copied().max().unwrap_or(0),
        mean: if samples == 0 {
            0.0
        } else {
            coverage.iter().map(|&c| c as f64).sum::<f64>() / samples as f64
        },
    }
}

fn mix(seed: u64, a: u64, b: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ stream ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sample ids each node trains on this epoch, in visiting order.
///
/// Public ids are `0..public`; each node's private ids follow, contiguous, in
/// plan order. Public ids are permuted and cut into per-node portions of
/// `share - private`; every node's list is then shuffled. Keyed by
/// `(seed, epoch, generation)`.
pub fn shuffle_assignment(
    dataset: &DatasetSpec,
    plan: &BatchPlan,
    epoch: u32,
    seed: u64,
) -> BTreeMap<NodeId, Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, plan.generation, SHUFFLE_STREAM));
    let mut public: Vec<u64> = (0..dataset.public_samples).collect();
    public.shuffle(&mut rng);
    let mut next_public = 0usize;
    let mut next_private = dataset.public_samples;
    let mut out = BTreeMap::new();
    for n in &plan.order {
        let private = dataset.private_of(n);
        let share = plan.dataset_shares.get(n).copied().unwrap_or(0);
        let portion = share.saturating_sub(private) as usize;
        let end = (next_public + portion).min(public.len());
        let mut ids: Vec<u64> = public[next_public..end].to_vec();
        next_public = end;
        ids.extend(next_private..next_private + private);
        next_private += private;
        ids.shuffle(&mut rng);
        out.insert(n.clone(), ids);
    }
    out
}

/// Private sample id range of each node under the numbering used by
/// [`shuffle_assignment`].
pub fn private_ranges(dataset: &DatasetSpec, plan: &BatchPlan) -> BTreeMap<NodeId, (u64, u64)> {
    let mut next = dataset.public_samples;
    plan.order
        .iter()
        .map(|n| {
            let p = dataset.private_of(n);
            let r = (next, next + p);
            next += p;
            (n.clone(), r)
        })
        .collect()
}

struct Node {
    id: NodeId,
    cores: f64,
    cores_taken: u32,
}

pub fn run(scenario: &Scenario) -> Result<SimTrace, SimError> {
    scenario.validate(true)?;
    let cluster = scenario.cluster()?;
    let mut ctl = Controller::new(
        cluster,
        scenario.dataset.clone(),
        scenario.controller.clone(),
        scenario.normal_cpu(),
    )?;
    let initial_plan = ctl.plan().clone();
    info!(
        "{}: initial plan {} steps/epoch, predicted step {:.4}s",
        scenario.name, initial_plan.steps_per_epoch, initial_plan.predicted_step_time
    );

    let mut nodes: Vec<Node> = scenario
        .nodes
        .iter()
        .map(|n| Node {
            id: n.node_id.clone(),
            cores: n.core_count as f64,
            cores_taken: 0,
        })
        .collect();
    let mut models = BTreeMap::new();
    for n in &nodes {
        models.insert(n.id.clone(), scenario.active_model(&n.id, 0)?);
    }
    let nominal = models.clone();

    let noise = scenario.controller.noise;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(scenario.seed, 0, 0, NOISE_STREAM));
    let mut forced_rng = ChaCha8Rng::seed_from_u64(mix(scenario.seed, 0, 0, FORCED_STREAM));

    let total = scenario.dataset.total_samples as usize;
    let mut coverage = vec![0u32; total];
    let mut seen_in = vec![u32::MAX; total];
    let mut rows = Vec::new();
    let mut retunes = Vec::new();
    let mut time = 0.0f64;
    let mut next_event = 0usize;
    let mut controller_terminations = 0;
    let mut forced_terminations = 0;
    let mut samples_processed = 0u64;

    for epoch in 0..scenario.epochs {
        let plan = ctl.plan().clone();
        let assignment = shuffle_assignment(&scenario.dataset, &plan, epoch, scenario.seed);
        let forced_stop = (scenario.controller.forced_termination_rate > 0.0
            && forced_rng.random::<f64>() < scenario.controller.forced_termination_rate)
            .then(|| forced_rng.random_range(0..plan.steps_per_epoch.max(1)));

        for step in 0..plan.steps_per_epoch {
            if forced_stop == Some(step) {
                debug!("forced termination of epoch {epoch} at step {step}");
                forced_terminations += 1;
                break;
            }
            let mut events: BTreeMap<NodeId, String> = BTreeMap::new();
            while let Some(e) = scenario.events.get(next_event).filter(|e| e.at_time <= time) {
                let node = nodes.iter_mut().find(|n| n.id == e.node_id).expect("validated");
                node.cores_taken = e.cores_taken;
                models.insert(node.id.clone(), scenario.active_model(&node.id, e.cores_taken)?);
                info!("t={time:.1}s: {} cores_taken={}", e.node_id, e.cores_taken);
                events
                    .entry(e.node_id.clone())
                    .and_modify(|s| s.push_str(&format!(";cores_taken={}", e.cores_taken)))
                    .or_insert(format!("cores_taken={}", e.cores_taken));
                next_event += 1;
            }

            let mut compute = Vec::with_capacity(nodes.len());
            for n in &nodes {
                let bs = plan.batch(&n.id);
                let speed_err = |source| SimError::Model {
                    node: n.id.clone(),
                    batch: bs,
                    source,
                };
                let active = models[&n.id].speed_at(bs).map_err(speed_err)?;
                let normal = nominal[&n.id].speed_at(bs).map_err(speed_err)?;
                let jitter = if noise > 0.0 {
                    noise_rng.random_range(1.0 - noise..=1.0 + noise)
                } else {
                    1.0
                };
                let secs = bs as f64 / active * jitter;
                compute.push((bs, secs, n.cores * active / normal));
            }
            let wall = compute.iter().map(|c| c.1).fold(0.0, f64::max);
            time += wall;
            let cluster_thr = plan.total_batch() as f64 / wall;
            samples_processed += plan.total_batch();

            for (n, &(bs, _, _)) in nodes.iter().zip(&compute) {
                let ids = &assignment[&n.id];
                if ids.is_empty() {
                    continue;
                }
                let base = step as usize * bs as usize;
                for j in 0..bs as usize {
                    let id = ids[(base + j) % ids.len()] as usize;
                    if seen_in[id] != epoch {
                        seen_in[id] = epoch;
                        coverage[id] += 1;
                    }
                }
            }

            let reports: Vec<StepReport> = nodes
                .iter()
                .zip(&compute)
                .map(|(n, &(bs, secs, cpu))| StepReport {
                    node_id: n.id.clone(),
                    generation: plan.generation,
                    step_index: step,
                    measured_throughput: bs as f64 / secs,
                    cpu_utilization: cpu,
                    wall_time: secs,
                })
                .collect();
            let outcome = ctl.on_step(&reports)?;
            for (n, r) in nodes.iter().zip(&reports) {
                rows.push(TraceRow {
                    time_s: time,
                    epoch,
                    step,
                    generation: plan.generation,
                    node_id: n.id.clone(),
                    throughput: r.measured_throughput,
                    cluster_throughput: cluster_thr,
                    event: events.remove(&n.id).unwrap_or_default(),
                    decision: outcome
                        .labels
                        .get(&n.id)
                        .map(|l| l.as_str().to_string())
                        .unwrap_or_default(),
                    batch_size: plan.batch(&n.id),
                    cpu: r.cpu_utilization,
                });
            }
            let record = |upscale, changes: &Vec<BatchChange>| RetuneRecord {
                time_s: time,
                epoch,
                step,
                upscale,
                changes: changes.clone(),
            };
            match &outcome.action {
                Action::Continue => {}
                Action::Retuned { outcome, .. } => {
                    retunes.push(record(false, &outcome.changes));
                    controller_terminations += 1;
                }
                Action::Upscaled { outcome } => {
                    retunes.push(record(true, &outcome.changes));
                    controller_terminations += 1;
                }
            }
            if outcome.action.ends_epoch() {
                break;
            }
        }
    }

    Ok(SimTrace {
        rows,
        summary: SimSummary {
            epochs_run: scenario.epochs,
            controller_terminations,
            forced_terminations,
            retunes,
            total_time: time,
            samples_processed,
            coverage,
            initial_plan,
            final_plan: ctl.plan().clone(),
        },
    })
}
