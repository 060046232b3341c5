//! Batch-size retuning after a termination decision.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::debug;
use thiserror::Error;

use crate::monitor::{Evidence, MonitorState, Termination, CPU_HINT_STEPS, FLAG_WINDOW};
use crate::planner::{
    equalize_batch, replan_with_capacity, BatchPlan, Cluster, DatasetSpec, NodeId, PlannerError,
};
use crate::speedmodel::{InverseWeights, SpeedModel, SpeedModelError};

/// CPU level, relative to normal, at which a shrunken node may grow again.
pub const UPSCALE_CPU_FRACTION: f64 = 0.98;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetuneError {
    #[error("termination carries no flagged node")]
    NoEvidence,
    #[error("invalid clamp range [{low}, {high}]: need 0 < low <= 1 <= high")]
    InvalidClamp { low: f64, high: f64 },
    #[error("flagged node `{0}` is not in the plan")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("node `{node}`: {source}")]
    Model {
        node: NodeId,
        #[source]
        source: SpeedModelError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RetuneMode {
    /// Solve for the batch that restores the target step time on the
    /// node's inferred degraded curve.
    #[default]
    SpeedInterpolation,
    /// Scale the batch by the node's recent CPU share.
    CpuProportional,
}

impl fmt::Display for RetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetuneMode::SpeedInterpolation => "speed",
            RetuneMode::CpuProportional => "cpu",
        })
    }
}

impl FromStr for RetuneMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "speed" => Ok(RetuneMode::SpeedInterpolation),
            "cpu" => Ok(RetuneMode::CpuProportional),
            other => Err(format!("unknown retune mode `{other}` (expected speed|cpu)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetunePolicy {
    pub mode: RetuneMode,
    /// Lower bound as a fraction of the node's generation-0 batch.
    pub clamp_low: f64,
    /// Upper bound as a fraction of the node's generation-0 batch.
    pub clamp_high: f64,
    /// Invert with swapped interpolation weights.
    pub eq3_literal: bool,
    /// Diagnostic: invert the nominal model at the measured speed instead of
    /// solving on the degraded curve.
    pub naive_inverse: bool,
}

impl Default for RetunePolicy {
    fn default() -> Self {
        Self {
            mode: RetuneMode::SpeedInterpolation,
            clamp_low: 0.5,
            clamp_high: 1.5,
            eq3_literal: false,
            naive_inverse: false,
        }
    }
}

impl RetunePolicy {
    pub fn validate(&self) -> Result<(), RetuneError> {
        let ok = self.clamp_low > 0.0 && self.clamp_low <= 1.0 && self.clamp_high >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(RetuneError::InvalidClamp {
                low: self.clamp_low,
                high: self.clamp_high,
            })
        }
    }

    pub fn weights(&self) -> InverseWeights {
        if self.eq3_literal {
            InverseWeights::Literal
        } else {
            InverseWeights::Standard
        }
    }

    /// Allowed batch range for a node whose generation-0 batch is `initial`.
    pub fn clamp_range(&self, initial: u32) -> (u32, u32) {
        let lo = (self.clamp_low * initial as f64 - 1e-9).ceil().max(1.0) as u32;
        let hi = (self.clamp_high * initial as f64 + 1e-9).floor().max(lo as f64) as u32;
        (lo, hi)
    }
}

/// How one node's batch changed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchChange {
    pub node_id: NodeId,
    pub old_batch: u32,
    pub new_batch: u32,
    /// Inferred fraction of nominal capacity.
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetuneOutcome {
    pub plan: BatchPlan,
    pub changes: Vec<BatchChange>,
}

/// Computes new batch sizes for every flagged node and replans.
///
/// Unflagged nodes keep their batches. Each flagged node's capacity is
/// inferred by scaling its nominal model uniformly through the measured
/// point `(old batch, measured speed)`.
pub fn retune(
    plan: &BatchPlan,
    termination: &Termination,
    cluster: &Cluster,
    state: &mut MonitorState,
    policy: &RetunePolicy,
    dataset: &DatasetSpec,
) -> Result<RetuneOutcome, RetuneError> {
    policy.validate()?;
    let flagged: Vec<&Evidence> = if termination.flagged.is_empty() {
        vec![&termination.trigger]
    } else {
        termination.flagged.iter().collect()
    };
    if flagged.is_empty() || termination.trigger.node_id.is_empty() {
        return Err(RetuneError::NoEvidence);
    }
    for e in &flagged {
        if !plan.batch_sizes.contains_key(&e.node_id) {
            return Err(RetuneError::UnknownNode(e.node_id.clone()));
        }
    }

    let is_flagged = |n: &str| flagged.iter().any(|e| e.node_id == n);
    let target = plan
        .order
        .iter()
        .filter(|n| !is_flagged(n))
        .map(|n| plan.node_step_time(n))
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
        .unwrap_or(plan.target_step_time);

    let mut new_batches = plan.batch_sizes.clone();
    let mut capacity = BTreeMap::new();
    let mut changes = Vec::new();
    for e in flagged {
        let node = &e.node_id;
        let model = cluster
            .model_of(node)
            .ok_or_else(|| RetuneError::UnknownNode(node.clone()))?;
        let old = plan.batch(node);
        let nominal = model.speed_at(old).map_err(|source| RetuneError::Model {
            node: node.clone(),
            source,
        })?;
        let alpha = (e.current_speed / nominal).clamp(1e-6, 1.0);

        let proposed = match policy.mode {
            RetuneMode::CpuProportional => match state.cpu_retune_hint(node, old) {
                Ok(b) => b,
                Err(err) => {
                    debug!("cpu hint unavailable for {node} ({err}); using speed path");
                    speed_batch(model, alpha, e.current_speed, target, policy)
                }
            },
            RetuneMode::SpeedInterpolation => speed_batch(model, alpha, e.current_speed, target, policy),
        };
        let initial = plan.initial_batch_sizes[node];
        let (lo, hi) = policy.clamp_range(initial);
        let new = proposed
            .clamp(lo, hi)
            .clamp(model.min_batch(), model.max_batch());
        debug!("retune {node}: alpha {alpha:.4} target {target:.4}s proposed {proposed} -> {new}");
        if new < old {
            state.record_retune_cpu(node, e.cpu_evidence);
        }
        new_batches.insert(node.clone(), new);
        capacity.insert(node.clone(), alpha);
        changes.push(BatchChange {
            node_id: node.clone(),
            old_batch: old,
            new_batch: new,
            capacity: alpha,
        });
    }
    let plan = replan_with_capacity(plan, &new_batches, &capacity, cluster, dataset)?;
    Ok(RetuneOutcome { plan, changes })
}

fn speed_batch(
    model: &SpeedModel,
    alpha: f64,
    measured: f64,
    target_step: f64,
    policy: &RetunePolicy,
) -> u32 {
    let weights = policy.weights();
    if policy.naive_inverse {
        return match model.batch_for_speed(measured, weights) {
            Ok(b) => b,
            Err(_) if measured < model.min_throughput() => model.min_batch(),
            Err(_) => model.max_batch(),
        };
    }
    let degraded = model.scaled(alpha);
    let eq = equalize_batch(&degraded, target_step);
    if !eq.exact {
        return eq.rounded;
    }
    degraded
        .interpolate(eq.batch)
        .and_then(|speed| degraded.batch_for_speed(speed, weights))
        .unwrap_or(eq.rounded)
}

/// CPU mode only: once every node has gone a full flag window without a
/// flag, proposes growing nodes that were shrunk and whose CPU share is back
/// to normal. Returns only the nodes that would change.
pub fn upscale_check(
    plan: &BatchPlan,
    state: &MonitorState,
    policy: &RetunePolicy,
) -> Option<BTreeMap<NodeId, u32>> {
    if policy.mode != RetuneMode::CpuProportional {
        return None;
    }
    let quiet = plan.order.iter().all(|n| {
        state
            .flag_history(n)
            .is_some_and(|h| h.len() == FLAG_WINDOW && h.iter().all(|f| !f))
    });
    if !quiet {
        return None;
    }
    let mut proposals = BTreeMap::new();
    for n in &plan.order {
        let current = plan.batch(n);
        let initial = plan.initial_batch_sizes[n];
        if current >= initial {
            continue;
        }
        let (Some(mean), Some(normal)) = (state.recent_cpu_mean(n, CPU_HINT_STEPS), state.normal_cpu(n))
        else {
            continue;
        };
        if mean < UPSCALE_CPU_FRACTION * normal {
            continue;
        }
        // grow by the ratio between today's CPU and the level that caused
        // the shrink
        let baseline = state
            .retune_cpu(n)
            .filter(|c| *c > 0.0)
            .unwrap_or(normal * plan.capacity.get(n).copied().unwrap_or(1.0));
        let hint = crate::speedmodel::round_batch(current as f64 * mean / baseline);
        let proposal = hint.min(initial);
        if proposal > current {
            proposals.insert(n.clone(), proposal);
        }
    }
    (!proposals.is_empty()).then_some(proposals)
}

/// Replans with upscale proposals, refreshing the capacity estimate of the
/// grown nodes from their last measured speed.
pub fn apply_upscale(
    plan: &BatchPlan,
    proposals: &BTreeMap<NodeId, u32>,
    cluster: &Cluster,
    state: &mut MonitorState,
    dataset: &DatasetSpec,
) -> Result<RetuneOutcome, RetuneError> {
    let mut new_batches = plan.batch_sizes.clone();
    let mut capacity = BTreeMap::new();
    let mut changes = Vec::new();
    for (n, &b) in proposals {
        let model = cluster
            .model_of(n)
            .ok_or_else(|| RetuneError::UnknownNode(n.clone()))?;
        let old = plan.batch(n);
        let nominal = model.speed_at(old).map_err(|source| RetuneError::Model {
            node: n.clone(),
            source,
        })?;
        let alpha = state
            .last_speed(n)
            .map_or(1.0, |s| (s / nominal).clamp(1e-6, 1.0));
        let new = b.clamp(model.min_batch(), model.max_batch());
        new_batches.insert(n.clone(), new);
        capacity.insert(n.clone(), alpha);
        state.clear_retune_cpu(n);
        changes.push(BatchChange {
            node_id: n.clone(),
            old_batch: old,
            new_batch: new,
            capacity: alpha,
        });
    }
    let plan = replan_with_capacity(plan, &new_batches, &capacity, cluster, dataset)?;
    Ok(RetuneOutcome { plan, changes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::{MonitorConfig, MonitorDecision, StepReport};
    use crate::planner::{plan_initial, NodeProfile};

    fn three_node() -> (Cluster, DatasetSpec) {
        let model = SpeedModel::from_pairs(
            "xeon",
            &[(30, 22.0), (60, 31.0), (120, 31.2), (180, 31.4), (240, 31.6)],
        )
        .unwrap();
        let nodes = ["a", "b", "c"]
            .iter()
            .map(|n| NodeProfile::new(*n, "xeon", 8))
            .collect();
        let cluster = Cluster::new(nodes, BTreeMap::from([("xeon".to_string(), model)])).unwrap();
        (cluster, DatasetSpec::public_only(300_000))
    }

    fn evidence(node: &str, speed: f64, cpu: f64) -> Evidence {
        Evidence {
            node_id: node.into(),
            current_speed: speed,
            cpu_evidence: cpu,
            decline_index: 0.5,
        }
    }

    fn termination(e: Evidence) -> Termination {
        Termination {
            trigger: e.clone(),
            flagged: vec![e],
        }
    }

    fn state_for(plan: &BatchPlan) -> MonitorState {
        let normal = plan.order.iter().map(|n| (n.clone(), 8.0)).collect();
        MonitorState::new(plan, normal, MonitorConfig::default())
    }

    #[test]
    fn speed_mode_recovers_reference_batches() {
        let (cluster, ds) = three_node();
        let plan = plan_initial(&cluster, &ds).unwrap();
        assert_eq!(plan.batch("c"), 180);
        let policy = RetunePolicy::default();

        let mut st = state_for(&plan);
        let out = retune(&plan, &termination(evidence("c", 25.2, 6.4)), &cluster, &mut st, &policy, &ds)
            .unwrap();
        let b4 = out.plan.batch("c");
        assert!((130..=150).contains(&b4), "4-core retune gave {b4}");
        assert_eq!(out.plan.batch("a"), 180);
        assert_eq!(out.plan.generation, 1);

        let mut st = state_for(&plan);
        let out = retune(
            &plan,
            &termination(evidence("c", 53.3 / 3.0, 4.5)),
            &cluster,
            &mut st,
            &policy,
            &ds,
        )
        .unwrap();
        let b6 = out.plan.batch("c");
        assert!((90..=110).contains(&b6), "6-core retune gave {b6}");
        // the degraded node's predicted step no longer exceeds the others'
        assert!(out.plan.node_step_time("c") <= plan.node_step_time("a") * 1.01);
    }

    #[test]
    fn unchanged_speed_keeps_batch() {
        let (cluster, ds) = three_node();
        let plan = plan_initial(&cluster, &ds).unwrap();
        let mut st = state_for(&plan);
        let out = retune(
            &plan,
            &termination(evidence("b", 31.4, 8.0)),
            &cluster,
            &mut st,
            &RetunePolicy::default(),
            &ds,
        )
        .unwrap();
        assert_eq!(out.plan.batch("b"), 180);
    }

    #[test]
    fn clamp_floor_is_half_initial_batch() {
        let (cluster, ds) = three_node();
        let plan = plan_initial(&cluster, &ds).unwrap();
        let mut st = state_for(&plan);
        let out = retune(
            &plan,
            &termination(evidence("b", 3.0, 0.5)),
            &cluster,
            &mut st,
            &RetunePolicy::default(),
            &ds,
        )
        .unwrap();
        assert_eq!(out.plan.batch("b"), 90);
        assert_eq!(out.changes[0].old_batch, 180);
    }

    #[test]
    fn cpu_mode_uses_hint_and_falls_back_without_window() {
        let (cluster, ds) = three_node();
        let plan = plan_initial(&cluster, &ds).unwrap();
        let policy = RetunePolicy {
            mode: RetuneMode::CpuProportional,
            ..RetunePolicy::default()
        };
        let mut st = state_for(&plan);
        // no CPU samples yet: speed path
        let speed_only = retune(&plan, &termination(evidence("c", 25.2, 6.4)), &cluster, &mut st, &policy, &ds)
            .unwrap()
            .plan
            .batch("c");
        let mut st = state_for(&plan);
        for _ in 0..5 {
            st.push_cpu_sample("c", 8.0 * 25.2 / 31.4);
        }
        let cpu = retune(&plan, &termination(evidence("c", 25.2, 6.4)), &cluster, &mut st, &policy, &ds)
            .unwrap()
            .plan
            .batch("c");
        assert_eq!(cpu, (180.0_f64 * 25.2 / 31.4).round() as u32);
        assert!((cpu as f64 - speed_only as f64).abs() / cpu as f64 <= 0.15);
    }

    #[test]
    fn invalid_policy_and_unknown_node() {
        let (cluster, ds) = three_node();
        let plan = plan_initial(&cluster, &ds).unwrap();
        let mut st = state_for(&plan);
        let bad = RetunePolicy {
            clamp_low: 1.2,
            ..RetunePolicy::default()
        };
        assert!(matches!(
            retune(&plan, &termination(evidence("a", 1.0, 1.0)), &cluster, &mut st, &bad, &ds),
            Err(RetuneError::InvalidClamp { .. })
        ));
        assert!(matches!(
            retune(
                &plan,
                &termination(evidence("zz", 1.0, 1.0)),
                &cluster,
                &mut st,
                &RetunePolicy::default(),
                &ds
            ),
            Err(RetuneError::UnknownNode(_))
        ));
    }

    fn quiet_state(plan: &BatchPlan, cpu: f64) -> MonitorState {
        let mut st = state_for(plan);
        for s in 0..5 {
            let reports: Vec<StepReport> = plan
                .order
                .iter()
                .map(|n| StepReport {
                    node_id: n.clone(),
                    generation: plan.generation,
                    step_index: s,
                    measured_throughput: plan.predicted_speeds[n],
                    cpu_utilization: if n == "c" { cpu } else { 8.0 },
                    wall_time: 1.0,
                })
                .collect();
            assert_eq!(st.observe(&reports, plan).unwrap(), MonitorDecision::Continue);
        }
        st
    }

    #[test]
    fn upscale_restores_initial_batch_when_cpu_returns() {
        let (cluster, ds) = three_node();
        let p0 = plan_initial(&cluster, &ds).unwrap();
        let shrunk = replan_with_capacity(
            &p0,
            &BTreeMap::from([("a".into(), 180), ("b".into(), 180), ("c".into(), 100)]),
            &BTreeMap::from([("c".into(), 0.55)]),
            &cluster,
            &ds,
        )
        .unwrap();
        let policy = RetunePolicy {
            mode: RetuneMode::CpuProportional,
            ..RetunePolicy::default()
        };
        let mut st = quiet_state(&shrunk, 8.0);
        st.record_retune_cpu("c", 4.0);
        let proposal = upscale_check(&shrunk, &st, &policy).unwrap();
        assert_eq!(proposal, BTreeMap::from([("c".to_string(), 180)]));
        let out = apply_upscale(&shrunk, &proposal, &cluster, &mut st, &ds).unwrap();
        assert_eq!(out.plan.batch("c"), 180);
        assert_eq!(out.plan.generation, 2);

        // still degraded: no proposal
        let st = quiet_state(&shrunk, 8.0 * 0.6);
        assert_eq!(upscale_check(&shrunk, &st, &policy), None);
        // already at the initial batch: nothing to restore
        let st = quiet_state(&p0, 8.0);
        assert_eq!(upscale_check(&p0, &st, &policy), None);
        // speed mode never upscales
        let st = quiet_state(&shrunk, 8.0);
        assert_eq!(upscale_check(&shrunk, &st, &RetunePolicy::default()), None);
    }

    #[test]
    fn clamp_range_rounds_inward() {
        let p = RetunePolicy::default();
        assert_eq!(p.clamp_range(180), (90, 270));
        assert_eq!(p.clamp_range(15), (8, 22));
        assert_eq!(p.clamp_range(1), (1, 1));
    }
}
