//! Per-step straggler detection.
//!
//! Each synchronous step, every node reports its measured throughput. The
//! monitor scores each report with a decline index that mixes relative speed
//! loss (weight 0.7) with the fraction of the epoch still ahead (weight 0.3),
//! flags steps whose index exceeds 0.2 while speed really dropped by at least
//! 5%, and asks for a retune once a node has been flagged on 5 consecutive
//! steps.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::planner::{BatchPlan, NodeId};

/// Consecutive flagged steps needed before acting.
pub const FLAG_WINDOW: usize = 5;
/// CPU samples retained per node.
pub const CPU_WINDOW: usize = 10;
/// CPU samples averaged by the retune hint.
pub const CPU_HINT_STEPS: usize = 5;

pub const SPEED_WEIGHT: f64 = 0.7;
pub const PROGRESS_WEIGHT: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitorError {
    #[error("reports span generations {0:?}")]
    GenerationMismatch(Vec<u64>),
    #[error("reports span step indices {0:?}")]
    StepMismatch(Vec<u64>),
    #[error("no report from node `{0}` for this step")]
    MissingReport(NodeId),
    #[error("report from node `{0}` which is not in the plan")]
    UnknownNode(NodeId),
    #[error("node `{0}` reported twice for one step")]
    DuplicateReport(NodeId),
    #[error("node `{node}` has {have} CPU samples; the hint needs {CPU_HINT_STEPS}")]
    InsufficientWindow { node: NodeId, have: usize },
    #[error("no normal CPU level recorded for node `{0}`")]
    MissingNormalCpu(NodeId),
}

/// One node's measurement for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub node_id: NodeId,
    pub generation: u64,
    /// 0-based within the epoch.
    pub step_index: u64,
    /// Samples per second over the node's own compute time.
    pub measured_throughput: f64,
    /// Cores used by the training process, in `[0, core_count]`.
    pub cpu_utilization: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorConfig {
    /// Index above which a step may be flagged.
    pub decline_threshold: f64,
    /// Minimum relative speed loss for a flag.
    pub decline_gate: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            decline_threshold: 0.2,
            decline_gate: 0.05,
        }
    }
}

/// Why a node was flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub node_id: NodeId,
    pub current_speed: f64,
    /// Mean of the most recent (up to 5) CPU samples.
    pub cpu_evidence: f64,
    pub decline_index: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Termination {
    /// Node with the largest decline index among those flagged 5 times in a row.
    pub trigger: Evidence,
    /// Every node flagged on this step, trigger included.
    pub flagged: Vec<Evidence>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MonitorDecision {
    Continue,
    TerminateEpochAndRetune(Termination),
}

/// Weighted decline score of one report. The speed term is clamped at zero
/// when the node runs faster than its reference.
pub fn decline_index(reference_speed: f64, report: &StepReport, steps_per_epoch: u64) -> f64 {
    let speed_loss = ((reference_speed - report.measured_throughput) / reference_speed).max(0.0);
    let n = steps_per_epoch as f64;
    let remaining = (n - report.step_index as f64) / n;
    SPEED_WEIGHT * speed_loss + PROGRESS_WEIGHT * remaining
}

fn push_bounded<T>(ring: &mut VecDeque<T>, value: T, cap: usize) {
    if ring.len() == cap {
        ring.pop_front();
    }
    ring.push_back(value);
}

/// Monitor bookkeeping for the active plan generation. Owned by the single
/// coordinator role; `observe` calls must be serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorState {
    config: MonitorConfig,
    generation: u64,
    steps_per_epoch: u64,
    reference_speed: BTreeMap<NodeId, f64>,
    flag_history: BTreeMap<NodeId, VecDeque<bool>>,
    cpu_window: BTreeMap<NodeId, VecDeque<f64>>,
    normal_cpu: BTreeMap<NodeId, f64>,
    retune_cpu: BTreeMap<NodeId, f64>,
    last_step: Option<u64>,
    last_speed: BTreeMap<NodeId, f64>,
    last_index: BTreeMap<NodeId, f64>,
    last_flagged: Vec<NodeId>,
    discarded: u64,
}

impl MonitorState {
    pub fn new(plan: &BatchPlan, normal_cpu: BTreeMap<NodeId, f64>, config: MonitorConfig) -> Self {
        let mut state = Self {
            config,
            generation: plan.generation,
            steps_per_epoch: plan.steps_per_epoch,
            reference_speed: BTreeMap::new(),
            flag_history: BTreeMap::new(),
            cpu_window: BTreeMap::new(),
            normal_cpu,
            retune_cpu: BTreeMap::new(),
            last_step: None,
            last_speed: BTreeMap::new(),
            last_index: BTreeMap::new(),
            last_flagged: Vec::new(),
            discarded: 0,
        };
        state.reset_for(plan);
        state
    }

    fn reset_for(&mut self, plan: &BatchPlan) {
        self.generation = plan.generation;
        self.steps_per_epoch = plan.steps_per_epoch;
        self.reference_speed = plan.predicted_speeds.clone();
        self.flag_history = plan.order.iter().map(|n| (n.clone(), VecDeque::new())).collect();
        self.cpu_window = plan.order.iter().map(|n| (n.clone(), VecDeque::new())).collect();
        self.last_step = None;
        self.last_flagged.clear();
        self.last_index.clear();
    }

    /// Adopts a new plan; evidence gathered under an older generation is
    /// dropped.
    pub fn sync(&mut self, plan: &BatchPlan) {
        if plan.generation != self.generation || self.reference_speed.is_empty() {
            self.reset_for(plan);
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn config(&self) -> MonitorConfig {
        self.config
    }

    pub fn reference_speed(&self, node: &str) -> Option<f64> {
        self.reference_speed.get(node).copied()
    }

    pub fn flag_history(&self, node: &str) -> Option<&VecDeque<bool>> {
        self.flag_history.get(node)
    }

    pub fn cpu_window(&self, node: &str) -> Option<&VecDeque<f64>> {
        self.cpu_window.get(node)
    }

    pub fn normal_cpu(&self, node: &str) -> Option<f64> {
        self.normal_cpu.get(node).copied()
    }

    /// CPU level recorded when the node was last scaled down.
    pub fn retune_cpu(&self, node: &str) -> Option<f64> {
        self.retune_cpu.get(node).copied()
    }

    pub fn record_retune_cpu(&mut self, node: &str, cpu: f64) {
        self.retune_cpu.insert(node.to_string(), cpu);
    }

    pub fn clear_retune_cpu(&mut self, node: &str) {
        self.retune_cpu.remove(node);
    }

    pub fn last_speed(&self, node: &str) -> Option<f64> {
        self.last_speed.get(node).copied()
    }

    /// Nodes flagged on the most recent observed step.
    pub fn last_flagged(&self) -> &[NodeId] {
        &self.last_flagged
    }

    /// Stale-generation reports dropped so far.
    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    /// Mean of the last `n` CPU samples of a node, if it has that many.
    pub fn recent_cpu_mean(&self, node: &str, n: usize) -> Option<f64> {
        let w = self.cpu_window.get(node)?;
        if w.len() < n || n == 0 {
            return None;
        }
        Some(w.iter().rev().take(n).sum::<f64>() / n as f64)
    }

    fn cpu_evidence(&self, node: &str) -> f64 {
        let w = &self.cpu_window[node];
        let n = w.len().min(CPU_HINT_STEPS);
        if n == 0 {
            return f64::NAN;
        }
        w.iter().rev().take(n).sum::<f64>() / n as f64
    }

    /// Applies one synchronous step's reports.
    pub fn observe(
        &mut self,
        reports: &[StepReport],
        plan: &BatchPlan,
    ) -> Result<MonitorDecision, MonitorError> {
        self.sync(plan);
        let current: Vec<&StepReport> = reports
            .iter()
            .filter(|r| r.generation >= plan.generation)
            .collect();
        self.discarded += (reports.len() - current.len()) as u64;

        let gens: BTreeSet<u64> = current.iter().map(|r| r.generation).collect();
        if gens.len() > 1 || gens.iter().any(|&g| g != plan.generation) {
            let mut all: Vec<u64> = reports.iter().map(|r| r.generation).collect();
            all.sort_unstable();
            all.dedup();
            return Err(MonitorError::GenerationMismatch(all));
        }
        let steps: BTreeSet<u64> = current.iter().map(|r| r.step_index).collect();
        if steps.len() > 1 {
            return Err(MonitorError::StepMismatch(steps.into_iter().collect()));
        }
        let mut by_node: BTreeMap<&str, &StepReport> = BTreeMap::new();
        for r in &current {
            if !plan.batch_sizes.contains_key(&r.node_id) {
                return Err(MonitorError::UnknownNode(r.node_id.clone()));
            }
            if by_node.insert(r.node_id.as_str(), r).is_some() {
                return Err(MonitorError::DuplicateReport(r.node_id.clone()));
            }
        }
        for n in &plan.order {
            if !by_node.contains_key(n.as_str()) {
                return Err(MonitorError::MissingReport(n.clone()));
            }
        }
        let step = *steps.iter().next().expect("plan has nodes");

        // a flag run must cover consecutive step indices
        if self.last_step.is_none_or(|prev| prev + 1 != step) {
            for h in self.flag_history.values_mut() {
                h.clear();
            }
        }
        self.last_step = Some(step);
        self.last_flagged.clear();

        for n in &plan.order {
            let r = by_node[n.as_str()];
            let reference = self.reference_speed[n];
            let index = decline_index(reference, r, self.steps_per_epoch);
            let loss = (reference - r.measured_throughput) / reference;
            let flagged = loss >= self.config.decline_gate && index > self.config.decline_threshold;
            push_bounded(self.flag_history.get_mut(n).unwrap(), flagged, FLAG_WINDOW);
            push_bounded(
                self.cpu_window.get_mut(n).unwrap(),
                r.cpu_utilization,
                CPU_WINDOW,
            );
            self.last_speed.insert(n.clone(), r.measured_throughput);
            self.last_index.insert(n.clone(), index);
            if flagged {
                self.last_flagged.push(n.clone());
            }
        }

        let saturated: Vec<&NodeId> = plan
            .order
            .iter()
            .filter(|n| {
                let h = &self.flag_history[*n];
                h.len() == FLAG_WINDOW && h.iter().all(|&f| f)
            })
            .collect();
        let Some(trigger) = saturated
            .iter()
            .copied()
            .reduce(|best, n| {
                if self.last_index[n] > self.last_index[best] {
                    n
                } else {
                    best
                }
            })
        else {
            return Ok(MonitorDecision::Continue);
        };

        let evidence = |n: &NodeId| Evidence {
            node_id: n.clone(),
            current_speed: self.last_speed[n],
            cpu_evidence: self.cpu_evidence(n),
            decline_index: self.last_index[n],
        };
        let termination = Termination {
            trigger: evidence(trigger),
            flagged: self.last_flagged.iter().map(evidence).collect(),
        };
        // evidence is consumed by the decision
        for h in self.flag_history.values_mut() {
            h.clear();
        }
        Ok(MonitorDecision::TerminateEpochAndRetune(termination))
    }

    /// Batch size proportional to the node's recent CPU share:
    /// `current * mean(last 5 samples) / normal`.
    pub fn cpu_retune_hint(&self, node: &str, current_batch: u32) -> Result<u32, MonitorError> {
        let have = self.cpu_window.get(node).map_or(0, VecDeque::len);
        let mean = self
            .recent_cpu_mean(node, CPU_HINT_STEPS)
            .ok_or_else(|| MonitorError::InsufficientWindow {
                node: node.to_string(),
                have,
            })?;
        let normal = self
            .normal_cpu(node)
            .ok_or_else(|| MonitorError::MissingNormalCpu(node.to_string()))?;
        Ok(crate::speedmodel::round_batch(
            current_batch as f64 * mean / normal,
        ))
    }

    /// Test and replay hook: pushes a CPU sample without a full step.
    pub fn push_cpu_sample(&mut self, node: &str, cpu: f64) {
        if let Some(w) = self.cpu_window.get_mut(node) {
            push_bounded(w, cpu, CPU_WINDOW);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(n: usize, steps: u64, speed: f64) -> BatchPlan {
        let order: Vec<NodeId> = (0..n).map(|i| format!("n{i}")).collect();
        let bs: BTreeMap<_, _> = order.iter().map(|o| (o.clone(), 180)).collect();
        BatchPlan {
            generation: 0,
            order: order.clone(),
            batch_sizes: bs.clone(),
            dataset_shares: order.iter().map(|o| (o.clone(), 180 * steps)).collect(),
            steps_per_epoch: steps,
            predicted_step_time: 180.0 / speed,
            target_step_time: 180.0 / speed,
            initial_batch_sizes: bs,
            capacity: order.iter().map(|o| (o.clone(), 1.0)).collect(),
            predicted_speeds: order.iter().map(|o| (o.clone(), speed)).collect(),
        }
    }

    fn reports(plan: &BatchPlan, step: u64, speeds: &[f64]) -> Vec<StepReport> {
        plan.order
            .iter()
            .zip(speeds)
            .map(|(n, &s)| StepReport {
                node_id: n.clone(),
                generation: plan.generation,
                step_index: step,
                measured_throughput: s,
                cpu_utilization: 8.0 * s / 31.1,
                wall_time: 180.0 / s,
            })
            .collect()
    }

    fn report(speed: f64, step: u64) -> StepReport {
        StepReport {
            node_id: "n".into(),
            generation: 0,
            step_index: step,
            measured_throughput: speed,
            cpu_utilization: 1.0,
            wall_time: 1.0,
        }
    }

    fn normal(plan: &BatchPlan) -> BTreeMap<NodeId, f64> {
        plan.order.iter().map(|n| (n.clone(), 8.0)).collect()
    }

    #[test]
    fn decline_index_examples() {
        assert_eq!(decline_index(31.1, &report(31.1, 416), 416), 0.0);
        let v = decline_index(31.1, &report(15.55, 100), 416);
        assert!((v - (0.35 + 0.3 * 316.0 / 416.0)).abs() < 1e-12);
        assert!((v - 0.5779).abs() < 1e-4);
        assert!((decline_index(31.1, &report(31.1, 0), 416) - 0.3).abs() < 1e-12);
        // faster than reference: speed term is clamped
        assert!((decline_index(31.1, &report(40.0, 208), 416) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn steady_state_never_flags() {
        let p = plan(3, 416, 31.1);
        let mut st = MonitorState::new(&p, normal(&p), MonitorConfig::default());
        for s in 0..416 {
            let d = st.observe(&reports(&p, s, &[31.1, 31.1, 31.1]), &p).unwrap();
            assert_eq!(d, MonitorDecision::Continue);
            assert!(st.last_flagged().is_empty());
        }
    }

    #[test]
    fn sustained_drop_terminates_on_fifth_flag() {
        let p = plan(3, 416, 31.1);
        let mut st = MonitorState::new(&p, normal(&p), MonitorConfig::default());
        for s in 0..100 {
            st.observe(&reports(&p, s, &[31.1; 3]), &p).unwrap();
        }
        for s in 100..105 {
            let d = st.observe(&reports(&p, s, &[31.1, 15.55, 31.1]), &p).unwrap();
            assert_eq!(st.last_flagged(), &["n1".to_string()]);
            if s < 104 {
                assert_eq!(d, MonitorDecision::Continue, "step {s}");
            } else {
                let MonitorDecision::TerminateEpochAndRetune(t) = d else {
                    panic!("expected termination at step 104");
                };
                assert_eq!(t.trigger.node_id, "n1");
                assert_eq!(t.trigger.current_speed, 15.55);
                assert_eq!(t.flagged.len(), 1);
            }
        }
    }

    #[test]
    fn four_step_transient_is_absorbed() {
        let p = plan(3, 416, 31.1);
        let mut st = MonitorState::new(&p, normal(&p), MonitorConfig::default());
        for s in 0..416 {
            let slow = (100..104).contains(&s);
            let speeds = if slow { [31.1, 10.0, 31.1] } else { [31.1; 3] };
            assert_eq!(
                st.observe(&reports(&p, s, &speeds), &p).unwrap(),
                MonitorDecision::Continue
            );
        }
    }

    #[test]
    fn gap_in_step_indices_resets_the_run() {
        let p = plan(1, 100, 10.0);
        let mut st = MonitorState::new(&p, normal(&p), MonitorConfig::default());
        for s in [0, 1, 2, 3, 10, 11, 12, 13] {
            let d = st.observe(&reports(&p, s, &[4.0]), &p).unwrap();
            assert_eq!(d, MonitorDecision::Continue);
        }
        let d = st.observe(&reports(&p, 14, &[4.0]), &p).unwrap();
        assert!(matches!(d, MonitorDecision::TerminateEpochAndRetune(_)));
    }

    #[test]
    fn largest_index_triggers_and_all_flagged_are_listed() {
        let p = plan(3, 100, 10.0);
        let mut st = MonitorState::new(&p, normal(&p), MonitorConfig::default());
        let mut last = MonitorDecision::Continue;
        for s in 0..5 {
            last = st.observe(&reports(&p, s, &[8.0, 3.0, 10.0]), &p).unwrap();
        }
        let MonitorDecision::TerminateEpochAndRetune(t) = last else {
            panic!("expected termination");
        };
        assert_eq!(t.trigger.node_id, "n1");
        let ids: Vec<_> = t.flagged.iter().map(|e| e.node_id.as_str()).collect();
        assert_eq!(ids, vec!["n0", "n1"]);
    }

    #[test]
    fn stale_reports_are_discarded_and_mismatch_rejected() {
        let mut p = plan(2, 100, 10.0);
        let mut st = MonitorState::new(&p, normal(&p), MonitorConfig::default());
        let mut stale = reports(&p, 0, &[10.0, 10.0]);
        p.generation = 1;
        let mut fresh = reports(&p, 0, &[10.0, 10.0]);
        fresh.append(&mut stale);
        st.observe(&fresh, &p).unwrap();
        assert_eq!(st.discarded(), 2);
        assert_eq!(st.generation(), 1);

        let mut mixed = reports(&p, 1, &[10.0, 10.0]);
        mixed[0].generation = 2;
        assert!(matches!(
            st.observe(&mixed, &p),
            Err(MonitorError::GenerationMismatch(_))
        ));
        let partial = reports(&p, 1, &[10.0]);
        assert_eq!(
            st.observe(&partial, &p),
            Err(MonitorError::MissingReport("n1".into()))
        );
    }

    #[test]
    fn windows_are_bounded() {
        let p = plan(1, 1000, 10.0);
        let mut st = MonitorState::new(&p, normal(&p), MonitorConfig::default());
        for s in 0..50 {
            st.observe(&reports(&p, s, &[if s % 2 == 0 { 5.0 } else { 10.0 }]), &p)
                .unwrap();
            assert!(st.flag_history("n0").unwrap().len() <= FLAG_WINDOW);
            assert!(st.cpu_window("n0").unwrap().len() <= CPU_WINDOW);
        }
        assert_eq!(st.cpu_window("n0").unwrap().len(), CPU_WINDOW);
    }

    #[test]
    fn cpu_hint_examples() {
        let p = plan(1, 100, 10.0);
        let mut st = MonitorState::new(&p, normal(&p), MonitorConfig::default());
        assert!(matches!(
            st.cpu_retune_hint("n0", 180),
            Err(MonitorError::InsufficientWindow { have: 0, .. })
        ));
        for _ in 0..5 {
            st.push_cpu_sample("n0", 2.0);
        }
        assert_eq!(st.cpu_retune_hint("n0", 180).unwrap(), 45);
        for _ in 0..5 {
            st.push_cpu_sample("n0", 8.0);
        }
        assert_eq!(st.cpu_retune_hint("n0", 180).unwrap(), 180);
        assert_eq!(st.cpu_retune_hint("n0", 100).unwrap(), 100);
    }

    #[test]
    fn new_generation_clears_evidence() {
        let mut p = plan(1, 100, 10.0);
        let mut st = MonitorState::new(&p, normal(&p), MonitorConfig::default());
        for s in 0..3 {
            st.observe(&reports(&p, s, &[4.0]), &p).unwrap();
        }
        assert_eq!(st.flag_history("n0").unwrap().len(), 3);
        p.generation = 1;
        st.sync(&p);
        assert!(st.flag_history("n0").unwrap().is_empty());
        assert!(st.cpu_window("n0").unwrap().is_empty());
    }
}
