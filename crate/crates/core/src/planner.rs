//! Initial batch sizing, dataset partitioning and replanning.
//!
//! The planner picks the node class that contributes most throughput (the
//! anchor), runs it at the start of its saturation plateau, and sizes every
//! other node so its step takes the same wall time. Dataset shares are then
//! proportional to batch size, with each node's private samples pinned to it.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::speedmodel::{SpeedModel, SpeedModelError};

pub type NodeId = String;
pub type NodeClass = String;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("no speed model for node class `{0}`")]
    MissingModel(NodeClass),
    #[error("cluster has no nodes")]
    EmptyCluster,
    #[error("duplicate node id `{0}`")]
    DuplicateNode(NodeId),
    #[error("node `{node}` holds {private} private samples but its share is only {share} and the remaining slack is {slack}")]
    Infeasible {
        node: NodeId,
        private: u64,
        share: u64,
        slack: u64,
    },
    #[error("batch sizes sum to {total_batch}, more than the {total_samples} samples in the dataset")]
    ZeroSteps { total_batch: u64, total_samples: u64 },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("batch map does not match plan nodes: {0}")]
    NodeMismatch(String),
    #[error("node `{node}`: {source}")]
    Model {
        node: NodeId,
        #[source]
        source: SpeedModelError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeProfile {
    pub node_id: NodeId,
    pub node_class: NodeClass,
    pub core_count: u32,
    /// Computational storage device rather than a host processor.
    #[serde(default)]
    pub is_storage_node: bool,
    #[serde(default)]
    pub owned_private_samples: u64,
}

impl NodeProfile {
    pub fn new(id: impl Into<String>, class: impl Into<String>, cores: u32) -> Self {
        Self {
            node_id: id.into(),
            node_class: class.into(),
            core_count: cores,
            is_storage_node: false,
            owned_private_samples: 0,
        }
    }

    pub fn storage(mut self) -> Self {
        self.is_storage_node = true;
        self
    }

    pub fn with_private(mut self, samples: u64) -> Self {
        self.owned_private_samples = samples;
        self
    }
}

/// Sample counts. Public samples may go to any node; private ones only to
/// their owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub total_samples: u64,
    pub private_samples: BTreeMap<NodeId, u64>,
    pub public_samples: u64,
}

impl DatasetSpec {
    pub fn new(
        total_samples: u64,
        private_samples: BTreeMap<NodeId, u64>,
    ) -> Result<Self, PlannerError> {
        if total_samples == 0 {
            return Err(PlannerError::InvalidDataset("total_samples must be > 0".into()));
        }
        let private: u64 = private_samples.values().sum();
        if private > total_samples {
            return Err(PlannerError::InvalidDataset(format!(
                "{private} private samples exceed the total of {total_samples}"
            )));
        }
        Ok(Self {
            total_samples,
            private_samples: private_samples.into_iter().filter(|(_, n)| *n > 0).collect(),
            public_samples: total_samples - private,
        })
    }

    pub fn public_only(total_samples: u64) -> Self {
        Self {
            total_samples,
            private_samples: BTreeMap::new(),
            public_samples: total_samples,
        }
    }

    /// Dataset whose private holdings come from the node profiles.
    pub fn for_nodes(total_samples: u64, nodes: &[NodeProfile]) -> Result<Self, PlannerError> {
        let private = nodes
            .iter()
            .map(|n| (n.node_id.clone(), n.owned_private_samples))
            .collect();
        Self::new(total_samples, private)
    }

    pub fn private_of(&self, node: &str) -> u64 {
        self.private_samples.get(node).copied().unwrap_or(0)
    }
}

/// Nodes plus the speed model of every node class they use.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    nodes: Vec<NodeProfile>,
    models: BTreeMap<NodeClass, SpeedModel>,
}

impl Cluster {
    pub fn new(
        nodes: Vec<NodeProfile>,
        models: BTreeMap<NodeClass, SpeedModel>,
    ) -> Result<Self, PlannerError> {
        if nodes.is_empty() {
            return Err(PlannerError::EmptyCluster);
        }
        let mut seen = BTreeSet::new();
        for n in &nodes {
            if !seen.insert(n.node_id.as_str()) {
                return Err(PlannerError::DuplicateNode(n.node_id.clone()));
            }
            if !models.contains_key(&n.node_class) {
                return Err(PlannerError::MissingModel(n.node_class.clone()));
            }
        }
        Ok(Self { nodes, models })
    }

    pub fn nodes(&self) -> &[NodeProfile] {
        &self.nodes
    }

    pub fn models(&self) -> &BTreeMap<NodeClass, SpeedModel> {
        &self.models
    }

    pub fn node(&self, id: &str) -> Option<&NodeProfile> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    /// Nominal model of the node's class.
    pub fn model_of(&self, id: &str) -> Option<&SpeedModel> {
        self.node(id).and_then(|n| self.models.get(&n.node_class))
    }
}

/// Batch sizes and dataset shares for one plan generation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub generation: u64,
    /// Node order used for share offsets.
    pub order: Vec<NodeId>,
    pub batch_sizes: BTreeMap<NodeId, u32>,
    pub dataset_shares: BTreeMap<NodeId, u64>,
    pub steps_per_epoch: u64,
    /// Slowest predicted node step time under this plan, seconds.
    pub predicted_step_time: f64,
    /// Step time the equalization aimed for (the anchor's step time).
    pub target_step_time: f64,
    /// Batch sizes of generation 0.
    pub initial_batch_sizes: BTreeMap<NodeId, u32>,
    /// Inferred fraction of nominal capacity per node (1.0 = undisturbed).
    pub capacity: BTreeMap<NodeId, f64>,
    /// Expected per-node throughput: capacity times the nominal model speed.
    pub predicted_speeds: BTreeMap<NodeId, f64>,
}

impl BatchPlan {
    pub fn total_batch(&self) -> u64 {
        self.batch_sizes.values().map(|&b| b as u64).sum()
    }

    pub fn batch(&self, node: &str) -> u32 {
        self.batch_sizes[node]
    }

    /// `(node, start offset, length)` of each share in plan order.
    pub fn share_ranges(&self) -> Vec<(NodeId, u64, u64)> {
        let mut offset = 0;
        self.order
            .iter()
            .map(|n| {
                let len = self.dataset_shares[n];
                let r = (n.clone(), offset, len);
                offset += len;
                r
            })
            .collect()
    }

    /// Predicted step time of one node.
    pub fn node_step_time(&self, node: &str) -> f64 {
        self.batch_sizes[node] as f64 / self.predicted_speeds[node]
    }
}

/// Node class with the largest `peak throughput x node count`. Ties go to the
/// larger per-device peak, then the lexicographically smaller class id.
pub fn select_anchor(
    nodes: &[NodeProfile],
    models: &BTreeMap<NodeClass, SpeedModel>,
) -> Result<NodeClass, PlannerError> {
    let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
    for n in nodes {
        if !models.contains_key(&n.node_class) {
            return Err(PlannerError::MissingModel(n.node_class.clone()));
        }
        *counts.entry(n.node_class.as_str()).or_default() += 1;
    }
    let mut best: Option<(&str, f64, f64)> = None;
    // BTreeMap iterates classes in lexicographic order, so strict comparisons
    // keep the smaller id on exact ties
    for (class, count) in counts {
        let peak = models[class].peak_throughput();
        let influence = peak * count as f64;
        let better = match best {
            None => true,
            Some((_, bi, bp)) => influence > bi || (influence == bi && peak > bp),
        };
        if better {
            best = Some((class, influence, peak));
        }
    }
    best.map(|(c, _, _)| c.to_string())
        .ok_or(PlannerError::EmptyCluster)
}

/// Result of solving `batch / speed(batch) = target` on one model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equalized {
    /// Real-valued solution (or the chosen knot on fallback).
    pub batch: f64,
    /// Integer batch with step time closest to the target.
    pub rounded: u32,
    /// `false` when no segment admitted a solution and a knot was used.
    pub exact: bool,
}

/// Finds the batch size whose step time on `model` is closest to
/// `target_step`.
///
/// On a segment `speed = a*b + c` the step time `b / (a*b + c)` is monotone,
/// so `b = T*c / (1 - T*a)` is the only candidate; the first segment whose
/// candidate lies inside it wins. With no such segment the knot with the
/// closest step time is used.
pub fn equalize_batch(model: &SpeedModel, target_step: f64) -> Equalized {
    let pts = model.points();
    let mut solution = None;
    for w in pts.windows(2) {
        let (b0, b1) = (w[0].batch_size as f64, w[1].batch_size as f64);
        let a = (w[1].throughput - w[0].throughput) / (b1 - b0);
        let c = w[0].throughput - a * b0;
        let denom = 1.0 - target_step * a;
        if denom.abs() < 1e-12 {
            continue;
        }
        let b = target_step * c / denom;
        let tol = 1e-9 * b1;
        if b.is_finite() && b >= b0 - tol && b <= b1 + tol {
            solution = Some(b.clamp(b0, b1));
            break;
        }
    }
    let step_time = |b: u32| b as f64 / model.speed_at(b).expect("batch inside model range");
    match solution {
        Some(b) => {
            let lo = (b.floor() as u32).max(model.min_batch());
            let hi = (b.ceil() as u32).min(model.max_batch());
            let rounded = if (step_time(hi) - target_step).abs() < (step_time(lo) - target_step).abs()
            {
                hi
            } else {
                lo
            };
            Equalized {
                batch: b,
                rounded,
                exact: true,
            }
        }
        None => {
            let knot = pts
                .iter()
                .min_by(|x, y| {
                    let dx = (x.batch_size as f64 / x.throughput - target_step).abs();
                    let dy = (y.batch_size as f64 / y.throughput - target_step).abs();
                    dx.total_cmp(&dy)
                })
                .expect("model has knots");
            Equalized {
                batch: knot.batch_size as f64,
                rounded: knot.batch_size,
                exact: false,
            }
        }
    }
}

/// Batch size the anchor class runs at: the start of its plateau, or its
/// largest probed batch when the curve never flattens.
pub fn anchor_batch(model: &SpeedModel) -> u32 {
    model.plateau_start().unwrap_or_else(|| {
        warn!(
            "speed model `{}` has no plateau; using its largest probed batch {}",
            model.node_class(),
            model.max_batch()
        );
        model.max_batch()
    })
}

pub fn plan_initial(cluster: &Cluster, dataset: &DatasetSpec) -> Result<BatchPlan, PlannerError> {
    let anchor = select_anchor(cluster.nodes(), cluster.models())?;
    let anchor_model = &cluster.models()[&anchor];
    let anchor_bs = anchor_batch(anchor_model);
    let anchor_speed = anchor_model
        .speed_at(anchor_bs)
        .map_err(|source| PlannerError::Model {
            node: anchor.clone(),
            source,
        })?;
    let target = anchor_bs as f64 / anchor_speed;

    let mut per_class: BTreeMap<&str, u32> = BTreeMap::new();
    per_class.insert(anchor.as_str(), anchor_bs);
    let mut batch_sizes = BTreeMap::new();
    for n in cluster.nodes() {
        let bs = *per_class
            .entry(n.node_class.as_str())
            .or_insert_with(|| equalize_batch(&cluster.models()[&n.node_class], target).rounded);
        batch_sizes.insert(n.node_id.clone(), bs);
    }
    let capacity = cluster
        .nodes()
        .iter()
        .map(|n| (n.node_id.clone(), 1.0))
        .collect();
    let order: Vec<NodeId> = cluster.nodes().iter().map(|n| n.node_id.clone()).collect();
    build_plan(
        0,
        order,
        batch_sizes.clone(),
        batch_sizes,
        capacity,
        target,
        cluster,
        dataset,
    )
}

/// Recomputes shares and steps for new batch sizes; bumps the generation.
pub fn replan(
    previous: &BatchPlan,
    new_batch_sizes: &BTreeMap<NodeId, u32>,
    cluster: &Cluster,
    dataset: &DatasetSpec,
) -> Result<BatchPlan, PlannerError> {
    replan_with_capacity(previous, new_batch_sizes, &BTreeMap::new(), cluster, dataset)
}

/// [`replan`] that also updates the inferred capacity of some nodes.
pub fn replan_with_capacity(
    previous: &BatchPlan,
    new_batch_sizes: &BTreeMap<NodeId, u32>,
    capacity_updates: &BTreeMap<NodeId, f64>,
    cluster: &Cluster,
    dataset: &DatasetSpec,
) -> Result<BatchPlan, PlannerError> {
    let expected: BTreeSet<&NodeId> = previous.batch_sizes.keys().collect();
    let got: BTreeSet<&NodeId> = new_batch_sizes.keys().collect();
    if expected != got {
        let missing: Vec<_> = expected.difference(&got).collect();
        let extra: Vec<_> = got.difference(&expected).collect();
        return Err(PlannerError::NodeMismatch(format!(
            "missing {missing:?}, unexpected {extra:?}"
        )));
    }
    let mut capacity = previous.capacity.clone();
    for (n, c) in capacity_updates {
        capacity.insert(n.clone(), *c);
    }
    build_plan(
        previous.generation + 1,
        previous.order.clone(),
        new_batch_sizes.clone(),
        previous.initial_batch_sizes.clone(),
        capacity,
        previous.target_step_time,
        cluster,
        dataset,
    )
}

#[allow(clippy::too_many_arguments)]
fn build_plan(
    generation: u64,
    order: Vec<NodeId>,
    batch_sizes: BTreeMap<NodeId, u32>,
    initial_batch_sizes: BTreeMap<NodeId, u32>,
    capacity: BTreeMap<NodeId, f64>,
    target_step_time: f64,
    cluster: &Cluster,
    dataset: &DatasetSpec,
) -> Result<BatchPlan, PlannerError> {
    let (dataset_shares, steps_per_epoch) = partition_dataset(&order, &batch_sizes, dataset)?;
    let mut predicted_speeds = BTreeMap::new();
    let mut predicted_step_time = 0.0_f64;
    for n in &order {
        let model = cluster
            .model_of(n)
            .ok_or_else(|| PlannerError::NodeMismatch(format!("`{n}` is not in the cluster")))?;
        let bs = batch_sizes[n];
        let speed = model.speed_at(bs).map_err(|source| PlannerError::Model {
            node: n.clone(),
            source,
        })? * capacity[n];
        predicted_step_time = predicted_step_time.max(bs as f64 / speed);
        predicted_speeds.insert(n.clone(), speed);
    }
    Ok(BatchPlan {
        generation,
        order,
        batch_sizes,
        dataset_shares,
        steps_per_epoch,
        predicted_step_time,
        target_step_time,
        initial_batch_sizes,
        capacity,
        predicted_speeds,
    })
}

/// Splits the dataset in proportion to batch size.
///
/// Floors the exact shares, hands the residue out one sample at a time to
/// the largest fractional remainders (ties in plan order), then tops up any
/// node whose private holdings exceed its share using other nodes' per-epoch
/// leftover public samples.
pub fn partition_dataset(
    order: &[NodeId],
    batch_sizes: &BTreeMap<NodeId, u32>,
    dataset: &DatasetSpec,
) -> Result<(BTreeMap<NodeId, u64>, u64), PlannerError> {
    let total = dataset.total_samples;
    let sum: u64 = order.iter().map(|n| batch_sizes[n] as u64).sum();
    if sum == 0 {
        return Err(PlannerError::InvalidDataset("batch sizes sum to zero".into()));
    }
    let steps = total / sum;
    if steps == 0 {
        return Err(PlannerError::ZeroSteps {
            total_batch: sum,
            total_samples: total,
        });
    }
    for n in dataset.private_samples.keys() {
        if !batch_sizes.contains_key(n) {
            return Err(PlannerError::NodeMismatch(format!(
                "private samples owned by unknown node `{n}`"
            )));
        }
    }

    let mut shares: Vec<u64> = Vec::with_capacity(order.len());
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(order.len());
    for (i, n) in order.iter().enumerate() {
        let num = batch_sizes[n] as u128 * total as u128;
        shares.push((num / sum as u128) as u64);
        remainders.push((num % sum as u128, i));
    }
    let residue = total - shares.iter().sum::<u64>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(residue as usize) {
        shares[i] += 1;
    }

    // privacy pinning
    let mut leftover: Vec<u64> = order
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let pinned = dataset.private_of(n);
            let consumed = steps * batch_sizes[n] as u64;
            shares[i].saturating_sub(consumed.max(pinned))
        })
        .collect();
    let slack_total = total - steps * sum;
    for (i, n) in order.iter().enumerate() {
        let private = dataset.private_of(n);
        if private <= shares[i] {
            continue;
        }
        let mut deficit = private - shares[i];
        let available: u64 = leftover
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, l)| *l)
            .sum();
        if deficit > available {
            return Err(PlannerError::Infeasible {
                node: n.clone(),
                private,
                share: shares[i],
                slack: available.min(slack_total),
            });
        }
        while deficit > 0 {
            let (j, _) = leftover
                .iter()
                .enumerate()
                .filter(|&(j, l)| j != i && *l > 0)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("available slack covers the deficit");
            let take = deficit.min(leftover[j]);
            leftover[j] -= take;
            shares[j] -= take;
            shares[i] += take;
            deficit -= take;
        }
    }

    let map = order.iter().cloned().zip(shares).collect();
    Ok((map, steps))
}
