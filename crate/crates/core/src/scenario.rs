//! Scenario files.
//!
//! A scenario is TOML with these sections (all names are exact):
//!
//! ```toml
//! name = "three_node"        # optional, defaults to the file stem
//! seed = 7                   # u64, default 0
//! epochs = 3                 # default 1
//! baseline_node = "host"     # optional: node whose standalone speed is the
//!                            # single-node reference in reports
//!
//! [[nodes]]
//! id = "csd"                 # with `count`, ids become csd01..csdNN
//! count = 36                 # optional, default 1
//! class = "storage"
//! cores = 4
//! storage = true             # default false
//! private_samples = 2000     # per node, default 0
//!
//! [models.storage]            # one table per node class
//! points = [[5, 0.9], [15, 2.08]]   # or: file = "storage.speedmodel"
//!
//! [[degradation]]            # speed while `cores_taken` cores are busy
//! class = "xeon"
//! cores_taken = 6
//! factor = 0.5               # uniform scale, or an explicit table:
//! # points = [[30, 9.5], [180, 17.77]]
//!
//! [dataset]
//! total_samples = 300000
//!
//! [[events]]                 # sorted by `at` (simulated seconds)
//! at = 1000.0
//! node = "n2"
//! cores_taken = 6            # 0 releases every core
//!
//! [controller]
//! enabled = true
//! mode = "speed"             # speed | cpu
//! clamp_low = 0.5
//! clamp_high = 1.5
//! eq3_literal = false
//! naive_inverse = false
//! decline_threshold = 0.2
//! decline_gate = 0.05
//! noise = 0.01               # multiplicative step-time jitter half-width
//! forced_termination_rate = 0.0
//! step_timeout_factor = 10.0 # live mode: deadline = factor x predicted step
//!
//! [bench]                    # live mode probe grid
//! batch_sizes = [4, 8, 16, 32]
//! steps_per_probe = 4
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::monitor::MonitorConfig;
use crate::planner::{Cluster, DatasetSpec, NodeClass, NodeId, NodeProfile, PlannerError};
use crate::retuner::{RetuneMode, RetunePolicy};
use crate::speedmodel::{SpeedModel, SpeedModelError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Syntax { path: PathBuf, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("model `{class}`: {source}")]
    Model {
        class: String,
        #[source]
        source: SpeedModelError,
    },
}

/// External load change on one node.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadEvent {
    pub at_time: f64,
    pub node_id: NodeId,
    /// Cores occupied by the foreign workload; 0 releases all.
    pub cores_taken: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Degradation {
    Factor(f64),
    Model(SpeedModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSettings {
    pub enabled: bool,
    pub policy: RetunePolicy,
    pub monitor: MonitorConfig,
    pub noise: f64,
    pub forced_termination_rate: f64,
    pub step_timeout_factor: f64,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            policy: RetunePolicy::default(),
            monitor: MonitorConfig::default(),
            noise: 0.01,
            forced_termination_rate: 0.0,
            step_timeout_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub batch_sizes: Vec<u32>,
    pub steps_per_probe: u32,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            batch_sizes: vec![4, 8, 16, 32, 64],
            steps_per_probe: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub nodes: Vec<NodeProfile>,
    pub models: BTreeMap<NodeClass, SpeedModel>,
    pub degradation: BTreeMap<(NodeClass, u32), Degradation>,
    pub dataset: DatasetSpec,
    pub events: Vec<WorkloadEvent>,
    pub epochs: u32,
    pub controller: ControllerSettings,
    pub seed: u64,
    pub baseline_node: Option<NodeId>,
    pub bench: BenchSettings,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "one")]
    epochs: u32,
    baseline_node: Option<String>,
    #[serde(default)]
    nodes: Vec<RawNode>,
    #[serde(default)]
    models: BTreeMap<String, RawModel>,
    #[serde(default)]
    degradation: Vec<RawDegradation>,
    dataset: RawDataset,
    #[serde(default)]
    events: Vec<RawEvent>,
    #[serde(default)]
    controller: RawController,
    bench: Option<RawBench>,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    class: String,
    cores: u32,
    #[serde(default)]
    storage: bool,
    #[serde(default)]
    private_samples: u64,
    count: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    points: Option<Vec<(u32, f64)>>,
    file: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDegradation {
    class: String,
    cores_taken: u32,
    factor: Option<f64>,
    points: Option<Vec<(u32, f64)>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    total_samples: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    at: f64,
    node: String,
    cores_taken: u32,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawController {
    enabled: Option<bool>,
    mode: Option<String>,
    clamp_low: Option<f64>,
    clamp_high: Option<f64>,
    eq3_literal: Option<bool>,
    naive_inverse: Option<bool>,
    decline_threshold: Option<f64>,
    decline_gate: Option<f64>,
    noise: Option<f64>,
    forced_termination_rate: Option<f64>,
    step_timeout_factor: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBench {
    batch_sizes: Vec<u32>,
    steps_per_probe: u32,
}

impl Scenario {
    /// Loads a scenario whose every node class has a speed model.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::load_inner(path.as_ref(), true)
    }

    /// Loads a scenario for live mode, where models come from benchmarking
    /// and may be absent from the file.
    pub fn load_live(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::load_inner(path.as_ref(), false)
    }

    fn load_inner(path: &Path, require_models: bool) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let default_name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into());
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_inner(&text, base, &default_name, require_models).map_err(|e| match e {
            ScenarioError::Syntax { msg, .. } => ScenarioError::Syntax {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }

    /// Parses scenario text; relative model files resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        Self::parse_inner(text, base_dir, "scenario", true)
    }

    pub fn parse_live(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        Self::parse_inner(text, base_dir, "scenario", false)
    }

    fn parse_inner(
        text: &str,
        base_dir: &Path,
        default_name: &str,
        require_models: bool,
    ) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Syntax {
            path: PathBuf::from("<scenario>"),
            msg: e.to_string(),
        })?;

        let mut nodes = Vec::new();
        for n in raw.nodes {
            let ids = match n.count {
                None => vec![n.id.clone()],
                Some(0) => {
                    return Err(ScenarioError::Invalid(format!("node `{}` has count 0", n.id)))
                }
                Some(c) => {
                    let width = c.to_string().len().max(2);
                    (1..=c).map(|i| format!("{}{:0width$}", n.id, i)).collect()
                }
            };
            if n.cores == 0 {
                return Err(ScenarioError::Invalid(format!("node `{}` has 0 cores", n.id)));
            }
            for id in ids {
                nodes.push(NodeProfile {
                    node_id: id,
                    node_class: n.class.clone(),
                    core_count: n.cores,
                    is_storage_node: n.storage,
                    owned_private_samples: n.private_samples,
                });
            }
        }
        if require_models && nodes.is_empty() {
            return Err(ScenarioError::Invalid("no [[nodes]] entries".into()));
        }

        let mut models = BTreeMap::new();
        for (class, m) in raw.models {
            let model = match (m.points, m.file) {
                (Some(points), None) => SpeedModel::from_pairs(class.clone(), &points)
                    .map_err(|source| ScenarioError::Model {
                        class: class.clone(),
                        source,
                    })?,
                (None, Some(file)) => {
                    let path = base_dir.join(&file);
                    let text = std::fs::read_to_string(&path)
                        .map_err(|source| ScenarioError::Io { path, source })?;
                    text.parse::<SpeedModel>()
                        .map_err(|source| ScenarioError::Model {
                            class: class.clone(),
                            source,
                        })?
                        .with_class(class.clone())
                }
                _ => {
                    return Err(ScenarioError::Invalid(format!(
                        "model `{class}` needs exactly one of `points` or `file`"
                    )))
                }
            };
            models.insert(class, model);
        }
        if require_models {
            for n in &nodes {
                if !models.contains_key(&n.node_class) {
                    return Err(PlannerError::MissingModel(n.node_class.clone()).into());
                }
            }
        }

        let mut degradation = BTreeMap::new();
        for d in raw.degradation {
            let entry = match (d.factor, d.points) {
                (Some(f), None) => {
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(ScenarioError::Invalid(format!(
                            "degradation factor {f} for `{}` outside (0, 1]",
                            d.class
                        )));
                    }
                    Degradation::Factor(f)
                }
                (None, Some(points)) => Degradation::Model(
                    SpeedModel::from_pairs(d.class.clone(), &points).map_err(|source| {
                        ScenarioError::Model {
                            class: d.class.clone(),
                            source,
                        }
                    })?,
                ),
                _ => {
                    return Err(ScenarioError::Invalid(format!(
                        "degradation for `{}` cores_taken={} needs exactly one of `factor` or `points`",
                        d.class, d.cores_taken
                    )))
                }
            };
            if degradation.insert((d.class.clone(), d.cores_taken), entry).is_some() {
                return Err(ScenarioError::Invalid(format!(
                    "duplicate degradation for `{}` cores_taken={}",
                    d.class, d.cores_taken
                )));
            }
        }

        let events: Vec<WorkloadEvent> = raw
            .events
            .into_iter()
            .map(|e| WorkloadEvent {
                at_time: e.at,
                node_id: e.node,
                cores_taken: e.cores_taken,
            })
            .collect();

        let c = raw.controller;
        let defaults = ControllerSettings::default();
        let mode = match c.mode.as_deref() {
            None => RetuneMode::default(),
            Some(m) => m.parse().map_err(ScenarioError::Invalid)?,
        };
        let controller = ControllerSettings {
            enabled: c.enabled.unwrap_or(defaults.enabled),
            policy: RetunePolicy {
                mode,
                clamp_low: c.clamp_low.unwrap_or(defaults.policy.clamp_low),
                clamp_high: c.clamp_high.unwrap_or(defaults.policy.clamp_high),
                eq3_literal: c.eq3_literal.unwrap_or(false),
                naive_inverse: c.naive_inverse.unwrap_or(false),
            },
            monitor: MonitorConfig {
                decline_threshold: c
                    .decline_threshold
                    .unwrap_or(defaults.monitor.decline_threshold),
                decline_gate: c.decline_gate.unwrap_or(defaults.monitor.decline_gate),
            },
            noise: c.noise.unwrap_or(defaults.noise),
            forced_termination_rate: c
                .forced_termination_rate
                .unwrap_or(defaults.forced_termination_rate),
            step_timeout_factor: c.step_timeout_factor.unwrap_or(defaults.step_timeout_factor),
        };
        let bench = raw
            .bench
            .map(|b| BenchSettings {
                batch_sizes: b.batch_sizes,
                steps_per_probe: b.steps_per_probe,
            })
            .unwrap_or_default();

        let dataset = DatasetSpec::for_nodes(raw.dataset.total_samples, &nodes)?;
        let scenario = Scenario {
            name: raw.name.unwrap_or_else(|| default_name.to_string()),
            nodes,
            models,
            degradation,
            dataset,
            events,
            epochs: raw.epochs,
            controller,
            seed: raw.seed,
            baseline_node: raw.baseline_node,
            bench,
        };
        scenario.validate(require_models)?;
        Ok(scenario)
    }

    /// Checks cross-section consistency.
    pub fn validate(&self, require_models: bool) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if self.epochs == 0 {
            return invalid("epochs must be >= 1".into());
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.node_id.as_str()) {
                return Err(PlannerError::DuplicateNode(n.node_id.clone()).into());
            }
        }
        let mut last = f64::NEG_INFINITY;
        for e in &self.events {
            if !e.at_time.is_finite() || e.at_time < 0.0 {
                return invalid(format!("event time {} must be finite and >= 0", e.at_time));
            }
            if e.at_time < last {
                return invalid(format!("events must be sorted by `at` ({} after {last})", e.at_time));
            }
            last = e.at_time;
            let Some(node) = self.nodes.iter().find(|n| n.node_id == e.node_id) else {
                return invalid(format!("event names unknown node `{}`", e.node_id));
            };
            if e.cores_taken > node.core_count {
                return invalid(format!(
                    "event takes {} cores from `{}` which has {}",
                    e.cores_taken, node.node_id, node.core_count
                ));
            }
            if e.cores_taken > 0
                && !self
                    .degradation
                    .contains_key(&(node.node_class.clone(), e.cores_taken))
            {
                return invalid(format!(
                    "no degradation entry for class `{}` with cores_taken={}",
                    node.node_class, e.cores_taken
                ));
            }
        }
        if require_models {
            for ((class, cores), d) in &self.degradation {
                let Some(nominal) = self.models.get(class) else {
                    return invalid(format!("degradation for unknown class `{class}`"));
                };
                if let Degradation::Model(m) = d {
                    if m.min_batch() > nominal.min_batch() || m.max_batch() < nominal.max_batch() {
                        return invalid(format!(
                            "degraded table for `{class}` cores_taken={cores} must cover [{}, {}]",
                            nominal.min_batch(),
                            nominal.max_batch()
                        ));
                    }
                }
            }
        }
        if let Some(b) = &self.baseline_node {
            if !ids.contains(b.as_str()) {
                return invalid(format!("baseline_node `{b}` is not a node"));
            }
        }
        let p = &self.controller;
        p.policy
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if !(0.0..1.0).contains(&p.noise) {
            return invalid(format!("noise {} must be in [0, 1)", p.noise));
        }
        if !(0.0..=1.0).contains(&p.forced_termination_rate) {
            return invalid("forced_termination_rate must be in [0, 1]".into());
        }
        if p.step_timeout_factor <= 0.0 {
            return invalid("step_timeout_factor must be > 0".into());
        }
        Ok(())
    }

    pub fn cluster(&self) -> Result<Cluster, ScenarioError> {
        Ok(Cluster::new(self.nodes.clone(), self.models.clone())?)
    }

    pub fn node(&self, id: &str) -> Option<&NodeProfile> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    /// Speed model of a node while `cores_taken` of its cores are busy.
    pub fn active_model(&self, node: &str, cores_taken: u32) -> Result<SpeedModel, ScenarioError> {
        let profile = self
            .node(node)
            .ok_or_else(|| ScenarioError::Invalid(format!("unknown node `{node}`")))?;
        let class = &profile.node_class;
        let nominal = self
            .models
            .get(class)
            .ok_or_else(|| PlannerError::MissingModel(class.clone()))?;
        if cores_taken == 0 {
            return Ok(nominal.clone());
        }
        match self.degradation.get(&(class.clone(), cores_taken)) {
            Some(Degradation::Factor(f)) => {
                nominal
                    .degrade(*f)
                    .map_err(|source| ScenarioError::Model {
                        class: class.clone(),
                        source,
                    })
            }
            Some(Degradation::Model(m)) => Ok(m.clone()),
            None => Err(ScenarioError::Invalid(format!(
                "no degradation entry for class `{class}` with cores_taken={cores_taken}"
            ))),
        }
    }

    /// Normal CPU level per node: all cores.
    pub fn normal_cpu(&self) -> BTreeMap<NodeId, f64> {
        self.nodes
            .iter()
            .map(|n| (n.node_id.clone(), n.core_count as f64))
            .collect()
    }
}
