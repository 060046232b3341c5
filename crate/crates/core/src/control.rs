//! Per-step control loop shared by the simulator, the live coordinator and
//! trace replay, so all three take identical decisions on identical reports.

use std::collections::BTreeMap;
use std::fmt;

use log::info;
use thiserror::Error;

use crate::monitor::{MonitorDecision, MonitorError, MonitorState, StepReport, Termination};
use crate::planner::{plan_initial, BatchPlan, Cluster, DatasetSpec, NodeId, PlannerError};
use crate::retuner::{apply_upscale, retune, upscale_check, RetuneError, RetuneMode, RetuneOutcome};
use crate::scenario::ControllerSettings;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Retune(#[from] RetuneError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
}

/// Per-node decision label written to traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Label {
    Flag,
    Terminate,
    Upscale,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Flag => "FLAG",
            Label::Terminate => "TERMINATE",
            Label::Upscale => "UPSCALE",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Continue,
    /// The epoch ends here; `outcome.plan` is the new active plan.
    Retuned {
        termination: Termination,
        outcome: RetuneOutcome,
    },
    /// The epoch ends here and shrunk nodes grow back.
    Upscaled { outcome: RetuneOutcome },
}

impl Action {
    pub fn ends_epoch(&self) -> bool {
        !matches!(self, Action::Continue)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub labels: BTreeMap<NodeId, Label>,
    pub action: Action,
}

#[derive(Debug, Clone)]
pub struct Controller {
    cluster: Cluster,
    dataset: DatasetSpec,
    settings: ControllerSettings,
    plan: BatchPlan,
    state: MonitorState,
    retunes: u32,
}

impl Controller {
    pub fn new(
        cluster: Cluster,
        dataset: DatasetSpec,
        settings: ControllerSettings,
        normal_cpu: BTreeMap<NodeId, f64>,
    ) -> Result<Self, ControlError> {
        let plan = plan_initial(&cluster, &dataset)?;
        let state = MonitorState::new(&plan, normal_cpu, settings.monitor);
        Ok(Self {
            cluster,
            dataset,
            settings,
            plan,
            state,
            retunes: 0,
        })
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn dataset(&self) -> &DatasetSpec {
        &self.dataset
    }

    pub fn settings(&self) -> &ControllerSettings {
        &self.settings
    }

    pub fn state(&self) -> &MonitorState {
        &self.state
    }

    pub fn retunes(&self) -> u32 {
        self.retunes
    }

    /// Feeds one completed step. With the controller disabled nothing is
    /// monitored and the plan never changes.
    pub fn on_step(&mut self, reports: &[StepReport]) -> Result<StepOutcome, ControlError> {
        let mut labels = BTreeMap::new();
        if !self.settings.enabled {
            return Ok(StepOutcome {
                labels,
                action: Action::Continue,
            });
        }
        let decision = self.state.observe(reports, &self.plan)?;
        for n in self.state.last_flagged() {
            labels.insert(n.clone(), Label::Flag);
        }
        let action = match decision {
            MonitorDecision::TerminateEpochAndRetune(termination) => {
                labels.insert(termination.trigger.node_id.clone(), Label::Terminate);
                let outcome = retune(
                    &self.plan,
                    &termination,
                    &self.cluster,
                    &mut self.state,
                    &self.settings.policy,
                    &self.dataset,
                )?;
                for c in &outcome.changes {
                    info!(
                        "retune gen {}: {} batch {} -> {} (capacity {:.3})",
                        outcome.plan.generation, c.node_id, c.old_batch, c.new_batch, c.capacity
                    );
                }
                self.adopt(outcome.plan.clone());
                Action::Retuned {
                    termination,
                    outcome,
                }
            }
            MonitorDecision::Continue if self.settings.policy.mode == RetuneMode::CpuProportional => {
                match upscale_check(&self.plan, &self.state, &self.settings.policy) {
                    Some(proposals) => {
                        let outcome = apply_upscale(
                            &self.plan,
                            &proposals,
                            &self.cluster,
                            &mut self.state,
                            &self.dataset,
                        )?;
                        for c in &outcome.changes {
                            labels.insert(c.node_id.clone(), Label::Upscale);
                            info!("upscale {}: batch {} -> {}", c.node_id, c.old_batch, c.new_batch);
                        }
                        self.adopt(outcome.plan.clone());
                        Action::Upscaled { outcome }
                    }
                    None => Action::Continue,
                }
            }
            MonitorDecision::Continue => Action::Continue,
        };
        Ok(StepOutcome { labels, action })
    }

    fn adopt(&mut self, plan: BatchPlan) {
        self.plan = plan;
        self.state.sync(&self.plan);
        self.retunes += 1;
    }
}
