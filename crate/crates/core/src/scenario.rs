//! JSON scenario files and the run orchestration behind them.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    simulate_continuous, ContinuousConfig, DynamicsError, SaturationLevel, Trajectory,
};
use crate::event::{
    run_event_simulation, EventConfig, EventError, EventLog, TriggerRule, DEFAULT_MAX_EVENTS,
};
use crate::graph::{GraphError, Laplacian, WeightedDigraph};
use crate::lyapunov::saturation_exit_time;

/// Seven agents in two strongly connected components, `h = 10`,
/// thresholds `10 exp(-t)`.
pub const REFERENCE_SCENARIO: &str = include_str!("../../../scenarios/reference_seven_agents.json");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Event(#[from] EventError),
}

impl ScenarioError {
    /// Problems with the input file itself, as opposed to failures while
    /// running a valid scenario.
    pub fn is_validation(&self) -> bool {
        match self {
            Self::Io { .. } | Self::Parse(_) | Self::Invalid(_) | Self::Graph(_) => true,
            Self::Dynamics(e) => matches!(
                e,
                DynamicsError::InvalidSaturation(_)
                    | DynamicsError::DimensionMismatch { .. }
                    | DynamicsError::InvalidStep(_)
                    | DynamicsError::InvalidConfig(_)
            ),
            Self::Event(e) => matches!(
                e,
                EventError::InvalidRule { .. } | EventError::RuleSize { .. }
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Continuous,
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAgent {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerAgent {
    fn expand(&self, n: usize, name: &str) -> Result<Vec<f64>, ScenarioError> {
        match self {
            Self::Uniform(v) => Ok(vec![*v; n]),
            Self::Each(v) if v.len() == n => Ok(v.clone()),
            Self::Each(v) => Err(ScenarioError::Invalid(format!(
                "{name} lists {} values for {n} agents",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub alpha: PerAgent,
    pub beta: PerAgent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialStates {
    Scalars(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

fn default_p() -> usize {
    1
}
fn default_t_end() -> f64 {
    30.0
}
fn default_dt() -> f64 {
    1e-3
}
fn default_sample_dt() -> f64 {
    0.01
}

/// Scenario file contents. Exactly one of `adjacency` (row `i` lists the
/// weights agent `i` receives) and `laplacian` must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laplacian: Option<Vec<Vec<f64>>>,
    pub h: f64,
    #[serde(default = "default_p")]
    pub p: usize,
    pub x0: InitialStates,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleSpec>,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_sample_dt")]
    pub sample_dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_events: Option<usize>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn reference() -> Self {
        Self::from_json(REFERENCE_SCENARIO).expect("bundled scenario parses")
    }

    pub fn graph(&self) -> Result<WeightedDigraph, ScenarioError> {
        match (&self.adjacency, &self.laplacian) {
            (Some(a), None) => Ok(WeightedDigraph::from_rows(a)?),
            (None, Some(l)) => Ok(WeightedDigraph::laplacian_from_rows(l)?),
            (Some(_), Some(_)) => Err(ScenarioError::Invalid(
                "give either adjacency or laplacian, not both".into(),
            )),
            (None, None) => Err(ScenarioError::Invalid(
                "missing adjacency or laplacian".into(),
            )),
        }
    }

    pub fn saturation(&self) -> Result<SaturationLevel, ScenarioError> {
        Ok(SaturationLevel::new(self.h)?)
    }

    pub fn initial_states(&self, n: usize) -> Result<DMatrix<f64>, ScenarioError> {
        if self.p == 0 {
            return Err(ScenarioError::Invalid("p must be at least 1".into()));
        }
        let rows: Vec<Vec<f64>> = match &self.x0 {
            InitialStates::Scalars(v) if self.p == 1 => v.iter().map(|&s| vec![s]).collect(),
            InitialStates::Scalars(_) => {
                return Err(ScenarioError::Invalid(format!(
                    "x0 must list {} components per agent",
                    self.p
                )))
            }
            InitialStates::Rows(r) => r.clone(),
        };
        if rows.len() != n {
            return Err(ScenarioError::Invalid(format!(
                "x0 has {} agents, graph has {n}",
                rows.len()
            )));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != self.p) {
            return Err(ScenarioError::Invalid(format!(
                "x0 row {} has {} components, expected {}",
                i + 1,
                r.len(),
                self.p
            )));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ScenarioError::Invalid(
                "x0 contains a non-finite value".into(),
            ));
        }
        Ok(DMatrix::from_fn(n, self.p, |i, l| rows[i][l]))
    }

    pub fn trigger_rule(&self, n: usize) -> Result<TriggerRule, ScenarioError> {
        let spec = self
            .rule
            .as_ref()
            .ok_or_else(|| ScenarioError::Invalid("event mode requires a rule".into()))?;
        Ok(TriggerRule::new(
            spec.alpha.expand(n, "alpha")?,
            spec.beta.expand(n, "beta")?,
        )?)
    }

    /// Checks everything a run needs and returns the validated pieces.
    pub fn prepare(&self) -> Result<Prepared, ScenarioError> {
        let graph = self.graph()?;
        let n = graph.agent_count();
        let h = self.saturation()?;
        let x0 = self.initial_states(n)?;
        let rule = match self.mode {
            Mode::Event => Some(self.trigger_rule(n)?),
            Mode::Continuous => match &self.rule {
                Some(_) => Some(self.trigger_rule(n)?),
                None => None,
            },
        };
        crate::dynamics::validate_run(self.t_end, self.sample_dt)?;
        if self.mode == Mode::Continuous && !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::InvalidStep(self.dt).into());
        }
        if !graph.has_directed_spanning_tree() {
            return Err(GraphError::NoSpanningTree.into());
        }
        Ok(Prepared {
            laplacian: graph.laplacian(),
            graph,
            h,
            x0,
            rule,
        })
    }

    /// Validates and runs the scenario in its configured mode.
    pub fn run(&self) -> Result<RunOutput, ScenarioError> {
        let prepared = self.prepare()?;
        self.run_prepared(&prepared)
    }

    pub fn run_prepared(&self, prepared: &Prepared) -> Result<RunOutput, ScenarioError> {
        let (trajectory, log) = match self.mode {
            Mode::Continuous => {
                let cfg = ContinuousConfig {
                    t_end: self.t_end,
                    dt: self.dt,
                    sample_dt: self.sample_dt,
                };
                (
                    simulate_continuous(&prepared.laplacian, prepared.h, &prepared.x0, &cfg)?,
                    None,
                )
            }
            Mode::Event => {
                let cfg = EventConfig {
                    t_end: self.t_end,
                    sample_dt: self.sample_dt,
                    max_events: self.max_events.unwrap_or(DEFAULT_MAX_EVENTS),
                };
                let rule = prepared.rule.as_ref().expect("event mode has a rule");
                let run = run_event_simulation(
                    &prepared.laplacian,
                    rule,
                    prepared.h,
                    &prepared.x0,
                    &cfg,
                )?;
                (run.trajectory, Some(run.log))
            }
        };
        let summary = RunSummary::new(self.mode, prepared, &trajectory, log.as_ref());
        Ok(RunOutput {
            trajectory,
            log,
            summary,
        })
    }
}

/// Validated inputs of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub graph: WeightedDigraph,
    pub laplacian: Laplacian,
    pub h: SaturationLevel,
    pub x0: DMatrix<f64>,
    pub rule: Option<TriggerRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub agents: usize,
    pub dimension: usize,
    pub t_end: f64,
    pub samples: usize,
    pub final_consensus_error: f64,
    pub saturation_exit_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event_counts: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_events: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_inter_event_gap: Option<f64>,
}

impl RunSummary {
    fn new(mode: Mode, prepared: &Prepared, traj: &Trajectory, log: Option<&EventLog>) -> Self {
        let all: Vec<usize> = (0..prepared.x0.nrows()).collect();
        Self {
            mode,
            agents: prepared.x0.nrows(),
            dimension: prepared.x0.ncols(),
            t_end: traj.last().map(|s| s.t).unwrap_or(0.0),
            samples: traj.samples.len(),
            final_consensus_error: traj.final_consensus_error(),
            saturation_exit_time: saturation_exit_time(traj, prepared.h, &all),
            event_counts: log.map(EventLog::counts),
            total_events: log.map(EventLog::total_events),
            min_inter_event_gap: log.and_then(EventLog::min_gap),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub log: Option<EventLog>,
    pub summary: RunSummary,
}
