//! Event-triggered broadcasting with exponentially decaying thresholds.
//!
//! Agent `i` rebroadcasts its state the first time its measurement error
//! `e_i = x^_i - x_i` satisfies `||e_i(t)||^2 = alpha_i exp(-beta_i t)`.
//! Between broadcasts every input is constant, so all states move on
//! straight lines and the simulation below is exact up to the root finding
//! of trigger instants.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    self, event_input, saturate_states, DynamicsError, Sample, SaturationLevel, Trajectory,
};
use crate::graph::Laplacian;

/// Trigger instants are located to this absolute accuracy.
pub const BISECTION_TOLERANCE: f64 = 1e-10;
/// Smallest marching step, kept below the bisection tolerance.
const MIN_MARCH_STEP: f64 = 0.5 * BISECTION_TOLERANCE;
const MAX_MARCH_STEPS: usize = 10_000_000;
pub const DEFAULT_MAX_EVENTS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EventError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("trigger rule parameters must be positive and finite (agent {}: alpha = {alpha}, beta = {beta})", agent + 1)]
    InvalidRule { agent: usize, alpha: f64, beta: f64 },
    #[error("trigger rule has {found} agents, graph has {expected}")]
    RuleSize { expected: usize, found: usize },
    #[error("crossing search for agent {} failed near t = {t}", agent + 1)]
    BracketFailure { agent: usize, t: f64 },
    #[error("more than {cap} events before t = {t}; Zeno behaviour suspected")]
    ZenoSuspected { cap: usize, t: f64 },
}

/// Per-agent threshold parameters `(alpha_i, beta_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRule {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl TriggerRule {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self, EventError> {
        if alpha.len() != beta.len() {
            return Err(EventError::RuleSize {
                expected: alpha.len(),
                found: beta.len(),
            });
        }
        for (agent, (&a, &b)) in alpha.iter().zip(&beta).enumerate() {
            if !(a > 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
                return Err(EventError::InvalidRule {
                    agent,
                    alpha: a,
                    beta: b,
                });
            }
        }
        Ok(Self { alpha, beta })
    }

    pub fn uniform(n: usize, alpha: f64, beta: f64) -> Result<Self, EventError> {
        Self::new(vec![alpha; n], vec![beta; n])
    }

    pub fn agent_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha[i]
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.beta[i]
    }

    /// Squared-error budget `alpha_i exp(-beta_i t)`.
    pub fn threshold(&self, i: usize, t: f64) -> f64 {
        self.alpha[i] * (-self.beta[i] * t).exp()
    }

    /// Guaranteed minimum gap ending at `t_next`:
    /// `sqrt(alpha_i) / (sqrt(p) h) * exp(-beta_i t_next / 2)`.
    pub fn zeno_bound(&self, i: usize, t_next: f64, h: SaturationLevel, p: usize) -> f64 {
        self.alpha[i].sqrt() / ((p as f64).sqrt() * h.value())
            * (-0.5 * self.beta[i] * t_next).exp()
    }
}

/// Broadcast history of one agent; `times[0] == 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentLog {
    pub times: Vec<f64>,
    pub broadcasts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    pub agents: Vec<AgentLog>,
}

#[derive(Serialize)]
struct AgentTimes<'a> {
    agent: usize,
    times: &'a [f64],
}

impl EventLog {
    pub fn counts(&self) -> Vec<usize> {
        self.agents.iter().map(|a| a.times.len()).collect()
    }

    pub fn total_events(&self) -> usize {
        self.agents.iter().map(|a| a.times.len()).sum()
    }

    /// Smallest inter-event gap over all agents, `None` when nobody
    /// triggered after `t = 0`.
    pub fn min_gap(&self) -> Option<f64> {
        self.agents
            .iter()
            .flat_map(|a| a.times.windows(2).map(|w| w[1] - w[0]))
            .min_by(f64::total_cmp)
    }

    /// `[{"agent": i, "times": [...]}, ...]` with agents numbered from 1.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<AgentTimes<'_>> = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| AgentTimes {
                agent: i + 1,
                times: &a.times,
            })
            .collect();
        serde_json::to_value(rows).expect("event log serializes")
    }

    /// One row per trigger: `agent, k, t_k, inter_event_gap, zeno_bound_at_t_k`.
    /// The first trigger of each agent has an empty gap and bound.
    pub fn write_csv<W: Write>(
        &self,
        out: W,
        rule: &TriggerRule,
        h: SaturationLevel,
        p: usize,
    ) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["agent", "k", "t_k", "inter_event_gap", "zeno_bound_at_t_k"])?;
        for (i, a) in self.agents.iter().enumerate() {
            for (k, &t) in a.times.iter().enumerate() {
                let (gap, bound) = if k == 0 {
                    (String::new(), String::new())
                } else {
                    (
                        (t - a.times[k - 1]).to_string(),
                        rule.zeno_bound(i, t, h, p).to_string(),
                    )
                };
                w.write_record([
                    (i + 1).to_string(),
                    (k + 1).to_string(),
                    t.to_string(),
                    gap,
                    bound,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Straight-line motion of one agent's measurement error:
/// `e(t) = error + (t - t0) * drift`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSegment<'a> {
    pub t0: f64,
    pub error: &'a [f64],
    pub drift: &'a [f64],
}

impl ErrorSegment<'_> {
    fn norm_at(&self, t: f64) -> f64 {
        let dt = t - self.t0;
        self.error
            .iter()
            .zip(self.drift)
            .map(|(e, d)| (e + dt * d).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn speed(&self) -> f64 {
        self.drift.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

/// First `t >= t0` in `[t0, horizon]` where `||e(t)||^2` reaches
/// `alpha exp(-beta t)`, or `None` if the error stays within budget.
///
/// Marches with steps no crossing can hide in: with margin
/// `m = sqrt(alpha) exp(-beta t / 2) - ||e(t)||`, the error norm grows at
/// most at `||drift||` and the square-root threshold shrinks at most at
/// `beta/2` times its current value, so the margin stays positive for
/// `m / (||drift|| + beta/2 sqrt(alpha) exp(-beta t/2))`. Right after a reset
/// this is at least the minimum inter-event time. The bracket is then
/// bisected and its lower end returned, so a trigger is never late.
pub fn first_crossing(
    segment: &ErrorSegment<'_>,
    alpha: f64,
    beta: f64,
    horizon: f64,
) -> Result<Option<f64>, f64> {
    let root_threshold = |t: f64| alpha.sqrt() * (-0.5 * beta * t).exp();
    let violated = |t: f64| segment.norm_at(t).powi(2) > alpha * (-beta * t).exp();
    let speed = segment.speed();

    let mut t = segment.t0;
    if violated(t) {
        return Ok(Some(t));
    }
    for _ in 0..MAX_MARCH_STEPS {
        if t >= horizon {
            return Ok(None);
        }
        let s = root_threshold(t);
        let margin = s - segment.norm_at(t);
        let rate = speed + 0.5 * beta * s;
        let step = if rate > 0.0 {
            margin / rate
        } else {
            f64::INFINITY
        };
        let next = (t + step.max(MIN_MARCH_STEP)).min(horizon);
        if violated(next) {
            return bisect(&violated, t, next).map(Some);
        }
        t = next;
    }
    Err(t)
}

fn bisect(violated: &impl Fn(f64) -> bool, mut lo: f64, mut hi: f64) -> Result<f64, f64> {
    for _ in 0..200 {
        if hi - lo < BISECTION_TOLERANCE {
            return Ok(lo);
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(lo);
        }
        if violated(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(lo)
}

/// Next trigger instant of `agent` given the current event-mode state,
/// searching up to `horizon`.
pub fn next_trigger_time(
    agent: usize,
    state: &dynamics::SystemState,
    l: &Laplacian,
    rule: &TriggerRule,
    h: SaturationLevel,
    horizon: f64,
) -> Result<Option<f64>, EventError> {
    let xhat = state.xhat.as_ref().ok_or(DynamicsError::MissingBroadcast)?;
    let velocity = saturate_states(&event_input(l, xhat)?, h)?;
    let error: Vec<f64> = (xhat.row(agent) - state.x.row(agent))
        .iter()
        .copied()
        .collect();
    let drift: Vec<f64> = velocity.row(agent).iter().map(|v| -v).collect();
    let seg = ErrorSegment {
        t0: state.t,
        error: &error,
        drift: &drift,
    };
    first_crossing(&seg, rule.alpha(agent), rule.beta(agent), horizon)
        .map_err(|t| EventError::BracketFailure { agent, t })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventConfig {
    pub t_end: f64,
    pub sample_dt: f64,
    pub max_events: usize,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self {
            t_end: 30.0,
            sample_dt: 0.01,
            max_events: DEFAULT_MAX_EVENTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRun {
    pub trajectory: Trajectory,
    pub log: EventLog,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    t: f64,
    agent: usize,
    version: u64,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // BinaryHeap is a max-heap: reverse so the earliest time, then the
    // lowest agent index, pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.agent.cmp(&self.agent))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Engine<'a> {
    l: &'a Laplacian,
    rule: &'a TriggerRule,
    h: SaturationLevel,
    cfg: EventConfig,
    t: f64,
    x: DMatrix<f64>,
    xhat: DMatrix<f64>,
    input: DMatrix<f64>,
    velocity: DMatrix<f64>,
    versions: Vec<u64>,
    queue: BinaryHeap<Candidate>,
    log: EventLog,
    samples: Vec<Sample>,
    next_sample: usize,
    sample_count: usize,
    events: usize,
}

impl Engine<'_> {
    fn refresh_inputs(&mut self) -> Result<(), EventError> {
        self.input = event_input(self.l, &self.xhat)?;
        self.velocity = saturate_states(&self.input, self.h)?;
        Ok(())
    }

    fn schedule(&mut self, agent: usize) -> Result<(), EventError> {
        self.versions[agent] += 1;
        let error: Vec<f64> = (self.xhat.row(agent) - self.x.row(agent))
            .iter()
            .copied()
            .collect();
        let drift: Vec<f64> = self.velocity.row(agent).iter().map(|v| -v).collect();
        let seg = ErrorSegment {
            t0: self.t,
            error: &error,
            drift: &drift,
        };
        let found = first_crossing(
            &seg,
            self.rule.alpha(agent),
            self.rule.beta(agent),
            self.cfg.t_end,
        )
        .map_err(|t| EventError::BracketFailure { agent, t })?;
        if let Some(t) = found {
            self.queue.push(Candidate {
                t,
                agent,
                version: self.versions[agent],
            });
        }
        Ok(())
    }

    fn sample_time(&self, k: usize) -> f64 {
        if k + 1 == self.sample_count {
            self.cfg.t_end
        } else {
            k as f64 * self.cfg.sample_dt
        }
    }

    /// Records every sample strictly before `until` (or up to and including
    /// it when `inclusive`), extrapolating along the current lines.
    fn emit_samples(&mut self, until: f64, inclusive: bool) {
        while self.next_sample < self.sample_count {
            let ts = self.sample_time(self.next_sample);
            if ts > until || (!inclusive && ts == until) {
                break;
            }
            let x = &self.x + &self.velocity * (ts - self.t);
            self.samples.push(Sample {
                t: ts,
                x,
                input: self.input.clone(),
                saturated: self.velocity.clone(),
                broadcast: Some(self.xhat.clone()),
            });
            self.next_sample += 1;
        }
    }

    fn advance_to(&mut self, t: f64) -> Result<(), EventError> {
        if t > self.t {
            self.x += &self.velocity * (t - self.t);
            self.t = t;
            if self.x.iter().any(|v| !v.is_finite()) {
                return Err(DynamicsError::NonFiniteState { t }.into());
            }
        }
        Ok(())
    }

    fn trigger(&mut self, agent: usize) {
        let row: RowDVector<f64> = self.x.row(agent).into_owned();
        self.xhat.set_row(agent, &row);
        let log = &mut self.log.agents[agent];
        log.times.push(self.t);
        log.broadcasts.push(row.iter().copied().collect());
        self.events += 1;
    }

    fn pop_valid(&mut self) -> Option<Candidate> {
        while let Some(c) = self.queue.pop() {
            if c.version == self.versions[c.agent] {
                return Some(c);
            }
        }
        None
    }

    fn run(&mut self) -> Result<(), EventError> {
        let n = self.l.agent_count();
        for agent in 0..n {
            self.trigger(agent);
        }
        self.refresh_inputs()?;
        for agent in 0..n {
            self.schedule(agent)?;
        }
        let graph = self.l.graph();

        while let Some(first) = self.pop_valid() {
            if first.t > self.cfg.t_end {
                break;
            }
            let t_event = first.t;
            self.emit_samples(t_event, false);
            self.advance_to(t_event)?;

            let mut due = vec![first.agent];
            while let Some(top) = self.queue.peek().copied() {
                if top.t != t_event {
                    break;
                }
                self.queue.pop();
                if top.version == self.versions[top.agent] {
                    due.push(top.agent);
                }
            }
            due.sort_unstable();
            due.dedup();

            let mut affected = vec![false; n];
            for &agent in &due {
                self.trigger(agent);
                affected[agent] = true;
                for listener in graph.out_neighbors(agent) {
                    affected[listener] = true;
                }
            }
            if self.events > self.cfg.max_events {
                return Err(EventError::ZenoSuspected {
                    cap: self.cfg.max_events,
                    t: self.t,
                });
            }
            self.refresh_inputs()?;
            for agent in (0..n).filter(|&a| affected[a]) {
                self.schedule(agent)?;
            }
        }

        self.emit_samples(self.cfg.t_end, true);
        Ok(())
    }
}

/// Runs the event-triggered protocol from `x0` over `[0, t_end]`.
///
/// Every agent broadcasts at `t = 0`. Candidates for the next trigger of
/// each agent sit in a priority queue; after a trigger of agent `i` only `i`
/// and the agents listening to `i` have their error dynamics changed and
/// are rescheduled. Simultaneous triggers are handled in ascending agent
/// order. Samples are exact points on the piecewise-linear trajectory, taken
/// right-continuously at multiples of `sample_dt` and at `t_end`.
pub fn run_event_simulation(
    l: &Laplacian,
    rule: &TriggerRule,
    h: SaturationLevel,
    x0: &DMatrix<f64>,
    cfg: &EventConfig,
) -> Result<EventRun, EventError> {
    dynamics::validate_run(cfg.t_end, cfg.sample_dt)?;
    let n = l.agent_count();
    if x0.nrows() != n {
        return Err(DynamicsError::DimensionMismatch {
            expected: n,
            found: x0.nrows(),
        }
        .into());
    }
    if rule.agent_count() != n {
        return Err(EventError::RuleSize {
            expected: n,
            found: rule.agent_count(),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFiniteState { t: 0.0 }.into());
    }

    let grid = (cfg.t_end / cfg.sample_dt + 1e-9).floor() as usize;
    let on_grid = (grid as f64 * cfg.sample_dt - cfg.t_end).abs() <= 1e-9 * cfg.t_end.max(1.0);
    let sample_count = if on_grid { grid + 1 } else { grid + 2 };

    let p = x0.ncols();
    let mut engine = Engine {
        l,
        rule,
        h,
        cfg: *cfg,
        t: 0.0,
        x: x0.clone(),
        xhat: x0.clone(),
        input: DMatrix::zeros(n, p),
        velocity: DMatrix::zeros(n, p),
        versions: vec![0; n],
        queue: BinaryHeap::new(),
        log: EventLog {
            agents: vec![
                AgentLog {
                    times: Vec::new(),
                    broadcasts: Vec::new(),
                };
                n
            ],
        },
        samples: Vec::with_capacity(sample_count),
        next_sample: 0,
        sample_count,
        events: 0,
    };
    engine.run()?;
    Ok(EventRun {
        trajectory: Trajectory {
            sample_dt: cfg.sample_dt,
            samples: engine.samples,
        },
        log: engine.log,
    })
}
