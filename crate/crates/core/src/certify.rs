//! Spectral analysis reports and post-run certificate reports.

use serde::Serialize;

use crate::dynamics::{SaturationLevel, Trajectory};
use crate::event::{EventLog, TriggerRule};
use crate::graph::{pf_decompose, Laplacian, PfDecomposition, WeightedDigraph};
use crate::lyapunov::{
    block_values, check_post_exit_envelope, composite_potential, decay_report, dissipation_direct,
    dissipation_pairwise, event_composite_potential, event_potential, fit_block_decays,
    input_norm_bound, max_difference_quotient, max_increase, saturated_input, saturated_potential,
    saturation_exit_time, DecayReport, LyapunovError,
};
use crate::scenario::{Mode, Prepared, RunOutput};
use crate::spectral::{compute_block_spectral, BlockSpectralData, SpectralData, SpectralError};

/// Slack on the finite-difference rate of `V` along continuous runs.
pub const MONOTONE_RATE_TOLERANCE: f64 = 1e-6;
/// Slack on sample-to-sample increases of `W` along event runs.
pub const MONOTONE_STEP_TOLERANCE: f64 = 1e-6;
pub const DISSIPATION_IDENTITY_TOLERANCE: f64 = 1e-10;
pub const INPUT_BOUND_RELATIVE: f64 = 1e-8;
pub const ZENO_TOLERANCE: f64 = 1e-9;
pub const THRESHOLD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// Measured quantity (a margin, worst excess, or maximum error).
    pub value: f64,
    pub passed: bool,
    /// Diagnostics are reported but do not decide the verdict.
    pub diagnostic: bool,
}

impl Check {
    fn gate(name: impl Into<String>, value: f64, passed: bool) -> Self {
        Self {
            name: name.into(),
            value,
            passed,
            diagnostic: false,
        }
    }

    fn diagnostic(name: impl Into<String>, value: f64, passed: bool) -> Self {
        Self {
            diagnostic: true,
            ..Self::gate(name, value, passed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IrreducibleReport {
    pub left_vector: Vec<f64>,
    pub disagreement_radius: f64,
    pub disagreement_gap: Option<f64>,
    pub symmetric_gap: Option<f64>,
    pub gram_radius: f64,
    pub theory_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockEntry {
    /// Agents of the block, numbered from 1.
    pub agents: Vec<usize>,
    pub left_vector: Vec<f64>,
    pub symmetric_min_eigenvalue: f64,
    pub symmetric_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightEntry {
    /// Follower block, numbered from 1.
    pub follower: usize,
    pub leader_threshold_gain: f64,
    pub follower_gain: f64,
    pub coupling_gain: f64,
    pub follower_threshold_gain: f64,
    pub extension: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub blocks: Vec<BlockEntry>,
    pub leader_disagreement_radius: f64,
    pub leader_conditioning: Option<f64>,
    pub leader_inequality_margin: f64,
    pub gram_radius: f64,
    pub weights: Vec<WeightEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub agents: usize,
    pub edges: usize,
    /// Strongly connected components in block order (closed one last),
    /// agents numbered from 1.
    pub components: Vec<Vec<usize>>,
    pub strongly_connected: bool,
    pub spanning_tree: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub irreducible: Option<IrreducibleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<BlockReport>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Everything the Lyapunov evaluations need about the graph.
#[derive(Debug, Clone)]
pub struct GraphAnalysis {
    pub laplacian: Laplacian,
    pub pf: Option<PfDecomposition>,
    pub blocks: Option<BlockSpectralData>,
    pub spectral: Option<SpectralData>,
    pub closed_block: Option<SpectralData>,
    pub report: AnalysisReport,
}

fn one_based(agents: &[usize]) -> Vec<usize> {
    agents.iter().map(|a| a + 1).collect()
}

/// Graph structure, spectra and spectral certificates of `graph`.
pub fn analyze(graph: &WeightedDigraph) -> Result<GraphAnalysis, SpectralError> {
    let laplacian = graph.laplacian();
    let n = graph.agent_count();
    let spanning_tree = graph.has_directed_spanning_tree();
    let strongly_connected = graph.is_strongly_connected();
    let mut checks = Vec::new();

    let (pf, blocks, closed_block) = if spanning_tree {
        let pf = pf_decompose(&laplacian)?;
        let bs = compute_block_spectral(&pf)?;
        for (name, value, passed) in bs.certificate_checks() {
            checks.push(Check::gate(name, value, passed));
        }
        let closed = SpectralData::compute(pf.diagonal_block(pf.block_count() - 1))?;
        (Some(pf), Some(bs), Some(closed))
    } else {
        (None, None, None)
    };

    let spectral = if strongly_connected {
        let s = SpectralData::compute(laplacian.matrix())?;
        for (name, value, passed) in s.certificate_checks() {
            checks.push(Check::gate(name, value, passed));
        }
        Some(s)
    } else {
        None
    };

    let components = match &pf {
        Some(pf) => (0..pf.block_count())
            .map(|m| one_based(pf.block_agents(m)))
            .collect(),
        None => graph
            .strongly_connected_components()
            .iter()
            .map(|c| one_based(c))
            .collect(),
    };
    let irreducible = spectral.as_ref().map(|s| IrreducibleReport {
        left_vector: s.left_vector.iter().copied().collect(),
        disagreement_radius: s.disagreement_radius,
        disagreement_gap: s.disagreement_gap,
        symmetric_gap: s.symmetric_gap,
        gram_radius: s.gram_radius,
        theory_rate: s.theory_rate(),
    });
    let block_report = match (&pf, &blocks) {
        (Some(pf), Some(bs)) => Some(BlockReport {
            blocks: bs
                .blocks
                .iter()
                .enumerate()
                .map(|(m, b)| BlockEntry {
                    agents: one_based(pf.block_agents(m)),
                    left_vector: b.left_vector.iter().copied().collect(),
                    symmetric_min_eigenvalue: b.symmetric_min_eigenvalue,
                    symmetric_gap: b.symmetric_gap,
                })
                .collect(),
            leader_disagreement_radius: bs.leader.disagreement_radius,
            leader_conditioning: bs.leader.conditioning,
            leader_inequality_margin: bs.leader.inequality_margin,
            gram_radius: bs.gram_radius,
            weights: bs
                .weights
                .iter()
                .map(|w| WeightEntry {
                    follower: w.follower + 1,
                    leader_threshold_gain: w.leader_threshold_gain,
                    follower_gain: w.follower_gain,
                    coupling_gain: w.coupling_gain,
                    follower_threshold_gain: w.follower_threshold_gain,
                    extension: w.extension,
                })
                .collect(),
        }),
        _ => None,
    };
    let passed = checks.iter().all(|c| c.passed || c.diagnostic);
    Ok(GraphAnalysis {
        report: AnalysisReport {
            agents: n,
            edges: graph.edge_count(),
            components,
            strongly_connected,
            spanning_tree,
            irreducible,
            blocks: block_report,
            checks,
            passed,
        },
        laplacian,
        pf,
        blocks,
        spectral,
        closed_block,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecaySummary {
    /// Agents of the closed component, numbered from 1.
    pub agents: Vec<usize>,
    pub saturation_exit_time: f64,
    pub fitted_rate: Option<f64>,
    pub theory_rate: Option<f64>,
}

impl From<&DecayReport> for DecaySummary {
    fn from(r: &DecayReport) -> Self {
        Self {
            agents: one_based(&r.agents),
            saturation_exit_time: r.saturation_exit_time,
            fitted_rate: r.fitted_rate,
            theory_rate: r.theory_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub mode: Mode,
    pub final_consensus_error: f64,
    pub saturation_exit_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecaySummary>,
    /// Largest violation over the gating monotonicity checks (positive means
    /// an increase beyond zero, before tolerance).
    pub max_monotonicity_violation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_events: Option<usize>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub passed: bool,
}

/// Evaluates every applicable invariant along a finished run.
pub fn certify(
    analysis: &GraphAnalysis,
    prepared: &Prepared,
    mode: Mode,
    out: &RunOutput,
) -> Result<CertificateReport, LyapunovError> {
    let traj = &out.trajectory;
    let h = prepared.h;
    let mut checks: Vec<Check> = analysis.report.checks.clone();
    let mut notes = Vec::new();
    let mut monotone: Option<f64> = None;

    let max_sat = traj
        .samples
        .iter()
        .map(|s| s.saturated.amax())
        .fold(0.0, f64::max);
    checks.push(Check::gate(
        "saturated_input_within_level",
        max_sat,
        max_sat <= h.value(),
    ));

    if let Some(s) = &analysis.spectral {
        dissipation_checks(&mut checks, s, &analysis.laplacian, h, traj);
        let (lhs_excess, ok) = input_bound_check(s, traj);
        checks.push(Check::gate("input_norm_bound", lhs_excess, ok));
        match mode {
            Mode::Continuous => {
                let times: Vec<f64> = traj.samples.iter().map(|s| s.t).collect();
                let values = traj
                    .samples
                    .iter()
                    .map(|smp| saturated_potential(&analysis.laplacian, &s.left_vector, h, &smp.x))
                    .collect::<Result<Vec<_>, _>>()?;
                let rate = max_difference_quotient(&times, &values);
                monotone = Some(rate);
                checks.push(Check::gate(
                    "v_nonincreasing",
                    rate,
                    rate <= MONOTONE_RATE_TOLERANCE,
                ));
            }
            Mode::Event => {
                let rule = prepared.rule.as_ref().expect("event mode has a rule");
                let values = traj
                    .samples
                    .iter()
                    .map(|smp| event_potential(s, rule, h, &smp.x, smp.t))
                    .collect::<Result<Vec<_>, _>>()?;
                let inc = max_increase(&values);
                monotone = Some(inc);
                checks.push(Check::gate(
                    "w_nonincreasing",
                    inc,
                    inc <= MONOTONE_STEP_TOLERANCE,
                ));
            }
        }
    }

    let mut decay = None;
    if let (Some(pf), Some(closed)) = (&analysis.pf, &analysis.closed_block) {
        let agents = pf.block_agents(pf.block_count() - 1).to_vec();
        match decay_report(traj, closed, h, &agents) {
            Ok(rep) => {
                checks.push(Check::gate(
                    "saturation_exit_finite",
                    rep.saturation_exit_time,
                    true,
                ));
                if mode == Mode::Continuous {
                    if let Some(env) = check_post_exit_envelope(traj, closed, &rep) {
                        checks.push(Check::gate(
                            "post_exit_envelope",
                            env.worst_excess,
                            env.passed(),
                        ));
                    }
                } else if let Some(env) = check_post_exit_envelope(traj, closed, &rep) {
                    // broadcast errors perturb the linear dynamics after exit
                    checks.push(Check::diagnostic(
                        "post_exit_envelope",
                        env.worst_excess,
                        env.passed(),
                    ));
                }
                if let Some(rate) = rep.fitted_rate {
                    checks.push(Check::gate("fitted_rate_nonpositive", rate, rate <= 0.0));
                }
                decay = Some(DecaySummary::from(&rep));
            }
            Err(LyapunovError::NeverExitsSaturation { .. }) => {
                checks.push(Check::gate("saturation_exit_finite", f64::INFINITY, false));
            }
            Err(e) => return Err(e),
        }
    }

    if let (Some(pf), Some(bs)) = (&analysis.pf, &analysis.blocks) {
        if pf.block_count() > 1 {
            block_diagnostics(
                &mut checks,
                &mut notes,
                analysis,
                pf,
                bs,
                prepared,
                mode,
                traj,
            )?;
        }
    }

    if let (Mode::Event, Some(log)) = (mode, &out.log) {
        let rule = prepared.rule.as_ref().expect("event mode has a rule");
        let p = prepared.x0.ncols();
        let zeno = zeno_margin(log, rule, h, p);
        checks.push(Check::gate(
            "zeno_lower_bound",
            zeno,
            zeno >= -ZENO_TOLERANCE,
        ));
        let excess = threshold_excess(traj, rule);
        checks.push(Check::gate(
            "trigger_threshold_respected",
            excess,
            excess <= THRESHOLD_TOLERANCE,
        ));
    }

    let passed = checks.iter().all(|c| c.passed || c.diagnostic);
    Ok(CertificateReport {
        mode,
        final_consensus_error: traj.final_consensus_error(),
        saturation_exit_time: saturation_exit_time(
            traj,
            h,
            &(0..prepared.x0.nrows()).collect::<Vec<_>>(),
        ),
        decay,
        max_monotonicity_violation: monotone,
        total_events: out.log.as_ref().map(EventLog::total_events),
        checks,
        notes,
        passed,
    })
}

fn dissipation_checks(
    checks: &mut Vec<Check>,
    s: &SpectralData,
    l: &Laplacian,
    h: SaturationLevel,
    traj: &Trajectory,
) {
    let mut worst: f64 = 0.0;
    let mut max_value = f64::NEG_INFINITY;
    for smp in &traj.samples {
        for sat in [
            saturated_input(l, h, &smp.x).ok(),
            Some(smp.saturated.clone()),
        ]
        .into_iter()
        .flatten()
        {
            let a = dissipation_pairwise(l.matrix(), &s.left_vector, &sat);
            let b = dissipation_direct(l.matrix(), &s.left_vector, &sat);
            worst = worst.max((a - b).abs());
            max_value = max_value.max(a);
        }
    }
    checks.push(Check::gate(
        "dissipation_identity",
        worst,
        worst <= DISSIPATION_IDENTITY_TOLERANCE,
    ));
    checks.push(Check::gate(
        "dissipation_nonpositive",
        max_value,
        max_value <= 0.0,
    ));
}

fn input_bound_check(s: &SpectralData, traj: &Trajectory) -> (f64, bool) {
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for smp in &traj.samples {
        if let Some((lhs, rhs)) = input_norm_bound(s, &smp.x) {
            let slack = INPUT_BOUND_RELATIVE * rhs.max(lhs) + 1e-300;
            worst = worst.max(lhs - rhs);
            ok &= lhs <= rhs + slack;
        }
    }
    (worst, ok)
}

#[allow(clippy::too_many_arguments)]
fn block_diagnostics(
    checks: &mut Vec<Check>,
    notes: &mut Vec<String>,
    analysis: &GraphAnalysis,
    pf: &PfDecomposition,
    bs: &BlockSpectralData,
    prepared: &Prepared,
    mode: Mode,
    traj: &Trajectory,
) -> Result<(), LyapunovError> {
    let h = prepared.h;
    let values = traj
        .samples
        .iter()
        .map(|s| block_values(&analysis.laplacian, pf, bs, h, &s.x))
        .collect::<Result<Vec<_>, _>>()?;
    let fits = fit_block_decays(traj, pf, h);
    let extension = pf.block_count() > 2;
    notes.push(
        "block Lyapunov functions use decay constants fitted from this run; they are diagnostics, not certificates"
            .into(),
    );
    if extension {
        notes.push(
            "more than two components: block weights are computed pairwise as an extension".into(),
        );
    }

    let all: Vec<usize> = (0..prepared.x0.nrows()).collect();
    let exit = saturation_exit_time(traj, h, &all).unwrap_or(f64::INFINITY);
    let sums: Vec<f64> = values.iter().map(|v| v.iter().sum()).collect();
    let post_exit: Vec<f64> = traj
        .samples
        .iter()
        .zip(&sums)
        .filter(|(s, _)| s.t >= exit)
        .map(|(_, v)| *v)
        .collect();
    let inc = max_increase(&post_exit).max(0.0);
    checks.push(Check::diagnostic(
        "block_sum_nonincreasing_after_exit",
        inc,
        inc <= MONOTONE_STEP_TOLERANCE,
    ));

    let composite: Result<Vec<f64>, LyapunovError> = match mode {
        Mode::Continuous => traj
            .samples
            .iter()
            .zip(&values)
            .map(|(s, v)| composite_potential(v, pf, bs, &fits, s.t))
            .collect(),
        Mode::Event => {
            let rule = prepared.rule.as_ref().expect("event mode has a rule");
            traj.samples
                .iter()
                .zip(&values)
                .map(|(s, v)| event_composite_potential(v, pf, bs, &fits, rule, s.t))
                .collect()
        }
    };
    let name = match mode {
        Mode::Continuous => "composite_block_function_nonincreasing",
        Mode::Event => "composite_block_function_nonincreasing_after_exit",
    };
    match composite {
        Ok(series) => {
            let considered: Vec<f64> = match mode {
                Mode::Continuous => series,
                Mode::Event => traj
                    .samples
                    .iter()
                    .zip(series)
                    .filter(|(s, _)| s.t >= exit)
                    .map(|(_, v)| v)
                    .collect(),
            };
            let inc = max_increase(&considered).max(0.0);
            checks.push(Check::diagnostic(name, inc, inc <= MONOTONE_STEP_TOLERANCE));
        }
        Err(LyapunovError::RequiresDecayFit { block }) => {
            notes.push(format!(
                "no decay fit for the components after component {}; composite block function skipped",
                block + 1
            ));
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

/// `min over triggers of gap - sqrt(alpha_i) / (sqrt(p) h) exp(-beta_i t_{k+1} / 2)`,
/// or `+inf` when nobody triggered twice.
pub fn zeno_margin(log: &EventLog, rule: &TriggerRule, h: SaturationLevel, p: usize) -> f64 {
    let mut worst = f64::INFINITY;
    for (i, a) in log.agents.iter().enumerate() {
        for w in a.times.windows(2) {
            worst = worst.min(w[1] - w[0] - rule.zeno_bound(i, w[1], h, p));
        }
    }
    worst
}

/// `max over samples and agents of ||x^_i - x_i||^2 - alpha_i exp(-beta_i t)`.
pub fn threshold_excess(traj: &Trajectory, rule: &TriggerRule) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for s in &traj.samples {
        if let Some(xhat) = &s.broadcast {
            for i in 0..s.x.nrows() {
                let e2 = (xhat.row(i) - s.x.row(i)).norm_squared();
                worst = worst.max(e2 - rule.threshold(i, s.t));
            }
        }
    }
    worst
}
