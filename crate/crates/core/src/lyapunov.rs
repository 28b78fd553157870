//! Lyapunov functions evaluated along simulated trajectories, plus the
//! saturation-exit and exponential-decay diagnostics.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{
    continuous_input, saturate_states, DynamicsError, SaturationLevel, Trajectory,
};
use crate::event::TriggerRule;
use crate::graph::{Laplacian, PfDecomposition};
use crate::spectral::{spectral_radius, BlockSpectralData, SpectralData, SpectralError};

/// Slack factor on the post-exit exponential envelope.
pub const DECAY_SLACK: f64 = 1.05;
/// Values below `NOISE_FLOOR_RELATIVE * scale` are treated as round-off.
pub const NOISE_FLOOR_RELATIVE: f64 = 1e-20;
/// Fraction of the post-exit window used by the log-linear fits.
pub const FIT_TAIL_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LyapunovError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(
        "inputs of agents {:?} are still saturated at the end of the run",
        agents.iter().map(|a| a + 1).collect::<Vec<_>>()
    )]
    NeverExitsSaturation { agents: Vec<usize> },
    #[error("decay fit for the agents downstream of block {} is unavailable", block + 1)]
    RequiresDecayFit { block: usize },
    #[error("trajectory has no samples")]
    EmptyTrajectory,
}

/// `V(x) = sum_i w_i sum_l int_0^{u_il} sat_h`, with `u = -L x`.
pub fn saturated_potential(
    l: &Laplacian,
    weights: &DVector<f64>,
    h: SaturationLevel,
    x: &DMatrix<f64>,
) -> Result<f64, LyapunovError> {
    let n = l.agent_count();
    if weights.len() != n {
        return Err(LyapunovError::DimensionMismatch {
            expected: n,
            found: weights.len(),
        });
    }
    let u = continuous_input(l, x)?;
    Ok(weighted_integral(&u, weights, h, 0..n))
}

fn weighted_integral(
    u: &DMatrix<f64>,
    weights: &DVector<f64>,
    h: SaturationLevel,
    rows: impl Iterator<Item = usize>,
) -> f64 {
    rows.map(|i| weights[i] * u.row(i).iter().map(|&a| h.integral(a)).sum::<f64>())
        .sum()
}

/// `V~(x) = x^T (U kron I_p) x / 2`, evaluated as
/// `sum_i xi_i ||x_i - xbar||^2 / 2` with `xbar = sum_i xi_i x_i`, which is the
/// same quadratic form without the cancellation of the matrix product.
pub fn weighted_disagreement(left_vector: &DVector<f64>, x: &DMatrix<f64>) -> f64 {
    let mean = left_vector.transpose() * x;
    (0..x.nrows())
        .map(|i| left_vector[i] * (x.row(i) - &mean).norm_squared())
        .sum::<f64>()
        * 0.5
}

/// `V~` restricted to `agents`, using `left_vector` indexed like `agents`.
pub fn weighted_disagreement_on(
    left_vector: &DVector<f64>,
    x: &DMatrix<f64>,
    agents: &[usize],
) -> f64 {
    weighted_disagreement(left_vector, &x.select_rows(agents))
}

/// Weight `4 max_i{xi_i L_ii} rho(L^T L)` of the threshold term in `W`.
pub fn threshold_weight(spectral: &SpectralData) -> f64 {
    4.0 * spectral.max_weighted_degree() * spectral.gram_radius
}

/// Auxiliary states `z_i(t) = exp(-beta_i t)`.
pub fn threshold_states(rule: &TriggerRule, t: f64) -> Vec<f64> {
    (0..rule.agent_count())
        .map(|i| (-rule.beta(i) * t).exp())
        .collect()
}

/// `W(x, z) = V(x) + 4 max_i{xi_i L_ii} rho(L^T L) sum_i (alpha_i / beta_i) z_i`.
pub fn event_potential(
    spectral: &SpectralData,
    rule: &TriggerRule,
    h: SaturationLevel,
    x: &DMatrix<f64>,
    t: f64,
) -> Result<f64, LyapunovError> {
    let l = Laplacian::from_matrix(&spectral.laplacian).map_err(SpectralError::from)?;
    let v = saturated_potential(&l, &spectral.left_vector, h, x)?;
    let z = threshold_states(rule, t);
    let tail: f64 = z
        .iter()
        .enumerate()
        .map(|(i, zi)| rule.alpha(i) / rule.beta(i) * zi)
        .sum();
    Ok(v + threshold_weight(spectral) * tail)
}

/// `-sum_i xi_i q_i` with `q_i = -1/2 sum_j L_ij ||s_j - s_i||^2`, where `s`
/// holds the saturated inputs.
pub fn dissipation_pairwise(l: &DMatrix<f64>, left_vector: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let n = l.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut q = 0.0;
        for j in 0..n {
            if j != i && l[(i, j)] != 0.0 {
                q += l[(i, j)] * (s.row(j) - s.row(i)).norm_squared();
            }
        }
        total += left_vector[i] * (-0.5 * q);
    }
    -total
}

/// `-sum_i sum_j xi_i L_ij s_j^T s_i`.
pub fn dissipation_direct(l: &DMatrix<f64>, left_vector: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let ls = l * s;
    -(0..l.nrows())
        .map(|i| left_vector[i] * ls.row(i).dot(&s.row(i)))
        .sum::<f64>()
}

/// Both sides of `sum_j ||u_j||^2 <= 2 (rho(L^T L) / rho2(U)) V~(x)`.
pub fn input_norm_bound(spectral: &SpectralData, x: &DMatrix<f64>) -> Option<(f64, f64)> {
    let rho2 = spectral.disagreement_gap?;
    let u = -(&spectral.laplacian * x);
    let lhs = u.norm_squared();
    let rhs = 2.0 * spectral.gram_radius / rho2 * weighted_disagreement(&spectral.left_vector, x);
    Some((lhs, rhs))
}

/// `1/2 a^2 >= int_0^a sat_h >= 1/2 sat_h(a)^2` and
/// `(a - b)^2 >= (sat_h(a) - sat_h(b))^2`.
pub fn saturation_inequalities_hold(a: f64, b: f64, h: SaturationLevel) -> bool {
    let i = h.integral(a);
    let sa = h.clamp(a);
    let sb = h.clamp(b);
    0.5 * a * a >= i && i >= 0.5 * sa * sa && (a - b).powi(2) >= (sa - sb).powi(2)
}

/// First sample time after which every input component of `agents` stays
/// within `[-h, h]` through the end of the run. `None` if the last sample is
/// still saturated.
pub fn saturation_exit_time(
    traj: &Trajectory,
    h: SaturationLevel,
    agents: &[usize],
) -> Option<f64> {
    let inside = |k: usize| {
        let s = &traj.samples[k];
        agents
            .iter()
            .all(|&i| s.input.row(i).iter().all(|v| v.abs() <= h.value()))
    };
    let mut exit = None;
    for k in (0..traj.samples.len()).rev() {
        if !inside(k) {
            break;
        }
        exit = Some(traj.samples[k].t);
    }
    exit
}

/// Least-squares slope of `log y` against `t`, using only points with
/// `y > floor`. `None` with fewer than two usable points or a degenerate
/// time spread.
pub fn log_linear_slope(points: &[(f64, f64)], floor: f64) -> Option<f64> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, y)| *y > floor)
        .map(|&(t, y)| (t, y.ln()))
        .collect();
    if usable.len() < 2 {
        return None;
    }
    let n = usable.len() as f64;
    let tm = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    if sxx <= 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Points of the post-exit window used by the fits: the last
/// [`FIT_TAIL_FRACTION`] of `[exit, t_end]`, falling back to the whole window
/// when the tail is entirely below the noise floor.
fn fit_window(points: &[(f64, f64)], exit: f64, floor: f64) -> Option<f64> {
    let t_end = points.last()?.0;
    let start = t_end - FIT_TAIL_FRACTION * (t_end - exit);
    let tail: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.0 >= start).collect();
    log_linear_slope(&tail, floor).or_else(|| {
        let all: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.0 >= exit).collect();
        log_linear_slope(&all, floor)
    })
}

fn state_floor(traj: &Trajectory, agents: &[usize]) -> f64 {
    let scale = traj
        .samples
        .first()
        .map(|s| {
            agents
                .iter()
                .map(|&i| s.x.row(i).norm_squared())
                .fold(0.0, f64::max)
        })
        .unwrap_or(0.0);
    NOISE_FLOOR_RELATIVE * scale.max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub agents: Vec<usize>,
    pub saturation_exit_time: f64,
    /// Slope of `log V~` after the exit time; negative for a decaying run,
    /// `None` when `V~` is at round-off level over the whole window.
    pub fitted_rate: Option<f64>,
    /// `2 rho2(R) / rho(U)` of the subgraph on `agents`.
    pub theory_rate: Option<f64>,
    /// Absolute slack added to the envelope to absorb round-off.
    pub noise_floor: f64,
}

/// Decay diagnostics of the closed subsystem on `agents`, whose spectral
/// data is `spectral` (indexed like `agents`).
pub fn decay_report(
    traj: &Trajectory,
    spectral: &SpectralData,
    h: SaturationLevel,
    agents: &[usize],
) -> Result<DecayReport, LyapunovError> {
    if traj.samples.is_empty() {
        return Err(LyapunovError::EmptyTrajectory);
    }
    if spectral.agent_count() != agents.len() {
        return Err(LyapunovError::DimensionMismatch {
            expected: agents.len(),
            found: spectral.agent_count(),
        });
    }
    let exit = saturation_exit_time(traj, h, agents).ok_or_else(|| {
        LyapunovError::NeverExitsSaturation {
            agents: agents.to_vec(),
        }
    })?;
    let floor = state_floor(traj, agents);
    let points: Vec<(f64, f64)> = traj
        .samples
        .iter()
        .map(|s| {
            (
                s.t,
                weighted_disagreement_on(&spectral.left_vector, &s.x, agents),
            )
        })
        .collect();
    Ok(DecayReport {
        agents: agents.to_vec(),
        saturation_exit_time: exit,
        fitted_rate: fit_window(&points, exit, floor),
        theory_rate: spectral.theory_rate(),
        noise_floor: floor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeCheck {
    pub samples_checked: usize,
    /// `max_t V~(t) - envelope(t)`; non-positive when the bound holds.
    pub worst_excess: f64,
}

impl EnvelopeCheck {
    pub fn passed(&self) -> bool {
        self.worst_excess <= 0.0
    }
}

/// Checks `V~(t) <= 1.05 V~(exit) exp(-rate (t - exit)) + floor` at every
/// sample after the exit time.
pub fn check_post_exit_envelope(
    traj: &Trajectory,
    spectral: &SpectralData,
    report: &DecayReport,
) -> Option<EnvelopeCheck> {
    let rate = report.theory_rate?;
    let exit = report.saturation_exit_time;
    let value =
        |x: &DMatrix<f64>| weighted_disagreement_on(&spectral.left_vector, x, &report.agents);
    let start = traj.samples.iter().find(|s| s.t >= exit)?;
    let v_exit = value(&start.x);
    let mut check = EnvelopeCheck {
        samples_checked: 0,
        worst_excess: f64::NEG_INFINITY,
    };
    for s in traj.samples.iter().filter(|s| s.t >= exit) {
        let envelope = DECAY_SLACK * v_exit * (-rate * (s.t - exit)).exp() + report.noise_floor;
        check.samples_checked += 1;
        check.worst_excess = check.worst_excess.max(value(&s.x) - envelope);
    }
    Some(check)
}

/// Exponential envelope `||input||^2 <= constant * exp(-rate t)` of a group
/// of agents, fitted from a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub rate: f64,
    pub constant: f64,
}

impl DecayFit {
    pub fn at(&self, t: f64) -> f64 {
        self.constant * (-self.rate * t).exp()
    }
}

/// Fits `sum_{i in agents} ||input_i(t)||^2 <= C exp(-rate t)`: the rate is
/// minus the log-linear slope after the group's saturation exit, and `C` is
/// the smallest constant that makes the envelope hold at every sample.
/// A group already at rest gets the zero envelope.
pub fn fit_input_decay(
    traj: &Trajectory,
    h: SaturationLevel,
    agents: &[usize],
) -> Option<DecayFit> {
    let points: Vec<(f64, f64)> = traj
        .samples
        .iter()
        .map(|s| {
            (
                s.t,
                agents.iter().map(|&i| s.input.row(i).norm_squared()).sum(),
            )
        })
        .collect();
    let peak = points.iter().map(|p| p.1).fold(0.0, f64::max);
    let floor = NOISE_FLOOR_RELATIVE * peak.max(1.0);
    if points.iter().all(|p| p.1 <= floor) {
        return Some(DecayFit {
            rate: 1.0,
            constant: 0.0,
        });
    }
    let exit = saturation_exit_time(traj, h, agents)?;
    let slope = fit_window(&points, exit, floor)?;
    if slope >= 0.0 {
        return None;
    }
    let rate = -slope;
    let constant = points
        .iter()
        .map(|&(t, y)| y * (rate * t).exp())
        .fold(0.0, f64::max);
    Some(DecayFit { rate, constant })
}

/// Per-agent weights `left_vector^m` of every block, placed at the agents' original
/// indices. All entries are positive.
pub fn block_weights(pf: &PfDecomposition, spectral: &BlockSpectralData) -> DVector<f64> {
    let n: usize = pf.block_sizes().iter().sum();
    let mut w = DVector::zeros(n);
    for (m, b) in spectral.blocks.iter().enumerate() {
        for (k, &agent) in pf.block_agents(m).iter().enumerate() {
            w[agent] = b.left_vector[k];
        }
    }
    w
}

/// `V_m(x) = sum_{i in block m} left_vector^m_i sum_l int_0^{u_il} sat_h`, where `u_i`
/// is the full protocol input including the coupling to later blocks.
pub fn block_values(
    l: &Laplacian,
    pf: &PfDecomposition,
    spectral: &BlockSpectralData,
    h: SaturationLevel,
    x: &DMatrix<f64>,
) -> Result<Vec<f64>, LyapunovError> {
    let u = continuous_input(l, x)?;
    let w = block_weights(pf, spectral);
    Ok((0..pf.block_count())
        .map(|m| weighted_integral(&u, &w, h, pf.block_agents(m).iter().copied()))
        .collect())
}

/// Agents of blocks `m + 1 ..`.
pub fn downstream_agents(pf: &PfDecomposition, m: usize) -> Vec<usize> {
    (m + 1..pf.block_count())
        .flat_map(|q| pf.block_agents(q).iter().copied())
        .collect()
}

/// One input-decay fit per non-closed block `m`, over the agents of the
/// later blocks that block `m` listens to.
pub fn fit_block_decays(
    traj: &Trajectory,
    pf: &PfDecomposition,
    h: SaturationLevel,
) -> Vec<Option<DecayFit>> {
    (0..pf.block_count().saturating_sub(1))
        .map(|m| fit_input_decay(traj, h, &downstream_agents(pf, m)))
        .collect()
}

fn coupling_gain(pf: &PfDecomposition, spectral: &BlockSpectralData, m: usize) -> f64 {
    let coupling = pf.coupling_to_later(m);
    let max_sq = coupling.iter().map(|v| v * v).fold(0.0, f64::max);
    let n_follow = pf.block_size(m) as f64;
    let n_rest = coupling.ncols() as f64;
    n_follow * n_rest * max_sq / spectral.blocks[m].symmetric_min_eigenvalue
}

fn fits_for(fits: &[Option<DecayFit>], m: usize) -> Result<&DecayFit, LyapunovError> {
    fits.get(m)
        .and_then(Option::as_ref)
        .ok_or(LyapunovError::RequiresDecayFit { block: m })
}

/// `V_3 = sum_m V_m + sum_{m<M} n_m n_{>m} max((L^{m,>m}_ij)^2) C_m / (rho2(Q^m) r_m) exp(-r_m t)`
/// with `(C_m, r_m)` the fitted input decay of the blocks after `m`. For two
/// blocks this is the construction for the continuous protocol; for more it
/// applies the same bound to every block.
pub fn composite_potential(
    values: &[f64],
    pf: &PfDecomposition,
    spectral: &BlockSpectralData,
    fits: &[Option<DecayFit>],
    t: f64,
) -> Result<f64, LyapunovError> {
    let mut total: f64 = values.iter().sum();
    for m in 0..pf.block_count().saturating_sub(1) {
        let fit = fits_for(fits, m)?;
        total += coupling_gain(pf, spectral, m) * fit.at(t) / fit.rate;
    }
    Ok(total)
}

/// `2 max_i{left_vector^M_i L^{M,M}_ii} rho((L^{M,M})^T L^{M,M})` for the closed block.
pub fn closed_block_gain(
    pf: &PfDecomposition,
    spectral: &BlockSpectralData,
) -> Result<f64, LyapunovError> {
    let last = pf.block_count() - 1;
    let block = pf.diagonal_block(last);
    let left_vector = &spectral.blocks[last].left_vector;
    let degree = (0..block.nrows())
        .map(|i| left_vector[i] * block[(i, i)])
        .fold(0.0, f64::max);
    Ok(2.0 * degree * spectral_radius(&(block.transpose() * block))?)
}

/// Event-mode block function
/// `W_r = sum_m V_m + sum_{m<M} [2 n_{>m} coupling_gain (C_m / r_m) exp(-r_m t)
///        + 2 sum_{i in blocks >= m} follower_threshold_gain alpha_i / beta_i exp(-beta_i t)]
///        + 2 sum_{i in block M} leader_threshold_gain alpha_i / beta_i exp(-beta_i t)`,
/// with `(C_m, r_m)` fitted on the broadcast inputs of the later blocks.
pub fn event_composite_potential(
    values: &[f64],
    pf: &PfDecomposition,
    spectral: &BlockSpectralData,
    fits: &[Option<DecayFit>],
    rule: &TriggerRule,
    t: f64,
) -> Result<f64, LyapunovError> {
    let threshold_sum = |agents: &mut dyn Iterator<Item = usize>| -> f64 {
        agents
            .map(|i| rule.alpha(i) / rule.beta(i) * (-rule.beta(i) * t).exp())
            .sum()
    };
    let mut total: f64 = values.iter().sum();
    let count = pf.block_count();
    for (m, w) in spectral.weights.iter().enumerate() {
        let fit = fits_for(fits, m)?;
        let downstream = downstream_agents(pf, m);
        total += 2.0 * downstream.len() as f64 * w.coupling_gain * fit.at(t) / fit.rate;
        let mut from_m = pf.block_agents(m).iter().copied().chain(downstream);
        total += 2.0 * w.follower_threshold_gain * threshold_sum(&mut from_m);
    }
    let mut closed = pf.block_agents(count - 1).iter().copied();
    total += 2.0 * closed_block_gain(pf, spectral)? * threshold_sum(&mut closed);
    Ok(total)
}

/// Largest increase `f(t_{k+1}) - f(t_k)` over consecutive samples, or
/// `-inf` for fewer than two values.
pub fn max_increase(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest forward difference quotient `(f(t_{k+1}) - f(t_k)) / (t_{k+1} - t_k)`.
pub fn max_difference_quotient(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .filter(|(t, _)| t[1] > t[0])
        .map(|(t, v)| (v[1] - v[0]) / (t[1] - t[0]))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Saturated inputs `sat_h(-L x)` used by the dissipation identities.
pub fn saturated_input(
    l: &Laplacian,
    h: SaturationLevel,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LyapunovError> {
    Ok(saturate_states(&continuous_input(l, x)?, h)?)
}
