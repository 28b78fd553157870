//! Saturated single-integrator agents `x_i' = sat_h(u_i)`.
//!
//! States are stored as an `n x p` matrix, one row per agent, so the
//! stacked protocol `u = -(L kron I_p) x` is simply `-L X`.

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::graph::Laplacian;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("saturation level must be positive and finite, got {0}")]
    InvalidSaturation(f64),
    #[error("non-finite input component")]
    NonFiniteInput,
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("dimension mismatch: expected {expected} agents, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("event-mode step requires broadcast states")]
    MissingBroadcast,
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
}

/// Symmetric actuator bound `h > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationLevel(f64);

impl SaturationLevel {
    pub fn new(h: f64) -> Result<Self, DynamicsError> {
        if h > 0.0 && h.is_finite() {
            Ok(Self(h))
        } else {
            Err(DynamicsError::InvalidSaturation(h))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn clamp(self, s: f64) -> f64 {
        s.clamp(-self.0, self.0)
    }

    /// `int_0^a sat_h(s) ds`: `a^2 / 2` inside the band, `h|a| - h^2 / 2` outside.
    pub fn integral(self, a: f64) -> f64 {
        let h = self.0;
        if a.abs() <= h {
            0.5 * a * a
        } else {
            h * a.abs() - 0.5 * h * h
        }
    }
}

pub fn saturate(s: &[f64], h: SaturationLevel) -> Result<Vec<f64>, DynamicsError> {
    s.iter()
        .map(|&v| {
            if v.is_finite() {
                Ok(h.clamp(v))
            } else {
                Err(DynamicsError::NonFiniteInput)
            }
        })
        .collect()
}

pub fn saturate_states(
    s: &DMatrix<f64>,
    h: SaturationLevel,
) -> Result<DMatrix<f64>, DynamicsError> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFiniteInput);
    }
    Ok(s.map(|v| h.clamp(v)))
}

fn protocol(l: &Laplacian, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    if x.nrows() != l.agent_count() {
        return Err(DynamicsError::DimensionMismatch {
            expected: l.agent_count(),
            found: x.nrows(),
        });
    }
    // difference form, exactly zero at consensus
    let m = l.matrix();
    let (n, p) = x.shape();
    let mut u = DMatrix::zeros(n, p);
    for j in 0..n {
        for i in 0..n {
            let w = -m[(i, j)];
            if i != j && w != 0.0 {
                for c in 0..p {
                    u[(i, c)] += w * (x[(j, c)] - x[(i, c)]);
                }
            }
        }
    }
    Ok(u)
}

/// `u_i = -sum_j L_ij x_j`.
pub fn continuous_input(l: &Laplacian, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    protocol(l, x)
}

/// `u^_i = -sum_j L_ij x^_j` over the last broadcast states.
pub fn event_input(l: &Laplacian, xhat: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    protocol(l, xhat)
}

/// `max_{i,j} ||x_i - x_j||`.
pub fn consensus_error(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((x.row(i) - x.row(j)).norm());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub t: f64,
    pub x: DMatrix<f64>,
    /// Last broadcast states; only present in event mode.
    pub xhat: Option<DMatrix<f64>>,
}

impl SystemState {
    pub fn new(x: DMatrix<f64>) -> Self {
        Self {
            t: 0.0,
            x,
            xhat: None,
        }
    }

    /// Event-mode state with every agent broadcasting its current value.
    pub fn broadcasting(x: DMatrix<f64>) -> Self {
        Self {
            t: 0.0,
            xhat: Some(x.clone()),
            x,
        }
    }

    pub fn agent_count(&self) -> usize {
        self.x.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.x.ncols()
    }
}

fn check_step(dt: f64) -> Result<(), DynamicsError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(DynamicsError::InvalidStep(dt))
    }
}

fn check_finite(x: &DMatrix<f64>, t: f64) -> Result<(), DynamicsError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DynamicsError::NonFiniteState { t })
    }
}

/// One classical RK4 step of `x' = sat_h(-L x)`.
pub fn step_continuous(
    state: &SystemState,
    l: &Laplacian,
    h: SaturationLevel,
    dt: f64,
) -> Result<SystemState, DynamicsError> {
    check_step(dt)?;
    let f = |x: &DMatrix<f64>| -> Result<DMatrix<f64>, DynamicsError> {
        let u = continuous_input(l, x)?;
        Ok(u.map(|v| h.clamp(v)))
    };
    let x = &state.x;
    let k1 = f(x)?;
    let k2 = f(&(x + &k1 * (0.5 * dt)))?;
    let k3 = f(&(x + &k2 * (0.5 * dt)))?;
    let k4 = f(&(x + &k3 * dt))?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let t = state.t + dt;
    check_finite(&next, t)?;
    Ok(SystemState {
        t,
        x: next,
        xhat: state.xhat.clone(),
    })
}

/// Advances event-mode dynamics by `dt` with the broadcast states frozen:
/// the inputs are constant, so `x_i(t + dt) = x_i(t) + dt * sat_h(u^_i)`
/// exactly. The caller guarantees no trigger falls inside the step.
pub fn step_event_exact(
    state: &SystemState,
    l: &Laplacian,
    h: SaturationLevel,
    dt: f64,
) -> Result<SystemState, DynamicsError> {
    check_step(dt)?;
    let xhat = state.xhat.as_ref().ok_or(DynamicsError::MissingBroadcast)?;
    let velocity = saturate_states(&event_input(l, xhat)?, h)?;
    let next = &state.x + velocity * dt;
    let t = state.t + dt;
    check_finite(&next, t)?;
    Ok(SystemState {
        t,
        x: next,
        xhat: state.xhat.clone(),
    })
}

/// One output record. `input` holds `u` in continuous mode and `u^` in
/// event mode; `saturated` is the applied `sat_h(input)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub saturated: DMatrix<f64>,
    pub broadcast: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub sample_dt: f64,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    pub fn final_consensus_error(&self) -> f64 {
        self.last().map(|s| consensus_error(&s.x)).unwrap_or(0.0)
    }

    /// CSV with columns `t, x_*, u_*, sat_*`. Agents are numbered from 1; for
    /// `p > 1` each agent contributes `p` columns suffixed `_1 .. _p`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let Some(first) = self.samples.first() else {
            w.flush()?;
            return Ok(());
        };
        let (n, p) = first.x.shape();
        let mut header = vec!["t".to_string()];
        for prefix in ["x", "u", "sat"] {
            for i in 1..=n {
                if p == 1 {
                    header.push(format!("{prefix}_{i}"));
                } else {
                    for l in 1..=p {
                        header.push(format!("{prefix}_{i}_{l}"));
                    }
                }
            }
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(s.t.to_string());
            for m in [&s.x, &s.input, &s.saturated] {
                for i in 0..n {
                    for l in 0..p {
                        rec.push(m[(i, l)].to_string());
                    }
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fixed-step settings for [`simulate_continuous`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousConfig {
    pub t_end: f64,
    pub dt: f64,
    pub sample_dt: f64,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        Self {
            t_end: 30.0,
            dt: 1e-3,
            sample_dt: 0.01,
        }
    }
}

fn continuous_sample(
    l: &Laplacian,
    h: SaturationLevel,
    t: f64,
    x: &DMatrix<f64>,
) -> Result<Sample, DynamicsError> {
    let input = continuous_input(l, x)?;
    let saturated = saturate_states(&input, h)?;
    Ok(Sample {
        t,
        x: x.clone(),
        input,
        saturated,
        broadcast: None,
    })
}

/// Integrates the continuous protocol with RK4 from `x0` over `[0, t_end]`.
/// Samples are taken every `round(sample_dt / dt)` steps plus at `t_end`;
/// the last step is shortened when `t_end` is not a multiple of `dt`.
pub fn simulate_continuous(
    l: &Laplacian,
    h: SaturationLevel,
    x0: &DMatrix<f64>,
    cfg: &ContinuousConfig,
) -> Result<Trajectory, DynamicsError> {
    validate_run(cfg.t_end, cfg.sample_dt)?;
    check_step(cfg.dt)?;
    if x0.nrows() != l.agent_count() {
        return Err(DynamicsError::DimensionMismatch {
            expected: l.agent_count(),
            found: x0.nrows(),
        });
    }
    check_finite(x0, 0.0)?;
    let steps = ((cfg.t_end / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
    let stride = ((cfg.sample_dt / cfg.dt).round() as usize).max(1);

    let mut samples = vec![continuous_sample(l, h, 0.0, x0)?];
    let mut state = SystemState::new(x0.clone());
    for k in 1..=steps {
        let t_next = (k as f64 * cfg.dt).min(cfg.t_end);
        let dt = t_next - state.t;
        state = step_continuous(&state, l, h, dt)?;
        state.t = t_next;
        if k % stride == 0 || k == steps {
            samples.push(continuous_sample(l, h, t_next, &state.x)?);
        }
    }
    Ok(Trajectory {
        sample_dt: stride as f64 * cfg.dt,
        samples,
    })
}

pub(crate) fn validate_run(t_end: f64, sample_dt: f64) -> Result<(), DynamicsError> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(DynamicsError::InvalidConfig(format!(
            "t_end must be positive, got {t_end}"
        )));
    }
    if !(sample_dt > 0.0 && sample_dt.is_finite()) {
        return Err(DynamicsError::InvalidConfig(format!(
            "sample_dt must be positive, got {sample_dt}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::graph::WeightedDigraph;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn h10() -> SaturationLevel {
        SaturationLevel::new(10.0).unwrap()
    }

    fn pair() -> Laplacian {
        Laplacian::from_matrix(&DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])).unwrap()
    }

    fn reference() -> Laplacian {
        Laplacian::from_matrix(&fixtures::reference_laplacian()).unwrap()
    }

    fn reference_x0() -> DMatrix<f64> {
        DMatrix::from_column_slice(7, 1, &fixtures::REFERENCE_INITIAL_STATE)
    }

    #[test]
    fn saturate_examples() {
        assert_eq!(
            saturate(&[11.0, -3.0, -15.0], h10()).unwrap(),
            vec![10.0, -3.0, -10.0]
        );
        assert_eq!(saturate(&[0.0, 0.0], h10()).unwrap(), vec![0.0, 0.0]);
        let inside = [9.99, -10.0, 10.0, 0.5];
        assert_eq!(saturate(&inside, h10()).unwrap(), inside.to_vec());
        assert_eq!(
            saturate(&[f64::NAN], h10()),
            Err(DynamicsError::NonFiniteInput)
        );
        assert!(SaturationLevel::new(0.0).is_err());
        assert!(SaturationLevel::new(-1.0).is_err());
    }

    #[test]
    fn integral_closed_form() {
        let h = h10();
        assert_eq!(h.integral(3.0), 4.5);
        assert_eq!(h.integral(-20.0), 150.0);
        assert_eq!(h.integral(10.0), 50.0);
    }

    #[test]
    fn inputs() {
        let l = pair();
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        let u = continuous_input(&l, &x).unwrap();
        assert_eq!(u.as_slice(), &[2.0, -2.0]);
        let equal = DMatrix::from_element(2, 3, 4.2);
        assert!(continuous_input(&l, &equal)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(event_input(&l, &equal).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(
            continuous_input(&l, &DMatrix::zeros(3, 1)),
            Err(DynamicsError::DimensionMismatch {
                expected: 2,
                found: 3
            })
        ));
    }

    #[test]
    fn reference_input_matches_dense_matvec() {
        let l = reference();
        let x = reference_x0();
        let u = continuous_input(&l, &x).unwrap();
        let raw = fixtures::reference_laplacian();
        for i in 0..7 {
            let mut acc = 0.0;
            for j in 0..7 {
                acc -= raw[(i, j)] * fixtures::REFERENCE_INITIAL_STATE[j];
            }
            assert_abs_diff_eq!(u[(i, 0)], acc, epsilon = 1e-12);
        }
        assert_eq!(event_input(&l, &x).unwrap(), u);
    }

    #[test]
    fn equilibria_are_fixed_points() {
        let l = reference();
        let x = DMatrix::from_element(7, 2, -3.25);
        let s = SystemState::broadcasting(x.clone());
        assert_eq!(step_continuous(&s, &l, h10(), 1e-3).unwrap().x, x);
        assert_eq!(step_event_exact(&s, &l, h10(), 0.5).unwrap().x, x);

        let single = Laplacian::from_matrix(&DMatrix::zeros(1, 1)).unwrap();
        let s = SystemState::new(DMatrix::from_element(1, 1, 7.0));
        assert_eq!(
            step_continuous(&s, &single, h10(), 0.1).unwrap().x[(0, 0)],
            7.0
        );
    }

    #[test]
    fn pair_linear_regime_preserves_sum() {
        // L = [[1,-1],[-1,1]]: x1 + x2 is invariant while unsaturated and the
        // gap decays as exp(-2t).
        let l = pair();
        let mut s = SystemState::new(DMatrix::from_column_slice(2, 1, &[0.0, 2.0]));
        for _ in 0..1000 {
            s = step_continuous(&s, &l, h10(), 1e-3).unwrap();
        }
        assert_abs_diff_eq!(s.x[0] + s.x[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[1] - s.x[0], 2.0 * (-2.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn event_step_is_clamped_linear() {
        // u^ = 15 for the follower of a one-edge chain with x^ gap 15
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let l = WeightedDigraph::from_adjacency(a).unwrap().laplacian();
        let s = SystemState::broadcasting(DMatrix::from_column_slice(2, 1, &[0.0, 15.0]));
        let next = step_event_exact(&s, &l, h10(), 0.1).unwrap();
        assert_abs_diff_eq!(next.x[0], 1.0, epsilon = 1e-15);
        assert_eq!(next.x[1], 15.0);
        assert_eq!(
            step_event_exact(&SystemState::new(s.x.clone()), &l, h10(), 0.1),
            Err(DynamicsError::MissingBroadcast)
        );
        assert_eq!(
            step_event_exact(&s, &l, h10(), 0.0),
            Err(DynamicsError::InvalidStep(0.0))
        );
    }

    #[test]
    fn non_finite_state_is_reported() {
        let s = SystemState::new(DMatrix::from_column_slice(2, 1, &[f64::INFINITY, 0.0]));
        assert!(step_continuous(&s, &pair(), h10(), 0.1).is_err());
    }

    #[test]
    fn continuous_run_samples_on_grid() {
        let traj = simulate_continuous(
            &pair(),
            h10(),
            &DMatrix::from_column_slice(2, 1, &[0.0, 2.0]),
            &ContinuousConfig {
                t_end: 1.0,
                dt: 1e-3,
                sample_dt: 0.1,
            },
        )
        .unwrap();
        assert_eq!(traj.samples.len(), 11);
        for (k, s) in traj.samples.iter().enumerate() {
            assert_abs_diff_eq!(s.t, k as f64 * 0.1, epsilon = 1e-12);
        }
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x_1,x_2,u_1,u_2,sat_1,sat_2\n0,0,2,2,-2,2,-2\n"));
    }

    proptest! {
        #[test]
        fn saturate_is_idempotent_and_bounded(v in prop::collection::vec(-1e6f64..1e6, 1..8), h in 0.01f64..100.0) {
            let h = SaturationLevel::new(h).unwrap();
            let once = saturate(&v, h).unwrap();
            prop_assert!(once.iter().all(|s| s.abs() <= h.value()));
            prop_assert_eq!(saturate(&once, h).unwrap(), once);
        }

        #[test]
        fn event_half_steps_match_full_step(seed in 0u64..500, dt in 1e-4f64..1.0) {
            let mut r = fixtures::rng(seed);
            let l = fixtures::random_irreducible_laplacian(&mut r, 5);
            let mut s = SystemState::broadcasting(fixtures::random_states(&mut r, 5, 2, 10.0));
            s.x += fixtures::random_states(&mut r, 5, 2, 1.0);
            let full = step_event_exact(&s, &l, h10(), dt).unwrap();
            let half = step_event_exact(&step_event_exact(&s, &l, h10(), dt / 2.0).unwrap(), &l, h10(), dt / 2.0).unwrap();
            prop_assert!((full.x - half.x).amax() <= 1e-12 * (1.0 + s.x.amax()));
        }

        #[test]
        fn steps_respect_speed_bound(seed in 0u64..200, dt in 1e-3f64..0.2) {
            let mut r = fixtures::rng(seed);
            let l = fixtures::random_irreducible_laplacian(&mut r, 4);
            let p = 3;
            let h = SaturationLevel::new(2.0).unwrap();
            let s = SystemState::broadcasting(fixtures::random_states(&mut r, 4, p, 20.0));
            let bound = dt * h.value() * (p as f64).sqrt() + 1e-12;
            for next in [step_continuous(&s, &l, h, dt).unwrap(), step_event_exact(&s, &l, h, dt).unwrap()] {
                for i in 0..4 {
                    prop_assert!((next.x.row(i) - s.x.row(i)).norm() <= bound);
                }
            }
        }
    }
}
