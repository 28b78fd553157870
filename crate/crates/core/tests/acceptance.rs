//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always shown.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;

use satcon::certify::zeno_margin;
use satcon::dynamics::{consensus_error, simulate_continuous, ContinuousConfig, SaturationLevel};
use satcon::event::{run_event_simulation, EventConfig, TriggerRule};
use satcon::fixtures;
use satcon::graph::{pf_decompose, Laplacian};
use satcon::lyapunov::{
    check_post_exit_envelope, decay_report, dissipation_direct, dissipation_pairwise,
    event_potential, max_difference_quotient, max_increase, saturated_potential,
    saturation_inequalities_hold,
};
use satcon::scenario::{Mode, Scenario};
use satcon::spectral::{compute_block_spectral, SpectralData};

const RUNTIME_LIMIT: Duration = Duration::from_secs(5);

/// Consensus error of the reference continuous run at t = 5, recorded from
/// the first verified run. By t = 10 the run sits at round-off level.
const PINNED_CONTINUOUS_ERROR_AT_5: f64 = 1.226_953_605_382_164e-8;
/// Total broadcasts (including the initial one of each agent) of the
/// reference event-triggered run.
const PINNED_TRIGGER_COUNT: usize = 542;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reference(mode: Mode) -> Scenario {
    let mut s = Scenario::reference();
    s.mode = mode;
    s
}

fn continuous_reproduction() -> Outcome {
    let s = reference(Mode::Continuous);
    let start = Instant::now();
    let out = s.run().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let samples = &out.trajectory.samples;
    let final_error = out.summary.final_consensus_error;

    let tail_start = 0.8 * s.t_end;
    let tail: Vec<f64> = samples
        .iter()
        .filter(|x| x.t >= tail_start)
        .map(|x| consensus_error(&x.x))
        .collect();
    let monotone = tail.windows(2).all(|w| w[1] <= w[0]);
    let max_sat = samples
        .iter()
        .map(|x| x.saturated.amax())
        .fold(0.0, f64::max);
    let at_5 = samples
        .iter()
        .find(|x| (x.t - 5.0).abs() < 1e-9)
        .map(|x| consensus_error(&x.x))
        .ok_or("no sample at t = 5")?;
    let pinned = (at_5 - PINNED_CONTINUOUS_ERROR_AT_5).abs() <= 1e-6 * PINNED_CONTINUOUS_ERROR_AT_5;
    check(
        final_error < 1e-2 && monotone && max_sat <= 10.0 && pinned && elapsed < RUNTIME_LIMIT,
        format!(
            "final error {final_error:.3e}, error at t = 5 {at_5:.9e} (pinned {PINNED_CONTINUOUS_ERROR_AT_5:.9e}), \
             tail monotone {monotone}, max |sat| {max_sat}, runtime {elapsed:.2?}"
        ),
    )
}

fn event_reproduction() -> Outcome {
    let s = reference(Mode::Event);
    let start = Instant::now();
    let out = s.run().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let log = out.log.as_ref().ok_or("no event log")?;
    let final_error = out.summary.final_consensus_error;
    let total = log.total_events();

    // broadcasts after t = 0 in the first and last thirds of the run
    let third = s.t_end / 3.0;
    let mut early = 0usize;
    let mut late = 0usize;
    for a in &log.agents {
        early += a.times.iter().filter(|&&t| t > 0.0 && t < third).count();
        late += a.times.iter().filter(|&&t| t >= s.t_end - third).count();
    }
    check(
        final_error < 1e-1 && total == PINNED_TRIGGER_COUNT && early > late && elapsed < RUNTIME_LIMIT,
        format!(
            "final error {final_error:.6e}, {total} broadcasts (pinned {PINNED_TRIGGER_COUNT}), \
             {early} in the first third vs {late} in the last, per-agent counts {:?}, runtime {elapsed:.2?}",
            log.counts()
        ),
    )
}

fn zeno_suite() -> Outcome {
    let s = reference(Mode::Event);
    let prepared = s.prepare().map_err(|e| e.to_string())?;
    let out = s.run_prepared(&prepared).map_err(|e| e.to_string())?;
    let rule = prepared.rule.as_ref().unwrap();
    let mut worst = zeno_margin(out.log.as_ref().unwrap(), rule, prepared.h, 1);
    let mut gaps = out.log.as_ref().unwrap().total_events() - 7;

    let mut rng = fixtures::rng(0x2e40);
    for _ in 0..50 {
        let n = rng.gen_range(2..=8);
        let blocks = rng.gen_range(1..=n.min(3));
        let g = fixtures::random_spanning_tree(&mut rng, n, blocks, 0.3);
        let p = rng.gen_range(1..=2);
        let h = SaturationLevel::new(rng.gen_range(0.5..10.0)).unwrap();
        let alpha = (0..n).map(|_| rng.gen_range(1.0..20.0)).collect();
        let beta = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
        let rule = TriggerRule::new(alpha, beta).unwrap();
        let x0 = fixtures::random_states(&mut rng, n, p, 10.0);
        let cfg = EventConfig {
            t_end: 15.0,
            sample_dt: 0.05,
            ..EventConfig::default()
        };
        let run =
            run_event_simulation(&g.laplacian(), &rule, h, &x0, &cfg).map_err(|e| e.to_string())?;
        worst = worst.min(zeno_margin(&run.log, &rule, h, p));
        gaps += run.log.total_events() - n;
    }
    check(
        worst >= -1e-9,
        format!("{gaps} inter-event gaps over 51 runs, smallest gap minus bound {worst:.3e}"),
    )
}

fn spectral_certificates() -> Outcome {
    let mut rng = fixtures::rng(0x5bec);
    let mut worst_irreducible = f64::INFINITY;
    let mut failures = Vec::new();
    for k in 0..100 {
        let n = rng.gen_range(2..=10);
        let l = fixtures::random_irreducible_laplacian(&mut rng, n);
        let s = SpectralData::compute(l.matrix()).map_err(|e| e.to_string())?;
        let c = &s.certificate;
        worst_irreducible = worst_irreducible
            .min(c.disagreement_dominates_gram)
            .min(c.symmetric_dominates_disagreement);
        for (name, _, ok) in s.certificate_checks() {
            if !ok {
                failures.push(format!("irreducible #{k}: {name}"));
            }
        }
    }
    let mut worst_q = f64::INFINITY;
    let mut worst_leader = f64::INFINITY;
    for k in 0..100 {
        let n = rng.gen_range(3..=10);
        let blocks = rng.gen_range(2..=n.min(4));
        let g = fixtures::random_spanning_tree(&mut rng, n, blocks, 0.3);
        let pf = pf_decompose(&g.laplacian()).map_err(|e| e.to_string())?;
        let bs = compute_block_spectral(&pf).map_err(|e| e.to_string())?;
        for b in &bs.blocks[..bs.blocks.len() - 1] {
            worst_q = worst_q.min(b.symmetric_min_eigenvalue);
        }
        worst_leader = worst_leader.min(bs.leader.inequality_margin);
        for (name, _, ok) in bs.certificate_checks() {
            if !ok {
                failures.push(format!("spanning tree #{k}: {name}"));
            }
        }
    }
    check(
        failures.is_empty(),
        format!(
            "irreducible min margin {worst_irreducible:.3e}; follower min lambda(Q) {worst_q:.3e}, \
             leader inequality margin {worst_leader:.3e}; failures {failures:?}"
        ),
    )
}

fn lyapunov_monotonicity() -> Outcome {
    let mut rng = fixtures::rng(0x1a9);
    let mut worst_rate = f64::NEG_INFINITY;
    let mut worst_identity: f64 = 0.0;
    let mut max_dissipation = f64::NEG_INFINITY;
    for _ in 0..20 {
        let n = rng.gen_range(3..=8);
        let p = rng.gen_range(1..=2);
        let l = fixtures::random_irreducible_laplacian(&mut rng, n);
        let s = SpectralData::build(l.matrix()).map_err(|e| e.to_string())?;
        let h = SaturationLevel::new(rng.gen_range(0.5..5.0)).unwrap();
        let x0 = fixtures::random_states(&mut rng, n, p, 10.0);
        let cfg = ContinuousConfig {
            t_end: 10.0,
            dt: 1e-3,
            sample_dt: 1e-3,
        };
        let traj = simulate_continuous(&l, h, &x0, &cfg).map_err(|e| e.to_string())?;
        let times: Vec<f64> = traj.samples.iter().map(|x| x.t).collect();
        let mut values = Vec::with_capacity(times.len());
        for smp in &traj.samples {
            values.push(
                saturated_potential(&l, &s.left_vector, h, &smp.x).map_err(|e| e.to_string())?,
            );
            let a = dissipation_pairwise(l.matrix(), &s.left_vector, &smp.saturated);
            let b = dissipation_direct(l.matrix(), &s.left_vector, &smp.saturated);
            worst_identity = worst_identity.max((a - b).abs());
            max_dissipation = max_dissipation.max(a);
        }
        worst_rate = worst_rate.max(max_difference_quotient(&times, &values));
    }

    let mut worst_step = f64::NEG_INFINITY;
    for _ in 0..20 {
        let n = rng.gen_range(3..=8);
        let p = rng.gen_range(1..=2);
        let l = fixtures::random_irreducible_laplacian(&mut rng, n);
        let s = SpectralData::build(l.matrix()).map_err(|e| e.to_string())?;
        let h = SaturationLevel::new(rng.gen_range(0.5..5.0)).unwrap();
        let rule =
            TriggerRule::uniform(n, rng.gen_range(1.0..20.0), rng.gen_range(0.2..2.0)).unwrap();
        let x0 = fixtures::random_states(&mut rng, n, p, 10.0);
        let cfg = EventConfig {
            t_end: 10.0,
            sample_dt: 0.01,
            ..EventConfig::default()
        };
        let run = run_event_simulation(&l, &rule, h, &x0, &cfg).map_err(|e| e.to_string())?;
        let mut values = Vec::with_capacity(run.trajectory.samples.len());
        for smp in &run.trajectory.samples {
            values.push(event_potential(&s, &rule, h, &smp.x, smp.t).map_err(|e| e.to_string())?);
            let a = dissipation_pairwise(l.matrix(), &s.left_vector, &smp.saturated);
            let b = dissipation_direct(l.matrix(), &s.left_vector, &smp.saturated);
            worst_identity = worst_identity.max((a - b).abs());
        }
        worst_step = worst_step.max(max_increase(&values));
    }
    check(
        worst_rate <= 1e-6
            && worst_step <= 1e-6
            && worst_identity <= 1e-10
            && max_dissipation <= 0.0,
        format!(
            "max dV/dt {worst_rate:.3e}, max W increase {worst_step:.3e}, \
             dissipation identity error {worst_identity:.3e}"
        ),
    )
}

fn post_exit_decay() -> Outcome {
    let mut rng = fixtures::rng(0xdeca);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut latest_exit: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..20 {
        let n = rng.gen_range(3..=8);
        let p = rng.gen_range(1..=2);
        let l = fixtures::random_irreducible_laplacian(&mut rng, n);
        let s = SpectralData::build(l.matrix()).map_err(|e| e.to_string())?;
        let h = SaturationLevel::new(rng.gen_range(1.0..5.0)).unwrap();
        let x0 = fixtures::random_states(&mut rng, n, p, 10.0);
        let traj = simulate_continuous(&l, h, &x0, &ContinuousConfig::default())
            .map_err(|e| e.to_string())?;
        let agents: Vec<usize> = (0..n).collect();
        let rep = decay_report(&traj, &s, h, &agents).map_err(|e| e.to_string())?;
        latest_exit = latest_exit.max(rep.saturation_exit_time);
        let env = check_post_exit_envelope(&traj, &s, &rep).ok_or("no theory rate")?;
        checked += env.samples_checked;
        worst_excess = worst_excess.max(env.worst_excess);
    }
    check(
        worst_excess <= 0.0,
        format!("latest exit time {latest_exit:.2}, {checked} samples checked, worst excess over envelope {worst_excess:.3e}"),
    )
}

fn saturation_properties() -> Outcome {
    let mut rng = fixtures::rng(0x3);
    let mut inequality_passes = 0;
    for _ in 0..10_000 {
        let h = SaturationLevel::new(rng.gen_range(0.01..50.0)).unwrap();
        let scale = 3.0 * h.value();
        let a = rng.gen_range(-scale..scale);
        let b = rng.gen_range(-scale..scale);
        if saturation_inequalities_hold(a, b, h) {
            inequality_passes += 1;
        }
    }

    let grid = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0];
    let h = SaturationLevel::new(1.0).unwrap();
    let mut states = 0;
    let mut agreement_failures = 0;
    for _ in 0..20 {
        let n = rng.gen_range(2..=4);
        let blocks = rng.gen_range(1..=n.min(3));
        let g = fixtures::random_spanning_tree(&mut rng, n, blocks, 0.4);
        let l = g.laplacian();
        for code in 0..grid.len().pow(n as u32) {
            let mut c = code;
            let x = DMatrix::from_fn(n, 1, |_, _| {
                let v = grid[c % grid.len()];
                c /= grid.len();
                v
            });
            let y = satcon::dynamics::saturate_states(
                &satcon::dynamics::continuous_input(&l, &x).unwrap(),
                h,
            )
            .unwrap();
            let inputs_agree = (1..n).all(|i| y[(i, 0)] == y[(0, 0)]);
            let states_agree = (1..n).all(|i| x[(i, 0)] == x[(0, 0)]);
            states += 1;
            if inputs_agree != states_agree {
                agreement_failures += 1;
            }
        }
    }
    check(
        inequality_passes == 10_000 && agreement_failures == 0,
        format!("{inequality_passes}/10000 saturation inequality checks, {agreement_failures} mismatches over {states} grid states"),
    )
}

/// Fixed-step RK4 of `x' = sat_h(-L x^)` that replays the broadcast instants of
/// an event log, rebroadcasting its own state at each of them.
fn replay_rk4(
    l: &Laplacian,
    h: SaturationLevel,
    x0: &DMatrix<f64>,
    triggers: &[(f64, usize)],
    t_end: f64,
    dt: f64,
) -> DMatrix<f64> {
    let rhs = |xhat: &DMatrix<f64>| (-(l.matrix() * xhat)).map(|v| v.clamp(-h.value(), h.value()));
    let mut x = x0.clone();
    let mut xhat = x0.clone();
    let mut t = 0.0;
    let mut next = 0;
    loop {
        while next < triggers.len() && triggers[next].0 <= t {
            let i = triggers[next].1;
            let row = x.row(i).into_owned();
            xhat.set_row(i, &row);
            next += 1;
        }
        if t >= t_end {
            break;
        }
        let mut stop = (t + dt).min(t_end);
        if next < triggers.len() {
            stop = stop.min(triggers[next].0);
        }
        let step = stop - t;
        let k1 = rhs(&xhat);
        let k2 = rhs(&xhat);
        let k3 = rhs(&xhat);
        let k4 = rhs(&xhat);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
        t = stop;
    }
    x
}

fn oracle_equivalence() -> Outcome {
    let s = reference(Mode::Event);
    let prepared = s.prepare().map_err(|e| e.to_string())?;
    let rule = prepared.rule.as_ref().unwrap();
    let cfg = EventConfig {
        t_end: 10.0,
        sample_dt: 0.01,
        ..EventConfig::default()
    };
    let run = run_event_simulation(&prepared.laplacian, rule, prepared.h, &prepared.x0, &cfg)
        .map_err(|e| e.to_string())?;
    let mut triggers: Vec<(f64, usize)> = run
        .log
        .agents
        .iter()
        .enumerate()
        .flat_map(|(i, a)| a.times.iter().skip(1).map(move |&t| (t, i)))
        .collect();
    triggers.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let reference = replay_rk4(
        &prepared.laplacian,
        prepared.h,
        &prepared.x0,
        &triggers,
        10.0,
        1e-5,
    );
    let exact = &run.trajectory.last().unwrap().x;
    let err = (exact - &reference).amax();
    check(
        err < 1e-4,
        format!(
            "max |x_exact - x_rk4| at t = 10: {err:.3e} over {} broadcasts",
            triggers.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 continuous reference run", continuous_reproduction),
        ("2 event-triggered reference run", event_reproduction),
        ("3 minimum inter-event time", zeno_suite),
        ("4 spectral certificates", spectral_certificates),
        ("5 Lyapunov monotonicity", lyapunov_monotonicity),
        ("6 post-saturation exponential bound", post_exit_decay),
        (
            "7 saturation inequalities and input agreement",
            saturation_properties,
        ),
        (
            "8 exact event integration vs RK4 replay",
            oracle_equivalence,
        ),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
