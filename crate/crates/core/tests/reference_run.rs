use nalgebra::DMatrix;
use proptest::prelude::*;

use satcon::certify::{analyze, certify};
use satcon::dynamics::{consensus_error, simulate_continuous, ContinuousConfig, SaturationLevel};
use satcon::fixtures;
use satcon::graph::WeightedDigraph;
use satcon::lyapunov::{
    block_values, check_post_exit_envelope, decay_report, max_increase, saturation_exit_time,
};
use satcon::scenario::Mode;
use satcon::Scenario;

#[test]
fn block_sum_is_nonincreasing_after_exit() {
    let s = Scenario::reference();
    let prepared = s.prepare().unwrap();
    let analysis = analyze(&prepared.graph).unwrap();
    let pf = analysis.pf.as_ref().unwrap();
    let bs = analysis.blocks.as_ref().unwrap();
    let out = s.run_prepared(&prepared).unwrap();
    let all: Vec<usize> = (0..7).collect();
    let exit = saturation_exit_time(&out.trajectory, prepared.h, &all).unwrap();
    assert!(exit > 0.0 && exit < 5.0);

    let sums: Vec<f64> = out
        .trajectory
        .samples
        .iter()
        .filter(|x| x.t >= exit)
        .map(|x| {
            block_values(&prepared.laplacian, pf, bs, prepared.h, &x.x)
                .unwrap()
                .iter()
                .sum()
        })
        .collect();
    assert!(sums.len() > 100);
    assert!(
        max_increase(&sums) <= 1e-12 * sums[0].max(1.0),
        "block sum increased after exit"
    );
}

#[test]
fn closed_block_stays_inside_the_theoretical_envelope() {
    let s = Scenario::reference();
    let prepared = s.prepare().unwrap();
    let analysis = analyze(&prepared.graph).unwrap();
    let pf = analysis.pf.as_ref().unwrap();
    let closed = analysis.closed_block.as_ref().unwrap();
    let out = s.run_prepared(&prepared).unwrap();
    let agents = pf.block_agents(pf.block_count() - 1).to_vec();
    assert_eq!(agents, vec![4, 5, 6]);
    let rep = decay_report(&out.trajectory, closed, prepared.h, &agents).unwrap();
    let env = check_post_exit_envelope(&out.trajectory, closed, &rep).unwrap();
    assert!(env.samples_checked > 1000);
    assert!(env.passed(), "worst excess {}", env.worst_excess);
    assert!(-rep.fitted_rate.unwrap() >= rep.theory_rate.unwrap());
}

#[test]
fn both_modes_certify_on_the_reference_scenario() {
    for mode in [Mode::Continuous, Mode::Event] {
        let mut s = Scenario::reference();
        s.mode = mode;
        let prepared = s.prepare().unwrap();
        let analysis = analyze(&prepared.graph).unwrap();
        let out = s.run_prepared(&prepared).unwrap();
        let report = certify(&analysis, &prepared, mode, &out).unwrap();
        let failed: Vec<_> = report
            .checks
            .iter()
            .filter(|c| !c.passed && !c.diagnostic)
            .collect();
        assert!(report.passed, "{mode:?}: {failed:?}");
    }
}

#[test]
fn consensus_start_exits_immediately() {
    let l = WeightedDigraph::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])
        .unwrap()
        .laplacian();
    let h = SaturationLevel::new(1.0).unwrap();
    let x0 = DMatrix::from_element(2, 1, 4.0);
    let cfg = ContinuousConfig {
        t_end: 1.0,
        dt: 1e-2,
        sample_dt: 0.1,
    };
    let traj = simulate_continuous(&l, h, &x0, &cfg).unwrap();
    assert_eq!(saturation_exit_time(&traj, h, &[0, 1]), Some(0.0));
    assert!(traj.samples.iter().all(|s| consensus_error(&s.x) == 0.0));
}

#[test]
fn single_agent_exits_immediately() {
    let l = WeightedDigraph::from_rows(&[vec![0.0]])
        .unwrap()
        .laplacian();
    let h = SaturationLevel::new(1.0).unwrap();
    let x0 = DMatrix::from_element(1, 2, -3.0);
    let cfg = ContinuousConfig {
        t_end: 1.0,
        dt: 1e-2,
        sample_dt: 0.1,
    };
    let traj = simulate_continuous(&l, h, &x0, &cfg).unwrap();
    assert_eq!(saturation_exit_time(&traj, h, &[0]), Some(0.0));
    assert_eq!(traj.last().unwrap().x, x0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenarios_are_deterministic_and_bounded(seed in 0u64..10_000, event in any::<bool>()) {
        let mut rng = fixtures::rng(seed);
        let n = 2 + (seed as usize % 5);
        let blocks = 1 + (seed as usize % n.min(3));
        let g = fixtures::random_spanning_tree(&mut rng, n, blocks, 0.4);
        let x0 = fixtures::random_states(&mut rng, n, 1, 5.0);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| g.adjacency()[(i, j)]).collect()).collect();
        let text = serde_json::json!({
            "adjacency": rows,
            "h": 1.5,
            "x0": x0.column(0).iter().collect::<Vec<_>>(),
            "mode": if event { "event" } else { "continuous" },
            "rule": {"alpha": 2.0, "beta": 0.5},
            "t_end": 4.0,
            "dt": 1e-3,
            "sample_dt": 0.05,
        })
        .to_string();
        let s = Scenario::from_json(&text).unwrap();
        let a = s.run().unwrap();
        let b = s.run().unwrap();
        prop_assert_eq!(&a.trajectory, &b.trajectory);
        prop_assert_eq!(&a.log, &b.log);
        for x in &a.trajectory.samples {
            prop_assert!(x.saturated.amax() <= 1.5);
        }
        if !event {
            prop_assert!(a.summary.final_consensus_error <= consensus_error(&x0) + 1e-12);
        }
    }
}
