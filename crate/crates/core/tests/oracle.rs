mod common;

use common::{build, random_policy};
use std::collections::BTreeSet;
use toteflow_core::bq::{TrajectoryRecord, TRAJECTORY_VERSION};
use toteflow_core::heuristics::HeuristicKind;
use toteflow_core::oracle::{
    average_gap, enumerate_exhaustive, export_trajectories, lower_bound, micro_1, micro_instance, replay, solve_exact,
    solve_with, OracleError, SolveOptions, DEFAULT_NODE_BUDGET,
};
use toteflow_core::sim::{run_episode, run_state, Step, WarehouseState};
use toteflow_core::SystemKind;

#[test]
fn micro_1_optimum_is_four() {
    let r = solve_exact(&micro_1(), DEFAULT_NODE_BUDGET).unwrap();
    assert_eq!(r.z_star, 4);
    assert!(r.proved_optimal);
    assert_eq!(enumerate_exhaustive(&micro_1(), 10_000_000).unwrap(), 4);
    let mut state = replay(&micro_1(), &r.trajectory).unwrap();
    assert!(matches!(state.next_decision().unwrap(), Step::Terminal(m) if m.z_final == 4));
}

#[test]
fn trivial_instances() {
    let one = build(SystemKind::MultiTote2D, 3, &[&[0]], &[(0, 0, 2)], &[(2, 0, 0)], &[(0, 0, 1)]);
    let r = solve_exact(&one, DEFAULT_NODE_BUDGET).unwrap();
    assert_eq!((r.z_star, r.proved_optimal), (2, true));
    let empty = build(SystemKind::RackClimb3D, 3, &[], &[(0, 0, 2)], &[(1, 0, 0)], &[(0, 0, 1)]);
    let r = solve_exact(&empty, DEFAULT_NODE_BUDGET).unwrap();
    assert_eq!((r.z_star, r.trajectory.len(), r.proved_optimal), (0, 0, true));
}

#[test]
fn dynamic_instances_are_rejected() {
    let mut inst = micro_1();
    inst.orders[1].arrival_time = 5.0;
    assert!(matches!(solve_exact(&inst, DEFAULT_NODE_BUDGET), Err(OracleError::DynamicInstance)));
}

#[test]
fn tiny_budget_reports_unproved() {
    let inst = toteflow_core::gen::generate(&toteflow_core::gen::preset("S-1").unwrap()).unwrap();
    let opts = SolveOptions { node_budget: 10, warm_start: false, ..SolveOptions::default() };
    match solve_with(&inst, opts) {
        Ok(r) => assert!(!r.proved_optimal),
        Err(e) => assert!(matches!(e, OracleError::NoSolution)),
    }
}

#[test]
fn lower_bound_examples() {
    let mut state = WarehouseState::reset(micro_1()).unwrap();
    state.next_decision().unwrap();
    assert_eq!(lower_bound(&state), 4);

    let r = solve_exact(&micro_1(), DEFAULT_NODE_BUDGET).unwrap();
    let mut state = WarehouseState::reset(micro_1()).unwrap();
    for rec in &r.trajectory {
        state.next_decision().unwrap();
        if state.z_retrievals() > 0 {
            break;
        }
        state.apply_action(rec.action).unwrap();
    }
    assert!(state.z_retrievals() > 0);
    let lb = lower_bound(&state);
    assert!((3..=4).contains(&lb), "lb {lb}");

    let done = replay(&micro_1(), &r.trajectory).unwrap();
    assert_eq!(lower_bound(&done), done.z_final());
}

/// Along an optimal trajectory the optimal completion is z* itself, and any
/// completion bounds the optimum from above.
#[test]
fn lower_bound_is_admissible() {
    let mut checked = 0;
    for seed in 0..100 {
        let inst = micro_instance(seed);
        let r = solve_exact(&inst, DEFAULT_NODE_BUDGET).unwrap();
        assert!(r.proved_optimal);
        let mut state = WarehouseState::reset(inst.clone()).unwrap();
        for rec in &r.trajectory {
            state.next_decision().unwrap();
            assert!(lower_bound(&state) <= r.z_star, "seed {seed}");
            checked += 1;
            let (ep, _) = run_state(state.clone(), &mut random_policy(seed)).unwrap();
            assert!(lower_bound(&state) <= ep.metrics.z_final);
            state.apply_action(rec.action).unwrap();
        }
    }
    assert!(checked >= 200);
}

#[test]
fn pruning_and_memo_do_not_change_the_optimum() {
    for seed in 0..25 {
        let inst = micro_instance(seed);
        let reference = enumerate_exhaustive(&inst, 50_000_000).unwrap();
        for (memoize, prune, warm_start) in [(true, true, true), (false, true, false), (true, false, false), (true, true, false)] {
            let opts = SolveOptions { memoize, prune, warm_start, ..SolveOptions::default() };
            let r = solve_with(&inst, opts).unwrap();
            assert!(r.proved_optimal, "seed {seed} memo {memoize} prune {prune} warm {warm_start}");
            assert_eq!(r.z_star, reference, "seed {seed} memo {memoize} prune {prune} warm {warm_start}");
        }
    }
}

#[test]
fn oracle_is_a_floor_for_heuristics_on_micro_instances() {
    for seed in 0..40 {
        let inst = micro_instance(seed);
        let r = solve_exact(&inst, DEFAULT_NODE_BUDGET).unwrap();
        let replayed = replay(&inst, &r.trajectory).unwrap();
        assert_eq!(replayed.z_final(), r.z_star);
        for kind in HeuristicKind::ALL {
            let z = run_episode(inst.clone(), &mut kind.build(None), 0).unwrap().metrics.z_final;
            assert!(r.z_star <= z, "seed {seed} {kind:?}");
        }
    }
}

#[test]
fn gap_examples() {
    assert_eq!(average_gap(&[103.0], &[100.0]).unwrap(), 3.0);
    assert_eq!(average_gap(&[7.0, 9.0], &[7.0, 9.0]).unwrap(), 0.0);
    assert_eq!(average_gap(&[110.0, 90.0], &[100.0, 100.0]).unwrap(), 0.0);
    assert!(matches!(average_gap(&[1.0], &[1.0, 2.0]), Err(OracleError::LengthMismatch(1, 2))));
    assert!(matches!(average_gap(&[1.0], &[0.0]), Err(OracleError::ZeroBaseline(0))));
    assert!(matches!(average_gap(&[], &[]), Err(OracleError::Empty)));
}

fn records(bytes: &[u8]) -> (String, Vec<TrajectoryRecord>) {
    let text = std::str::from_utf8(bytes).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    (header, lines.map(|l| serde_json::from_str(l).unwrap()).collect())
}

#[test]
fn export_emits_every_suffix() {
    let (inst, r) = (0..200)
        .map(micro_instance)
        .map(|i| {
            let r = solve_exact(&i, DEFAULT_NODE_BUDGET).unwrap();
            (i, r)
        })
        .find(|(_, r)| r.trajectory.len() == 5)
        .expect("a five-step optimum");
    let mut out = Vec::new();
    let n = export_trajectories(&[(&inst, &r)], &mut out).unwrap();
    let (header, recs) = records(&out);
    assert!(header.contains(TRAJECTORY_VERSION));
    assert_eq!(n, recs.len());
    let starts: BTreeSet<usize> = recs.iter().map(|r| r.subsequence_start).collect();
    assert_eq!(starts.len(), 5);
    for s in starts {
        let suffix: Vec<_> = recs.iter().filter(|r| r.subsequence_start == s).collect();
        assert_eq!(suffix.len(), 5 - s);
        assert!(suffix.iter().zip(s..).all(|(rec, i)| rec.step_index == i && rec.action == r.trajectory[i].action));
    }
}

#[test]
fn export_of_nothing_is_header_only() {
    let mut out = Vec::new();
    assert_eq!(export_trajectories(&[], &mut out).unwrap(), 0);
    let (header, recs) = records(&out);
    assert!(header.contains(TRAJECTORY_VERSION));
    assert!(recs.is_empty());
}

#[test]
fn export_rejects_unproved_results() {
    let mut r = solve_exact(&micro_1(), DEFAULT_NODE_BUDGET).unwrap();
    r.proved_optimal = false;
    let inst = micro_1();
    assert!(matches!(export_trajectories(&[(&inst, &r)], Vec::new()), Err(OracleError::Unproved(_))));
}

#[test]
fn replay_detects_divergence() {
    let mut r = solve_exact(&micro_1(), DEFAULT_NODE_BUDGET).unwrap();
    r.trajectory.truncate(2);
    assert!(matches!(replay(&micro_1(), &r.trajectory), Err(OracleError::Replay(2))));
}
