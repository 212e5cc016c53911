//! Planner-engine-oracle equivalence on randomized instances.
//!
//! The planner's forecast (II, R, path), the engine's actual execution, and
//! an independent brute-force replay must agree exactly when coefficients
//! are exact and memory is unconstrained. This is the anti-drift check for
//! the idleness-computation loop and the execution machinery behind it.

mod common;

use common::{oracle_replay, random_instance};
use mixsim_core::allocator::SchedulerParams;
use mixsim_core::engine::run_pinned;

const TOL: f64 = 1e-9;

fn exact_params() -> SchedulerParams {
    SchedulerParams {
        max_batch: 1,
        latency_noise: 0.0,
        ..Default::default()
    }
}

#[test]
fn planner_engine_oracle_agree_on_random_instances() {
    let mut checked = 0usize;
    for seed in 0..300u64 {
        let (tasks, assignment, cluster) = random_instance(seed, 10, 4, 2);
        let result = run_pinned(&cluster, &tasks, &exact_params(), seed, &assignment).unwrap();
        let oracle = oracle_replay(&tasks, &assignment, &cluster);

        for (record, expect) in result.tasks.iter().zip(oracle.iter()) {
            assert_eq!(record.id as usize, expect.idx);
            assert!(
                (record.planned_ii - expect.ii).abs() <= TOL,
                "seed {seed} task {}: planner II {} vs oracle {}",
                record.id,
                record.planned_ii,
                expect.ii
            );
            assert!(
                (record.planned_response - expect.response).abs() <= TOL,
                "seed {seed} task {}: planner R {} vs oracle {}",
                record.id,
                record.planned_response,
                expect.response
            );
            let actual = record.actual_path.as_ref().expect("actual path recorded");
            for (s, (&got, &want)) in actual.forward.iter().zip(expect.forward.iter()).enumerate() {
                assert!(
                    (got.0 - want.0).abs() <= TOL && (got.1 - want.1).abs() <= TOL,
                    "seed {seed} task {} stage {s}: engine forward {:?} vs oracle {:?}",
                    record.id,
                    got,
                    want
                );
            }
            match (&actual.backward, &expect.backward) {
                (Some(got), Some(want)) => {
                    for (s, (&g, &w)) in got.iter().zip(want.iter()).enumerate() {
                        assert!(
                            (g.0 - w.0).abs() <= TOL && (g.1 - w.1).abs() <= TOL,
                            "seed {seed} task {} stage {s}: engine backward {:?} vs oracle {:?}",
                            record.id,
                            g,
                            w
                        );
                    }
                }
                (None, None) => {}
                other => panic!("seed {seed} task {}: backward mismatch {other:?}", record.id),
            }
            checked += 1;
        }
        result.verify_invariants().unwrap();
    }
    assert!(checked > 500, "exercised only {checked} tasks");
}

#[test]
fn planned_paths_match_actual_under_exact_execution() {
    for seed in 300..400u64 {
        let (tasks, assignment, cluster) = random_instance(seed, 8, 3, 2);
        let result = run_pinned(&cluster, &tasks, &exact_params(), seed, &assignment).unwrap();
        for record in &result.tasks {
            let planned = record.planned_path.as_ref().expect("plans recorded");
            let actual = record.actual_path.as_ref().expect("actual recorded");
            for (p, a) in planned.forward.iter().zip(actual.forward.iter()) {
                assert!(
                    (p.0 - a.0).abs() <= TOL && (p.1 - a.1).abs() <= TOL,
                    "seed {seed} task {}: planned {:?} vs actual {:?}",
                    record.id,
                    p,
                    a
                );
            }
        }
    }
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let (tasks, assignment, cluster) = random_instance(42, 10, 3, 2);
    let a = run_pinned(&cluster, &tasks, &exact_params(), 7, &assignment).unwrap();
    let b = run_pinned(&cluster, &tasks, &exact_params(), 7, &assignment).unwrap();
    let to_bytes = |r: &mixsim_core::engine::SimResult| {
        let mut buf = Vec::new();
        r.write_jsonl(&mut buf).unwrap();
        buf
    };
    assert_eq!(to_bytes(&a), to_bytes(&b));
}

#[test]
fn hand_stepped_far_dependency_fixture() {
    // One node, one stage. A training task's backward occupies the stage;
    // a following inference task must fit after it, and the backward time
    // inside the serving gap cancels out of II.
    use mixsim_core::workload::{Task, TaskKind};
    let cluster = common::unconstrained_cluster(1, 1, 1e-4);
    // eta_f = 1e-4, eta_b = 1.35e-4. Training task: l=100 -> fwd 1.0s, bwd 1.35s.
    let tasks = vec![
        Task {
            id: 0,
            kind: TaskKind::Training,
            arrival_time: 0.0,
            query_length: 100,
            batch_size: 1,
            output_length: 0,
            slo_deadline: None,
            release_dep: None,
            planned_path: None,
            actual_path: None,
        },
        Task {
            id: 1,
            kind: TaskKind::Inference,
            arrival_time: 0.5,
            query_length: 100,
            batch_size: 1,
            output_length: 0,
            slo_deadline: None,
            release_dep: None,
            planned_path: None,
            actual_path: None,
        },
    ];
    let result = run_pinned(&cluster, &tasks, &exact_params(), 0, &[0, 0]).unwrap();
    let train = &result.tasks[0];
    let inf = &result.tasks[1];
    // Training: forward [0, 1], backward [1, 2.35].
    let tb = train.actual_path.as_ref().unwrap().backward.as_ref().unwrap()[0];
    assert!((tb.0 - 1.0).abs() <= TOL && (tb.1 - 2.35).abs() <= TOL);
    // Inference arrives at 0.5; planned [0.5+, 1.5+] collides with the
    // backward, so it runs at 2.35. Gap after the training forward is
    // 2.35 - 1.0, fully filled by the 1.35s backward: II = 0.
    let fwd = inf.actual_path.as_ref().unwrap().forward[0];
    assert!((fwd.0 - 2.35).abs() <= TOL);
    assert!((inf.planned_ii - 0.0).abs() <= TOL);
    assert!((inf.planned_response - (3.35 - 0.5)).abs() <= TOL);

    let oracle = oracle_replay(&tasks, &[0, 0], &cluster);
    assert!((oracle[1].ii - 0.0).abs() <= TOL);
    assert!((oracle[1].response - inf.planned_response).abs() <= TOL);
}
