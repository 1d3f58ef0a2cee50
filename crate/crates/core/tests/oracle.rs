mod common;

use std::sync::Arc;

use common::{brute_force_optimum, random_tiny_instance, tiny_oracle_instance};
use fjsp_rl::baselines::{dispatch_solve, exact_solve, random_solve, DispatchRule};
use fjsp_rl::fjsp::{makespan, validate_schedule, Instance};
use fjsp_rl::io::RngStream;

#[test]
fn brute_force_on_hand_checked_cases() {
    let chain = Instance::new(1, vec![vec![vec![(0, 3)], vec![(0, 4)]]]).unwrap();
    assert_eq!(brute_force_optimum(&chain), 7);
    let shared = Instance::new(1, vec![vec![vec![(0, 3)]], vec![vec![(0, 4)]]]).unwrap();
    assert_eq!(brute_force_optimum(&shared), 7);
    let parallel = Instance::new(2, vec![vec![vec![(0, 3), (1, 3)]], vec![vec![(0, 4), (1, 4)]]]).unwrap();
    assert_eq!(brute_force_optimum(&parallel), 4);
}

#[test]
fn tiny_instance_optimum() {
    let inst = Arc::new(tiny_oracle_instance());
    let brute = brute_force_optimum(&inst);
    assert_eq!(brute, 5);
    let r = exact_solve(&inst, 1_000_000);
    assert!(r.optimal);
    assert_eq!(r.makespan, brute);
    assert!(validate_schedule(&inst, &r.schedule).is_empty());
}

#[test]
fn exact_matches_enumeration_and_bounds_other_solvers() {
    let mut rng = RngStream::new(2024, 0);
    for _ in 0..60 {
        let inst = Arc::new(random_tiny_instance(&mut rng, 6));
        let r = exact_solve(&inst, 10_000_000);
        assert!(r.optimal);
        assert_eq!(r.makespan, brute_force_optimum(&inst));
        assert_eq!(makespan(&r.schedule).unwrap(), r.makespan);
        for rule in DispatchRule::ALL {
            assert!(makespan(&dispatch_solve(&inst, rule)).unwrap() >= r.makespan);
        }
        for seed in 0..5 {
            assert!(makespan(&random_solve(&inst, seed)).unwrap() >= r.makespan);
        }
    }
}
