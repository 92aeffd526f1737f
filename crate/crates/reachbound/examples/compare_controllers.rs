//! Shared-noise Monte Carlo comparison of two controllers.
//!
//! Both controllers see the same initial states and the same noise streams,
//! so the per-state rate difference is a paired estimate with no
//! between-arm sampling noise: identical controllers tie exactly, row by
//! row. Here the certified-bound policy meets the grid-oracle policy.

use nalgebra::DMatrix;
use reachbound::bound::{
    indicator_bound_lp, random_centers, run_recursion, BoundConfig, ReachAvoidProblem,
};
use reachbound::eval::{compare, CompareConfig};
use reachbound::geometry::Ellipsoid;
use reachbound::gridoracle::{dp_recursion, Grid};
use reachbound::policy::{GridPolicy, PolicyConfig, RbfPolicy};
use reachbound::rbf::TransitionKernel;
use reachbound::rng::derive_rng;

fn main() {
    let problem = ReachAvoidProblem::new(
        Ellipsoid::new(DMatrix::identity(1, 1), 0.1).unwrap(),
        Ellipsoid::new(DMatrix::identity(1, 1), 1.0).unwrap(),
        Ellipsoid::new(DMatrix::identity(1, 1), 0.1).unwrap(),
        TransitionKernel::linear_gaussian(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.001),
        )
        .unwrap(),
        4,
    )
    .unwrap();

    let cfg = BoundConfig::default();
    let mut rng = derive_rng(11, "centers", &[0]);
    let centers = random_centers(&problem.target, 10, &mut rng).unwrap();
    let indicator = indicator_bound_lp(
        &problem.target,
        &centers,
        &DMatrix::from_element(1, 1, 5e-4),
        &Grid::symmetric(1.0, 1, 80).unwrap(),
        &cfg.solver,
    )
    .unwrap();
    let seq = run_recursion(&problem, &indicator.sum, &cfg).unwrap();
    let induced = RbfPolicy::new(problem.clone(), &seq, PolicyConfig::default()).unwrap();

    let state_grid = Grid::symmetric(1.0, 1, 80).unwrap();
    let control_grid = Grid::symmetric(0.1, 1, 25).unwrap();
    let dp = dp_recursion(&problem, &state_grid, &control_grid, 2_000_000_000).unwrap();
    let oracle = GridPolicy::new(problem.clone(), dp.tables, control_grid).unwrap();

    let report = compare(
        &problem,
        &induced,
        &oracle,
        &CompareConfig { n_init: 20, n_traj: 200, reject_threshold: 0.0, seed: 11 },
    )
    .unwrap();

    println!("{:>9}  {:>8}  {:>8}  {:>8}", "x0", "induced", "oracle", "diff");
    for row in &report.rows {
        println!(
            "{:9.4}  {:8.3}  {:8.3}  {:+8.3}",
            row.x0[0],
            row.rate_a,
            row.rate_b,
            row.rate_a - row.rate_b
        );
    }
    println!(
        "\nmean difference {:+.4} (paired std err {:.4}) over {} states x {} rollouts",
        report.mean_diff,
        report.diff_std_err,
        report.rows.len(),
        report.n_traj
    );
}
