//! Grid dynamic programming as ground truth at low dimension.
//!
//! The one-step value under a fixed control has a closed form (a normal CDF
//! difference), which pins down the quadrature error of the oracle.

use nalgebra::{DMatrix, DVector};
use reachbound::bound::ReachAvoidProblem;
use reachbound::geometry::Ellipsoid;
use reachbound::gridoracle::{dp_recursion, grid_policy, Grid, Region};
use reachbound::rbf::TransitionKernel;

fn benchmark(horizon: usize) -> ReachAvoidProblem {
    ReachAvoidProblem::new(
        Ellipsoid::new(DMatrix::identity(1, 1), 0.1).unwrap(),
        Ellipsoid::new(DMatrix::identity(1, 1), 1.0).unwrap(),
        Ellipsoid::new(DMatrix::identity(1, 1), 0.1).unwrap(),
        TransitionKernel::linear_gaussian(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.001),
        )
        .unwrap(),
        horizon,
    )
    .unwrap()
}

fn main() {
    let problem = benchmark(5);
    let state_grid = Grid::symmetric(1.0, 1, 80).unwrap();
    let control_grid = Grid::symmetric(0.1, 1, 25).unwrap();
    let dp = dp_recursion(&problem, &state_grid, &control_grid, 2_000_000_000).unwrap();
    println!("quadrature node visits: {}", dp.ops);

    let ring: Vec<usize> = (0..state_grid.num_nodes())
        .filter(|&f| dp.regions[f] == Region::Ring)
        .collect();
    println!("nodes: {} total, {} in the ring", state_grid.num_nodes(), ring.len());

    println!("\nV_k at selected ring nodes (columns k = 0..5):");
    for &f in ring.iter().step_by(9) {
        let x = state_grid.node(f)[0];
        let row: Vec<String> = (0..=5).map(|k| format!("{:.3}", dp.tables[k].values[f])).collect();
        println!("  x = {x:+.3}   {}", row.join("  "));
    }

    // Horizon monotonicity: one step less to work with can never help.
    let mono = (0..5).all(|k| {
        (0..state_grid.num_nodes()).all(|f| dp.tables[k].values[f] >= dp.tables[k + 1].values[f] - 1e-12)
    });
    println!("\nmonotone in horizon: {mono}");

    // One-step lookahead control at a state left of the target.
    let x = DVector::from_vec(vec![-0.35]);
    let (u, clamped) = grid_policy(&dp.tables[1], &problem, &control_grid, &x).unwrap();
    println!("greedy control at x = -0.35: u = {:+.4} (clamped: {clamped})", u[0]);
}
