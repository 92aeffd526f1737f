//! The dense conic solver on its own: a mixed SDP/LP instance stated in
//! inequality form, solved, then re-verified without trusting the solver.

use nalgebra::DMatrix;
use reachbound::sdpsolver::{ConicProgram, LinearRow, PsdBlock, SolverConfig};

fn main() {
    // minimize  t + s
    // s.t.      [[t, 1], [1, t]] PSD      (forces t >= 1)
    //           s >= 0, t + s >= 2.5      (forces s >= 1.5 at the optimum)
    let prog = ConicProgram {
        num_vars: 2,
        cost: vec![1.0, 1.0],
        blocks: vec![PsdBlock {
            side: 2,
            f0: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            coeffs: vec![(0, DMatrix::identity(2, 2))],
        }],
        rows: vec![
            LinearRow { g0: 0.0, coeffs: vec![(1, 1.0)] },
            LinearRow { g0: -2.5, coeffs: vec![(0, 1.0), (1, 1.0)] },
        ],
    };
    prog.validate().unwrap();

    let cfg = SolverConfig::default();
    let sol = prog.solve(&cfg).unwrap();
    println!("status      {:?}", sol.status);
    println!("objective   {:.9} (analytic optimum 2.5)", sol.objective);
    println!("t, s        {:.9}, {:.9}", sol.x[0], sol.x[1]);
    println!("iterations  {}", sol.iterations);
    println!("gap         {:.2e}", sol.duality_gap);
    println!("residuals   primal {:.2e}, dual {:.2e}", sol.primal_residual, sol.dual_residual);

    // Independent KKT audit: block eigenvalues, row values, dual residual,
    // all recomputed from the raw program data.
    let report = prog.verify(&sol, &cfg);
    println!("verify      clean = {}", report.clean);
    println!("  block min eigs {:?}", report.block_min_eigs);
    println!("  min row value  {:.2e}", report.min_row_value);
    println!("  dual residual  {:.2e}", report.dual_residual);
    println!("  gap            {:.2e}", report.gap);
}
