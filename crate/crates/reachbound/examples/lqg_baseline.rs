//! The LQG comparator: Riccati gains, input projection, and a head-to-head
//! run against the certified-bound policy on one random stable system.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use reachbound::bound::{indicator_bound_sdp, run_recursion, BoundConfig};
use reachbound::eval::{compare, lqg_gains, random_stable_system, CompareConfig, LqgPolicy};
use reachbound::policy::{Controller, PolicyConfig, RbfPolicy};
use reachbound::rng::derive_rng;

fn main() {
    // Scalar sanity: a = 0.5, b = q = r = 1, T = 1 gives K0 = 0.25 by hand.
    let k = lqg_gains(
        &DMatrix::from_element(1, 1, 0.5),
        &DMatrix::identity(1, 1),
        &DMatrix::identity(1, 1),
        &DMatrix::identity(1, 1),
        1,
    )
    .unwrap();
    println!("scalar Riccati check: K0 = {} (hand computation: 0.25)", k[0][(0, 0)]);

    let sys = random_stable_system(2, 2, 42).unwrap();
    println!(
        "\nrandom system: spectral radius {:.3}, controllability rank {}",
        sys.spectral_radius, sys.controllability_rank
    );
    let problem = sys.problem(5).unwrap();

    let lqg = LqgPolicy::from_problem(&problem).unwrap();
    let mut rng: ChaCha8Rng = derive_rng(42, "example-lqg", &[]);
    for x in [0.02, 0.5] {
        let state = DVector::from_vec(vec![x, -x]);
        let u = lqg.act(0, &state, &mut rng).unwrap();
        let norm = ((problem.control.shape() * &u).dot(&u)).sqrt();
        println!("  |x| = {x:.2}: control Q-norm {norm:.4} (cap 0.1)");
    }

    let cfg = BoundConfig::default();
    let indicator = indicator_bound_sdp(&problem.target, 10, &cfg).unwrap();
    let seq = run_recursion(&problem, &indicator, &cfg).unwrap();
    let induced = RbfPolicy::new(problem.clone(), &seq, PolicyConfig::default()).unwrap();

    let report = compare(
        &problem,
        &induced,
        &lqg,
        &CompareConfig { n_init: 20, n_traj: 100, reject_threshold: 0.1, seed: 42 },
    )
    .unwrap();
    println!(
        "\ninduced vs LQG over {} accepted states ({} rejected below 0.1):",
        report.rows.len(),
        report.rejected
    );
    println!(
        "  mean(pi_induced - pi_lqg) = {:+.4} +- {:.4}",
        report.mean_diff, report.diff_std_err
    );
}
