use nalgebra::DMatrix;

use super::*;
use crate::errors::Error;
use crate::rng::derive_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> SolverConfig {
    SolverConfig::default()
}

/// min t subject to [[t, 1], [1, t]] PSD; the optimum is t = 1.
fn analytic_sdp() -> ConicProgram {
    let f0 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let ft = DMatrix::identity(2, 2);
    ConicProgram {
        num_vars: 1,
        cost: vec![1.0],
        blocks: vec![PsdBlock {
            side: 2,
            f0,
            coeffs: vec![(0, ft)],
        }],
        rows: vec![],
    }
}

#[test]
fn analytic_sdp_optimum() {
    let sol = analytic_sdp().solve(&cfg()).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!((sol.x[0] - 1.0).abs() <= 1e-6, "t* = {}", sol.x[0]);
    assert!((sol.objective - 1.0).abs() <= 1e-6);
}

#[test]
fn small_lp_optimum() {
    // min x1 + x2 s.t. x >= 0, x1 + x2 >= 1; optimum 1.
    let prog = ConicProgram {
        num_vars: 2,
        cost: vec![1.0, 1.0],
        blocks: vec![],
        rows: vec![
            LinearRow { g0: 0.0, coeffs: vec![(0, 1.0)] },
            LinearRow { g0: 0.0, coeffs: vec![(1, 1.0)] },
            LinearRow { g0: -1.0, coeffs: vec![(0, 1.0), (1, 1.0)] },
        ],
    };
    let sol = prog.solve(&cfg()).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!((sol.objective - 1.0).abs() <= 1e-6, "obj {}", sol.objective);
}

#[test]
fn infeasible_rows_are_detected() {
    // x - 1 >= 0 and -x - 1 >= 0 cannot hold together.
    let prog = ConicProgram {
        num_vars: 1,
        cost: vec![1.0],
        blocks: vec![],
        rows: vec![
            LinearRow { g0: -1.0, coeffs: vec![(0, 1.0)] },
            LinearRow { g0: -1.0, coeffs: vec![(0, -1.0)] },
        ],
    };
    let sol = prog.solve(&cfg()).unwrap();
    assert_eq!(sol.status, SolveStatus::Infeasible);
}

#[test]
fn infeasible_psd_block_is_detected() {
    // [[x, 1], [1, -x]] can never be PSD: the diagonal forces x >= 0 and
    // -x >= 0, so x = 0, leaving determinant -1.
    let prog = ConicProgram {
        num_vars: 1,
        cost: vec![0.5],
        blocks: vec![PsdBlock {
            side: 2,
            f0: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            coeffs: vec![(0, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]))],
        }],
        rows: vec![],
    };
    let sol = prog.solve(&cfg()).unwrap();
    assert_eq!(sol.status, SolveStatus::Infeasible);
}

fn rand_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&g + g.transpose()) * 0.5
}

fn rand_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose() + DMatrix::identity(n, n) * 0.3
}

/// Random program with known strictly feasible primal and dual points, so an
/// optimum exists and the solver has no excuse.
fn random_feasible_program(seed: u64) -> ConicProgram {
    let mut rng = derive_rng(seed, "sdp-random", &[]);
    let num_vars = 6;
    let sides = [3usize, 4];
    let x0: Vec<f64> = (0..num_vars).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut blocks = Vec::new();
    let mut duals = Vec::new();
    for &side in &sides {
        let coeffs: Vec<(usize, DMatrix<f64>)> =
            (0..num_vars).map(|k| (k, rand_sym(&mut rng, side))).collect();
        let mut f0 = rand_spd(&mut rng, side);
        for (k, c) in &coeffs {
            f0 -= c * x0[*k];
        }
        duals.push(rand_spd(&mut rng, side));
        blocks.push(PsdBlock { side, f0, coeffs });
    }

    let mut rows = Vec::new();
    let mut row_duals = Vec::new();
    for _ in 0..3 {
        let coeffs: Vec<(usize, f64)> =
            (0..num_vars).map(|k| (k, rng.random_range(-1.0..1.0))).collect();
        let slack: f64 = rng.random_range(0.2..1.0);
        let g0 = slack - coeffs.iter().map(|&(k, g)| g * x0[k]).sum::<f64>();
        row_duals.push(rng.random_range(0.2..1.0));
        rows.push(LinearRow { g0, coeffs });
    }

    let mut cost = vec![0.0f64; num_vars];
    for (b, blk) in blocks.iter().enumerate() {
        for (k, c) in &blk.coeffs {
            cost[*k] += frob_inner(c, &duals[b]);
        }
    }
    for (r, row) in rows.iter().enumerate() {
        for (k, g) in &row.coeffs {
            cost[*k] += g * row_duals[r];
        }
    }

    ConicProgram { num_vars, cost, blocks, rows }
}

#[test]
fn random_programs_satisfy_kkt() {
    let c = cfg();
    for seed in 0..20u64 {
        let prog = random_feasible_program(seed);
        let sol = prog.solve(&c).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "seed {seed}");
        let report = prog.verify(&sol, &c);
        assert!(
            report.clean,
            "seed {seed}: dual res {:.2e}, gap {:.2e}, min eig {:?}",
            report.dual_residual, report.gap, report.block_min_eigs
        );
        assert!(report.dual_residual <= 1e-7, "seed {seed}");
        assert!(report.gap <= 1e-7, "seed {seed}");
        for &e in &report.block_min_eigs {
            assert!(e >= -1e-7, "seed {seed}: block eig {e}");
        }
        assert!(report.min_row_value >= -1e-7, "seed {seed}");
    }
}

#[test]
fn solutions_are_deterministic() {
    let prog = random_feasible_program(99);
    let a = prog.solve(&cfg()).unwrap();
    let b = prog.solve(&cfg()).unwrap();
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    for (xa, xb) in a.x.iter().zip(&b.x) {
        assert_eq!(xa.to_bits(), xb.to_bits());
    }
    assert_eq!(a.iterations, b.iterations);
}

#[test]
fn objective_invariant_under_block_permutation() {
    let prog = random_feasible_program(7);
    let sol = prog.solve(&cfg()).unwrap();

    // Reverse block order and apply a symmetric row/column permutation inside
    // the first block; the program is unchanged mathematically.
    let mut permuted = prog.clone();
    permuted.blocks.reverse();
    let blk = &mut permuted.blocks[1];
    let side = blk.side;
    let perm: Vec<usize> = (0..side).rev().collect();
    let apply = |m: &DMatrix<f64>| {
        DMatrix::from_fn(side, side, |i, j| m[(perm[i], perm[j])])
    };
    blk.f0 = apply(&blk.f0);
    for (_, c) in blk.coeffs.iter_mut() {
        *c = apply(c);
    }

    let sol_p = permuted.solve(&cfg()).unwrap();
    assert_eq!(sol_p.status, SolveStatus::Optimal);
    assert!(
        (sol.objective - sol_p.objective).abs() <= 1e-6,
        "objective moved: {} vs {}",
        sol.objective,
        sol_p.objective
    );
    for (a, b) in sol.x.iter().zip(&sol_p.x) {
        assert!((a - b).abs() <= 1e-5, "solution moved: {a} vs {b}");
    }
}

#[test]
fn rejects_variable_without_constraints() {
    let prog = ConicProgram {
        num_vars: 2,
        cost: vec![1.0, 1.0],
        blocks: vec![],
        rows: vec![LinearRow { g0: 1.0, coeffs: vec![(0, 1.0)] }],
    };
    assert!(matches!(prog.solve(&cfg()), Err(Error::BadProgram(_))));
}

#[test]
fn rejects_asymmetric_block() {
    let mut f0 = DMatrix::zeros(2, 2);
    f0[(0, 1)] = 1.0;
    let prog = ConicProgram {
        num_vars: 1,
        cost: vec![1.0],
        blocks: vec![PsdBlock {
            side: 2,
            f0,
            coeffs: vec![(0, DMatrix::identity(2, 2))],
        }],
        rows: vec![],
    };
    assert!(matches!(prog.validate(), Err(Error::NotSymmetric(_))));
}

#[test]
fn dump_round_trips_bit_exactly() {
    let prog = random_feasible_program(13);
    let text = dump_program(&prog);
    let parsed = parse_program(&text).unwrap();
    assert_eq!(dump_program(&parsed), text);
    let a = prog.solve(&cfg()).unwrap();
    let b = parsed.solve(&cfg()).unwrap();
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
}

#[test]
fn verify_flags_corrupted_solution() {
    let prog = analytic_sdp();
    let c = cfg();
    let mut sol = prog.solve(&c).unwrap();
    assert!(prog.verify(&sol, &c).clean);
    sol.x[0] = 0.5; // violates the PSD constraint
    let report = prog.verify(&sol, &c);
    assert!(!report.clean);
    assert!(report.block_min_eigs[0] < -0.4);
}
