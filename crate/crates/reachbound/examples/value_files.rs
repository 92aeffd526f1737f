//! Value-file round trip: write a certified sequence, read it back, audit it.
//!
//! The `.rbf` text format is the interchange between `bound` and `validate`;
//! this example exercises it end to end in a temp directory, including the
//! detection of a corrupted file.

use nalgebra::{DMatrix, DVector};
use reachbound::bound::{
    indicator_bound_lp, random_centers, read_value, run_recursion, validate_sequence, write_sequence,
    BoundConfig, ReachAvoidProblem, ValueBoundSequence,
};
use reachbound::geometry::Ellipsoid;
use reachbound::gridoracle::Grid;
use reachbound::rbf::TransitionKernel;
use reachbound::rng::derive_rng;
use std::io::BufReader;

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
        2,
    )
    .unwrap();
    let cfg = BoundConfig::default();
    let mut rng = derive_rng(3, "centers", &[0]);
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

    let dir = std::env::temp_dir().join("reachbound_value_files_example");
    let paths = write_sequence(&dir, &seq).unwrap();
    println!("wrote {} value files under {}", paths.len(), dir.display());

    let mut values = Vec::new();
    for p in &paths {
        let file = std::fs::File::open(p).unwrap();
        values.push(read_value(&mut BufReader::new(file), &p.display().to_string()).unwrap());
    }
    let x = DVector::from_vec(vec![0.05]);
    for (k, (a, b)) in values.iter().zip(&seq.values).enumerate() {
        let (ra, rb) = (a.evaluate(&x).unwrap(), b.evaluate(&x).unwrap());
        println!("  k = {k}: reread {ra:.12} vs original {rb:.12}");
        assert_eq!(ra, rb, "round trip must be bit exact");
    }

    let reread = ValueBoundSequence { values, diagnostics: Vec::new() };
    let mut audit_rng = derive_rng(3, "audit", &[]);
    let audit = validate_sequence(&reread, &problem, 100, &mut audit_rng).unwrap();
    println!("audit of the reread sequence: worst violation {:+.3e}", audit.worst_violation());

    // Sabotage the middle bound and audit again.
    std::fs::write(&paths[1], "const 1 0.0\n").unwrap();
    let mut broken = Vec::new();
    for p in &paths {
        let file = std::fs::File::open(p).unwrap();
        broken.push(read_value(&mut BufReader::new(file), &p.display().to_string()).unwrap());
    }
    let broken = ValueBoundSequence { values: broken, diagnostics: Vec::new() };
    let mut audit_rng = derive_rng(3, "audit", &[]);
    let audit = validate_sequence(&broken, &problem, 100, &mut audit_rng).unwrap();
    println!("audit after corrupting k = 1: worst violation {:+.3e}", audit.worst_violation());
    std::fs::remove_dir_all(&dir).ok();
}
