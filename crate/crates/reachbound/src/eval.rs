//! Monte Carlo reach-avoid evaluation and controller comparison.
//!
//! A trajectory succeeds when it enters the target set at some step `j <= T`
//! having stayed inside the safe set strictly before; the empirical success
//! rate over rollouts estimates the reach-avoid probability of a controller.
//! Comparisons run two controllers from the same initial states on the same
//! noise realizations (common random numbers), so the reported differences
//! are free of sampling bias between the arms: identical controllers tie
//! path by path, exactly.
//!
//! Noise streams are keyed by `(seed, "noise", [cell, trajectory])` and never
//! touched by controllers; policy randomness draws from separate streams with
//! the same keying. Per-step noise consumption is constant (one component
//! pick plus one standard-normal vector), so two controllers remain coupled
//! for as long as both trajectories run.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::Write;

use crate::bound::{ReachAvoidProblem, ValueFunction};
use crate::errors::{Error, Result};
use crate::geometry::Ellipsoid;
use crate::gridoracle::{GridValueFunction, Region};
use crate::policy::{project_ellipsoid, Controller};
use crate::rbf::{format_f64, TransitionKernel};
use crate::rng::derive_rng;

/// Successor-state draw; thin alias for [`TransitionKernel::step`] kept with
/// the rest of the simulation entry points.
pub fn sample_next(
    kernel: &TransitionKernel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    kernel.step(x, u, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    /// Entered the target set at the hitting time.
    ReachedTarget,
    /// Left the safe set before reaching the target.
    LeftSafe,
    /// Ran through the horizon without entering the target.
    HorizonExhausted,
}

#[derive(Debug, Clone)]
pub struct TrajectoryOutcome {
    pub success: bool,
    /// First step `j` with `x_j` in the target; `None` unless successful.
    pub hitting_time: Option<usize>,
    pub exit: ExitReason,
    /// Visited states `x_0..x_last`, retained only by [`rollout_traced`].
    pub path: Option<Vec<DVector<f64>>>,
}

fn run_rollout(
    problem: &ReachAvoidProblem,
    controller: &dyn Controller,
    x0: &DVector<f64>,
    noise_rng: &mut ChaCha8Rng,
    policy_rng: &mut ChaCha8Rng,
    trace: bool,
) -> Result<TrajectoryOutcome> {
    if x0.len() != problem.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial state dim {} vs problem {}",
            x0.len(),
            problem.state_dim()
        )));
    }
    let mut x = x0.clone();
    let mut path = trace.then(|| vec![x.clone()]);
    for t in 0..=problem.horizon {
        if problem.target.contains(&x) {
            return Ok(TrajectoryOutcome {
                success: true,
                hitting_time: Some(t),
                exit: ExitReason::ReachedTarget,
                path,
            });
        }
        if !problem.safe.contains(&x) {
            return Ok(TrajectoryOutcome {
                success: false,
                hitting_time: None,
                exit: ExitReason::LeftSafe,
                path,
            });
        }
        if t == problem.horizon {
            break;
        }
        let u = controller.act(t, &x, policy_rng)?;
        if !problem.control.contains(&u) {
            return Err(Error::InvalidArgument(format!(
                "controller returned an infeasible control at step {t}"
            )));
        }
        x = problem.kernel.step(&x, &u, noise_rng)?;
        if let Some(p) = path.as_mut() {
            p.push(x.clone());
        }
    }
    Ok(TrajectoryOutcome {
        success: false,
        hitting_time: None,
        exit: ExitReason::HorizonExhausted,
        path,
    })
}

/// One closed-loop trajectory. States in the target succeed immediately
/// (hitting time 0) without consulting the controller; states outside the
/// safe set fail immediately. Noise and policy randomness come from separate
/// streams so that rollouts sharing a noise stream couple across controllers.
pub fn rollout(
    problem: &ReachAvoidProblem,
    controller: &dyn Controller,
    x0: &DVector<f64>,
    noise_rng: &mut ChaCha8Rng,
    policy_rng: &mut ChaCha8Rng,
) -> Result<TrajectoryOutcome> {
    run_rollout(problem, controller, x0, noise_rng, policy_rng, false)
}

/// [`rollout`] with the visited states retained.
pub fn rollout_traced(
    problem: &ReachAvoidProblem,
    controller: &dyn Controller,
    x0: &DVector<f64>,
    noise_rng: &mut ChaCha8Rng,
    policy_rng: &mut ChaCha8Rng,
) -> Result<TrajectoryOutcome> {
    run_rollout(problem, controller, x0, noise_rng, policy_rng, true)
}

#[derive(Debug, Clone, Copy)]
pub struct SuccessEstimate {
    pub rate: f64,
    /// Binomial standard error `sqrt(p (1-p) / n)`.
    pub std_err: f64,
    pub successes: usize,
    pub trials: usize,
}

/// Empirical success rate over `n_traj` rollouts. Trajectory `j` of cell
/// `cell` draws noise from `(seed, "noise", [cell, j])` and policy randomness
/// from `(seed, "policy", [cell, j])`; the estimate is a pure function of
/// `(problem, controller, x0, n_traj, seed, cell)`.
pub fn empirical_success(
    problem: &ReachAvoidProblem,
    controller: &dyn Controller,
    x0: &DVector<f64>,
    n_traj: usize,
    seed: u64,
    cell: u64,
) -> Result<SuccessEstimate> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument(
            "need at least one trajectory".into(),
        ));
    }
    let mut successes = 0usize;
    for j in 0..n_traj {
        let mut noise = derive_rng(seed, "noise", &[cell, j as u64]);
        let mut policy = derive_rng(seed, "policy", &[cell, j as u64]);
        if rollout(problem, controller, x0, &mut noise, &mut policy)?.success {
            successes += 1;
        }
    }
    let rate = successes as f64 / n_traj as f64;
    Ok(SuccessEstimate {
        rate,
        std_err: (rate * (1.0 - rate) / n_traj as f64).sqrt(),
        successes,
        trials: n_traj,
    })
}

/// Finite-horizon discrete Riccati difference recursion from `P_T = Q`;
/// returns feedback gains `K_0..K_{T-1}` for `u = -K_t x`. Additive noise
/// leaves the optimal gains unchanged (certainty equivalence), so this is
/// the LQG policy for the quadratic objective.
pub fn lqg_gains(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    horizon: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n
        || r.nrows() != m || r.ncols() != m
    {
        return Err(Error::DimensionMismatch("Riccati data shapes".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let mut p = q.clone();
    let mut gains = vec![DMatrix::zeros(m, n); horizon];
    for k in (0..horizon).rev() {
        let bpb = r + b.transpose() * &p * b;
        let chol = bpb.clone().cholesky().ok_or_else(|| {
            Error::NotPositiveDefinite("R + B^T P B in the Riccati recursion".into())
        })?;
        let gain = chol.solve(&(b.transpose() * &p * a));
        p = q + a.transpose() * &p * a - a.transpose() * &p * b * &gain;
        p = (&p + p.transpose()) * 0.5;
        gains[k] = gain;
    }
    Ok(gains)
}

/// LQG feedback with inputs projected onto the control ellipsoid.
pub struct LqgPolicy {
    gains: Vec<DMatrix<f64>>,
    control: Ellipsoid,
}

impl LqgPolicy {
    pub fn new(gains: Vec<DMatrix<f64>>, control: Ellipsoid) -> Result<Self> {
        if gains.is_empty() {
            return Err(Error::InvalidArgument("need at least one gain".into()));
        }
        if gains.iter().any(|g| g.nrows() != control.dim()) {
            return Err(Error::DimensionMismatch("gain rows vs control dim".into()));
        }
        Ok(Self { gains, control })
    }

    /// Weights from the problem sets: `Q = Q_t / rho_t^2`, `R = Q_u / rho_u^2`
    /// penalize directions in which the sets are small.
    pub fn from_problem(problem: &ReachAvoidProblem) -> Result<Self> {
        let comps = problem.kernel.components();
        if comps.len() != 1 {
            return Err(Error::InvalidArgument(
                "LQG baseline expects a single-component kernel".into(),
            ));
        }
        let q = problem.target.shape() / problem.target.radius().powi(2);
        let r = problem.control.shape() / problem.control.radius().powi(2);
        let gains = lqg_gains(&comps[0].a, &comps[0].b, &q, &r, problem.horizon)?;
        Self::new(gains, problem.control.clone())
    }
}

impl Controller for LqgPolicy {
    fn act(&self, t: usize, x: &DVector<f64>, _rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        let gain = self.gains.get(t).ok_or_else(|| {
            Error::InvalidArgument(format!("time {t} past the gain horizon"))
        })?;
        Ok(project_ellipsoid(
            &(-gain * x),
            self.control.shape(),
            self.control.radius(),
        ))
    }
}

/// Randomly generated open-loop-stable controllable system for the
/// high-dimensional benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Benchmark process noise `0.001 I`.
    pub noise: DMatrix<f64>,
    pub seed: u64,
    pub spectral_radius: f64,
    pub controllability_rank: usize,
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().fold(0.0f64, |acc, ev| acc.max(ev.norm()))
}

fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for p in 0..n {
        ctrb.view_mut((0, p * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    let sv = ctrb.svd(false, false).singular_values;
    let top = sv.max();
    sv.iter().filter(|&&s| s > 1e-8 * top.max(1.0)).count()
}

/// Standard-normal `A` and `B` with `A` rescaled to spectral radius 0.9;
/// resamples (up to 100 attempts) until the controllability matrix
/// `[B, AB, .., A^{n-1} B]` has full rank within tolerance 1e-8.
pub fn random_stable_system(n: usize, m: usize, seed: u64) -> Result<BenchmarkSystem> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    let mut rng = derive_rng(seed, "system", &[]);
    for _ in 0..100 {
        let mut a =
            DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let radius = spectral_radius(&a);
        if radius <= 1e-12 {
            continue;
        }
        a *= 0.9 / radius;
        let rank = controllability_rank(&a, &b);
        if rank < n {
            continue;
        }
        return Ok(BenchmarkSystem {
            spectral_radius: spectral_radius(&a),
            controllability_rank: rank,
            noise: DMatrix::identity(n, n) * 0.001,
            seed,
            a,
            b,
        });
    }
    Err(Error::SamplingFailed(
        "no controllable stable system in 100 draws".into(),
    ))
}

impl BenchmarkSystem {
    /// The regulation problem around the origin: unit safe radius, target and
    /// control radius 0.1, identity shape matrices.
    pub fn problem(&self, horizon: usize) -> Result<ReachAvoidProblem> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        ReachAvoidProblem::new(
            Ellipsoid::new(DMatrix::identity(n, n), 0.1)?,
            Ellipsoid::new(DMatrix::identity(n, n), 1.0)?,
            Ellipsoid::new(DMatrix::identity(m, m), 0.1)?,
            TransitionKernel::linear_gaussian(self.a.clone(), self.b.clone(), self.noise.clone())?,
            horizon,
        )
    }
}

/// Fixed benchmark matrices for the low-dimensional comparison. The printed
/// protocol writes `1_{n x n}` for every matrix; an all-ones noise covariance
/// is singular, so the noise is always `0.001 I` and only `A`, `B` switch
/// between the identity pattern (default) and literal all-ones.
pub fn benchmark_matrices(n: usize, m: usize, ones: bool) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (a, b) = if ones {
        (DMatrix::from_element(n, n, 1.0), DMatrix::from_element(n, m, 1.0))
    } else {
        let mut b = DMatrix::zeros(n, m);
        for i in 0..n.min(m) {
            b[(i, i)] = 1.0;
        }
        (DMatrix::identity(n, n), b)
    };
    (a, b, DMatrix::identity(n, n) * 0.001)
}

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    /// Candidate index of the accepted initial state (also its noise cell).
    pub cell: u64,
    pub x0: DVector<f64>,
    pub rate_a: f64,
    pub rate_b: f64,
    pub se_a: f64,
    pub se_b: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    /// Mean of `rate_a - rate_b` over initial states.
    pub mean_diff: f64,
    /// Sample standard error of the per-state differences.
    pub diff_std_err: f64,
    pub n_traj: usize,
    pub reject_threshold: f64,
    /// Candidate states dropped by the baseline rejection rule.
    pub rejected: usize,
    pub seed: u64,
}

impl ComparisonReport {
    /// Per-state rows, then a `#`-prefixed summary block. Everything is a
    /// pure function of the inputs, so re-runs are byte-identical.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let dim = self.rows.first().map_or(0, |r| r.x0.len());
        for i in 0..dim {
            write!(out, "x{i},")?;
        }
        writeln!(out, "rate_a,rate_b,diff,se_a,se_b")?;
        for r in &self.rows {
            for v in r.x0.iter() {
                write!(out, "{},", format_f64(*v))?;
            }
            writeln!(
                out,
                "{},{},{},{},{}",
                format_f64(r.rate_a),
                format_f64(r.rate_b),
                format_f64(r.rate_a - r.rate_b),
                format_f64(r.se_a),
                format_f64(r.se_b)
            )?;
        }
        writeln!(out, "# mean_diff {}", format_f64(self.mean_diff))?;
        writeln!(out, "# diff_std_err {}", format_f64(self.diff_std_err))?;
        writeln!(
            out,
            "# n_init {} n_traj {} reject_threshold {} rejected {} seed {}",
            self.rows.len(),
            self.n_traj,
            format_f64(self.reject_threshold),
            self.rejected,
            self.seed
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub n_init: usize,
    pub n_traj: usize,
    /// Initial states whose baseline success rate falls below this are
    /// dropped (zero keeps everything).
    pub reject_threshold: f64,
    pub seed: u64,
}

/// Shared-noise comparison of two controllers. Initial states are sampled
/// uniformly from the ring, filtered by the success rate of the baseline
/// `controller_b`, and both controllers are then evaluated from the same
/// states on the same noise streams. Candidate cells are processed in
/// parallel; results depend only on `(problem, controllers, cfg)`.
pub fn compare(
    problem: &ReachAvoidProblem,
    controller_a: &dyn Controller,
    controller_b: &dyn Controller,
    cfg: &CompareConfig,
) -> Result<ComparisonReport> {
    if cfg.n_init == 0 || cfg.n_traj == 0 {
        return Err(Error::InvalidArgument(
            "need at least one initial state and one trajectory".into(),
        ));
    }
    let ring = problem.ring()?;
    let max_candidates = cfg.n_init.saturating_mul(64);
    let chunk = cfg.n_init.max(8);

    // Rejection phase: evaluate the baseline on candidate cells in order,
    // chunked for parallelism, keeping the first n_init acceptable states.
    let mut accepted: Vec<(u64, DVector<f64>, SuccessEstimate)> = Vec::new();
    let mut rejected = 0usize;
    let mut next = 0usize;
    while accepted.len() < cfg.n_init && next < max_candidates {
        let hi = (next + chunk).min(max_candidates);
        let batch: Vec<(u64, DVector<f64>, SuccessEstimate)> = (next..hi)
            .into_par_iter()
            .map(|gi| {
                let cell = gi as u64;
                let mut rng = derive_rng(cfg.seed, "init", &[cell]);
                let x0 = ring.sample_uniform(&mut rng, 100_000)?;
                let est = empirical_success(
                    problem,
                    controller_b,
                    &x0,
                    cfg.n_traj,
                    cfg.seed,
                    cell,
                )?;
                Ok((cell, x0, est))
            })
            .collect::<Result<_>>()?;
        for (cell, x0, est) in batch {
            if accepted.len() == cfg.n_init {
                break;
            }
            if est.rate < cfg.reject_threshold {
                rejected += 1;
            } else {
                accepted.push((cell, x0, est));
            }
        }
        next = hi;
    }
    if accepted.len() < cfg.n_init {
        return Err(Error::SamplingFailed(format!(
            "{rejected} of {next} candidate states rejected at threshold {}",
            cfg.reject_threshold
        )));
    }

    let rows: Vec<ComparisonRow> = accepted
        .into_par_iter()
        .map(|(cell, x0, est_b)| {
            let est_a =
                empirical_success(problem, controller_a, &x0, cfg.n_traj, cfg.seed, cell)?;
            Ok(ComparisonRow {
                cell,
                x0,
                rate_a: est_a.rate,
                rate_b: est_b.rate,
                se_a: est_a.std_err,
                se_b: est_b.std_err,
            })
        })
        .collect::<Result<_>>()?;

    let diffs: Vec<f64> = rows.iter().map(|r| r.rate_a - r.rate_b).collect();
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let diff_std_err = if diffs.len() > 1 {
        let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>()
            / (diffs.len() - 1) as f64;
        (var / diffs.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok(ComparisonReport {
        rows,
        mean_diff,
        diff_std_err,
        n_traj: cfg.n_traj,
        reject_threshold: cfg.reject_threshold,
        rejected,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ValueGapStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

/// Statistics of `min(v_hat, 1) - v_grid` over the ring nodes of a grid
/// table. Nonnegative minima certify the upper-bound property on the grid.
pub fn value_gap_on_ring(
    v_hat: &ValueFunction,
    table: &GridValueFunction,
    regions: &[Region],
) -> Result<ValueGapStats> {
    if regions.len() != table.values.len() {
        return Err(Error::DimensionMismatch("regions vs table nodes".into()));
    }
    let mut mean = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut nodes = 0usize;
    for (f, region) in regions.iter().enumerate() {
        if *region != Region::Ring {
            continue;
        }
        let x = table.grid.node(f);
        let gap = v_hat.evaluate(&x)?.min(1.0) - table.values[f];
        mean += gap;
        min = min.min(gap);
        max = max.max(gap);
        nodes += 1;
    }
    if nodes == 0 {
        return Err(Error::InvalidArgument("no ring nodes in the table".into()));
    }
    Ok(ValueGapStats {
        mean: mean / nodes as f64,
        min,
        max,
        nodes,
    })
}

/// Per-node comparison slice: coordinates, saturated bound, grid value and
/// region, one row per node. Plot-ready counterpart of [`value_gap_on_ring`].
pub fn write_value_comparison_csv<W: Write>(
    out: &mut W,
    v_hat: &ValueFunction,
    table: &GridValueFunction,
    regions: &[Region],
) -> Result<()> {
    if regions.len() != table.values.len() {
        return Err(Error::DimensionMismatch("regions vs table nodes".into()));
    }
    let n = table.grid.dim();
    for a in 0..n {
        write!(out, "x{a},")?;
    }
    writeln!(out, "v_hat,v_grid,region")?;
    for (f, region) in regions.iter().enumerate() {
        let x = table.grid.node(f);
        for v in x.iter() {
            write!(out, "{},", format_f64(*v))?;
        }
        let label = match region {
            Region::Target => "target",
            Region::Ring => "ring",
            Region::Outside => "outside",
        };
        writeln!(
            out,
            "{},{},{label}",
            format_f64(v_hat.evaluate(&x)?.min(1.0)),
            format_f64(table.values[f])
        )?;
    }
    Ok(())
}
