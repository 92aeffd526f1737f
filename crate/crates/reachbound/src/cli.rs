//! Config-driven command-line frontend.
//!
//! Every command is a pure function of the config file and the root seed:
//! re-runs reproduce all numeric output byte for byte, and only manifest
//! lines whose key starts with `millis` (wall-clock timings) may differ.
//! Commands write exclusively under the output directory.
//!
//! Exit codes are stable contracts: 0 success, 1 solver or runtime failure,
//! 2 success with a constant fallback in the certified recursion, 64 invalid
//! config, 65 grid work cap exceeded, 66 missing input file.

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::bound::{
    self, indicator_bound_lp, indicator_bound_sdp, random_centers, run_recursion, BoundConfig,
    ReachAvoidProblem, ValueBoundSequence,
};
use crate::errors::{Error, Result};
use crate::eval::{
    benchmark_matrices, compare, random_stable_system, value_gap_on_ring,
    write_value_comparison_csv, CompareConfig, LqgPolicy,
};
use crate::geometry::Ellipsoid;
use crate::gridoracle::{dp_recursion, DpResult, Grid};
use crate::policy::{GridPolicy, PolicyConfig, PolicyMode, RbfPolicy};
use crate::rbf::{format_f64, Covariance, KernelComponent, TransitionKernel};
use crate::rng::derive_rng;
use crate::sdpsolver::SolverConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_FALLBACK: i32 = 2;
pub const EXIT_CONFIG: i32 = 64;
pub const EXIT_GRID_CAP: i32 = 65;
pub const EXIT_MISSING_FILE: i32 = 66;

#[derive(Parser, Debug)]
#[command(name = "reachbound", version, about = "Certified reach-avoid bounds and controller evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Certified value recursion: indicator bound, backward steps, value files.
    Bound(CommonArgs),
    /// Grid dynamic-programming oracle: value tables as CSV.
    Grid(CommonArgs),
    /// Certified bound and induced policy against the grid oracle.
    CompareGrid(CommonArgs),
    /// Induced policy against LQG on random stable systems.
    CompareLqg(CommonArgs),
    /// Audit previously written value files against their config.
    Validate(CommonArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `run.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed; overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rayon worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Bound(a)
            | Command::Grid(a)
            | Command::CompareGrid(a)
            | Command::CompareLqg(a)
            | Command::Validate(a) => a,
        }
    }
}

// ---------------------------------------------------------------------------
// Config schema

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetConfig {
    /// Shape matrix rows; must be square, symmetric, positive definite.
    pub shape: Vec<Vec<f64>>,
    pub radius: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    #[serde(default = "default_weight")]
    pub weight: f64,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Drift; zero when omitted.
    #[serde(default)]
    pub c: Option<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
}

fn default_pattern() -> String {
    "identity".into()
}
fn default_target_radius() -> f64 {
    0.1
}
fn default_safe_radius() -> f64 {
    1.0
}
fn default_control_radius() -> f64 {
    0.1
}
fn default_noise_scale() -> f64 {
    0.001
}

/// Shorthand for the standard benchmark family: identity-shaped sets and a
/// single linear-Gaussian component with `Sigma = noise_scale * I`. The
/// `ones` pattern fills `A` and `B` with literal ones instead of identities.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub state_dim: usize,
    pub control_dim: usize,
    #[serde(default = "default_pattern")]
    pub pattern: String,
    #[serde(default = "default_target_radius")]
    pub target_radius: f64,
    #[serde(default = "default_safe_radius")]
    pub safe_radius: f64,
    #[serde(default = "default_control_radius")]
    pub control_radius: f64,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub horizon: usize,
    #[serde(default)]
    pub benchmark: Option<BenchmarkConfig>,
    #[serde(default)]
    pub target: Option<SetConfig>,
    #[serde(default)]
    pub safe: Option<SetConfig>,
    #[serde(default)]
    pub control: Option<SetConfig>,
    #[serde(default)]
    pub component: Vec<ComponentConfig>,
}

fn default_num_terms() -> usize {
    10
}
fn default_indicator() -> String {
    "lp".into()
}
fn default_max_terms() -> usize {
    512
}
fn default_sigma_floor() -> f64 {
    1e-6
}
fn default_sigma_b() -> f64 {
    5e-4
}
fn default_gap_tol() -> f64 {
    1e-8
}
fn default_feas_tol() -> f64 {
    1e-7
}
fn default_max_iter() -> usize {
    200
}
fn default_audit_samples() -> usize {
    200
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundBlock {
    /// Number of Gaussian terms in the indicator bound.
    #[serde(rename = "num_terms")]
    pub num_terms: usize,
    /// Terminal indicator construction: "lp" or "sdp".
    pub indicator: String,
    pub max_terms: usize,
    pub sigma_floor: f64,
    /// Isotropic basis covariance for the LP indicator.
    pub sigma_b: f64,
    pub gap_tol: f64,
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Monte Carlo samples per step in `validate`.
    pub audit_samples: usize,
}

impl Default for BoundBlock {
    fn default() -> Self {
        Self {
            num_terms: default_num_terms(),
            indicator: default_indicator(),
            max_terms: default_max_terms(),
            sigma_floor: default_sigma_floor(),
            sigma_b: default_sigma_b(),
            gap_tol: default_gap_tol(),
            feas_tol: default_feas_tol(),
            max_iter: default_max_iter(),
            audit_samples: default_audit_samples(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridBlock {
    /// State nodes per axis.
    pub state_points: usize,
    /// Control nodes per axis.
    pub control_points: usize,
    /// Window-node visit cap for the grid recursion.
    pub max_ops: u64,
    /// State box half-width; safe-set bounding box when omitted.
    pub radius: Option<f64>,
}

impl Default for GridBlock {
    fn default() -> Self {
        Self {
            state_points: 80,
            control_points: 25,
            max_ops: 2_000_000_000,
            radius: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub n_init: usize,
    pub n_traj: usize,
    /// Baseline success rate below which an initial state is rejected
    /// (LQG comparison only).
    pub reject_threshold: f64,
    /// Induced-policy optimizer: "newton" or "grid".
    pub policy: String,
    pub multistarts: usize,
    pub grid_points: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            n_init: 100,
            n_traj: 100,
            reject_threshold: 0.1,
            policy: "newton".into(),
            multistarts: 8,
            grid_points: 20,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqgBlock {
    /// Number of random systems in the LQG comparison.
    pub systems: usize,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl Default for LqgBlock {
    fn default() -> Self {
        Self {
            systems: 10,
            state_dim: 3,
            control_dim: 3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunBlock {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub bound: BoundBlock,
    #[serde(default)]
    pub grid: GridBlock,
    #[serde(default)]
    pub eval: EvalBlock,
    #[serde(default)]
    pub lqg: LqgBlock,
    #[serde(default)]
    pub run: RunBlock,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.horizon == 0 {
            return Err(invalid("problem.horizon must be at least 1"));
        }
        match (&p.benchmark, &p.target, &p.safe, &p.control) {
            (Some(b), None, None, None) => {
                if p.component.is_empty() {
                    if b.state_dim == 0 || b.control_dim == 0 {
                        return Err(invalid("benchmark dims must be positive"));
                    }
                    if b.pattern != "identity" && b.pattern != "ones" {
                        return Err(invalid(format!(
                            "benchmark.pattern must be identity or ones, got {}",
                            b.pattern
                        )));
                    }
                    for (name, v) in [
                        ("target_radius", b.target_radius),
                        ("safe_radius", b.safe_radius),
                        ("control_radius", b.control_radius),
                        ("noise_scale", b.noise_scale),
                    ] {
                        if !(v.is_finite() && v > 0.0) {
                            return Err(invalid(format!("benchmark.{name} must be positive")));
                        }
                    }
                    if b.target_radius >= b.safe_radius {
                        return Err(invalid("benchmark target must sit inside the safe set"));
                    }
                } else {
                    return Err(invalid(
                        "benchmark shorthand and explicit components are mutually exclusive",
                    ));
                }
            }
            (None, Some(_), Some(_), Some(_)) => {
                if p.component.is_empty() {
                    return Err(invalid("explicit problems need at least one [[problem.component]]"));
                }
            }
            _ => {
                return Err(invalid(
                    "specify either problem.benchmark or all of target/safe/control with components",
                ));
            }
        }
        if self.bound.indicator != "lp" && self.bound.indicator != "sdp" {
            return Err(invalid(format!(
                "bound.indicator must be lp or sdp, got {}",
                self.bound.indicator
            )));
        }
        if self.bound.num_terms == 0 {
            return Err(invalid("bound.num_terms must be at least 1"));
        }
        if !(self.bound.sigma_floor.is_finite() && self.bound.sigma_floor > 0.0)
            || !(self.bound.sigma_b.is_finite() && self.bound.sigma_b > 0.0)
        {
            return Err(invalid("bound.sigma_floor and bound.sigma_b must be positive"));
        }
        if self.grid.state_points < 2 || self.grid.control_points < 2 {
            return Err(invalid("grid node counts must be at least 2 per axis"));
        }
        if self.eval.n_init == 0 || self.eval.n_traj == 0 {
            return Err(invalid("eval.n_init and eval.n_traj must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.eval.reject_threshold) {
            return Err(invalid("eval.reject_threshold must lie in [0, 1]"));
        }
        if self.eval.policy != "newton" && self.eval.policy != "grid" {
            return Err(invalid(format!(
                "eval.policy must be newton or grid, got {}",
                self.eval.policy
            )));
        }
        if self.eval.grid_points < 2 || self.eval.multistarts == 0 {
            return Err(invalid("eval.grid_points >= 2 and eval.multistarts >= 1 required"));
        }
        if self.lqg.systems == 0 || self.lqg.state_dim == 0 || self.lqg.control_dim == 0 {
            return Err(invalid("lqg.systems and dims must be positive"));
        }
        Ok(())
    }

    fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            gap_tol: self.bound.gap_tol,
            feas_tol: self.bound.feas_tol,
            max_iter: self.bound.max_iter,
            verbose: false,
        }
    }

    fn bound_config(&self) -> BoundConfig {
        BoundConfig {
            sigma_floor: self.bound.sigma_floor,
            max_terms: self.bound.max_terms,
            solver: self.solver_config(),
        }
    }

    fn policy_config(&self) -> Result<PolicyConfig> {
        Ok(PolicyConfig {
            mode: match self.eval.policy.as_str() {
                "newton" => PolicyMode::Newton,
                "grid" => PolicyMode::ControlGrid,
                other => return Err(invalid(format!("eval.policy {other}"))),
            },
            multistarts: self.eval.multistarts,
            grid_points: self.eval.grid_points,
            ..PolicyConfig::default()
        })
    }
}

fn parse_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(invalid(format!("{what}: empty matrix")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(invalid(format!("{what}: ragged or empty rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Materializes the problem described by the config, cross-checking all
/// matrix dimensions.
pub fn build_problem(cfg: &RunConfig) -> Result<ReachAvoidProblem> {
    let p = &cfg.problem;
    if let Some(b) = &p.benchmark {
        let (a, bm, noise_id) = benchmark_matrices(b.state_dim, b.control_dim, b.pattern == "ones");
        let noise = noise_id * (b.noise_scale / 0.001);
        return ReachAvoidProblem::new(
            Ellipsoid::new(DMatrix::identity(b.state_dim, b.state_dim), b.target_radius)?,
            Ellipsoid::new(DMatrix::identity(b.state_dim, b.state_dim), b.safe_radius)?,
            Ellipsoid::new(DMatrix::identity(b.control_dim, b.control_dim), b.control_radius)?,
            TransitionKernel::linear_gaussian(a, bm, noise)?,
            p.horizon,
        );
    }
    let target = p.target.as_ref().expect("validated");
    let safe = p.safe.as_ref().expect("validated");
    let control = p.control.as_ref().expect("validated");
    let target = Ellipsoid::new(parse_matrix(&target.shape, "problem.target.shape")?, target.radius)?;
    let safe = Ellipsoid::new(parse_matrix(&safe.shape, "problem.safe.shape")?, safe.radius)?;
    let control =
        Ellipsoid::new(parse_matrix(&control.shape, "problem.control.shape")?, control.radius)?;
    let n = target.dim();
    let m = control.dim();
    let components = p
        .component
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let what = format!("problem.component[{i}]");
            let a = parse_matrix(&c.a, &format!("{what}.a"))?;
            let b = parse_matrix(&c.b, &format!("{what}.b"))?;
            let noise = parse_matrix(&c.noise, &format!("{what}.noise"))?;
            let drift = match &c.c {
                Some(v) => DVector::from_vec(v.clone()),
                None => DVector::zeros(n),
            };
            if a.nrows() != n || a.ncols() != n || b.nrows() != n || b.ncols() != m
                || drift.len() != n
            {
                return Err(invalid(format!("{what}: dims disagree with the sets")));
            }
            Ok(KernelComponent {
                weight: c.weight,
                a,
                b,
                c: drift,
                noise: Covariance::new(noise)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ReachAvoidProblem::new(target, safe, control, TransitionKernel::new(components)?, p.horizon)
}

// ---------------------------------------------------------------------------
// Manifest

/// Flat `key value` manifest. Timing lines use keys starting with `millis`
/// and are the only lines exempt from byte-identical reproduction.
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut m = Self { lines: Vec::new() };
        m.push("command", command);
        m.push("seed", seed);
        m
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) {
        self.lines.push((key.into(), format_f64(value)));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for (k, v) in &self.lines {
            writeln!(out, "{k} {v}")?;
        }
        Ok(())
    }
}

fn describe_problem(man: &mut Manifest, problem: &ReachAvoidProblem) {
    man.push("state_dim", problem.state_dim());
    man.push("control_dim", problem.control_dim());
    man.push("horizon", problem.horizon);
    man.push("kernel_components", problem.kernel.components().len());
}

fn state_grid(cfg: &RunConfig, problem: &ReachAvoidProblem) -> Result<Grid> {
    match cfg.grid.radius {
        Some(r) => {
            if !(r.is_finite() && r > 0.0) {
                return Err(invalid("grid.radius must be positive"));
            }
            Grid::symmetric(r, problem.state_dim(), cfg.grid.state_points)
        }
        None => Grid::from_box(&problem.safe.bounding_box(), cfg.grid.state_points),
    }
}

fn control_grid(cfg: &RunConfig, problem: &ReachAvoidProblem) -> Result<Grid> {
    Grid::from_box(&problem.control.bounding_box(), cfg.grid.control_points)
}

// ---------------------------------------------------------------------------
// Pipelines

/// Terminal indicator plus backward recursion for one problem. The center
/// sampler is the only consumer of randomness; it draws from
/// `(seed, "centers", [tag])`.
fn certified_sequence(
    cfg: &RunConfig,
    problem: &ReachAvoidProblem,
    seed: u64,
    tag: u64,
) -> Result<ValueBoundSequence> {
    let bound_cfg = cfg.bound_config();
    let terminal = match cfg.bound.indicator.as_str() {
        "lp" => {
            let mut rng = derive_rng(seed, "centers", &[tag]);
            let centers = random_centers(&problem.target, cfg.bound.num_terms, &mut rng)?;
            let n = problem.state_dim();
            let sigma_b = DMatrix::identity(n, n) * cfg.bound.sigma_b;
            let grid = Grid::from_box(&problem.target.bounding_box(), cfg.grid.state_points)?;
            indicator_bound_lp(&problem.target, &centers, &sigma_b, &grid, &bound_cfg.solver)?.sum
        }
        "sdp" => indicator_bound_sdp(&problem.target, cfg.bound.num_terms, &bound_cfg)?,
        other => return Err(invalid(format!("bound.indicator {other}"))),
    };
    run_recursion(problem, &terminal, &bound_cfg)
}

fn record_sequence(man: &mut Manifest, seq: &ValueBoundSequence) {
    man.push("values", seq.values.len());
    for d in &seq.diagnostics {
        let k = d.k;
        man.push(
            format!("step_{k}_status"),
            d.status.map_or("none".to_string(), |s| format!("{s:?}")),
        );
        if let Some(obj) = d.objective {
            man.push_f64(format!("step_{k}_objective"), obj);
        }
        man.push(format!("step_{k}_iterations"), d.iterations);
        man.push(format!("step_{k}_terms"), d.term_count);
        man.push(format!("step_{k}_fallback"), d.fallback);
        man.push(format!("millis_step_{k}"), d.millis);
    }
    man.push("any_fallback", seq.any_fallback());
}

fn fallback_exit(seq: &ValueBoundSequence) -> i32 {
    if seq.any_fallback() {
        EXIT_FALLBACK
    } else {
        EXIT_OK
    }
}

fn cmd_bound(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let problem = build_problem(cfg)?;
    std::fs::create_dir_all(out)?;
    let start = std::time::Instant::now();
    let seq = certified_sequence(cfg, &problem, cfg.run.seed, 0)?;
    let paths = bound::write_sequence(out, &seq)?;
    let mut man = Manifest::new("bound", cfg.run.seed);
    describe_problem(&mut man, &problem);
    man.push("indicator", &cfg.bound.indicator);
    man.push("num_terms", cfg.bound.num_terms);
    record_sequence(&mut man, &seq);
    for (k, p) in paths.iter().enumerate() {
        man.push(
            format!("file_{k}"),
            p.file_name().unwrap_or_default().to_string_lossy(),
        );
    }
    man.push("millis_total", start.elapsed().as_millis());
    man.write(&out.join("manifest.txt"))?;
    Ok(fallback_exit(&seq))
}

fn run_grid(cfg: &RunConfig, problem: &ReachAvoidProblem) -> Result<(DpResult, Grid)> {
    let sg = state_grid(cfg, problem)?;
    let cg = control_grid(cfg, problem)?;
    let dp = dp_recursion(problem, &sg, &cg, cfg.grid.max_ops)?;
    Ok((dp, cg))
}

fn cmd_grid(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let problem = build_problem(cfg)?;
    std::fs::create_dir_all(out)?;
    let start = std::time::Instant::now();
    let (dp, _) = run_grid(cfg, &problem)?;
    for table in &dp.tables {
        let mut file = BufWriter::new(File::create(
            out.join(format!("grid_value_{:03}.csv", table.k)),
        )?);
        table.write_csv(&mut file)?;
    }
    let mut man = Manifest::new("grid", cfg.run.seed);
    describe_problem(&mut man, &problem);
    man.push("state_points", cfg.grid.state_points);
    man.push("control_points", cfg.grid.control_points);
    man.push("state_nodes", dp.tables[0].grid.num_nodes());
    man.push("ops", dp.ops);
    man.push("tables", dp.tables.len());
    man.push("millis_total", start.elapsed().as_millis());
    man.write(&out.join("manifest.txt"))?;
    Ok(EXIT_OK)
}

fn mean_rates(rows: &[crate::eval::ComparisonRow]) -> (f64, f64) {
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.rate_a).sum::<f64>() / n,
        rows.iter().map(|r| r.rate_b).sum::<f64>() / n,
    )
}

fn cmd_compare_grid(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let problem = build_problem(cfg)?;
    std::fs::create_dir_all(out)?;
    let start = std::time::Instant::now();
    let seq = certified_sequence(cfg, &problem, cfg.run.seed, 0)?;
    let (dp, cg) = run_grid(cfg, &problem)?;

    let gap = value_gap_on_ring(&seq.values[0], &dp.tables[0], &dp.regions)?;
    let mut value_csv = BufWriter::new(File::create(out.join("value_compare.csv"))?);
    write_value_comparison_csv(&mut value_csv, &seq.values[0], &dp.tables[0], &dp.regions)?;

    let induced = RbfPolicy::new(problem.clone(), &seq, cfg.policy_config()?)?;
    let oracle = GridPolicy::new(problem.clone(), dp.tables.clone(), cg)?;
    // The grid-oracle protocol keeps every sampled initial state; rejection
    // filtering belongs to the LQG comparison.
    let report = compare(
        &problem,
        &induced,
        &oracle,
        &CompareConfig {
            n_init: cfg.eval.n_init,
            n_traj: cfg.eval.n_traj,
            reject_threshold: 0.0,
            seed: cfg.run.seed,
        },
    )?;
    let mut policy_csv = BufWriter::new(File::create(out.join("policy_compare.csv"))?);
    report.write_csv(&mut policy_csv)?;

    let (mean_induced, mean_oracle) = mean_rates(&report.rows);
    let mut table = BufWriter::new(File::create(out.join("table1.csv"))?);
    writeln!(
        table,
        "n,m,horizon,state_points,control_points,num_terms,value_gap_mean,policy_gap_mean"
    )?;
    writeln!(
        table,
        "{},{},{},{},{},{},{},{}",
        problem.state_dim(),
        problem.control_dim(),
        problem.horizon,
        cfg.grid.state_points,
        cfg.grid.control_points,
        cfg.bound.num_terms,
        format_f64(gap.mean),
        format_f64(report.mean_diff)
    )?;

    let mut man = Manifest::new("compare-grid", cfg.run.seed);
    describe_problem(&mut man, &problem);
    record_sequence(&mut man, &seq);
    man.push("ring_nodes", gap.nodes);
    man.push_f64("value_gap_mean", gap.mean);
    man.push_f64("value_gap_min", gap.min);
    man.push_f64("value_gap_max", gap.max);
    man.push("n_init", cfg.eval.n_init);
    man.push("n_traj", cfg.eval.n_traj);
    man.push_f64("policy_rate_induced", mean_induced);
    man.push_f64("policy_rate_oracle", mean_oracle);
    man.push_f64("policy_gap_mean", report.mean_diff);
    man.push_f64("policy_gap_std_err", report.diff_std_err);
    man.push("millis_total", start.elapsed().as_millis());
    man.write(&out.join("manifest.txt"))?;
    Ok(fallback_exit(&seq))
}

fn cmd_compare_lqg(cfg: &RunConfig, out: &Path) -> Result<i32> {
    std::fs::create_dir_all(out)?;
    let start = std::time::Instant::now();
    let mut man = Manifest::new("compare-lqg", cfg.run.seed);
    man.push("systems", cfg.lqg.systems);
    man.push("state_dim", cfg.lqg.state_dim);
    man.push("control_dim", cfg.lqg.control_dim);
    man.push("horizon", cfg.problem.horizon);
    man.push("n_init", cfg.eval.n_init);
    man.push("n_traj", cfg.eval.n_traj);
    man.push_f64("reject_threshold", cfg.eval.reject_threshold);

    let mut table = BufWriter::new(File::create(out.join("table2.csv"))?);
    writeln!(
        table,
        "system,seed,spectral_radius,rate_induced,rate_lqg,diff_mean,diff_std_err,rejected"
    )?;
    let mut diffs = Vec::with_capacity(cfg.lqg.systems);
    let mut any_fallback = false;
    for i in 0..cfg.lqg.systems {
        let sys_seed: u64 = {
            let mut r = derive_rng(cfg.run.seed, "lqg-system", &[i as u64]);
            rand::Rng::random(&mut r)
        };
        let sys = random_stable_system(cfg.lqg.state_dim, cfg.lqg.control_dim, sys_seed)?;
        let problem = sys.problem(cfg.problem.horizon)?;
        let seq = certified_sequence(cfg, &problem, cfg.run.seed, i as u64)?;
        any_fallback |= seq.any_fallback();
        let induced = RbfPolicy::new(problem.clone(), &seq, cfg.policy_config()?)?;
        let lqg = LqgPolicy::from_problem(&problem)?;
        let report = compare(
            &problem,
            &induced,
            &lqg,
            &CompareConfig {
                n_init: cfg.eval.n_init,
                n_traj: cfg.eval.n_traj,
                reject_threshold: cfg.eval.reject_threshold,
                seed: sys_seed,
            },
        )?;
        let (mean_induced, mean_lqg) = mean_rates(&report.rows);
        writeln!(
            table,
            "{i},{sys_seed},{},{},{},{},{},{}",
            format_f64(sys.spectral_radius),
            format_f64(mean_induced),
            format_f64(mean_lqg),
            format_f64(report.mean_diff),
            format_f64(report.diff_std_err),
            report.rejected
        )?;
        man.push(format!("system_{i}_seed"), sys_seed);
        man.push_f64(format!("system_{i}_diff_mean"), report.mean_diff);
        man.push(format!("system_{i}_rejected"), report.rejected);
        diffs.push(report.mean_diff);
    }
    let overall = diffs.iter().sum::<f64>() / diffs.len() as f64;
    writeln!(table, "# overall_diff_mean {}", format_f64(overall))?;
    man.push_f64("overall_diff_mean", overall);
    man.push("any_fallback", any_fallback);
    man.push("millis_total", start.elapsed().as_millis());
    man.write(&out.join("manifest.txt"))?;
    Ok(if any_fallback { EXIT_FALLBACK } else { EXIT_OK })
}

/// Audit tolerance: certified constraints hold pointwise up to the safety
/// inflation, so sampled violations beyond roundoff mean corrupted files.
const AUDIT_TOL: f64 = 1e-8;

fn cmd_validate(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let problem = build_problem(cfg)?;
    let mut values = Vec::with_capacity(problem.horizon + 1);
    for k in 0..=problem.horizon {
        let path = out.join(format!("value_{k:03}.rbf"));
        let file = File::open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} not found", path.display()),
                ))
            } else {
                Error::Io(e)
            }
        })?;
        let vf = bound::read_value(&mut BufReader::new(file), &path.display().to_string())?;
        if vf.dim() != problem.state_dim() {
            return Err(Error::ValidationFailed(format!(
                "{}: dimension {} vs problem {}",
                path.display(),
                vf.dim(),
                problem.state_dim()
            )));
        }
        values.push(vf);
    }
    let seq = ValueBoundSequence {
        values,
        diagnostics: Vec::new(),
    };
    let mut rng = derive_rng(cfg.run.seed, "audit", &[]);
    let audit = bound::validate_sequence(&seq, &problem, cfg.bound.audit_samples, &mut rng)?;
    let worst = audit.worst_violation();
    let clean = worst <= AUDIT_TOL;

    let mut report = BufWriter::new(File::create(out.join("audit.txt"))?);
    writeln!(report, "command validate")?;
    writeln!(report, "seed {}", cfg.run.seed)?;
    writeln!(report, "samples {}", audit.samples)?;
    for s in &audit.steps {
        writeln!(
            report,
            "step_{}_worst_safe_violation {}",
            s.k,
            s.worst_safe_violation.map_or("none".into(), format_f64)
        )?;
        writeln!(
            report,
            "step_{}_worst_target_violation {}",
            s.k,
            s.worst_target_violation.map_or("none".into(), format_f64)
        )?;
    }
    if let (Some(mean), Some(min), Some(max)) = (audit.v0_mean, audit.v0_min, audit.v0_max) {
        writeln!(report, "v0_mean {}", format_f64(mean))?;
        writeln!(report, "v0_min {}", format_f64(min))?;
        writeln!(report, "v0_max {}", format_f64(max))?;
    }
    writeln!(report, "worst_violation {}", format_f64(worst))?;
    writeln!(report, "clean {clean}")?;
    if clean {
        Ok(EXIT_OK)
    } else {
        eprintln!("validate: audit found violation {}", format_f64(worst));
        Ok(EXIT_FAILURE)
    }
}

// ---------------------------------------------------------------------------
// Entry

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::ConfigInvalid(_) => EXIT_CONFIG,
        Error::GridCapExceeded(_) => EXIT_GRID_CAP,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_FILE,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(command: &Command, cfg: &RunConfig, out: &Path) -> Result<i32> {
    match command {
        Command::Bound(_) => cmd_bound(cfg, out),
        Command::Grid(_) => cmd_grid(cfg, out),
        Command::CompareGrid(_) => cmd_compare_grid(cfg, out),
        Command::CompareLqg(_) => cmd_compare_lqg(cfg, out),
        Command::Validate(_) => cmd_validate(cfg, out),
    }
}

/// Runs one parsed invocation and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let args = cli.command.args();
    if let Some(t) = args.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_CONFIG;
        }
        // Fails when a global pool already exists (e.g. repeated in-process
        // runs); the existing pool then serves the request.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let cfg = match RunConfig::from_path(&args.config) {
        Ok(mut cfg) => {
            if let Some(seed) = args.seed {
                cfg.run.seed = seed;
            }
            if let Some(out) = &args.out {
                cfg.run.out_dir = out.clone();
            }
            cfg
        }
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    let out = cfg.run.out_dir.clone();
    match dispatch(&cli.command, &cfg, &out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    const BENCH_1D: &str = r#"
        [problem]
        horizon = 2
        [problem.benchmark]
        state_dim = 1
        control_dim = 1
        [bound]
        num_terms = 10
        [grid]
        state_points = 41
        control_points = 9
        [eval]
        n_init = 4
        n_traj = 20
        [run]
        seed = 11
    "#;

    fn parse(text: &str) -> RunConfig {
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        cfg
    }

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    fn run_command(verb: &str, config: &Path, out: &Path) -> i32 {
        let cli = Cli::parse_from([
            "reachbound",
            verb,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        run(&cli)
    }

    #[test]
    fn explicit_config_round_trips_into_a_problem() {
        let cfg = parse(
            r#"
            [problem]
            horizon = 3
            [problem.target]
            shape = [[2.0, 0.0], [0.0, 1.0]]
            radius = 0.2
            [problem.safe]
            shape = [[1.0, 0.0], [0.0, 1.0]]
            radius = 1.0
            [problem.control]
            shape = [[1.0]]
            radius = 0.5
            [[problem.component]]
            weight = 0.7
            a = [[0.9, 0.0], [0.0, 0.8]]
            b = [[1.0], [0.0]]
            noise = [[0.01, 0.0], [0.0, 0.01]]
            [[problem.component]]
            weight = 0.3
            a = [[0.9, 0.0], [0.0, 0.8]]
            b = [[1.0], [0.0]]
            c = [0.1, 0.0]
            noise = [[0.02, 0.0], [0.0, 0.02]]
        "#,
        );
        let problem = build_problem(&cfg).unwrap();
        assert_eq!(problem.state_dim(), 2);
        assert_eq!(problem.control_dim(), 1);
        assert_eq!(problem.horizon, 3);
        assert_eq!(problem.kernel.components().len(), 2);
        assert_eq!(problem.target.shape()[(0, 0)], 2.0);
        assert_eq!(problem.kernel.components()[1].c[0], 0.1);
    }

    #[test]
    fn benchmark_shorthand_builds_identity_or_ones() {
        let cfg = parse(BENCH_1D);
        let problem = build_problem(&cfg).unwrap();
        let comp = &problem.kernel.components()[0];
        assert_eq!(comp.a[(0, 0)], 1.0);
        assert_eq!(comp.noise.matrix()[(0, 0)], 0.001);
        assert_eq!(problem.target.radius(), 0.1);

        let cfg = parse(
            r#"
            [problem]
            horizon = 2
            [problem.benchmark]
            state_dim = 2
            control_dim = 1
            pattern = "ones"
        "#,
        );
        let problem = build_problem(&cfg).unwrap();
        let comp = &problem.kernel.components()[0];
        assert_eq!(comp.a[(0, 1)], 1.0);
        assert_eq!(comp.b[(1, 0)], 1.0);
    }

    #[test]
    fn invalid_configs_are_rejected_with_reasons() {
        let cases = [
            // Zero horizon.
            "[problem]\nhorizon = 0\n[problem.benchmark]\nstate_dim = 1\ncontrol_dim = 1\n",
            // No sets at all.
            "[problem]\nhorizon = 2\n",
            // Unknown indicator method.
            "[problem]\nhorizon = 2\n[problem.benchmark]\nstate_dim = 1\ncontrol_dim = 1\n[bound]\nindicator = \"qp\"\n",
            // Threshold outside [0, 1].
            "[problem]\nhorizon = 2\n[problem.benchmark]\nstate_dim = 1\ncontrol_dim = 1\n[eval]\nreject_threshold = 1.5\n",
            // Target swallowing the safe set.
            "[problem]\nhorizon = 2\n[problem.benchmark]\nstate_dim = 1\ncontrol_dim = 1\ntarget_radius = 2.0\n",
        ];
        for text in cases {
            let cfg: RunConfig = toml::from_str(text).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))), "{text}");
        }
        // Unknown keys are schema errors at parse time.
        assert!(toml::from_str::<RunConfig>("[problem]\nhorizon = 2\nbogus = 1\n").is_err());
        // Ragged matrix literals fail at build time.
        let cfg: RunConfig = toml::from_str(
            "[problem]\nhorizon = 2\n[problem.target]\nshape = [[1.0, 0.0], [0.0]]\nradius = 0.1\n[problem.safe]\nshape = [[1.0]]\nradius = 1.0\n[problem.control]\nshape = [[1.0]]\nradius = 0.1\n[[problem.component]]\na = [[1.0]]\nb = [[1.0]]\nnoise = [[0.001]]\n",
        )
        .unwrap();
        cfg.validate().unwrap();
        assert!(matches!(build_problem(&cfg), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn bound_command_writes_values_and_a_deterministic_manifest() {
        let dir = TempDir::new().unwrap();
        let config = write_config(dir.path(), BENCH_1D);
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        assert_eq!(run_command("bound", &config, &out_a), EXIT_OK);
        assert_eq!(run_command("bound", &config, &out_b), EXIT_OK);
        for k in 0..=2 {
            let f = format!("value_{k:03}.rbf");
            let a = std::fs::read(out_a.join(&f)).unwrap();
            let b = std::fs::read(out_b.join(&f)).unwrap();
            assert_eq!(a, b, "{f} differs between runs");
            assert!(!a.is_empty());
        }
        let strip = |p: &Path| {
            std::fs::read_to_string(p.join("manifest.txt"))
                .unwrap()
                .lines()
                .filter(|l| !l.starts_with("millis"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let man_a = strip(&out_a);
        assert_eq!(man_a, strip(&out_b));
        assert!(man_a.contains("command bound"));
        assert!(man_a.contains("any_fallback false"));
        assert!(man_a.contains("step_0_status Optimal"));
    }

    #[test]
    fn grid_command_writes_tables_and_honours_the_cap() {
        let dir = TempDir::new().unwrap();
        let config = write_config(dir.path(), BENCH_1D);
        let out = dir.path().join("grid");
        assert_eq!(run_command("grid", &config, &out), EXIT_OK);
        let csv = std::fs::read_to_string(out.join("grid_value_000.csv")).unwrap();
        assert_eq!(csv.lines().count(), 42, "header plus one row per node");
        assert!(csv.starts_with("x0,value\n"));

        let capped = BENCH_1D.replace("[run]", "[grid.extra]\n[run]");
        // No such key: prove deny_unknown_fields guards typos in grid too.
        let cfg_err: std::result::Result<RunConfig, _> = toml::from_str(&capped);
        assert!(cfg_err.is_err());

        let tight = BENCH_1D.replace("control_points = 9", "control_points = 9\nmax_ops = 10");
        let config = write_config(dir.path(), &tight);
        assert_eq!(run_command("grid", &config, &out), EXIT_GRID_CAP);
    }

    #[test]
    fn validate_flags_corruption_and_missing_files() {
        let dir = TempDir::new().unwrap();
        let config = write_config(dir.path(), BENCH_1D);
        let out = dir.path().join("run");
        assert_eq!(run_command("bound", &config, &out), EXIT_OK);
        assert_eq!(run_command("validate", &config, &out), EXIT_OK);
        let audit = std::fs::read_to_string(out.join("audit.txt")).unwrap();
        assert!(audit.contains("clean true"), "{audit}");

        // A mid-sequence constant 0 cannot dominate the next expectation.
        std::fs::write(out.join("value_001.rbf"), "const 1 0.0\n").unwrap();
        assert_eq!(run_command("validate", &config, &out), EXIT_FAILURE);

        std::fs::remove_file(out.join("value_001.rbf")).unwrap();
        assert_eq!(run_command("validate", &config, &out), EXIT_MISSING_FILE);
    }

    #[test]
    fn missing_config_maps_to_the_missing_file_exit() {
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("x");
        assert_eq!(
            run_command("bound", &dir.path().join("absent.toml"), &out),
            EXIT_MISSING_FILE
        );
        let config = write_config(dir.path(), "[problem]\nhorizon = 0\n[problem.benchmark]\nstate_dim = 1\ncontrol_dim = 1\n");
        assert_eq!(run_command("bound", &config, &out), EXIT_CONFIG);
    }

    #[test]
    fn seed_flag_overrides_the_config_seed() {
        let dir = TempDir::new().unwrap();
        let config = write_config(dir.path(), BENCH_1D);
        let out = dir.path().join("s");
        let cli = Cli::parse_from([
            "reachbound",
            "bound",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "99",
        ]);
        assert_eq!(run(&cli), EXIT_OK);
        let man = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(man.contains("seed 99"));
    }
}
