//! Grid dynamic programming for the reach-avoid recursion, used as a
//! ground-truth baseline at low dimension.
//!
//! The state box is the bounding box of the safe set, discretized with
//! inclusive endpoints; each node owns a cell of full spacing (midpoint rule
//! with the density evaluated at the node). The backward step is
//!
//! ```text
//!   V_k(x) = max_u  sum_y V_{k+1}(y) q(y | x, u) vol,
//! ```
//!
//! over control nodes inside the control set, with `V = 1` on target nodes,
//! `0` outside the safe set, and a clamp to `[0, 1]` absorbing quadrature
//! noise. Density sums are truncated to per-axis windows of eight standard
//! deviations around each component mean; the neglected tail mass is far
//! below the quadrature error. Work is counted in window-node visits against
//! a caller-supplied cap so that oversized problems fail fast instead of
//! grinding.

use nalgebra::DVector;
use rayon::prelude::*;
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::bound::ReachAvoidProblem;
use crate::errors::{Error, Result};
use crate::rbf::format_f64;

/// Per-axis window width in standard deviations for quadrature truncation.
const WINDOW_SDS: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Rectangular grid with inclusive endpoints, row-major flat indexing with
/// the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one axis".into()));
        }
        for (i, a) in axes.iter().enumerate() {
            if a.count < 2 {
                return Err(Error::InvalidArgument(format!(
                    "axis {i} needs at least 2 points, got {}",
                    a.count
                )));
            }
            if !(a.lo.is_finite() && a.hi.is_finite() && a.lo < a.hi) {
                return Err(Error::InvalidArgument(format!(
                    "axis {i} bounds [{}, {}]",
                    a.lo, a.hi
                )));
            }
        }
        Ok(Self { axes })
    }

    /// Symmetric box `[-radius, radius]^dim` with `count` points per axis.
    pub fn symmetric(radius: f64, dim: usize, count: usize) -> Result<Self> {
        Self::new(
            (0..dim)
                .map(|_| Axis { lo: -radius, hi: radius, count })
                .collect(),
        )
    }

    /// Grid over an explicit box, `count` points on every axis.
    pub fn from_box(bbox: &[(f64, f64)], count: usize) -> Result<Self> {
        Self::new(
            bbox.iter()
                .map(|&(lo, hi)| Axis { lo, hi, count })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn num_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let a = &self.axes[axis];
        (a.hi - a.lo) / (a.count - 1) as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.axes[axis].lo + self.spacing(axis) * i as f64
    }

    pub fn node(&self, flat: usize) -> DVector<f64> {
        let multi = self.multi_index(flat);
        DVector::from_fn(self.dim(), |a, _| self.coord(a, multi[a]))
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0usize; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = flat % self.axes[a].count;
            flat /= self.axes[a].count;
        }
        idx
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut flat = 0;
        for a in 0..self.dim() {
            flat = flat * self.axes[a].count + multi[a];
        }
        flat
    }

    /// Index range of nodes within `[lo, hi]` on one axis, clipped to the
    /// grid; `None` when the interval misses the grid entirely.
    pub fn window(&self, axis: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let a = &self.axes[axis];
        if hi < a.lo || lo > a.hi {
            return None;
        }
        let h = self.spacing(axis);
        let i_lo = ((lo - a.lo) / h).ceil().max(0.0) as usize;
        let i_hi = (((hi - a.lo) / h).floor() as usize).min(a.count - 1);
        if i_lo > i_hi {
            None
        } else {
            Some((i_lo, i_hi))
        }
    }

    /// Same nodes plus `factor - 1` extra points per cell (endpoints kept).
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("refine factor must be positive".into()));
        }
        Self::new(
            self.axes
                .iter()
                .map(|a| Axis {
                    lo: a.lo,
                    hi: a.hi,
                    count: (a.count - 1) * factor + 1,
                })
                .collect(),
        )
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && (0..self.dim()).all(|a| x[a] >= self.axes[a].lo && x[a] <= self.axes[a].hi)
    }

    /// Coordinatewise clamp onto the grid box.
    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |a, _| x[a].clamp(self.axes[a].lo, self.axes[a].hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Target,
    Ring,
    Outside,
}

/// Classifies every grid node against the problem's target and safe sets.
pub fn classify_nodes(grid: &Grid, problem: &ReachAvoidProblem) -> Vec<Region> {
    (0..grid.num_nodes())
        .map(|f| {
            let x = grid.node(f);
            if problem.target.contains(&x) {
                Region::Target
            } else if problem.safe.contains(&x) {
                Region::Ring
            } else {
                Region::Outside
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    Multilinear,
    Nearest,
}

/// One value table of the backward recursion.
#[derive(Debug, Clone)]
pub struct GridValueFunction {
    pub k: usize,
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridValueFunction {
    pub fn value(&self, flat: usize) -> f64 {
        self.values[flat]
    }

    /// Interpolated value at an arbitrary point, clamped onto the grid box.
    pub fn interpolate(&self, x: &DVector<f64>, mode: InterpMode) -> f64 {
        let x = self.grid.clamp(x);
        let n = self.grid.dim();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0f64; n];
        for a in 0..n {
            let h = self.grid.spacing(a);
            let t = (x[a] - self.grid.axes[a].lo) / h;
            let i = (t.floor() as usize).min(self.grid.axes[a].count - 2);
            base[a] = i;
            frac[a] = (t - i as f64).clamp(0.0, 1.0);
        }
        match mode {
            InterpMode::Nearest => {
                let multi: Vec<usize> = (0..n)
                    .map(|a| if frac[a] < 0.5 { base[a] } else { base[a] + 1 })
                    .collect();
                self.values[self.grid.flat_index(&multi)]
            }
            InterpMode::Multilinear => {
                let mut acc = 0.0;
                for corner in 0..(1usize << n) {
                    let mut weight = 1.0;
                    let mut multi = vec![0usize; n];
                    for a in 0..n {
                        if corner >> a & 1 == 1 {
                            weight *= frac[a];
                            multi[a] = base[a] + 1;
                        } else {
                            weight *= 1.0 - frac[a];
                            multi[a] = base[a];
                        }
                    }
                    acc += weight * self.values[self.grid.flat_index(&multi)];
                }
                acc
            }
        }
    }

    /// CSV export, one row per node: coordinates then value.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let n = self.grid.dim();
        for a in 0..n {
            write!(out, "x{a},")?;
        }
        writeln!(out, "value")?;
        for f in 0..self.grid.num_nodes() {
            let x = self.grid.node(f);
            for a in 0..n {
                write!(out, "{},", format_f64(x[a]))?;
            }
            writeln!(out, "{}", format_f64(self.values[f]))?;
        }
        Ok(())
    }
}

/// Cached per-component quantities for fast density sums.
struct CompCache {
    weight_norm: f64,
    prec: nalgebra::DMatrix<f64>,
    axis_sd: Vec<f64>,
}

fn component_caches(problem: &ReachAvoidProblem) -> Vec<CompCache> {
    let n = problem.kernel.state_dim();
    problem
        .kernel
        .components()
        .iter()
        .map(|c| CompCache {
            weight_norm: c.weight
                * (-0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * c.noise.logdet())
                .exp(),
            prec: c.noise.inverse(),
            axis_sd: (0..n).map(|a| c.noise.matrix()[(a, a)].sqrt()).collect(),
        })
        .collect()
}

/// Windowed quadrature of `sum_y prev[y] q(y | x, u) vol`. Returns the sum
/// and the number of window nodes visited.
fn quadrature(
    prev: &[f64],
    grid: &Grid,
    problem: &ReachAvoidProblem,
    caches: &[CompCache],
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (f64, u64) {
    let n = grid.dim();
    let mut acc = 0.0;
    let mut visits = 0u64;
    let mut diff = vec![0.0f64; n];
    for (comp, cache) in problem.kernel.components().iter().zip(caches) {
        let mean = &comp.a * x + &comp.b * u + &comp.c;
        let mut lo = vec![0usize; n];
        let mut hi = vec![0usize; n];
        let mut empty = false;
        for a in 0..n {
            let r = WINDOW_SDS * cache.axis_sd[a];
            match grid.window(a, mean[a] - r, mean[a] + r) {
                Some((l, h)) => {
                    lo[a] = l;
                    hi[a] = h;
                }
                None => {
                    empty = true;
                    break;
                }
            }
        }
        if empty {
            continue;
        }
        // Odometer over the window's multi-indices, last axis fastest.
        let mut idx = lo.clone();
        let mut comp_acc = 0.0;
        'nodes: loop {
            visits += 1;
            let flat = grid.flat_index(&idx);
            let v = prev[flat];
            if v != 0.0 {
                for a in 0..n {
                    diff[a] = grid.coord(a, idx[a]) - mean[a];
                }
                let mut quad = 0.0;
                for p in 0..n {
                    let mut row = 0.0;
                    for q in 0..n {
                        row += cache.prec[(p, q)] * diff[q];
                    }
                    quad += diff[p] * row;
                }
                comp_acc += v * (-0.5 * quad).exp();
            }
            for a in (0..n).rev() {
                if idx[a] < hi[a] {
                    idx[a] += 1;
                    continue 'nodes;
                }
                idx[a] = lo[a];
                if a == 0 {
                    break 'nodes;
                }
            }
        }
        acc += cache.weight_norm * comp_acc;
    }
    (acc * grid.cell_volume(), visits)
}

/// Control nodes inside the control set, in flat-index order (the order fixes
/// the deterministic tie-break: the first strict improvement wins, so ties
/// resolve to the lowest node index).
pub fn feasible_controls(grid: &Grid, problem: &ReachAvoidProblem) -> Vec<DVector<f64>> {
    (0..grid.num_nodes())
        .map(|f| grid.node(f))
        .filter(|u| problem.control.contains(u))
        .collect()
}

#[derive(Debug)]
pub struct DpResult {
    /// Tables indexed by horizon step, `values[k]` for `k = 0..=T`.
    pub tables: Vec<GridValueFunction>,
    pub regions: Vec<Region>,
    /// Window-node visits accumulated over the whole recursion.
    pub ops: u64,
}

/// Backward value recursion on the grid. `max_ops` caps window-node visits;
/// the cap is checked at state-node granularity, so the final tally can
/// overshoot by at most one node's work.
pub fn dp_recursion(
    problem: &ReachAvoidProblem,
    state_grid: &Grid,
    control_grid: &Grid,
    max_ops: u64,
) -> Result<DpResult> {
    if state_grid.dim() != problem.kernel.state_dim()
        || control_grid.dim() != problem.kernel.control_dim()
    {
        return Err(Error::DimensionMismatch("grid dims vs kernel dims".into()));
    }
    let nodes = state_grid.num_nodes();
    if (nodes as u64).saturating_mul(problem.horizon as u64) > max_ops {
        return Err(Error::GridCapExceeded(format!(
            "{nodes} nodes x {} steps exceeds cap {max_ops} before quadrature",
            problem.horizon
        )));
    }
    let regions = classify_nodes(state_grid, problem);
    let controls = feasible_controls(control_grid, problem);
    if controls.is_empty() {
        return Err(Error::InvalidArgument(
            "no control node lies inside the control set".into(),
        ));
    }
    let caches = component_caches(problem);

    let terminal: Vec<f64> = regions
        .iter()
        .map(|r| if *r == Region::Target { 1.0 } else { 0.0 })
        .collect();
    let mut tables = vec![GridValueFunction {
        k: problem.horizon,
        grid: state_grid.clone(),
        values: terminal,
    }];

    let ops = AtomicU64::new(nodes as u64 * problem.horizon as u64);
    let exceeded = AtomicBool::new(false);
    for k in (0..problem.horizon).rev() {
        let prev = &tables.last().unwrap().values;
        let values: Vec<f64> = (0..nodes)
            .into_par_iter()
            .map(|f| match regions[f] {
                Region::Target => 1.0,
                Region::Outside => 0.0,
                Region::Ring => {
                    if exceeded.load(Ordering::Relaxed) {
                        return 0.0;
                    }
                    let x = state_grid.node(f);
                    let mut best = f64::NEG_INFINITY;
                    let mut visits = 0u64;
                    for u in &controls {
                        let (val, v) =
                            quadrature(prev, state_grid, problem, &caches, &x, u);
                        visits += v;
                        if val > best {
                            best = val;
                        }
                    }
                    if ops.fetch_add(visits, Ordering::Relaxed) + visits > max_ops {
                        exceeded.store(true, Ordering::Relaxed);
                    }
                    best.clamp(0.0, 1.0)
                }
            })
            .collect();
        if exceeded.load(Ordering::Relaxed) {
            return Err(Error::GridCapExceeded(format!(
                "quadrature work passed cap {max_ops} at step {k}"
            )));
        }
        tables.push(GridValueFunction {
            k,
            grid: state_grid.clone(),
            values,
        });
    }
    tables.reverse();
    Ok(DpResult {
        tables,
        regions,
        ops: ops.load(Ordering::Relaxed),
    })
}

/// One-step lookahead control at an arbitrary state: argmax over control
/// nodes of the quadrature against `v_next`. States outside the grid box are
/// clamped onto it; the flag reports that clamping happened.
pub fn grid_policy(
    v_next: &GridValueFunction,
    problem: &ReachAvoidProblem,
    control_grid: &Grid,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, bool)> {
    if x.len() != v_next.grid.dim() {
        return Err(Error::DimensionMismatch("state dim vs grid dim".into()));
    }
    let clamped = !v_next.grid.contains(x);
    let x_eval = v_next.grid.clamp(x);
    let controls = feasible_controls(control_grid, problem);
    if controls.is_empty() {
        return Err(Error::InvalidArgument(
            "no control node lies inside the control set".into(),
        ));
    }
    let caches = component_caches(problem);
    let mut best = f64::NEG_INFINITY;
    let mut best_u = controls[0].clone();
    for u in &controls {
        let (val, _) = quadrature(&v_next.values, &v_next.grid, problem, &caches, &x_eval, u);
        if val > best {
            best = val;
            best_u = u.clone();
        }
    }
    Ok((best_u, clamped))
}
