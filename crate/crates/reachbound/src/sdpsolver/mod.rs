//! Dense conic solver for small semidefinite programs.
//!
//! Programs are stated in inequality form over free variables `x in R^p`:
//!
//! ```text
//!   minimize    c^T x
//!   subject to  F_b(x) = F_{b,0} + sum_k x_k F_{b,k}  PSD   for each block b
//!               g_r(x) = g_{r,0} + sum_k x_k G_{r,k}  >= 0  for each row r
//! ```
//!
//! All dominance LMIs, the bound-step SDPs and the indicator LPs fit this
//! shape. The solver is an infeasible-start primal-dual interior-point method
//! with Nesterov-Todd scaling and a Mehrotra-style adaptive centering
//! parameter; see [`ipm`]. Everything is dense and deterministic: identical
//! programs and configs produce identical iterates on every run.

mod ipm;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::errors::{Error, Result};
use crate::rbf::format_f64;

/// One PSD constraint block `F_0 + sum_k x_k F_k >= 0`.
#[derive(Debug, Clone)]
pub struct PsdBlock {
    pub side: usize,
    /// Constant matrix `F_0`, symmetric `side x side`.
    pub f0: DMatrix<f64>,
    /// Per-variable coefficient matrices, sparse over variables, each
    /// symmetric `side x side`. Indices must be strictly increasing.
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
}

/// One scalar inequality `g0 + sum_k coeffs_k x_k >= 0`.
#[derive(Debug, Clone)]
pub struct LinearRow {
    pub g0: f64,
    /// Sparse coefficients with strictly increasing variable indices.
    pub coeffs: Vec<(usize, f64)>,
}

/// A conic program in inequality form.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub cost: Vec<f64>,
    pub blocks: Vec<PsdBlock>,
    pub rows: Vec<LinearRow>,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Relative duality-gap tolerance for declaring optimality.
    pub gap_tol: f64,
    /// Relative primal/dual residual tolerance.
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Print one line of residual/step diagnostics per iteration to stderr.
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        // Residuals cannot be driven much below the gap in double precision:
        // the dual update injects roundoff that grows as mu shrinks, so a
        // residual tolerance equal to the gap tolerance races against it on
        // degenerate programs. One decade of slack resolves the race.
        Self {
            gap_tol: 1e-8,
            feas_tol: 1e-7,
            max_iter: 200,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Converged within tolerances.
    Optimal,
    /// A Farkas-type improving ray certifies primal infeasibility.
    Infeasible,
    /// Numerical breakdown (singular scaling, stalled progress); borderline
    /// infeasibility detection lands here rather than guessing.
    IllConditioned,
    IterationLimit,
}

/// Solver output. Dual matrices are reported per PSD block, dual scalars per
/// linear row; both are in the original (unscaled) data basis.
#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub psd_duals: Vec<DMatrix<f64>>,
    pub row_duals: Vec<f64>,
    pub duality_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
}

/// Independent check of a reported solution, recomputing residuals and block
/// eigenvalues without reusing any solver internals.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    /// Minimum eigenvalue of `F_b(x)` per block.
    pub block_min_eigs: Vec<f64>,
    /// Minimum linear-row value `g_r(x)`.
    pub min_row_value: f64,
    /// Minimum eigenvalue across dual blocks and row duals.
    pub dual_min_eig: f64,
    /// `max_k |c_k - <F_k, Z> - G_k^T z|`, scaled by `1 + |c|_inf`.
    pub dual_residual: f64,
    /// `|c^T x - dual objective|, scaled by `1 + |objectives|`.
    pub gap: f64,
    /// True when every quantity is within ten times the solver tolerance.
    pub clean: bool,
}

impl ConicProgram {
    /// Structural validation: square symmetric blocks, in-range strictly
    /// increasing variable indices, and no variable that appears in neither a
    /// block nor a row (such a program has a singular Newton system and is
    /// rejected up front).
    pub fn validate(&self) -> Result<()> {
        if self.num_vars == 0 {
            return Err(Error::BadProgram("program has no variables".into()));
        }
        if self.cost.len() != self.num_vars {
            return Err(Error::BadProgram(format!(
                "cost has {} entries for {} variables",
                self.cost.len(),
                self.num_vars
            )));
        }
        if self.blocks.is_empty() && self.rows.is_empty() {
            return Err(Error::BadProgram("program has no constraints".into()));
        }
        let mut used = vec![false; self.num_vars];
        for (bi, b) in self.blocks.iter().enumerate() {
            if b.side == 0 || b.f0.nrows() != b.side || b.f0.ncols() != b.side {
                return Err(Error::BadProgram(format!("block {bi} has bad shape")));
            }
            check_sym(&b.f0, &format!("block {bi} constant"))?;
            let mut prev = None;
            for (k, m) in &b.coeffs {
                if *k >= self.num_vars {
                    return Err(Error::BadProgram(format!(
                        "block {bi} references variable {k}"
                    )));
                }
                if prev.is_some_and(|p| p >= *k) {
                    return Err(Error::BadProgram(format!(
                        "block {bi} coefficient indices not strictly increasing"
                    )));
                }
                prev = Some(*k);
                if m.nrows() != b.side || m.ncols() != b.side {
                    return Err(Error::BadProgram(format!(
                        "block {bi} coefficient for variable {k} has bad shape"
                    )));
                }
                check_sym(m, &format!("block {bi} coefficient {k}"))?;
                used[*k] = true;
            }
        }
        for (ri, r) in self.rows.iter().enumerate() {
            let mut prev = None;
            for (k, _) in &r.coeffs {
                if *k >= self.num_vars {
                    return Err(Error::BadProgram(format!("row {ri} references variable {k}")));
                }
                if prev.is_some_and(|p| p >= *k) {
                    return Err(Error::BadProgram(format!(
                        "row {ri} coefficient indices not strictly increasing"
                    )));
                }
                prev = Some(*k);
                used[*k] = true;
            }
        }
        if let Some(k) = used.iter().position(|u| !u) {
            return Err(Error::BadProgram(format!(
                "variable {k} appears in no constraint"
            )));
        }
        Ok(())
    }

    /// Evaluates block `b` at `x`.
    pub fn block_value(&self, b: usize, x: &[f64]) -> DMatrix<f64> {
        let blk = &self.blocks[b];
        let mut m = blk.f0.clone();
        for (k, coeff) in &blk.coeffs {
            m += coeff * x[*k];
        }
        m
    }

    /// Evaluates linear row `r` at `x`.
    pub fn row_value(&self, r: usize, x: &[f64]) -> f64 {
        let row = &self.rows[r];
        row.g0 + row.coeffs.iter().map(|&(k, g)| g * x[k]).sum::<f64>()
    }

    /// Solves the program. Structural errors are `Err`; numerical outcomes,
    /// including infeasibility, are encoded in the solution status.
    pub fn solve(&self, cfg: &SolverConfig) -> Result<ConicSolution> {
        self.validate()?;
        Ok(ipm::solve(self, cfg))
    }

    /// Recomputes feasibility, dual feasibility and the duality gap from
    /// scratch via eigenvalue decompositions. Flags (`clean = false`) any
    /// quantity worse than ten times the configured tolerance.
    pub fn verify(&self, sol: &ConicSolution, cfg: &SolverConfig) -> VerifyReport {
        let data_scale = self.data_scale();
        let mut block_min_eigs = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            let m = self.block_value(b, &sol.x);
            let sym = (&m + m.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            block_min_eigs.push(eig.eigenvalues.min());
        }
        let min_row_value = (0..self.rows.len())
            .map(|r| self.row_value(r, &sol.x))
            .fold(f64::INFINITY, f64::min);

        let mut dual_min_eig = f64::INFINITY;
        for z in &sol.psd_duals {
            let sym = (z + z.transpose()) * 0.5;
            dual_min_eig = dual_min_eig.min(SymmetricEigen::new(sym).eigenvalues.min());
        }
        for &z in &sol.row_duals {
            dual_min_eig = dual_min_eig.min(z);
        }

        let cost_scale = 1.0 + self.cost.iter().fold(0.0f64, |a, &c| a.max(c.abs()));
        // Same magnitude-aware normalization as the solver: the adjoint sum
        // cancels down to |c|, so its roundoff floor scales with the duals.
        let z_inf = sol
            .psd_duals
            .iter()
            .map(|z| z.amax())
            .chain(sol.row_duals.iter().map(|z| z.abs()))
            .fold(0.0f64, f64::max);
        let mut dual_residual = 0.0f64;
        for k in 0..self.num_vars {
            let mut lhs = 0.0;
            for (b, blk) in self.blocks.iter().enumerate() {
                if let Ok(pos) = blk.coeffs.binary_search_by_key(&k, |(i, _)| *i) {
                    lhs += frob_inner(&blk.coeffs[pos].1, &sol.psd_duals[b]);
                }
            }
            for (r, row) in self.rows.iter().enumerate() {
                if let Ok(pos) = row.coeffs.binary_search_by_key(&k, |(i, _)| *i) {
                    lhs += row.coeffs[pos].1 * sol.row_duals[r];
                }
            }
            dual_residual = dual_residual.max((self.cost[k] - lhs).abs());
        }
        dual_residual /= cost_scale + z_inf;

        let objp: f64 = self.cost.iter().zip(&sol.x).map(|(c, x)| c * x).sum();
        let mut objd = 0.0;
        for (b, blk) in self.blocks.iter().enumerate() {
            objd -= frob_inner(&blk.f0, &sol.psd_duals[b]);
        }
        for (r, row) in self.rows.iter().enumerate() {
            objd -= row.g0 * sol.row_duals[r];
        }
        let gap = (objp - objd).abs() / (1.0 + objp.abs() + objd.abs());

        let feas_floor = -10.0 * cfg.feas_tol * data_scale;
        let clean = block_min_eigs.iter().all(|&e| e >= feas_floor)
            && (self.rows.is_empty() || min_row_value >= feas_floor)
            && dual_min_eig >= feas_floor
            && dual_residual <= 10.0 * cfg.feas_tol
            && gap <= 10.0 * cfg.gap_tol;

        VerifyReport {
            block_min_eigs,
            min_row_value,
            dual_min_eig,
            dual_residual,
            gap,
            clean,
        }
    }

    fn data_scale(&self) -> f64 {
        let mut s = 1.0f64;
        for b in &self.blocks {
            s = s.max(b.f0.amax());
        }
        for r in &self.rows {
            s = s.max(r.g0.abs());
        }
        s
    }
}

pub(crate) fn frob_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_sym(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::NotSymmetric(what.into()));
            }
        }
    }
    Ok(())
}

/// Serializes a program in the sparse-triplet debug format:
///
/// ```text
/// conic-program v1
/// vars <p>
/// cost
/// <k> <value>            (one line per nonzero coefficient, 0-based k)
/// end
/// psd <side>             (one section per block, in program order)
/// <k> <i> <j> <value>    (upper triangle i <= j; k = -1 is the constant part)
/// end
/// nonneg
/// <r> <k> <value>        (k = -1 is the constant term of row r)
/// end
/// ```
///
/// Floats carry 17 significant digits, so a dump parses back bit-identically.
pub fn dump_program(prog: &ConicProgram) -> String {
    let mut out = String::new();
    out.push_str("conic-program v1\n");
    out.push_str(&format!("vars {}\n", prog.num_vars));
    out.push_str("cost\n");
    for (k, &c) in prog.cost.iter().enumerate() {
        if c != 0.0 {
            out.push_str(&format!("{k} {}\n", format_f64(c)));
        }
    }
    out.push_str("end\n");
    for blk in &prog.blocks {
        out.push_str(&format!("psd {}\n", blk.side));
        for i in 0..blk.side {
            for j in i..blk.side {
                if blk.f0[(i, j)] != 0.0 {
                    out.push_str(&format!("-1 {i} {j} {}\n", format_f64(blk.f0[(i, j)])));
                }
            }
        }
        for (k, m) in &blk.coeffs {
            for i in 0..blk.side {
                for j in i..blk.side {
                    if m[(i, j)] != 0.0 {
                        out.push_str(&format!("{k} {i} {j} {}\n", format_f64(m[(i, j)])));
                    }
                }
            }
        }
        out.push_str("end\n");
    }
    if !prog.rows.is_empty() {
        out.push_str("nonneg\n");
        for (r, row) in prog.rows.iter().enumerate() {
            if row.g0 != 0.0 {
                out.push_str(&format!("{r} -1 {}\n", format_f64(row.g0)));
            }
            for (k, g) in &row.coeffs {
                out.push_str(&format!("{r} {k} {}\n", format_f64(*g)));
            }
        }
        out.push_str("end\n");
    }
    out
}

/// Parses a dump produced by [`dump_program`].
pub fn parse_program(text: &str) -> Result<ConicProgram> {
    let bad = |detail: String| Error::Format {
        path: "<conic dump>".into(),
        detail,
    };
    let mut lines = text.lines();
    if lines.next() != Some("conic-program v1") {
        return Err(bad("missing 'conic-program v1' header".into()));
    }
    let vars_line = lines.next().ok_or_else(|| bad("missing vars line".into()))?;
    let num_vars: usize = vars_line
        .strip_prefix("vars ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("bad vars line {vars_line:?}")))?;
    let mut cost = vec![0.0; num_vars];
    let mut blocks = Vec::new();
    let mut rows_map: Vec<LinearRow> = Vec::new();
    let mut saw_cost = false;
    while let Some(line) = lines.next() {
        if line == "cost" {
            saw_cost = true;
            for l in lines.by_ref() {
                if l == "end" {
                    break;
                }
                let mut it = l.split_whitespace();
                let k: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("bad cost line {l:?}")))?;
                let v: f64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("bad cost line {l:?}")))?;
                if k >= num_vars {
                    return Err(bad(format!("cost index {k} out of range")));
                }
                cost[k] = v;
            }
        } else if let Some(side_str) = line.strip_prefix("psd ") {
            let side: usize = side_str
                .parse()
                .map_err(|_| bad(format!("bad psd side {side_str:?}")))?;
            let mut f0 = DMatrix::zeros(side, side);
            let mut coeff_map: std::collections::BTreeMap<usize, DMatrix<f64>> =
                std::collections::BTreeMap::new();
            for l in lines.by_ref() {
                if l == "end" {
                    break;
                }
                let mut it = l.split_whitespace();
                let k: i64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("bad psd line {l:?}")))?;
                let i: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("bad psd line {l:?}")))?;
                let j: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("bad psd line {l:?}")))?;
                let v: f64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("bad psd line {l:?}")))?;
                if i >= side || j >= side || i > j {
                    return Err(bad(format!("bad psd triplet indices in {l:?}")));
                }
                let target = if k < 0 {
                    &mut f0
                } else {
                    let k = k as usize;
                    if k >= num_vars {
                        return Err(bad(format!("psd coefficient index {k} out of range")));
                    }
                    coeff_map.entry(k).or_insert_with(|| DMatrix::zeros(side, side))
                };
                target[(i, j)] = v;
                target[(j, i)] = v;
            }
            blocks.push(PsdBlock {
                side,
                f0,
                coeffs: coeff_map.into_iter().collect(),
            });
        } else if line == "nonneg" {
            let mut map: std::collections::BTreeMap<usize, (f64, std::collections::BTreeMap<usize, f64>)> =
                std::collections::BTreeMap::new();
            for l in lines.by_ref() {
                if l == "end" {
                    break;
                }
                let mut it = l.split_whitespace();
                let r: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("bad nonneg line {l:?}")))?;
                let k: i64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("bad nonneg line {l:?}")))?;
                let v: f64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("bad nonneg line {l:?}")))?;
                let entry = map.entry(r).or_default();
                if k < 0 {
                    entry.0 = v;
                } else {
                    let k = k as usize;
                    if k >= num_vars {
                        return Err(bad(format!("nonneg coefficient index {k} out of range")));
                    }
                    entry.1.insert(k, v);
                }
            }
            let max_row = map.keys().next_back().copied().unwrap_or(0);
            rows_map = (0..=max_row)
                .map(|r| {
                    let (g0, coeffs) = map.remove(&r).unwrap_or_default();
                    LinearRow {
                        g0,
                        coeffs: coeffs.into_iter().collect(),
                    }
                })
                .collect();
        } else if !line.trim().is_empty() {
            return Err(bad(format!("unexpected line {line:?}")));
        }
    }
    if !saw_cost {
        return Err(bad("missing cost section".into()));
    }
    let prog = ConicProgram {
        num_vars,
        cost,
        blocks,
        rows: rows_map,
    };
    prog.validate()?;
    Ok(prog)
}

#[cfg(test)]
mod tests;
