//! Infeasible-start primal-dual interior-point method with Nesterov-Todd
//! scaling.
//!
//! The iterate is `(x, S, Z)`: free variables, one PSD slack per block (plus a
//! scalar slack per linear row) and matching duals. Each iteration eliminates
//! `(dS, dZ)` from the Newton system of the perturbed KKT conditions
//!
//! ```text
//!   F(x) - S = 0,    c_k - <F_k, Z> = 0,    S Z = sigma*mu*I,
//! ```
//!
//! leaving the positive definite Schur system
//! `M dx = rhs`, `M_jk = sum_b <F~_j, F~_k>` where `F~_k = R^{-1} F_k R^{-T}`
//! and `R` is the NT scaling factor per block (`W = R R^T`, `W Z W = S`).
//! The centering parameter follows Mehrotra's heuristic: an affine probe sets
//! `sigma = (mu_aff / mu)^3`, then one corrected solve reuses the factored
//! Schur matrix. Data is equilibrated per variable, per block and per row
//! before iterating; solutions and duals are mapped back to the original basis
//! on exit. Every operation is deterministic.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{frob_inner, ConicProgram, ConicSolution, SolveStatus, SolverConfig};

/// Fraction of the largest feasible step actually taken.
const STEP_FRACTION: f64 = 0.98;
/// Initial slack/dual magnitude in the equilibrated basis.
const INIT_SCALE: f64 = 10.0;

struct Scaled {
    num_vars: usize,
    cost: Vec<f64>,
    blocks: Vec<ScaledBlock>,
    rows: Vec<ScaledRow>,
    var_scale: Vec<f64>,
    block_scale: Vec<f64>,
    row_scale: Vec<f64>,
    cost_scale: f64,
}

struct ScaledBlock {
    side: usize,
    f0: DMatrix<f64>,
    coeffs: Vec<(usize, DMatrix<f64>)>,
}

struct ScaledRow {
    g0: f64,
    coeffs: Vec<(usize, f64)>,
}

fn equilibrate(prog: &ConicProgram) -> Scaled {
    let p = prog.num_vars;
    let mut var_scale = vec![0.0f64; p];
    for b in &prog.blocks {
        for (k, m) in &b.coeffs {
            var_scale[*k] = var_scale[*k].max(m.amax());
        }
    }
    for r in &prog.rows {
        for (k, g) in &r.coeffs {
            var_scale[*k] = var_scale[*k].max(g.abs());
        }
    }
    for g in var_scale.iter_mut() {
        *g = g.clamp(1e-10, 1e10);
    }

    let mut blocks = Vec::with_capacity(prog.blocks.len());
    let mut block_scale = Vec::with_capacity(prog.blocks.len());
    for b in &prog.blocks {
        let delta = b.f0.amax().max(1.0);
        let coeffs = b
            .coeffs
            .iter()
            .map(|(k, m)| (*k, m / (var_scale[*k] * delta)))
            .collect();
        blocks.push(ScaledBlock {
            side: b.side,
            f0: &b.f0 / delta,
            coeffs,
        });
        block_scale.push(delta);
    }

    let mut rows = Vec::with_capacity(prog.rows.len());
    let mut row_scale = Vec::with_capacity(prog.rows.len());
    for r in &prog.rows {
        let mut rho = r.g0.abs().max(1.0);
        for (k, g) in &r.coeffs {
            rho = rho.max(g.abs() / var_scale[*k]);
        }
        rows.push(ScaledRow {
            g0: r.g0 / rho,
            coeffs: r
                .coeffs
                .iter()
                .map(|(k, g)| (*k, g / (var_scale[*k] * rho)))
                .collect(),
        });
        row_scale.push(rho);
    }

    let mut cost: Vec<f64> = (0..p).map(|k| prog.cost[k] / var_scale[k]).collect();
    let cost_scale = cost.iter().fold(1.0f64, |a, c| a.max(c.abs()));
    for c in cost.iter_mut() {
        *c /= cost_scale;
    }

    Scaled {
        num_vars: p,
        cost,
        blocks,
        rows,
        var_scale,
        block_scale,
        row_scale,
        cost_scale,
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Per-block NT scaling data for one iteration.
struct NtBlock {
    /// `R^{-1}` with `W = R R^T`.
    rinv: DMatrix<f64>,
    /// NT eigenvalues `lambda`; `<S, Z> = sum lambda_i^2`.
    lambda: DVector<f64>,
    /// Scaled coefficients `R^{-1} F_k R^{-T}` for this block's variables.
    ftil: Vec<(usize, DMatrix<f64>)>,
    /// Scaled primal residual `R^{-1} (F(x) - S) R^{-T}`.
    ptil: DMatrix<f64>,
    /// Lower Cholesky factor of `S`, for step length computation.
    ls: DMatrix<f64>,
    /// Lower Cholesky factor of `Z`.
    lz: DMatrix<f64>,
}

fn nt_scaling(s_mat: &DMatrix<f64>, z_mat: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = s_mat.nrows();
    let ls = s_mat.clone().cholesky()?.l();
    let lz = z_mat.clone().cholesky()?.l();
    let svd = (lz.transpose() * &ls).svd(true, true);
    let d = svd.singular_values.clone();
    if d.min() <= 1e-300 {
        return None;
    }
    let vt = svd.v_t?;
    // R^{-1} = D^{1/2} V^T L_s^{-1}
    let ls_inv = ls
        .clone()
        .solve_lower_triangular(&DMatrix::identity(n, n))?;
    let mut rinv = vt * ls_inv;
    for i in 0..n {
        let f = d[i].sqrt();
        for j in 0..n {
            rinv[(i, j)] *= f;
        }
    }
    Some((rinv, d, ls, lz))
}

/// Largest `alpha` with `S + alpha*dS` PSD, computed from
/// `lambda_min(L^{-1} dS L^{-T})`. `None` means unbounded (direction PSD).
fn max_step_psd(l: &DMatrix<f64>, ds: &DMatrix<f64>) -> Option<f64> {
    let li_ds = l.solve_lower_triangular(ds)?;
    let t = l.solve_lower_triangular(&li_ds.transpose())?;
    let lam_min = SymmetricEigen::new(sym(&t)).eigenvalues.min();
    if lam_min >= -1e-14 {
        None
    } else {
        Some(-1.0 / lam_min)
    }
}

struct State {
    x: Vec<f64>,
    s_blocks: Vec<DMatrix<f64>>,
    z_blocks: Vec<DMatrix<f64>>,
    s_rows: Vec<f64>,
    z_rows: Vec<f64>,
}

pub(super) fn solve(prog: &ConicProgram, cfg: &SolverConfig) -> ConicSolution {
    let sc = equilibrate(prog);
    let nu: f64 = sc.blocks.iter().map(|b| b.side as f64).sum::<f64>() + sc.rows.len() as f64;

    let mut st = State {
        x: vec![0.0; sc.num_vars],
        s_blocks: sc
            .blocks
            .iter()
            .map(|b| DMatrix::identity(b.side, b.side) * INIT_SCALE)
            .collect(),
        z_blocks: sc
            .blocks
            .iter()
            .map(|b| DMatrix::identity(b.side, b.side) * INIT_SCALE)
            .collect(),
        s_rows: vec![INIT_SCALE; sc.rows.len()],
        z_rows: vec![INIT_SCALE; sc.rows.len()],
    };

    let cost_norm = 1.0 + sc.cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let mut status = SolveStatus::IterationLimit;
    let mut iterations = 0;
    let mut last = Measures::default();

    for iter in 0..cfg.max_iter {
        iterations = iter;

        // Residuals in the scaled basis.
        let rp_blocks: Vec<DMatrix<f64>> = sc
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                let mut m = blk.f0.clone();
                for (k, c) in &blk.coeffs {
                    m += c * st.x[*k];
                }
                m - &st.s_blocks[b]
            })
            .collect();
        let rp_rows: Vec<f64> = sc
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                row.g0 + row.coeffs.iter().map(|&(k, g)| g * st.x[k]).sum::<f64>() - st.s_rows[r]
            })
            .collect();

        let mut rd = vec![0.0f64; sc.num_vars];
        for (k, c) in sc.cost.iter().enumerate() {
            rd[k] = *c;
        }
        for (b, blk) in sc.blocks.iter().enumerate() {
            for (k, c) in &blk.coeffs {
                rd[*k] -= frob_inner(c, &st.z_blocks[b]);
            }
        }
        for (r, row) in sc.rows.iter().enumerate() {
            for (k, g) in &row.coeffs {
                rd[*k] -= g * st.z_rows[r];
            }
        }

        let gap_sum: f64 = st
            .s_blocks
            .iter()
            .zip(&st.z_blocks)
            .map(|(s, z)| frob_inner(s, z))
            .sum::<f64>()
            + st.s_rows.iter().zip(&st.z_rows).map(|(s, z)| s * z).sum::<f64>();
        let mu = gap_sum / nu;

        let objp: f64 = sc.cost.iter().zip(&st.x).map(|(c, x)| c * x).sum();
        let objd: f64 = -sc
            .blocks
            .iter()
            .zip(&st.z_blocks)
            .map(|(blk, z)| frob_inner(&blk.f0, z))
            .sum::<f64>()
            - sc.rows.iter().zip(&st.z_rows).map(|(row, z)| row.g0 * z).sum::<f64>();

        let pres = rp_blocks
            .iter()
            .map(|m| m.amax())
            .chain(rp_rows.iter().map(|v| v.abs()))
            .fold(0.0f64, f64::max)
            / (1.0 + INIT_SCALE);
        // The adjoint sum cancels to |c|, so its roundoff floor grows with the
        // dual magnitude; normalizing by it keeps the test achievable when
        // multipliers are legitimately large.
        let z_inf = st
            .z_blocks
            .iter()
            .map(|z| z.amax())
            .chain(st.z_rows.iter().map(|z| z.abs()))
            .fold(0.0f64, f64::max);
        let dres = rd.iter().fold(0.0f64, |a, v| a.max(v.abs())) / (cost_norm + z_inf);
        let gap_rel = gap_sum / (1.0 + objp.abs() + objd.abs());
        last = Measures {
            pres,
            dres,
            gap_sum,
        };

        if pres <= cfg.feas_tol && dres <= cfg.feas_tol && gap_rel <= cfg.gap_tol {
            status = SolveStatus::Optimal;
            break;
        }

        // Farkas certificate: Z >= 0 with A*(Z) ~ 0 and <F_0, Z> < 0 proves
        // there is no x with F(x) PSD.
        let theta: f64 = st.z_blocks.iter().map(|z| z.trace()).sum::<f64>()
            + st.z_rows.iter().sum::<f64>();
        if theta > 1e-8 {
            let mut a_inf = 0.0f64;
            for k in 0..sc.num_vars {
                a_inf = a_inf.max((sc.cost[k] - rd[k]).abs() / theta);
            }
            let b_inf = -objd / theta;
            if b_inf <= -1e3 * cfg.feas_tol && a_inf <= cfg.feas_tol {
                status = SolveStatus::Infeasible;
                break;
            }
        }

        if !mu.is_finite() || mu <= 1e-300 {
            status = SolveStatus::IllConditioned;
            break;
        }

        // NT scaling per block.
        let mut nt_blocks = Vec::with_capacity(sc.blocks.len());
        let mut scaling_ok = true;
        for (b, blk) in sc.blocks.iter().enumerate() {
            match nt_scaling(&st.s_blocks[b], &st.z_blocks[b]) {
                Some((rinv, lambda, ls, lz)) => {
                    let ftil: Vec<(usize, DMatrix<f64>)> = blk
                        .coeffs
                        .iter()
                        .map(|(k, c)| (*k, sym(&(&rinv * c * rinv.transpose()))))
                        .collect();
                    let ptil = sym(&(&rinv * &rp_blocks[b] * rinv.transpose()));
                    nt_blocks.push(NtBlock {
                        rinv,
                        lambda,
                        ftil,
                        ptil,
                        ls,
                        lz,
                    });
                }
                None => {
                    scaling_ok = false;
                    break;
                }
            }
        }
        if !scaling_ok {
            status = SolveStatus::IllConditioned;
            break;
        }

        // Schur complement matrix; PSD by construction, regularized lightly.
        let mut m = DMatrix::zeros(sc.num_vars, sc.num_vars);
        for nb in &nt_blocks {
            for (a_pos, (ka, fa)) in nb.ftil.iter().enumerate() {
                for (kb, fb) in nb.ftil.iter().skip(a_pos) {
                    let v = frob_inner(fa, fb);
                    m[(*ka, *kb)] += v;
                    if ka != kb {
                        m[(*kb, *ka)] += v;
                    }
                }
            }
        }
        for (r, row) in sc.rows.iter().enumerate() {
            let w = st.z_rows[r] / st.s_rows[r];
            for (a_pos, (ka, ga)) in row.coeffs.iter().enumerate() {
                for (kb, gb) in row.coeffs.iter().skip(a_pos) {
                    let v = ga * gb * w;
                    m[(*ka, *kb)] += v;
                    if ka != kb {
                        m[(*kb, *ka)] += v;
                    }
                }
            }
        }
        let base_reg = 1e-13 * (1.0 + m.trace() / sc.num_vars as f64);
        let mut chol = None;
        let mut reg = base_reg;
        for _ in 0..4 {
            let mut mr = m.clone();
            for i in 0..sc.num_vars {
                mr[(i, i)] += reg;
            }
            if let Some(c) = mr.cholesky() {
                chol = Some(c);
                break;
            }
            reg *= 1e3;
        }
        let Some(chol) = chol else {
            status = SolveStatus::IllConditioned;
            break;
        };

        let solve_direction = |sigma_mu: f64| -> (Vec<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<f64>, Vec<f64>) {
            // rhs_j = <F~_j, R~*> + row terms - r_d_j with
            // R~* = -P~ + sigma*mu*D^{-1} - D per block.
            let mut rhs = DVector::zeros(sc.num_vars);
            let rstar_blocks: Vec<DMatrix<f64>> = nt_blocks
                .iter()
                .map(|nb| {
                    let mut rstar = -&nb.ptil;
                    for i in 0..rstar.nrows() {
                        rstar[(i, i)] += sigma_mu / nb.lambda[i] - nb.lambda[i];
                    }
                    rstar
                })
                .collect();
            for (nb, rstar) in nt_blocks.iter().zip(&rstar_blocks) {
                for (k, f) in &nb.ftil {
                    rhs[*k] += frob_inner(f, rstar);
                }
            }
            let rstar_rows: Vec<f64> = sc
                .rows
                .iter()
                .enumerate()
                .map(|(r, _)| -rp_rows[r] + sigma_mu / st.z_rows[r] - st.s_rows[r])
                .collect();
            for (r, row) in sc.rows.iter().enumerate() {
                let w = st.z_rows[r] / st.s_rows[r];
                for (k, g) in &row.coeffs {
                    rhs[*k] += g * w * rstar_rows[r];
                }
            }
            for k in 0..sc.num_vars {
                rhs[k] -= rd[k];
            }
            let dx_vec = chol.solve(&rhs);
            let dx: Vec<f64> = dx_vec.iter().copied().collect();

            let mut ds_blocks = Vec::with_capacity(sc.blocks.len());
            let mut dz_blocks = Vec::with_capacity(sc.blocks.len());
            for (b, blk) in sc.blocks.iter().enumerate() {
                let mut ds = rp_blocks[b].clone();
                for (k, c) in &blk.coeffs {
                    ds += c * dx[*k];
                }
                // dZ = Rinv^T (R~* - sum dx_k F~_k) Rinv
                let nb = &nt_blocks[b];
                let mut inner = rstar_blocks[b].clone();
                for (k, f) in &nb.ftil {
                    inner -= f * dx[*k];
                }
                let dz = sym(&(nb.rinv.transpose() * inner * &nb.rinv));
                ds_blocks.push(ds);
                dz_blocks.push(dz);
            }
            let mut ds_rows = Vec::with_capacity(sc.rows.len());
            let mut dz_rows = Vec::with_capacity(sc.rows.len());
            for (r, row) in sc.rows.iter().enumerate() {
                let gdx: f64 = row.coeffs.iter().map(|&(k, g)| g * dx[k]).sum();
                ds_rows.push(gdx + rp_rows[r]);
                dz_rows.push(st.z_rows[r] / st.s_rows[r] * (rstar_rows[r] - gdx));
            }
            (dx, ds_blocks, dz_blocks, ds_rows, dz_rows)
        };

        let max_steps = |ds_blocks: &[DMatrix<f64>],
                         dz_blocks: &[DMatrix<f64>],
                         ds_rows: &[f64],
                         dz_rows: &[f64]| {
            let mut ap = f64::INFINITY;
            let mut ad = f64::INFINITY;
            for (b, nb) in nt_blocks.iter().enumerate() {
                if let Some(a) = max_step_psd(&nb.ls, &ds_blocks[b]) {
                    ap = ap.min(a);
                }
                if let Some(a) = max_step_psd(&nb.lz, &dz_blocks[b]) {
                    ad = ad.min(a);
                }
            }
            for (r, &ds) in ds_rows.iter().enumerate() {
                if ds < 0.0 {
                    ap = ap.min(-st.s_rows[r] / ds);
                }
            }
            for (r, &dz) in dz_rows.iter().enumerate() {
                if dz < 0.0 {
                    ad = ad.min(-st.z_rows[r] / dz);
                }
            }
            (ap, ad)
        };

        // Affine probe fixes the centering parameter.
        let (_, ds_a, dz_a, dsr_a, dzr_a) = solve_direction(0.0);
        let (ap_a, ad_a) = max_steps(&ds_a, &dz_a, &dsr_a, &dzr_a);
        let ap_a = ap_a.min(1.0);
        let ad_a = ad_a.min(1.0);
        let mut gap_aff = 0.0;
        for b in 0..sc.blocks.len() {
            let s_new = &st.s_blocks[b] + &ds_a[b] * ap_a;
            let z_new = &st.z_blocks[b] + &dz_a[b] * ad_a;
            gap_aff += frob_inner(&s_new, &z_new);
        }
        for r in 0..sc.rows.len() {
            gap_aff += (st.s_rows[r] + ap_a * dsr_a[r]) * (st.z_rows[r] + ad_a * dzr_a[r]);
        }
        let mu_aff = (gap_aff / nu).max(0.0);
        let sigma = ((mu_aff / mu).clamp(0.0, 1.0)).powi(3).clamp(1e-10, 0.9999);

        // Corrected step, reusing the factored Schur matrix.
        let (dx, ds_b, dz_b, dsr, dzr) = solve_direction(sigma * mu);
        let (ap_max, ad_max) = max_steps(&ds_b, &dz_b, &dsr, &dzr);
        let ap = (STEP_FRACTION * ap_max).min(1.0);
        let ad = (STEP_FRACTION * ad_max).min(1.0);
        if cfg.verbose {
            eprintln!(
                "ipm iter {iter:3}  mu {mu:9.2e}  pres {pres:9.2e}  dres {dres:9.2e}  \
                 gap_rel {gap_rel:9.2e}  sigma {sigma:8.2e}  ap {ap:8.2e}  ad {ad:8.2e}"
            );
        }
        if !ap.is_finite() || !ad.is_finite() || ap <= 1e-12 || ad <= 1e-12 {
            status = SolveStatus::IllConditioned;
            break;
        }

        for k in 0..sc.num_vars {
            st.x[k] += ap * dx[k];
        }
        for b in 0..sc.blocks.len() {
            st.s_blocks[b] = sym(&(&st.s_blocks[b] + &ds_b[b] * ap));
            st.z_blocks[b] = sym(&(&st.z_blocks[b] + &dz_b[b] * ad));
        }
        for r in 0..sc.rows.len() {
            st.s_rows[r] += ap * dsr[r];
            st.z_rows[r] += ad * dzr[r];
        }
        if st.x.iter().any(|v| !v.is_finite()) {
            status = SolveStatus::IllConditioned;
            break;
        }
    }

    // Map back to the original basis.
    let x: Vec<f64> = (0..sc.num_vars)
        .map(|k| st.x[k] / sc.var_scale[k])
        .collect();
    let psd_duals: Vec<DMatrix<f64>> = st
        .z_blocks
        .iter()
        .enumerate()
        .map(|(b, z)| z * (sc.cost_scale / sc.block_scale[b]))
        .collect();
    let row_duals: Vec<f64> = st
        .z_rows
        .iter()
        .enumerate()
        .map(|(r, z)| z * sc.cost_scale / sc.row_scale[r])
        .collect();
    let objective: f64 = prog.cost.iter().zip(&x).map(|(c, v)| c * v).sum();

    ConicSolution {
        status,
        x,
        objective,
        psd_duals,
        row_duals,
        duality_gap: last.gap_sum * sc.cost_scale,
        primal_residual: last.pres,
        dual_residual: last.dres,
        iterations: iterations + 1,
    }
}

#[derive(Default)]
struct Measures {
    pres: f64,
    dres: f64,
    gap_sum: f64,
}
