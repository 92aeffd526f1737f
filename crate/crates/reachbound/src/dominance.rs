//! Dominance certificates for Gaussian RBF sums over quadratic sets.
//!
//! The pointwise inequality `w_hat * phi(x; mu_hat, S_hat) >= w * phi(x; mu, S)`
//! on a set `A = {z : z^T A_j z >= 0}` becomes, after taking logarithms and
//! applying the S-procedure with multipliers `tau_j >= 0`, a matrix inequality
//! in homogeneous coordinates:
//!
//! ```text
//!   Q_{mu,S} - Q_{mu_hat,S_hat} + Q_const - sum_j tau_j A_j  PSD,
//! ```
//!
//! where `Q_{mu,S}` is the base quadratic exponent, `Q_{mu_hat,S_hat}` the hat
//! exponent and `Q_const` carries the log weight/determinant gap in its corner.
//! The hat exponent enters with a minus sign and depends nonlinearly on the
//! hat parameters, so the condition is lifted through a Schur complement into
//! a block matrix that is affine in `mu_hat`, `Sigma_hat` and the log-weight
//! variable:
//!
//! ```text
//!   X = [ diag(I_pad, Sigma_hat)   Q_mu_hat ]      Q_mu_hat = [ 0      ]
//!       [ Q_mu_hat^T               R(vars)  ],                [ I 0 -mu_hat ]
//! ```
//!
//! `X` is PSD iff the reduced condition holds (the top-left corner is positive
//! definite whenever `Sigma_hat` is). Summing per-term certificates dominates
//! term by term, which is sufficient, never necessary: a failed search returns
//! `Indeterminate`, not a refutation.
//!
//! The same lift assembles the backward bound step: dominate the one-step
//! expectation of the previous bound on the safe product set, dominate `1/M`
//! on the target set, keep `Sigma_hat` above a floor, and minimize
//! `sum_i y_i + tr(Sigma_hat_i)/2` over all certified candidates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_chacha::ChaCha8Rng;

use crate::errors::{Error, Result};
use crate::geometry::QuadraticSet;
use crate::rbf::{GaussianTerm, PushforwardSum, RbfSum};
use crate::sdpsolver::{
    ConicProgram, ConicSolution, LinearRow, PsdBlock, SolveStatus, SolverConfig,
};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
pub struct DominanceConfig {
    /// A certificate is accepted when the maximized block margin stays above
    /// `-margin_tol`; boundary-feasible instances sit numerically at zero.
    pub margin_tol: f64,
    pub solver: SolverConfig,
}

impl Default for DominanceConfig {
    fn default() -> Self {
        Self {
            margin_tol: 1e-7,
            solver: SolverConfig::default(),
        }
    }
}

/// Outcome of a certificate search. `Indeterminate` carries the reason; it
/// never claims the inequality is false.
#[derive(Debug, Clone)]
pub enum DominanceOutcome {
    Certified(DominanceCertificate),
    Indeterminate { reason: String },
}

#[derive(Debug, Clone)]
pub struct DominanceCertificate {
    /// Maximized uniform eigenvalue margin of the certificate blocks.
    pub margin: f64,
    /// S-procedure multipliers, one row per term.
    pub multipliers: Vec<Vec<f64>>,
    /// Minimum eigenvalue of each certificate block at the returned
    /// multipliers, recomputed independently of the solver.
    pub block_min_eigs: Vec<f64>,
}

/// Feasibility program of the per-term dominance test with the hat sum fixed:
/// unknowns are the multipliers `tau_{i,j} >= 0` and one shared margin `t`
/// maximized subject to `X_i(tau_i) - t I` PSD for every term.
pub fn feasibility_program(
    hat: &RbfSum,
    base: &RbfSum,
    set: &QuadraticSet,
) -> Result<ConicProgram> {
    if hat.len() != base.len() {
        return Err(Error::InvalidArgument(format!(
            "terms are paired by index: hat has {}, base {}",
            hat.len(),
            base.len()
        )));
    }
    if hat.dim() != base.dim() || hat.dim() != set.dim() {
        return Err(Error::DimensionMismatch(
            "hat, base and set must share one ambient dimension".into(),
        ));
    }
    for t in hat.terms().iter().chain(base.terms()) {
        if t.weight <= 0.0 {
            return Err(Error::InvalidArgument(
                "dominance terms need strictly positive weights".into(),
            ));
        }
    }
    let n = hat.dim();
    let d = n + 1;
    let n_forms = set.forms().len();
    let m_terms = hat.len();
    // Variables: tau (m_terms * n_forms), then the margin t.
    let t_var = m_terms * n_forms;
    let num_vars = t_var + 1;

    let mut blocks = Vec::with_capacity(m_terms);
    let mut rows = Vec::with_capacity(t_var);
    for (i, (h, b)) in hat.terms().iter().zip(base.terms()).enumerate() {
        let mut f0 = DMatrix::zeros(2 * d, 2 * d);
        // Top-left diag(1, Sigma_hat); hat parameters are data here.
        f0[(0, 0)] = 1.0;
        for p in 0..n {
            for q in 0..n {
                f0[(1 + p, 1 + q)] = h.cov.matrix()[(p, q)];
            }
        }
        // Off-diagonal lift rows [I, -mu_hat].
        for r in 0..n {
            f0[(1 + r, d + r)] = 1.0;
            f0[(d + r, 1 + r)] = 1.0;
            f0[(1 + r, 2 * d - 1)] = -h.mean[r];
            f0[(2 * d - 1, 1 + r)] = -h.mean[r];
        }
        // Bottom-right: base exponent plus the log-gap corner.
        let prec = b.cov.inverse();
        let pm = &prec * &b.mean;
        for p in 0..n {
            for q in 0..n {
                f0[(d + p, d + q)] = prec[(p, q)];
            }
            f0[(d + p, 2 * d - 1)] = -pm[p];
            f0[(2 * d - 1, d + p)] = -pm[p];
        }
        f0[(2 * d - 1, 2 * d - 1)] =
            pm.dot(&b.mean) + 2.0 * (h.weight.ln() - b.weight.ln())
                + b.cov.logdet() - h.cov.logdet();

        let mut coeffs: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(n_forms + 1);
        for (j, form) in set.forms().iter().enumerate() {
            let mut c = DMatrix::zeros(2 * d, 2 * d);
            for p in 0..d {
                for q in 0..d {
                    c[(d + p, d + q)] = -form.matrix()[(p, q)];
                }
            }
            coeffs.push((i * n_forms + j, c));
            rows.push(LinearRow {
                g0: 0.0,
                coeffs: vec![(i * n_forms + j, 1.0)],
            });
        }
        coeffs.push((t_var, -DMatrix::identity(2 * d, 2 * d)));
        blocks.push(PsdBlock {
            side: 2 * d,
            f0,
            coeffs,
        });
    }

    let mut cost = vec![0.0; num_vars];
    cost[t_var] = -1.0; // maximize the margin
    Ok(ConicProgram {
        num_vars,
        cost,
        blocks,
        rows,
    })
}

/// Searches for a per-term dominance certificate of `hat >= base` on `set`.
pub fn check_dominance(
    hat: &RbfSum,
    base: &RbfSum,
    set: &QuadraticSet,
    cfg: &DominanceConfig,
) -> Result<DominanceOutcome> {
    let prog = feasibility_program(hat, base, set)?;
    let sol = prog.solve(&cfg.solver)?;
    let margin = -sol.objective;
    let acceptable = match sol.status {
        SolveStatus::Optimal => margin >= -cfg.margin_tol,
        // An iteration-limited run can still carry a usable interior point.
        SolveStatus::IterationLimit => margin >= cfg.margin_tol,
        _ => false,
    };
    if !acceptable {
        return Ok(DominanceOutcome::Indeterminate {
            reason: format!("solver status {:?}, margin {margin:.3e}", sol.status),
        });
    }
    let n_forms = set.forms().len();
    let multipliers: Vec<Vec<f64>> = (0..hat.len())
        .map(|i| {
            (0..n_forms)
                .map(|j| sol.x[i * n_forms + j].max(0.0))
                .collect()
        })
        .collect();
    // Independent recomputation of block eigenvalues at t = 0.
    let mut block_min_eigs = Vec::with_capacity(hat.len());
    for (i, _) in hat.terms().iter().enumerate() {
        let mut x_eval = sol.x.clone();
        x_eval[hat.len() * n_forms] = 0.0;
        let m = prog.block_value(i, &x_eval);
        block_min_eigs.push(SymmetricEigen::new((&m + m.transpose()) * 0.5).eigenvalues.min());
    }
    Ok(DominanceOutcome::Certified(DominanceCertificate {
        margin,
        multipliers,
        block_min_eigs,
    }))
}

/// Reduced (un-lifted) certificate matrix for one fixed-hat term:
/// `Q_base - Q_hat + Q_const - sum_j tau_j A_j` of side `n+1`. The lifted
/// block is PSD iff this matrix is, given `Sigma_hat` positive definite;
/// tests compare the two routes through independent eigenvalue checks.
pub fn reduced_certificate_matrix(
    hat: &GaussianTerm,
    base: &GaussianTerm,
    set: &QuadraticSet,
    tau: &[f64],
) -> Result<DMatrix<f64>> {
    let n = hat.mean.len();
    if base.mean.len() != n || set.dim() != n || tau.len() != set.forms().len() {
        return Err(Error::DimensionMismatch("reduced certificate inputs".into()));
    }
    let mut r = exponent_matrix(&base.mean, &base.cov.inverse());
    r -= exponent_matrix(&hat.mean, &hat.cov.inverse());
    r[(n, n)] += 2.0 * (hat.weight.ln() - base.weight.ln()) + base.cov.logdet()
        - hat.cov.logdet();
    for (j, form) in set.forms().iter().enumerate() {
        r -= form.matrix() * tau[j];
    }
    Ok(r)
}

/// `[x;1]^T M [x;1] = (x-mu)^T P (x-mu)` as a homogeneous matrix.
fn exponent_matrix(mu: &DVector<f64>, prec: &DMatrix<f64>) -> DMatrix<f64> {
    let n = mu.len();
    let pm = prec * mu;
    let mut m = DMatrix::zeros(n + 1, n + 1);
    for p in 0..n {
        for q in 0..n {
            m[(p, q)] = prec[(p, q)];
        }
        m[(p, n)] = -pm[p];
        m[(n, p)] = -pm[p];
    }
    m[(n, n)] = pm.dot(mu);
    m
}

/// Schur reduction of a symmetric block matrix `[[P, B], [B^T, R]]` with the
/// leading `k x k` corner `P`: returns `R - B^T P^{-1} B`, or `None` when `P`
/// is not positive definite.
pub fn schur_reduce(x: &DMatrix<f64>, k: usize) -> Option<DMatrix<f64>> {
    let s = x.nrows();
    let p = x.view((0, 0), (k, k)).clone_owned();
    let b = x.view((0, k), (k, s - k)).clone_owned();
    let r = x.view((k, k), (s - k, s - k)).clone_owned();
    let chol = p.cholesky()?;
    Some(r - b.transpose() * chol.solve(&b))
}

/// Variable layout of one hat term inside a bound-step program.
#[derive(Debug, Clone, Copy)]
pub struct TermLayout {
    pub mu_off: usize,
    pub sigma_off: usize,
    pub y_off: usize,
    pub tau_off: usize,
    pub rho_off: usize,
    pub stride: usize,
}

/// Assembled bound-step (or target-cover) program plus the metadata needed to
/// read the optimizer back into an RBF sum.
#[derive(Debug, Clone)]
pub struct BoundStepSdp {
    pub program: ConicProgram,
    pub state_dim: usize,
    pub num_terms: usize,
    pub layout: TermLayout,
}

impl BoundStepSdp {
    fn sigma_index(&self, n: usize, p: usize, q: usize) -> usize {
        // Upper-triangle enumeration (p <= q), row by row.
        debug_assert!(p <= q);
        p * n - p * (p + 1) / 2 + q
    }

    /// Reads `(mu_hat, Sigma_hat, y)` of term `i` from a solution vector.
    pub fn term_params(&self, sol: &ConicSolution, i: usize) -> (DVector<f64>, DMatrix<f64>, f64) {
        let n = self.state_dim;
        let base = i * self.layout.stride;
        let mu = DVector::from_fn(n, |r, _| sol.x[base + self.layout.mu_off + r]);
        let mut sigma = DMatrix::zeros(n, n);
        for p in 0..n {
            for q in p..n {
                let v = sol.x[base + self.layout.sigma_off + self.sigma_index(n, p, q)];
                sigma[(p, q)] = v;
                sigma[(q, p)] = v;
            }
        }
        let y = sol.x[base + self.layout.y_off];
        (mu, sigma, y)
    }
}

/// Shared assembly of the affine lift blocks. `pad` is the number of identity
/// rows above the `Sigma_hat` block in the top-left corner: `m + 1` for the
/// safe-set block (state, control, homogenizer), `1` for the target block.
struct LiftBuilder {
    n: usize,
    pad: usize,
    d: usize,
    f0: DMatrix<f64>,
    coeffs: Vec<(usize, DMatrix<f64>)>,
}

impl LiftBuilder {
    fn new(n: usize, pad: usize) -> Self {
        let d = pad + n; // lifted coordinate dimension (= n + m + 1 or n + 1)
        let side = 2 * d;
        let mut f0 = DMatrix::zeros(side, side);
        for r in 0..pad {
            f0[(r, r)] = 1.0;
        }
        for r in 0..n {
            f0[(pad + r, d + r)] = 1.0;
            f0[(d + r, pad + r)] = 1.0;
        }
        Self {
            n,
            pad,
            d,
            f0,
            coeffs: Vec::new(),
        }
    }

    fn set_corner_const(&mut self, v: f64) {
        self.f0[(2 * self.d - 1, 2 * self.d - 1)] += v;
    }

    fn add_bottom_right_const(&mut self, m: &DMatrix<f64>) {
        debug_assert_eq!(m.nrows(), self.d);
        for p in 0..self.d {
            for q in 0..self.d {
                self.f0[(self.d + p, self.d + q)] += m[(p, q)];
            }
        }
    }

    fn push_mu_var(&mut self, var: usize, r: usize) {
        let side = 2 * self.d;
        let mut c = DMatrix::zeros(side, side);
        c[(self.pad + r, 2 * self.d - 1)] = -1.0;
        c[(2 * self.d - 1, self.pad + r)] = -1.0;
        self.coeffs.push((var, c));
    }

    fn push_sigma_var(&mut self, var: usize, p: usize, q: usize) {
        let side = 2 * self.d;
        let mut c = DMatrix::zeros(side, side);
        c[(self.pad + p, self.pad + q)] = 1.0;
        c[(self.pad + q, self.pad + p)] = 1.0;
        self.coeffs.push((var, c));
    }

    fn push_y_var(&mut self, var: usize) {
        let side = 2 * self.d;
        let mut c = DMatrix::zeros(side, side);
        c[(side - 1, side - 1)] = 2.0;
        self.coeffs.push((var, c));
    }

    fn push_form_var(&mut self, var: usize, form: &DMatrix<f64>) {
        debug_assert_eq!(form.nrows(), self.d);
        let side = 2 * self.d;
        let mut c = DMatrix::zeros(side, side);
        for p in 0..self.d {
            for q in 0..self.d {
                c[(self.d + p, self.d + q)] = -form[(p, q)];
            }
        }
        self.coeffs.push((var, c));
    }

    fn finish(mut self) -> PsdBlock {
        self.coeffs.sort_by_key(|(k, _)| *k);
        let _ = self.n;
        PsdBlock {
            side: 2 * self.d,
            f0: self.f0,
            coeffs: self.coeffs,
        }
    }
}

/// Builds the backward bound-step SDP. `push` carries the one-step expectation
/// of the previous bound (one entry per hat term: positive weight, mean,
/// convolved covariance, affine argument map), `safe_product` is the
/// safe-state x control product set over `[x; u]`, `target` the target set
/// over `x`, `sigma_floor` the eigenvalue floor for the hat covariances.
pub fn bound_step_program(
    push: &PushforwardSum,
    safe_product: &QuadraticSet,
    target: &QuadraticSet,
    sigma_floor: f64,
) -> Result<BoundStepSdp> {
    let n = push.state_dim;
    let m = push.control_dim;
    if safe_product.dim() != n + m {
        return Err(Error::DimensionMismatch(format!(
            "safe product set has dim {}, expected {}",
            safe_product.dim(),
            n + m
        )));
    }
    if target.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "target set has dim {}, expected {n}",
            target.dim()
        )));
    }
    if push.terms.is_empty() {
        return Err(Error::InvalidArgument("bound step needs at least one term".into()));
    }
    if push.terms.iter().any(|t| t.weight <= 0.0) {
        return Err(Error::InvalidArgument(
            "bound step requires strictly positive pushforward weights".into(),
        ));
    }
    if !(sigma_floor > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma floor {sigma_floor}")));
    }

    let num_terms = push.terms.len();
    let n_s = safe_product.forms().len();
    let n_k = target.forms().len();
    let n_tri = n * (n + 1) / 2;
    let layout = TermLayout {
        mu_off: 0,
        sigma_off: n,
        y_off: n + n_tri,
        tau_off: n + n_tri + 1,
        rho_off: n + n_tri + 1 + n_s,
        stride: n + n_tri + 1 + n_s + n_k,
    };
    let num_vars = num_terms * layout.stride;
    let mut cost = vec![0.0; num_vars];
    let mut blocks = Vec::with_capacity(3 * num_terms);
    let mut rows = Vec::with_capacity(num_terms * (n_s + n_k));
    let ln_m = (num_terms as f64).ln();

    for (i, term) in push.terms.iter().enumerate() {
        let base = i * layout.stride;
        cost[base + layout.y_off] = 1.0;

        // Safe-set block over z = [x; u; 1].
        let mut safe = LiftBuilder::new(n, m + 1);
        // Base exponent (T z)^T C^{-1} (T z), T = [A  B  c - mu].
        let mut t_map = term.map.clone();
        for r in 0..n {
            t_map[(r, n + m)] -= term.mean[r];
        }
        let prec = term.cov.inverse();
        safe.add_bottom_right_const(&(t_map.transpose() * &prec * &t_map));
        safe.set_corner_const(2.0 * (-term.weight.ln() + 0.5 * term.cov.logdet()));
        for r in 0..n {
            safe.push_mu_var(base + layout.mu_off + r, r);
        }
        for p in 0..n {
            for q in p..n {
                let idx = p * n - p * (p + 1) / 2 + q;
                safe.push_sigma_var(base + layout.sigma_off + idx, p, q);
            }
        }
        safe.push_y_var(base + layout.y_off);
        for (j, form) in safe_product.forms().iter().enumerate() {
            let var = base + layout.tau_off + j;
            safe.push_form_var(var, form.matrix());
            rows.push(LinearRow { g0: 0.0, coeffs: vec![(var, 1.0)] });
        }
        blocks.push(safe.finish());

        // Target block over z = [x; 1]: dominate the constant 1/M.
        let mut tgt = LiftBuilder::new(n, 1);
        tgt.set_corner_const(2.0 * (ln_m - 0.5 * (n as f64) * LN_2PI));
        for r in 0..n {
            tgt.push_mu_var(base + layout.mu_off + r, r);
        }
        for p in 0..n {
            for q in p..n {
                let idx = p * n - p * (p + 1) / 2 + q;
                tgt.push_sigma_var(base + layout.sigma_off + idx, p, q);
            }
        }
        tgt.push_y_var(base + layout.y_off);
        for (j, form) in target.forms().iter().enumerate() {
            let var = base + layout.rho_off + j;
            tgt.push_form_var(var, form.matrix());
            rows.push(LinearRow { g0: 0.0, coeffs: vec![(var, 1.0)] });
        }
        blocks.push(tgt.finish());

        // Covariance floor Sigma_hat - floor * I PSD.
        let mut floor_coeffs = Vec::with_capacity(n_tri);
        for p in 0..n {
            for q in p..n {
                let idx = p * n - p * (p + 1) / 2 + q;
                let mut c = DMatrix::zeros(n, n);
                c[(p, q)] = 1.0;
                c[(q, p)] = 1.0;
                floor_coeffs.push((base + layout.sigma_off + idx, c));
                if p == q {
                    cost[base + layout.sigma_off + idx] = 0.5;
                }
            }
        }
        blocks.push(PsdBlock {
            side: n,
            f0: -DMatrix::identity(n, n) * sigma_floor,
            coeffs: floor_coeffs,
        });
    }

    let program = ConicProgram {
        num_vars,
        cost,
        blocks,
        rows,
    };
    program.validate()?;
    Ok(BoundStepSdp {
        program,
        state_dim: n,
        num_terms,
        layout,
    })
}

/// Builds the target-cover SDP: `M` hat terms, each certified to stay above
/// `1/M` on the target set, with no safe-set constraint. This is the bound
/// seed used when the terminal indicator bound is produced by certification
/// rather than by the least-squares-style grid LP.
pub fn target_cover_program(
    num_terms: usize,
    state_dim: usize,
    target: &QuadraticSet,
    sigma_floor: f64,
) -> Result<BoundStepSdp> {
    if num_terms == 0 {
        return Err(Error::InvalidArgument("cover needs at least one term".into()));
    }
    if target.dim() != state_dim {
        return Err(Error::DimensionMismatch("target set dimension".into()));
    }
    if !(sigma_floor > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma floor {sigma_floor}")));
    }
    let n = state_dim;
    let n_k = target.forms().len();
    let n_tri = n * (n + 1) / 2;
    let layout = TermLayout {
        mu_off: 0,
        sigma_off: n,
        y_off: n + n_tri,
        tau_off: n + n_tri + 1,
        rho_off: n + n_tri + 1,
        stride: n + n_tri + 1 + n_k,
    };
    let num_vars = num_terms * layout.stride;
    let mut cost = vec![0.0; num_vars];
    let mut blocks = Vec::with_capacity(2 * num_terms);
    let mut rows = Vec::with_capacity(num_terms * n_k);
    let ln_m = (num_terms as f64).ln();

    for i in 0..num_terms {
        let base = i * layout.stride;
        cost[base + layout.y_off] = 1.0;
        let mut tgt = LiftBuilder::new(n, 1);
        tgt.set_corner_const(2.0 * (ln_m - 0.5 * (n as f64) * LN_2PI));
        for r in 0..n {
            tgt.push_mu_var(base + layout.mu_off + r, r);
        }
        for p in 0..n {
            for q in p..n {
                let idx = p * n - p * (p + 1) / 2 + q;
                tgt.push_sigma_var(base + layout.sigma_off + idx, p, q);
            }
        }
        tgt.push_y_var(base + layout.y_off);
        for (j, form) in target.forms().iter().enumerate() {
            let var = base + layout.rho_off + j;
            tgt.push_form_var(var, form.matrix());
            rows.push(LinearRow { g0: 0.0, coeffs: vec![(var, 1.0)] });
        }
        blocks.push(tgt.finish());

        let mut floor_coeffs = Vec::with_capacity(n_tri);
        for p in 0..n {
            for q in p..n {
                let idx = p * n - p * (p + 1) / 2 + q;
                let mut c = DMatrix::zeros(n, n);
                c[(p, q)] = 1.0;
                c[(q, p)] = 1.0;
                floor_coeffs.push((base + layout.sigma_off + idx, c));
                if p == q {
                    cost[base + layout.sigma_off + idx] = 0.5;
                }
            }
        }
        blocks.push(PsdBlock {
            side: n,
            f0: -DMatrix::identity(n, n) * sigma_floor,
            coeffs: floor_coeffs,
        });
    }

    let program = ConicProgram {
        num_vars,
        cost,
        blocks,
        rows,
    };
    program.validate()?;
    Ok(BoundStepSdp {
        program,
        state_dim: n,
        num_terms,
        layout,
    })
}

/// Recovers the hat sum from a solved bound-step program:
/// `w_hat_i = exp(y_i) * sqrt(det(Sigma_hat_i))`. The covariance comes back
/// within solver tolerance of the floor constraint; an eigenvalue repair
/// kicks in only when rounding pushed it below positive definiteness.
pub fn extract_bound(sdp: &BoundStepSdp, sol: &ConicSolution) -> Result<RbfSum> {
    let n = sdp.state_dim;
    let mut terms = Vec::with_capacity(sdp.num_terms);
    for i in 0..sdp.num_terms {
        let (mu, sigma, y) = sdp.term_params(sol, i);
        let sigma = match sigma.clone().cholesky() {
            Some(_) => sigma,
            None => {
                let mut eig = SymmetricEigen::new(sigma);
                for v in eig.eigenvalues.iter_mut() {
                    *v = v.max(1e-12);
                }
                &eig.eigenvectors
                    * DMatrix::from_diagonal(&eig.eigenvalues)
                    * eig.eigenvectors.transpose()
            }
        };
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("extracted covariance {i}")))?;
        let logdet: f64 = 2.0 * (0..n).map(|r| chol.l()[(r, r)].ln()).sum::<f64>();
        let weight = (y + 0.5 * logdet).exp();
        terms.push(GaussianTerm::new(weight, mu, sigma)?);
    }
    RbfSum::new(terms)
}

/// What a hat sum is being compared against in a sampled audit.
pub enum Dominated<'a> {
    /// Same-space RBF sum; the set lives in the hat's ambient space.
    Sum(&'a RbfSum),
    /// One-step expectation over `[x; u]`; the set is the safe product set
    /// and the hat applies to the first `state_dim` coordinates.
    Expectation(&'a PushforwardSum),
    /// A constant level; the set lives in the hat's ambient space.
    Level(f64),
}

/// Largest sampled violation `base(z) - hat(z)` over uniform draws from the
/// set; nonpositive values confirm the certificate on the sample. Draws use
/// rejection sampling, so the set must have an ellipsoidal bounding box.
pub fn sampled_max_violation(
    hat: &RbfSum,
    base: &Dominated,
    set: &QuadraticSet,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let z = set.sample_uniform(rng, 100_000)?;
        let violation = match base {
            Dominated::Sum(b) => b.evaluate(&z)? - hat.evaluate(&z)?,
            Dominated::Expectation(p) => {
                let x = DVector::from_fn(p.state_dim, |r, _| z[r]);
                let u = DVector::from_fn(p.control_dim, |r, _| z[p.state_dim + r]);
                p.evaluate(&x, &u)? - hat.evaluate(&x)?
            }
            Dominated::Level(c) => c - hat.evaluate(&z)?,
        };
        worst = worst.max(violation);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Ellipsoid;
    use crate::rbf::TransitionKernel;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn ball_set(dim: usize, rho: f64) -> QuadraticSet {
        Ellipsoid::new(DMatrix::identity(dim, dim), rho).unwrap().as_set()
    }

    fn unit_term(w: f64, mu: &[f64]) -> GaussianTerm {
        let n = mu.len();
        GaussianTerm::new(w, DVector::from_row_slice(mu), DMatrix::identity(n, n)).unwrap()
    }

    #[test]
    fn doubled_weight_is_certified_and_zero_multiplier_is_tight() {
        let hat = RbfSum::new(vec![unit_term(2.0, &[0.0, 0.0])]).unwrap();
        let base = RbfSum::new(vec![unit_term(1.0, &[0.0, 0.0])]).unwrap();
        let set = ball_set(2, 1.0);
        match check_dominance(&hat, &base, &set, &DominanceConfig::default()).unwrap() {
            DominanceOutcome::Certified(cert) => {
                assert!(cert.margin >= 0.0, "margin {}", cert.margin);
                assert!(cert.block_min_eigs[0] >= -1e-8);
            }
            DominanceOutcome::Indeterminate { reason } => panic!("expected certificate: {reason}"),
        }
        // With zero multipliers the identical exponents cancel and the
        // reduced certificate is diag(0, 0, 2 ln 2): PSD with one zero
        // eigenvalue, so the certificate is boundary-tight there.
        let reduced = reduced_certificate_matrix(
            &hat.terms()[0],
            &base.terms()[0],
            &set,
            &[0.0],
        )
        .unwrap();
        assert!((reduced[(2, 2)] - 2.0 * 2.0f64.ln()).abs() <= 1e-12);
        let eigs = SymmetricEigen::new(reduced).eigenvalues;
        assert!(eigs.min() >= -1e-12 && eigs.min() <= 1e-12);
    }

    #[test]
    fn mismatched_term_counts_are_rejected() {
        let hat = RbfSum::new(vec![unit_term(1.0, &[0.0])]).unwrap();
        let base =
            RbfSum::new(vec![unit_term(0.5, &[0.0]), unit_term(0.5, &[0.1])]).unwrap();
        assert!(matches!(
            check_dominance(&hat, &base, &ball_set(1, 1.0), &DominanceConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn shrunk_weight_is_indeterminate() {
        // 0.5*phi cannot dominate phi anywhere, and the search must not
        // fabricate a certificate.
        let hat = RbfSum::new(vec![unit_term(0.5, &[0.0])]).unwrap();
        let base = RbfSum::new(vec![unit_term(1.0, &[0.0])]).unwrap();
        match check_dominance(&hat, &base, &ball_set(1, 1.0), &DominanceConfig::default()).unwrap()
        {
            DominanceOutcome::Indeterminate { .. } => {}
            DominanceOutcome::Certified(c) => panic!("bogus certificate with margin {}", c.margin),
        }
    }

    #[test]
    fn feasibility_threshold_matches_sup_ratio() {
        // hat = c * phi(.; mu_hat, I) vs base = phi(.; 0, I) on the unit ball.
        // The exact threshold is sup over the ball of base/phi(.; mu_hat, I),
        // attained at x = -mu_hat/|mu_hat|: c* = exp(|mu_hat| + |mu_hat|^2/2).
        let mu_hat = [0.4, -0.2];
        let norm = (0.4f64 * 0.4 + 0.2 * 0.2).sqrt();
        let analytic = (norm + 0.5 * norm * norm).exp();
        let set = ball_set(2, 1.0);
        let base = RbfSum::new(vec![unit_term(1.0, &[0.0, 0.0])]).unwrap();
        let cfg = DominanceConfig::default();
        let mut lo = 1.0; // certainly indeterminate
        let mut hi = 10.0; // certainly certified
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let hat = RbfSum::new(vec![unit_term(mid, &mu_hat)]).unwrap();
            match check_dominance(&hat, &base, &set, &cfg).unwrap() {
                DominanceOutcome::Certified(_) => hi = mid,
                DominanceOutcome::Indeterminate { .. } => lo = mid,
            }
        }
        let found = 0.5 * (lo + hi);
        assert!(
            (found - analytic).abs() / analytic <= 0.05,
            "threshold {found} vs analytic {analytic}"
        );
    }

    #[test]
    fn lifted_blocks_are_affine_in_the_variables() {
        // Second differences along random directions vanish exactly for an
        // affine matrix map.
        let kernel = TransitionKernel::linear_gaussian(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::identity(2, 2) * 0.01,
        )
        .unwrap();
        let prev = RbfSum::new(vec![unit_term(0.7, &[0.0, 0.1]), unit_term(0.5, &[0.1, 0.0])])
            .unwrap();
        let push = kernel.pushforward_params(&prev).unwrap();
        let safe = QuadraticSet::ring(
            &Ellipsoid::new(DMatrix::identity(2, 2), 1.0).unwrap(),
            &Ellipsoid::new(DMatrix::identity(2, 2), 0.1).unwrap(),
        )
        .unwrap()
        .product(&ball_set(1, 0.2))
        .unwrap();
        let sdp = bound_step_program(&push, &safe, &ball_set(2, 0.1), 1e-6).unwrap();

        let mut rng = derive_rng(5, "dom-affine", &[]);
        let p = sdp.program.num_vars;
        for b in 0..sdp.program.blocks.len() {
            let x0: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dir: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x1: Vec<f64> = x0.iter().zip(&dir).map(|(a, d)| a + d).collect();
            let x2: Vec<f64> = x0.iter().zip(&dir).map(|(a, d)| a + 2.0 * d).collect();
            let m0 = sdp.program.block_value(b, &x0);
            let m1 = sdp.program.block_value(b, &x1);
            let m2 = sdp.program.block_value(b, &x2);
            // Vanishing second differences, up to accumulation roundoff.
            let second = &m2 - &m1 * 2.0 + &m0;
            let scale = 1.0 + m0.amax().max(m2.amax());
            assert!(second.amax() <= 1e-12 * scale, "block {b} is not affine");
        }
    }

    #[test]
    fn schur_lift_matches_reduced_form() {
        let mut rng = derive_rng(17, "dom-schur", &[]);
        let set = ball_set(2, 0.8);
        let mut agree = 0;
        for trial in 0..100 {
            let g = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let sigma_hat = &g * g.transpose() + DMatrix::identity(2, 2) * 0.2;
            let hat = GaussianTerm::new(
                rng.random_range(0.5..4.0),
                DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5)),
                sigma_hat,
            )
            .unwrap();
            let base = GaussianTerm::new(
                rng.random_range(0.5..4.0),
                DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5)),
                DMatrix::identity(2, 2) * rng.random_range(0.3..2.0),
            )
            .unwrap();
            let tau: Vec<f64> = (0..set.forms().len())
                .map(|_| rng.random_range(0.0..1.0))
                .collect();

            // Route A: lifted block from the feasibility assembly.
            let hat_sum = RbfSum::new(vec![hat.clone()]).unwrap();
            let base_sum = RbfSum::new(vec![base.clone()]).unwrap();
            let prog = feasibility_program(&hat_sum, &base_sum, &set).unwrap();
            let mut x = tau.clone();
            x.push(0.0); // margin variable at zero
            let lifted = prog.block_value(0, &x);
            let lifted_psd =
                SymmetricEigen::new((&lifted + lifted.transpose()) * 0.5).eigenvalues.min()
                    >= -1e-9;

            // Route B: reduced matrix straight from the formulas.
            let reduced = reduced_certificate_matrix(&hat, &base, &set, &tau).unwrap();
            let reduced_psd = SymmetricEigen::new(reduced).eigenvalues.min() >= -1e-9;

            assert_eq!(lifted_psd, reduced_psd, "trial {trial}");
            // And the generic Schur reduction of the lifted block agrees too.
            let schur = schur_reduce(&lifted, 3).unwrap();
            let schur_psd = SymmetricEigen::new(schur).eigenvalues.min() >= -1e-9;
            assert_eq!(schur_psd, reduced_psd, "trial {trial} (generic reduction)");
            agree += 1;
        }
        assert_eq!(agree, 100);
    }

    #[test]
    fn certified_instances_have_no_sampled_violations() {
        let mut rng = derive_rng(29, "dom-sound", &[]);
        let set = ball_set(2, 1.0);
        let cfg = DominanceConfig::default();
        let mut certified = 0;
        let mut attempts = 0;
        while certified < 10 && attempts < 40 {
            attempts += 1;
            let mut base_terms = Vec::new();
            let mut hat_terms = Vec::new();
            for _ in 0..2 {
                let w: f64 = rng.random_range(0.2..1.0);
                let mu = DVector::from_fn(2, |_, _| rng.random_range(-0.3..0.3));
                let s: f64 = rng.random_range(0.2..0.8);
                base_terms.push(
                    GaussianTerm::new(w, mu.clone(), DMatrix::identity(2, 2) * s).unwrap(),
                );
                // Inflated copy: more weight, slightly wider, nudged mean.
                let nudge = DVector::from_fn(2, |_, _| rng.random_range(-0.02..0.02));
                hat_terms.push(
                    GaussianTerm::new(
                        w * rng.random_range(1.6..2.5),
                        mu + nudge,
                        DMatrix::identity(2, 2) * (s * 1.1),
                    )
                    .unwrap(),
                );
            }
            let hat = RbfSum::new(hat_terms).unwrap();
            let base = RbfSum::new(base_terms).unwrap();
            if let DominanceOutcome::Certified(_) =
                check_dominance(&hat, &base, &set, &cfg).unwrap()
            {
                certified += 1;
                let worst = sampled_max_violation(
                    &hat,
                    &Dominated::Sum(&base),
                    &set,
                    2_000,
                    &mut rng,
                )
                .unwrap();
                assert!(worst <= 1e-9, "violation {worst}");
            }
        }
        assert!(certified >= 10, "only {certified} certified in {attempts} attempts");
    }

    #[test]
    fn bound_step_solution_dominates_expectation_on_samples() {
        // One backward step in 1-D: the extracted optimizer must dominate the
        // one-step expectation on the safe product set and the level 1/M on
        // the target, both checked on fresh samples.
        let kernel = TransitionKernel::linear_gaussian(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.001),
        )
        .unwrap();
        let prev = RbfSum::new(vec![
            GaussianTerm::new(0.3, DVector::from_element(1, -0.04), DMatrix::from_element(1, 1, 0.0005)).unwrap(),
            GaussianTerm::new(0.3, DVector::from_element(1, 0.05), DMatrix::from_element(1, 1, 0.0005)).unwrap(),
        ])
        .unwrap();
        let push = kernel.pushforward_params(&prev).unwrap();
        let safe_ring = QuadraticSet::ring(
            &Ellipsoid::new(DMatrix::identity(1, 1), 1.0).unwrap(),
            &Ellipsoid::new(DMatrix::identity(1, 1), 0.1).unwrap(),
        )
        .unwrap();
        let safe = safe_ring.product(&ball_set(1, 0.1)).unwrap();
        let target = ball_set(1, 0.1);
        let sdp = bound_step_program(&push, &safe, &target, 1e-6).unwrap();
        assert_eq!(sdp.program.blocks.len(), 3 * push.terms.len());
        let sol = sdp.program.solve(&SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "iterations {}", sol.iterations);
        let hat = extract_bound(&sdp, &sol).unwrap();
        assert!(hat.terms().iter().all(|t| t.weight > 0.0));

        let mut rng = derive_rng(31, "dom-step", &[]);
        let worst_safe =
            sampled_max_violation(&hat, &Dominated::Expectation(&push), &safe, 5_000, &mut rng)
                .unwrap();
        assert!(worst_safe <= 1e-7, "safe-set violation {worst_safe}");
        let worst_target = sampled_max_violation(
            &hat,
            &Dominated::Level(1.0),
            &target,
            5_000,
            &mut rng,
        )
        .unwrap();
        assert!(worst_target <= 1e-7, "target violation {worst_target}");
    }

    #[test]
    fn extraction_round_trips_the_log_weight() {
        let target = ball_set(1, 0.1);
        let sdp = target_cover_program(2, 1, &target, 1e-6).unwrap();
        let sol = sdp.program.solve(&SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let hat = extract_bound(&sdp, &sol).unwrap();
        for (i, t) in hat.terms().iter().enumerate() {
            let (_, _, y) = sdp.term_params(&sol, i);
            let rebuilt = t.weight.ln() - 0.5 * t.cov.logdet();
            assert!((rebuilt - y).abs() <= 1e-10, "term {i}: {rebuilt} vs {y}");
        }
    }
}
