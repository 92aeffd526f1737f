//! Greedy controllers induced by value-function bounds.
//!
//! At time `k` in state `x` the approximate policy maximizes, over the
//! control ellipsoid, the one-step expectation `E[V_{k+1}(x+) | x, u]`. For
//! an RBF-sum value function this expectation is itself a finite Gaussian
//! sum in `u` with analytic gradient and Hessian, so the maximization runs
//! either as damped projected Newton ascent from several starts (`newton`
//! mode, the default) or as an argmax over a rectangular grid on the control
//! box (`control-grid` mode, preferred when evaluating many states in higher
//! control dimensions). Both modes return controls inside the ellipsoid via
//! radial projection.
//!
//! The surface is smooth but non-convex; Newton ascent only guarantees a
//! local maximizer, which multistarts mitigate in practice.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::bound::{ReachAvoidProblem, ValueBoundSequence, ValueFunction};
use crate::errors::{Error, Result};
use crate::geometry::Ellipsoid;
use crate::gridoracle::{grid_policy, Grid, GridValueFunction};
use crate::rbf::{PushforwardSum, RbfSum, TransitionKernel};

const LN_2PI: f64 = 1.8378770664093453;
/// Hard cap on control-grid nodes; `20^m` breaches it past `m = 5`.
const GRID_BUDGET: f64 = 1e7;
/// Rejection-sampling attempts when drawing multistart points from `U`.
const START_ATTEMPTS: usize = 10_000;

/// Time-indexed feedback controller. Implementations must be deterministic
/// given `(t, x)` and the rng state so shared-noise comparisons couple
/// exactly.
pub trait Controller: Sync {
    fn act(&self, t: usize, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    Newton,
    ControlGrid,
}

#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub mode: PolicyMode,
    /// Newton starts: `u = 0` plus uniform draws from the control set.
    pub multistarts: usize,
    pub max_newton_iters: usize,
    /// Ascent stops once the projected-gradient residual drops below this.
    pub grad_tol: f64,
    /// Control-grid nodes per dimension.
    pub grid_points: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Newton,
            multistarts: 8,
            max_newton_iters: 50,
            grad_tol: 1e-8,
            grid_points: 20,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.multistarts == 0 || self.max_newton_iters == 0 {
            return Err(Error::ConfigInvalid(
                "multistarts and Newton iterations must be at least 1".into(),
            ));
        }
        if self.grid_points < 2 {
            return Err(Error::ConfigInvalid(
                "control grid needs at least 2 points per dimension".into(),
            ));
        }
        if !(self.grad_tol > 0.0) || !self.grad_tol.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "gradient tolerance {} must be positive",
                self.grad_tol
            )));
        }
        Ok(())
    }
}

/// Radial projection onto `{u : u^T Q u <= rho^2}`: feasible points are
/// unchanged, infeasible ones are scaled back along their ray. The result is
/// guaranteed to satisfy the (strict, ulp-sensitive) membership test.
pub fn project_ellipsoid(u: &DVector<f64>, q: &DMatrix<f64>, rho: f64) -> DVector<f64> {
    let norm2 = (q * u).dot(u);
    if norm2 <= rho * rho {
        return u.clone();
    }
    let mut v = u * (rho / norm2.sqrt());
    // Boundary landings can overshoot the quadratic test by one ulp.
    for _ in 0..8 {
        if (q * &v).dot(&v) <= rho * rho {
            break;
        }
        v *= 1.0 - 1e-12;
    }
    v
}

/// The map `u -> E[V_next(x+) | x, u]` at a fixed state, as a Gaussian sum in
/// `u` with analytic derivatives. Each pushforward term `w phi(Ax+Bu+c; mu, C)`
/// contributes `phi_i` to the value, `-phi_i B^T C^{-1} r_i` to the gradient
/// and `phi_i (B^T C^{-1} r_i r_i^T C^{-1} B - B^T C^{-1} B)` to the Hessian,
/// with residual `r_i = Ax + Bu + c - mu_i`.
pub struct ControlObjective {
    control_dim: usize,
    terms: Vec<ObjectiveTerm>,
}

struct ObjectiveTerm {
    /// `w (2 pi)^{-n/2} |C|^{-1/2}`.
    weight_norm: f64,
    /// `A x + c - mu`.
    offset: DVector<f64>,
    b: DMatrix<f64>,
    /// `C^{-1}`.
    prec: DMatrix<f64>,
    /// `B^T C^{-1} B`, the constant Hessian part.
    btlb: DMatrix<f64>,
}

impl ObjectiveTerm {
    fn phi(&self, u: &DVector<f64>) -> f64 {
        let r = &self.offset + &self.b * u;
        self.weight_norm * (-0.5 * (&self.prec * &r).dot(&r)).exp()
    }
}

impl ControlObjective {
    pub fn at_state(push: &PushforwardSum, x: &DVector<f64>) -> Result<Self> {
        if x.len() != push.state_dim {
            return Err(Error::DimensionMismatch(format!(
                "state dim {} vs pushforward {}",
                x.len(),
                push.state_dim
            )));
        }
        let n = push.state_dim;
        let m = push.control_dim;
        let terms = push
            .terms
            .iter()
            .map(|t| {
                let b = t.map.view((0, n), (n, m)).clone_owned();
                let mut offset = t.map.column(n + m).clone_owned();
                offset += t.map.view((0, 0), (n, n)) * x;
                offset -= &t.mean;
                let prec = t.cov.inverse();
                let btlb = b.transpose() * &prec * &b;
                ObjectiveTerm {
                    weight_norm: t.weight
                        * (-0.5 * n as f64 * LN_2PI - 0.5 * t.cov.logdet()).exp(),
                    offset,
                    b,
                    prec,
                    btlb,
                }
            })
            .collect();
        Ok(Self {
            control_dim: m,
            terms,
        })
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        self.terms.iter().map(|t| t.phi(u)).sum()
    }

    pub fn value_grad_hess(&self, u: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let m = self.control_dim;
        let mut val = 0.0;
        let mut grad = DVector::zeros(m);
        let mut hess = DMatrix::zeros(m, m);
        for t in &self.terms {
            let r = &t.offset + &t.b * u;
            let lr = &t.prec * &r;
            let phi = t.weight_norm * (-0.5 * r.dot(&lr)).exp();
            let pull = t.b.transpose() * lr;
            val += phi;
            grad.axpy(-phi, &pull, 1.0);
            hess += phi * (&pull * pull.transpose() - &t.btlb);
        }
        (val, grad, hess)
    }
}

/// Damped projected Newton ascent from one start. Falls back to
/// radius-scaled gradient steps whenever the negated Hessian is not positive
/// definite or the Newton direction is not an ascent direction; every trial
/// iterate is projected back onto the control set before evaluation.
fn newton_ascent(
    obj: &ControlObjective,
    control: &Ellipsoid,
    start: &DVector<f64>,
    cfg: &PolicyConfig,
) -> (DVector<f64>, f64) {
    let q = control.shape();
    let rho = control.radius();
    let mut u = project_ellipsoid(start, q, rho);
    let mut val = obj.value(&u);
    for _ in 0..cfg.max_newton_iters {
        let (v, grad, hess) = obj.value_grad_hess(&u);
        val = v;
        // Projected-gradient residual: zero both at interior critical points
        // and at boundary points whose gradient is outward radial.
        let residual = (project_ellipsoid(&(&u + &grad), q, rho) - &u).norm();
        if residual <= cfg.grad_tol {
            break;
        }
        let newton = (-&hess)
            .cholesky()
            .map(|ch| ch.solve(&grad))
            .filter(|d| grad.dot(d) > 0.0);
        let dir = newton.unwrap_or_else(|| &grad * (rho / grad.norm().max(1e-300)));
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = project_ellipsoid(&(&u + &dir * step), q, rho);
            let cand_val = obj.value(&cand);
            if cand_val > val {
                u = cand;
                val = cand_val;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (u, val)
}

/// Newton-mode policy evaluation: best local maximizer of the one-step
/// expectation across multistarts (`u = 0` plus uniform draws from the
/// control set). Returns a feasible control; global optimality is not
/// guaranteed.
pub fn act_newton(
    v_next: &RbfSum,
    kernel: &TransitionKernel,
    control: &Ellipsoid,
    x: &DVector<f64>,
    cfg: &PolicyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    if control.dim() != kernel.control_dim() {
        return Err(Error::DimensionMismatch(format!(
            "control set dim {} vs kernel {}",
            control.dim(),
            kernel.control_dim()
        )));
    }
    let push = kernel.pushforward_params(v_next)?;
    let obj = ControlObjective::at_state(&push, x)?;
    let zero = DVector::zeros(control.dim());
    let mut best: Option<(DVector<f64>, f64)> = None;
    for s in 0..cfg.multistarts {
        let start = if s == 0 && control.contains(&zero) {
            zero.clone()
        } else {
            control.as_set().sample_uniform(rng, START_ATTEMPTS)?
        };
        let (u, val) = newton_ascent(&obj, control, &start, cfg);
        if best.as_ref().map_or(true, |(_, b)| val > *b) {
            best = Some((u, val));
        }
    }
    Ok(best.expect("at least one start").0)
}

/// Control-grid policy evaluation: argmax of the one-step expectation over a
/// rectangular grid on the control bounding box, nodes outside the control
/// set skipped. Exact ties keep the lowest node index.
pub fn act_grid(
    v_next: &RbfSum,
    kernel: &TransitionKernel,
    control: &Ellipsoid,
    x: &DVector<f64>,
    cfg: &PolicyConfig,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    if control.dim() != kernel.control_dim() {
        return Err(Error::DimensionMismatch(format!(
            "control set dim {} vs kernel {}",
            control.dim(),
            kernel.control_dim()
        )));
    }
    let m = control.dim();
    if (cfg.grid_points as f64).powi(m as i32) > GRID_BUDGET {
        return Err(Error::GridCapExceeded(format!(
            "{}^{m} control nodes exceed the {GRID_BUDGET:.0} budget",
            cfg.grid_points
        )));
    }
    let push = kernel.pushforward_params(v_next)?;
    let obj = ControlObjective::at_state(&push, x)?;
    let grid = Grid::from_box(&control.bounding_box(), cfg.grid_points)?;
    let mut best: Option<(DVector<f64>, f64)> = None;
    for f in 0..grid.num_nodes() {
        let u = grid.node(f);
        if !control.contains(&u) {
            continue;
        }
        let val = obj.value(&u);
        if best.as_ref().map_or(true, |(_, b)| val > *b) {
            best = Some((u, val));
        }
    }
    best.map(|(u, _)| u).ok_or_else(|| {
        Error::InvalidArgument("no control-grid node lies inside the control set".into())
    })
}

/// Feedback controller induced by a bound sequence: at time `t` it maximizes
/// the expectation of `values[t + 1]`. Outside the ring the maximization is
/// undefined (the indicator prefactors vanish), so `u = 0` is returned with a
/// flag; rollouts stop at those states anyway.
pub struct RbfPolicy {
    problem: ReachAvoidProblem,
    values: Vec<ValueFunction>,
    cfg: PolicyConfig,
}

impl RbfPolicy {
    pub fn new(
        problem: ReachAvoidProblem,
        seq: &ValueBoundSequence,
        cfg: PolicyConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if seq.horizon() != problem.horizon {
            return Err(Error::DimensionMismatch(format!(
                "sequence horizon {} vs problem {}",
                seq.horizon(),
                problem.horizon
            )));
        }
        if seq.values.iter().any(|v| v.dim() != problem.state_dim()) {
            return Err(Error::DimensionMismatch(
                "value bound dimension vs problem state".into(),
            ));
        }
        Ok(Self {
            problem,
            values: seq.values.clone(),
            cfg,
        })
    }

    /// The flag is `true` when `x` lies outside the ring and the default
    /// `u = 0` was returned. A constant bound also yields `u = 0` (every
    /// control is optimal) but is not flagged.
    pub fn act_flagged(
        &self,
        t: usize,
        x: &DVector<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DVector<f64>, bool)> {
        if t + 1 >= self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "time {t} at or past horizon {}",
                self.problem.horizon
            )));
        }
        let m = self.problem.control_dim();
        if self.problem.target.contains(x) || !self.problem.safe.contains(x) {
            return Ok((DVector::zeros(m), true));
        }
        let sum = match &self.values[t + 1] {
            ValueFunction::Constant { .. } => return Ok((DVector::zeros(m), false)),
            ValueFunction::Rbf(sum) => sum,
        };
        let u = match self.cfg.mode {
            PolicyMode::Newton => act_newton(
                sum,
                &self.problem.kernel,
                &self.problem.control,
                x,
                &self.cfg,
                rng,
            )?,
            PolicyMode::ControlGrid => act_grid(
                sum,
                &self.problem.kernel,
                &self.problem.control,
                x,
                &self.cfg,
            )?,
        };
        Ok((u, false))
    }
}

impl Controller for RbfPolicy {
    fn act(&self, t: usize, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        self.act_flagged(t, x, rng).map(|(u, _)| u)
    }
}

/// Feedback controller induced by grid DP tables: one-step lookahead against
/// `tables[t + 1]` over the feasible control nodes. Outside the ring it
/// returns `u = 0` like [`RbfPolicy`].
pub struct GridPolicy {
    problem: ReachAvoidProblem,
    tables: Vec<GridValueFunction>,
    control_grid: Grid,
}

impl GridPolicy {
    pub fn new(
        problem: ReachAvoidProblem,
        tables: Vec<GridValueFunction>,
        control_grid: Grid,
    ) -> Result<Self> {
        if tables.len() != problem.horizon + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} tables for horizon {}",
                tables.len(),
                problem.horizon
            )));
        }
        if control_grid.dim() != problem.control_dim() {
            return Err(Error::DimensionMismatch(
                "control grid dim vs problem".into(),
            ));
        }
        if tables.iter().any(|t| t.grid.dim() != problem.state_dim()) {
            return Err(Error::DimensionMismatch(
                "state table dim vs problem".into(),
            ));
        }
        Ok(Self {
            problem,
            tables,
            control_grid,
        })
    }
}

impl Controller for GridPolicy {
    fn act(&self, t: usize, x: &DVector<f64>, _rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        if t + 1 >= self.tables.len() {
            return Err(Error::InvalidArgument(format!(
                "time {t} at or past horizon {}",
                self.problem.horizon
            )));
        }
        if self.problem.target.contains(x) || !self.problem.safe.contains(x) {
            return Ok(DVector::zeros(self.problem.control_dim()));
        }
        grid_policy(&self.tables[t + 1], &self.problem, &self.control_grid, x).map(|(u, _)| u)
    }
}

/// Constant controller, for oracles and fixed-input rollout tests.
pub struct FixedControl(pub DVector<f64>);

impl Controller for FixedControl {
    fn act(&self, _t: usize, _x: &DVector<f64>, _rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        Ok(self.0.clone())
    }
}
