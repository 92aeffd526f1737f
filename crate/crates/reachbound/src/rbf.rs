//! Gaussian radial basis function sums and their expectation algebra.
//!
//! The basis element is the Gaussian density
//! `phi(x; mu, Sigma) = (2*pi)^(-n/2) |Sigma|^(-1/2) exp(-(x-mu)^T Sigma^{-1} (x-mu) / 2)`.
//! Everything downstream (value bounds, dominance certificates, policies)
//! works with weighted sums of these, because the family is closed under the
//! two operations the recursion needs: products of Gaussians factor into a
//! scalar times a Gaussian, and the expectation of a Gaussian sum under a
//! Gaussian mixture kernel is again available in closed form.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::errors::{Error, Result};

/// Exponents below this are flushed to zero before `exp`, keeping far-field
/// evaluations free of denormals without changing any quantity above 1e-300.
const LOG_FLOOR: f64 = -700.0;

const SYM_TOL: f64 = 1e-12;

/// SPD covariance with cached Cholesky factor and log-determinant.
#[derive(Debug, Clone)]
pub struct Covariance {
    matrix: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
    logdet: f64,
}

impl Covariance {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = matrix.amax().max(1.0);
        for i in 0..matrix.nrows() {
            for j in (i + 1)..matrix.ncols() {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > SYM_TOL * scale {
                    return Err(Error::NotSymmetric("covariance".into()));
                }
            }
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("covariance".into()))?;
        let chol_lower = chol.l();
        let logdet = 2.0 * (0..sym.nrows()).map(|i| chol_lower[(i, i)].ln()).sum::<f64>();
        Ok(Self {
            matrix: sym,
            chol_lower,
            logdet,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    #[inline]
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    #[inline]
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Lower Cholesky factor `L` with `L L^T = Sigma`.
    #[inline]
    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_lower
    }

    /// Mahalanobis square `r^T Sigma^{-1} r` via one triangular solve.
    pub fn quad_form(&self, r: &DVector<f64>) -> f64 {
        let v = self
            .chol_lower
            .solve_lower_triangular(r)
            .expect("cached Cholesky factor is nonsingular");
        v.norm_squared()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.matrix
            .clone()
            .cholesky()
            .expect("validated SPD")
            .solve(&DMatrix::identity(n, n))
    }

    /// `log phi(x; mu, Sigma)` for this covariance.
    pub fn log_density(&self, x: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        let n = self.dim() as f64;
        let r = x - mu;
        -0.5 * (n * LN_2PI + self.logdet + self.quad_form(&r))
    }
}

const LN_2PI: f64 = 1.8378770664093453;

/// Normalized Gaussian density value with the underflow floor applied.
pub fn gaussian_density(x: &DVector<f64>, mu: &DVector<f64>, cov: &Covariance) -> f64 {
    let l = cov.log_density(x, mu);
    if l < LOG_FLOOR {
        0.0
    } else {
        l.exp()
    }
}

/// One weighted Gaussian term `w * phi(x; mu, Sigma)`.
#[derive(Debug, Clone)]
pub struct GaussianTerm {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

impl GaussianTerm {
    pub fn new(weight: f64, mean: DVector<f64>, cov_matrix: DMatrix<f64>) -> Result<Self> {
        if !weight.is_finite() {
            return Err(Error::InvalidArgument(format!("term weight {weight}")));
        }
        let cov = Covariance::new(cov_matrix)?;
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mean has dim {}, covariance {}",
                mean.len(),
                cov.dim()
            )));
        }
        Ok(Self { weight, mean, cov })
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> f64 {
        self.weight * gaussian_density(x, &self.mean, &self.cov)
    }
}

/// Weighted sum of Gaussian terms over one ambient dimension.
#[derive(Debug, Clone)]
pub struct RbfSum {
    dim: usize,
    terms: Vec<GaussianTerm>,
}

impl RbfSum {
    pub fn new(terms: Vec<GaussianTerm>) -> Result<Self> {
        let Some(first) = terms.first() else {
            return Err(Error::InvalidArgument("RBF sum needs at least one term".into()));
        };
        let dim = first.mean.len();
        if terms.iter().any(|t| t.mean.len() != dim) {
            return Err(Error::DimensionMismatch("RBF sum terms have mixed dims".into()));
        }
        Ok(Self { dim, terms })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn terms(&self) -> &[GaussianTerm] {
        &self.terms
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "point dim {} vs sum dim {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self.terms.iter().map(|t| t.evaluate(x)).sum())
    }

    /// Lebesgue integral over `R^n`: each normalized Gaussian integrates to 1,
    /// so the integral is the weight total.
    pub fn integral_lebesgue(&self) -> f64 {
        self.terms.iter().map(|t| t.weight).sum()
    }

    /// `E[g(y)]` for `y` distributed with density `density` (itself an RBF sum
    /// with weights summing to one): closed form
    /// `sum_i sum_j w_i w~_j phi(mu~_j; mu_i, Sigma_i + Sigma~_j)`.
    pub fn expected_value(&self, density: &RbfSum) -> Result<f64> {
        if density.dim != self.dim {
            return Err(Error::DimensionMismatch(
                "density dimension differs from integrand".into(),
            ));
        }
        let total: f64 = density.terms.iter().map(|t| t.weight).sum();
        if (total - 1.0).abs() > 1e-9 || density.terms.iter().any(|t| t.weight < 0.0) {
            return Err(Error::InvalidMixture(format!(
                "density weights must be nonnegative and sum to 1 (sum {total})"
            )));
        }
        let mut acc = 0.0;
        for g in &self.terms {
            for d in &density.terms {
                let cov = Covariance::new(g.cov.matrix() + d.cov.matrix())?;
                acc += g.weight * d.weight * gaussian_density(&d.mean, &g.mean, &cov);
            }
        }
        Ok(acc)
    }
}

/// Factors the pointwise product of two normalized Gaussians:
/// `phi(x;a,Sa) * phi(x;b,Sb) = scale * phi(x; m, S)` with
/// `S = (Sa^{-1}+Sb^{-1})^{-1}`, `m = S (Sa^{-1} a + Sb^{-1} b)` and
/// `scale = phi(a; b, Sa+Sb)`. Returns `(scale, merged)` where `merged` has
/// weight `wa * wb * scale`.
pub fn product_factorization(a: &GaussianTerm, b: &GaussianTerm) -> Result<(f64, GaussianTerm)> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimensionMismatch("product of mixed-dim terms".into()));
    }
    let sa_inv = a.cov.inverse();
    let sb_inv = b.cov.inverse();
    let merged_cov = Covariance::new(
        (&sa_inv + &sb_inv)
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("sum of precisions".into()))?
            .inverse(),
    )?;
    let mean = merged_cov.matrix() * (&sa_inv * &a.mean + &sb_inv * &b.mean);
    let conv = Covariance::new(a.cov.matrix() + b.cov.matrix())?;
    let scale = gaussian_density(&a.mean, &b.mean, &conv);
    let merged = GaussianTerm {
        weight: a.weight * b.weight * scale,
        mean,
        cov: merged_cov,
    };
    Ok((scale, merged))
}

/// One affine-argument Gaussian term `w * phi(A x + B u + c; mu, Sigma)`,
/// produced by pushing an RBF term through a kernel component. Evaluating at
/// `z = [x; u]` composes the affine map with the Gaussian.
#[derive(Debug, Clone)]
pub struct PushforwardTerm {
    pub weight: f64,
    /// Map matrix `[A  B  c]`, shape `n x (n + m + 1)`, applied to `[x; u; 1]`.
    pub map: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Convolution covariance `Sigma_i + Sigma_j`.
    pub cov: Covariance,
}

impl PushforwardTerm {
    pub fn argument(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.mean.len();
        let m = self.map.ncols() - 1 - x.len();
        debug_assert_eq!(u.len(), m);
        let mut arg = self.map.column(self.map.ncols() - 1).clone_owned();
        arg += self.map.view((0, 0), (n, x.len())) * x;
        arg += self.map.view((0, x.len()), (n, m)) * u;
        arg
    }

    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.weight * gaussian_density(&self.argument(x, u), &self.mean, &self.cov)
    }
}

/// `h(x,u) = E[g(x^+) | x, u]` as an explicit sum of affine-argument terms.
#[derive(Debug, Clone)]
pub struct PushforwardSum {
    pub state_dim: usize,
    pub control_dim: usize,
    pub terms: Vec<PushforwardTerm>,
}

impl PushforwardSum {
    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        if x.len() != self.state_dim || u.len() != self.control_dim {
            return Err(Error::DimensionMismatch(format!(
                "pushforward expects ({}, {}), got ({}, {})",
                self.state_dim,
                self.control_dim,
                x.len(),
                u.len()
            )));
        }
        Ok(self.terms.iter().map(|t| t.evaluate(x, u)).sum())
    }
}

/// One mixture component of the transition kernel:
/// `x^+ = A x + B u + c + omega`, `omega ~ N(0, Sigma)`.
#[derive(Debug, Clone)]
pub struct KernelComponent {
    pub weight: f64,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub noise: Covariance,
}

/// Gaussian-mixture transition kernel
/// `Q(dy | x, u) = sum_j w_j N(A_j x + B_j u + c_j, Sigma_j)`.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    state_dim: usize,
    control_dim: usize,
    components: Vec<KernelComponent>,
}

impl TransitionKernel {
    pub fn new(components: Vec<KernelComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::InvalidMixture("kernel needs at least one component".into()));
        };
        let n = first.a.nrows();
        let m = first.b.ncols();
        let mut total = 0.0;
        for comp in &components {
            if comp.a.nrows() != n
                || comp.a.ncols() != n
                || comp.b.nrows() != n
                || comp.b.ncols() != m
                || comp.c.len() != n
                || comp.noise.dim() != n
            {
                return Err(Error::DimensionMismatch(
                    "kernel component dimensions disagree".into(),
                ));
            }
            if comp.weight < 0.0 || !comp.weight.is_finite() {
                return Err(Error::InvalidMixture(format!(
                    "component weight {}",
                    comp.weight
                )));
            }
            total += comp.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            state_dim: n,
            control_dim: m,
            components,
        })
    }

    /// Single linear-Gaussian kernel `x^+ = A x + B u + N(0, Sigma)`.
    pub fn linear_gaussian(a: DMatrix<f64>, b: DMatrix<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(vec![KernelComponent {
            weight: 1.0,
            a,
            b,
            c: DVector::zeros(n),
            noise: Covariance::new(noise)?,
        }])
    }

    #[inline]
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    #[inline]
    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    #[inline]
    pub fn components(&self) -> &[KernelComponent] {
        &self.components
    }

    /// Transition density `q(y | x, u)`.
    pub fn density(&self, y: &DVector<f64>, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        self.check_args(x, u)?;
        Ok(self
            .components
            .iter()
            .map(|comp| {
                let mean = &comp.a * x + &comp.b * u + &comp.c;
                comp.weight * gaussian_density(y, &mean, &comp.noise)
            })
            .sum())
    }

    /// Successor state from pre-drawn randomness: `pick` selects the mixture
    /// component through the cumulative weights, `z` is a standard normal
    /// vector pushed through that component's covariance factor. Rollouts that
    /// share `(pick, z)` across controllers are coupled exactly.
    pub fn step_with(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        pick: f64,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_args(x, u)?;
        if z.len() != self.state_dim {
            return Err(Error::DimensionMismatch("noise vector dimension".into()));
        }
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (j, comp) in self.components.iter().enumerate() {
            acc += comp.weight;
            if pick <= acc {
                chosen = j;
                break;
            }
        }
        let comp = &self.components[chosen];
        Ok(&comp.a * x + &comp.b * u + &comp.c + comp.noise.chol_lower() * z)
    }

    /// Successor state drawing fresh randomness from `rng`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DVector<f64>> {
        let pick: f64 = rng.random_range(0.0..1.0);
        let z = DVector::from_iterator(
            self.state_dim,
            (0..self.state_dim).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        self.step_with(x, u, pick, &z)
    }

    /// Parameters of `E[g(x^+) | x, u]` for an RBF sum `g`: one term per
    /// (g-term, component) pair with weight `w_i * w~_j`, mean `mu_i`,
    /// covariance `Sigma_i + Sigma_j` and map `[A_j  B_j  c_j]`.
    pub fn pushforward_params(&self, g: &RbfSum) -> Result<PushforwardSum> {
        if g.dim() != self.state_dim {
            return Err(Error::DimensionMismatch(
                "pushforward of function with wrong state dim".into(),
            ));
        }
        let mut terms = Vec::with_capacity(g.len() * self.components.len());
        for gt in g.terms() {
            for comp in &self.components {
                let mut map = DMatrix::zeros(self.state_dim, self.state_dim + self.control_dim + 1);
                map.view_mut((0, 0), (self.state_dim, self.state_dim))
                    .copy_from(&comp.a);
                map.view_mut((0, self.state_dim), (self.state_dim, self.control_dim))
                    .copy_from(&comp.b);
                map.view_mut((0, self.state_dim + self.control_dim), (self.state_dim, 1))
                    .copy_from(&comp.c);
                terms.push(PushforwardTerm {
                    weight: gt.weight * comp.weight,
                    map,
                    mean: gt.mean.clone(),
                    cov: Covariance::new(gt.cov.matrix() + comp.noise.matrix())?,
                });
            }
        }
        Ok(PushforwardSum {
            state_dim: self.state_dim,
            control_dim: self.control_dim,
            terms,
        })
    }

    /// Transition density at fixed `(x,u)` as an RBF sum in the successor
    /// variable; the bridge between `pushforward_params` and `expected_value`.
    pub fn density_sum(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<RbfSum> {
        self.check_args(x, u)?;
        let terms = self
            .components
            .iter()
            .map(|comp| GaussianTerm {
                weight: comp.weight,
                mean: &comp.a * x + &comp.b * u + &comp.c,
                cov: comp.noise.clone(),
            })
            .collect();
        RbfSum::new(terms)
    }

    fn check_args(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim || u.len() != self.control_dim {
            return Err(Error::DimensionMismatch(format!(
                "kernel expects ({}, {}), got ({}, {})",
                self.state_dim,
                self.control_dim,
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }
}

/// Formats a float with 17 significant digits, enough to round-trip any f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the flat record form of a sum: a header line `rbf <n> <M>`, then per
/// term three lines holding the weight, the mean entries and the row-major
/// covariance entries, all space-separated decimal text with 17 significant
/// digits.
pub fn write_sum<W: Write>(out: &mut W, sum: &RbfSum) -> Result<()> {
    writeln!(out, "rbf {} {}", sum.dim(), sum.len())?;
    for t in sum.terms() {
        writeln!(out, "{}", format_f64(t.weight))?;
        let mean: Vec<String> = t.mean.iter().map(|&v| format_f64(v)).collect();
        writeln!(out, "{}", mean.join(" "))?;
        let n = sum.dim();
        let mut cov = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                cov.push(format_f64(t.cov.matrix()[(i, j)]));
            }
        }
        writeln!(out, "{}", cov.join(" "))?;
    }
    Ok(())
}

fn parse_floats(line: &str, want: usize, path: &str) -> Result<Vec<f64>> {
    let vals: std::result::Result<Vec<f64>, _> =
        line.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| Error::Format {
        path: path.into(),
        detail: format!("bad float: {e}"),
    })?;
    if vals.len() != want {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("expected {want} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Reads one sum written by [`write_sum`]. `path` labels parse errors.
pub fn read_sum<R: BufRead>(input: &mut R, path: &str) -> Result<RbfSum> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != "rbf" {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("expected header 'rbf <n> <M>', found {header:?}"),
        });
    }
    let n: usize = fields[1].parse().map_err(|_| Error::Format {
        path: path.into(),
        detail: "bad dimension in header".into(),
    })?;
    let m: usize = fields[2].parse().map_err(|_| Error::Format {
        path: path.into(),
        detail: "bad term count in header".into(),
    })?;
    let mut terms = Vec::with_capacity(m);
    let mut line = String::new();
    for _ in 0..m {
        line.clear();
        input.read_line(&mut line)?;
        let w = parse_floats(&line, 1, path)?[0];
        line.clear();
        input.read_line(&mut line)?;
        let mean = DVector::from_vec(parse_floats(&line, n, path)?);
        line.clear();
        input.read_line(&mut line)?;
        let cov = DMatrix::from_row_slice(n, n, &parse_floats(&line, n * n, path)?);
        terms.push(GaussianTerm::new(w, mean, cov)?);
    }
    RbfSum::new(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use approx::assert_relative_eq;

    fn v(vals: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(vals)
    }

    fn scalar_term(w: f64, mu: f64, var: f64) -> GaussianTerm {
        GaussianTerm::new(w, v(&[mu]), DMatrix::from_element(1, 1, var)).unwrap()
    }

    /// Adaptive Simpson quadrature, the independent oracle for expectations.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
            let m = 0.5 * (a + b);
            let fm = f(m);
            ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
        }
        fn rec(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            fa: f64,
            b: f64,
            fb: f64,
            whole: f64,
            m: f64,
            fm: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let (left, lm, flm) = simpson(f, a, fa, m, fm);
            let (right, rm, frm) = simpson(f, m, fm, b, fb);
            let delta = left + right - whole;
            if depth == 0 || delta.abs() <= 15.0 * tol {
                left + right + delta / 15.0
            } else {
                rec(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                    + rec(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
            }
        }
        let fa = f(a);
        let fb = f(b);
        let (whole, m, fm) = simpson(f, a, fa, b, fb);
        rec(f, a, fa, b, fb, whole, m, fm, tol, 48)
    }

    #[test]
    fn density_normalizes_to_one() {
        let t = scalar_term(1.0, 0.3, 0.02);
        let integral = adaptive_simpson(&|x| t.evaluate(&v(&[x])), -3.0, 3.0, 1e-13);
        assert_relative_eq!(integral, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn integral_lebesgue_is_weight_total() {
        let sum = RbfSum::new(vec![scalar_term(0.4, 0.0, 0.1), scalar_term(1.1, 0.5, 0.3)]).unwrap();
        assert_relative_eq!(sum.integral_lebesgue(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn far_field_evaluation_underflows_to_zero() {
        let t = scalar_term(1.0, 0.0, 1e-3);
        assert_eq!(t.evaluate(&v(&[50.0])), 0.0);
    }

    #[test]
    fn rejects_non_spd_covariance() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianTerm::new(1.0, v(&[0.0, 0.0]), bad),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn product_factorization_identity_holds_pointwise() {
        let a = scalar_term(0.7, 0.2, 0.05);
        let b = scalar_term(1.3, -0.4, 0.11);
        let (_, merged) = product_factorization(&a, &b).unwrap();
        let mut rng = derive_rng(3, "rbf-test", &[0]);
        for _ in 0..200 {
            let x = v(&[rng.random_range(-1.0..1.0)]);
            assert_relative_eq!(
                a.evaluate(&x) * b.evaluate(&x),
                merged.evaluate(&x),
                epsilon = 1e-14,
                max_relative = 1e-11
            );
        }
    }

    #[test]
    fn product_factorization_identity_holds_in_3d() {
        let mut rng = derive_rng(3, "rbf-test", &[1]);
        let mut rand_spd = |scale: f64| {
            let g = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            &g * g.transpose() * scale + DMatrix::identity(3, 3) * 0.05
        };
        let a = GaussianTerm::new(0.9, v(&[0.1, -0.2, 0.3]), rand_spd(0.2)).unwrap();
        let b = GaussianTerm::new(1.2, v(&[-0.3, 0.0, 0.2]), rand_spd(0.3)).unwrap();
        let (_, merged) = product_factorization(&a, &b).unwrap();
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-0.8..0.8));
            assert_relative_eq!(
                a.evaluate(&x) * b.evaluate(&x),
                merged.evaluate(&x),
                epsilon = 1e-13,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn expected_value_matches_quadrature_1d() {
        let g = RbfSum::new(vec![scalar_term(0.8, 0.1, 0.03), scalar_term(0.5, -0.3, 0.07)]).unwrap();
        let density =
            RbfSum::new(vec![scalar_term(0.6, 0.05, 0.02), scalar_term(0.4, -0.1, 0.01)]).unwrap();
        let closed = g.expected_value(&density).unwrap();
        let quad = adaptive_simpson(
            &|y| g.evaluate(&v(&[y])).unwrap() * density.evaluate(&v(&[y])).unwrap(),
            -4.0,
            4.0,
            1e-14,
        );
        assert_relative_eq!(closed, quad, max_relative = 1e-8);
    }

    #[test]
    fn expected_value_matches_monte_carlo_3d() {
        let mut rng = derive_rng(3, "rbf-test", &[2]);
        let mut rand_spd = |scale: f64| {
            let g = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            &g * g.transpose() * scale + DMatrix::identity(3, 3) * 0.02
        };
        let g = RbfSum::new(vec![
            GaussianTerm::new(0.7, v(&[0.1, 0.0, -0.1]), rand_spd(0.05)).unwrap(),
            GaussianTerm::new(0.4, v(&[-0.2, 0.1, 0.0]), rand_spd(0.08)).unwrap(),
        ])
        .unwrap();
        let d_terms = vec![
            GaussianTerm::new(0.55, v(&[0.0, 0.05, 0.0]), rand_spd(0.03)).unwrap(),
            GaussianTerm::new(0.45, v(&[0.1, -0.05, 0.1]), rand_spd(0.04)).unwrap(),
        ];
        let density = RbfSum::new(d_terms.clone()).unwrap();
        let closed = g.expected_value(&density).unwrap();

        // Monte Carlo oracle: sample the mixture directly.
        let n_samples = 400_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n_samples {
            let pick: f64 = rng.random_range(0.0..1.0);
            let comp = if pick <= d_terms[0].weight { &d_terms[0] } else { &d_terms[1] };
            let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &comp.mean + comp.cov.chol_lower() * z;
            let val = g.evaluate(&y).unwrap();
            acc += val;
            acc2 += val * val;
        }
        let mean = acc / n_samples as f64;
        let var = (acc2 / n_samples as f64 - mean * mean).max(0.0);
        let se = (var / n_samples as f64).sqrt();
        assert!(
            (closed - mean).abs() <= 3.0 * se,
            "closed {closed} vs MC {mean} +- {se}"
        );
    }

    #[test]
    fn expected_value_rejects_unnormalized_density() {
        let g = RbfSum::new(vec![scalar_term(1.0, 0.0, 0.1)]).unwrap();
        let density = RbfSum::new(vec![scalar_term(0.7, 0.0, 0.1)]).unwrap();
        assert!(matches!(
            g.expected_value(&density),
            Err(Error::InvalidMixture(_))
        ));
    }

    #[test]
    fn pushforward_agrees_with_expected_value_at_fixed_inputs() {
        let kernel = TransitionKernel::new(vec![
            KernelComponent {
                weight: 0.7,
                a: DMatrix::from_element(1, 1, 0.9),
                b: DMatrix::from_element(1, 1, 1.0),
                c: v(&[0.05]),
                noise: Covariance::new(DMatrix::from_element(1, 1, 0.002)).unwrap(),
            },
            KernelComponent {
                weight: 0.3,
                a: DMatrix::from_element(1, 1, 1.1),
                b: DMatrix::from_element(1, 1, 0.8),
                c: v(&[-0.02]),
                noise: Covariance::new(DMatrix::from_element(1, 1, 0.004)).unwrap(),
            },
        ])
        .unwrap();
        let g = RbfSum::new(vec![scalar_term(0.9, 0.0, 0.01), scalar_term(0.3, 0.1, 0.02)]).unwrap();
        let push = kernel.pushforward_params(&g).unwrap();
        let mut rng = derive_rng(3, "rbf-test", &[4]);
        for _ in 0..50 {
            let x = v(&[rng.random_range(-0.5..0.5)]);
            let u = v(&[rng.random_range(-0.1..0.1)]);
            let via_push = push.evaluate(&x, &u).unwrap();
            let via_expect = g
                .expected_value(&kernel.density_sum(&x, &u).unwrap())
                .unwrap();
            assert_relative_eq!(via_push, via_expect, epsilon = 1e-12, max_relative = 1e-10);
        }
    }

    #[test]
    fn step_with_reproduces_affine_map() {
        let kernel = TransitionKernel::linear_gaussian(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.04),
        )
        .unwrap();
        let x = v(&[0.3]);
        let u = v(&[-0.1]);
        let y = kernel.step_with(&x, &u, 0.5, &v(&[2.0])).unwrap();
        // mean 0.2, plus L*z = 0.2*2.0
        assert_relative_eq!(y[0], 0.2 + 0.2 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn serialization_round_trips_exactly() {
        let mut rng = derive_rng(3, "rbf-test", &[5]);
        let mut terms = Vec::new();
        for _ in 0..4 {
            let g = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let cov = &g * g.transpose() * 0.3 + DMatrix::identity(2, 2) * 0.01;
            terms.push(
                GaussianTerm::new(
                    rng.random_range(0.001..10.0),
                    DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                    cov,
                )
                .unwrap(),
            );
        }
        let sum = RbfSum::new(terms).unwrap();
        let mut buf = Vec::new();
        write_sum(&mut buf, &sum).unwrap();
        let parsed = read_sum(&mut std::io::BufReader::new(&buf[..]), "mem").unwrap();
        assert_eq!(parsed.len(), sum.len());
        for (a, b) in sum.terms().iter().zip(parsed.terms()) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.cov.matrix(), b.cov.matrix());
        }
    }
}
