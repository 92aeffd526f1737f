//! Sets described by quadratic inequalities in homogeneous form.
//!
//! A set in `R^d` is stored as a finite list of symmetric `(d+1)x(d+1)`
//! matrices `A_j`; a point belongs to the set iff `[x;1]^T A_j [x;1] >= 0` for
//! every `j`. Boundary points are members. The homogeneous representation is
//! the only one kept: ellipsoids, halfspaces, rings and products are all built
//! by writing down their forms, and the dominance LMIs consume the forms
//! directly as S-procedure multiplier data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::errors::{Error, Result};

const SYM_TOL: f64 = 1e-12;

/// One symmetric homogeneous quadratic form `z^T A z` with `z = [x; 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    /// Symmetric `(dim+1) x (dim+1)` matrix.
    matrix: DMatrix<f64>,
    dim: usize,
}

impl QuadraticForm {
    /// Builds a form from its homogenized matrix. The matrix must be square of
    /// side at least 2 and symmetric to relative tolerance 1e-12; it is
    /// symmetrized exactly on construction so later algebra sees `(A+A^T)/2`.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "form matrix is {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.nrows() < 2 {
            return Err(Error::DimensionMismatch(
                "form matrix must be at least 2x2 (one state dim plus homogenizer)".into(),
            ));
        }
        let scale = matrix.amax().max(1.0);
        for i in 0..matrix.nrows() {
            for j in (i + 1)..matrix.ncols() {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > SYM_TOL * scale {
                    return Err(Error::NotSymmetric(format!(
                        "form entry ({i},{j}) differs from ({j},{i})"
                    )));
                }
            }
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let dim = matrix.nrows() - 1;
        Ok(Self { matrix: sym, dim })
    }

    /// Ambient dimension `d` (the matrix has side `d+1`).
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Evaluates `[x;1]^T A [x;1]` without forming the homogenized vector.
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "point has dim {}, form expects {}",
                x.len(),
                self.dim
            )));
        }
        let d = self.dim;
        let mut acc = self.matrix[(d, d)];
        for i in 0..d {
            acc += 2.0 * self.matrix[(i, d)] * x[i];
            for j in 0..d {
                acc += self.matrix[(i, j)] * x[i] * x[j];
            }
        }
        Ok(acc)
    }

    /// Embeds a form on a `total`-dimensional space, mapping coordinate `i` of
    /// the original space to coordinate `offset + i`. The homogenizer row and
    /// column map to the new homogenizer; all other entries are zero.
    pub fn pad(&self, offset: usize, total: usize) -> Result<QuadraticForm> {
        if offset + self.dim > total {
            return Err(Error::DimensionMismatch(format!(
                "cannot embed dim {} at offset {offset} into dim {total}",
                self.dim
            )));
        }
        let mut m = DMatrix::zeros(total + 1, total + 1);
        for i in 0..self.dim {
            for j in 0..self.dim {
                m[(offset + i, offset + j)] = self.matrix[(i, j)];
            }
            m[(offset + i, total)] = self.matrix[(i, self.dim)];
            m[(total, offset + i)] = self.matrix[(self.dim, i)];
        }
        m[(total, total)] = self.matrix[(self.dim, self.dim)];
        QuadraticForm::new(m)
    }
}

/// Intersection of finitely many quadratic-form inequalities.
#[derive(Debug, Clone)]
pub struct QuadraticSet {
    dim: usize,
    forms: Vec<QuadraticForm>,
}

/// An ellipsoid `{x : x^T Q x <= rho^2}` kept with its defining data, used
/// where builders need the explicit shape (rings, grids, LQG weights).
#[derive(Debug, Clone)]
pub struct Ellipsoid {
    q: DMatrix<f64>,
    rho: f64,
}

impl Ellipsoid {
    /// `Q` must be symmetric positive definite, `rho > 0`.
    pub fn new(q: DMatrix<f64>, rho: f64) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "ellipsoid shape matrix is {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        let scale = q.amax().max(1.0);
        for i in 0..q.nrows() {
            for j in (i + 1)..q.ncols() {
                if (q[(i, j)] - q[(j, i)]).abs() > SYM_TOL * scale {
                    return Err(Error::NotSymmetric("ellipsoid shape matrix".into()));
                }
            }
        }
        let sym = (&q + q.transpose()) * 0.5;
        if sym.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("ellipsoid shape matrix".into()));
        }
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidArgument(format!("ellipsoid radius {rho}")));
        }
        Ok(Self { q: sym, rho })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    #[inline]
    pub fn shape(&self) -> &DMatrix<f64> {
        &self.q
    }

    #[inline]
    pub fn radius(&self) -> f64 {
        self.rho
    }

    /// `rho^2 - x^T Q x` as a homogeneous form (nonnegative inside).
    pub fn inside_form(&self) -> QuadraticForm {
        let d = self.dim();
        let mut m = DMatrix::zeros(d + 1, d + 1);
        m.view_mut((0, 0), (d, d)).copy_from(&(-&self.q));
        m[(d, d)] = self.rho * self.rho;
        QuadraticForm::new(m).expect("inside form is symmetric by construction")
    }

    /// `x^T Q x - rho^2` as a homogeneous form (nonnegative outside).
    pub fn outside_form(&self) -> QuadraticForm {
        let d = self.dim();
        let mut m = DMatrix::zeros(d + 1, d + 1);
        m.view_mut((0, 0), (d, d)).copy_from(&self.q);
        m[(d, d)] = -self.rho * self.rho;
        QuadraticForm::new(m).expect("outside form is symmetric by construction")
    }

    /// Tight axis-aligned bounding box: `|x_i| <= rho * sqrt((Q^{-1})_{ii})`.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        let inv = self
            .q
            .clone()
            .cholesky()
            .expect("shape matrix validated SPD")
            .inverse();
        (0..self.dim())
            .map(|i| {
                let half = self.rho * inv[(i, i)].max(0.0).sqrt();
                (-half, half)
            })
            .collect()
    }

    pub fn as_set(&self) -> QuadraticSet {
        QuadraticSet::from_forms(vec![self.inside_form()]).expect("single valid form")
    }

    #[inline]
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (self.q.clone() * x).dot(x) <= self.rho * self.rho
    }
}

impl QuadraticSet {
    /// All forms must share one ambient dimension; at least one form.
    pub fn from_forms(forms: Vec<QuadraticForm>) -> Result<Self> {
        let Some(first) = forms.first() else {
            return Err(Error::InvalidArgument(
                "quadratic set needs at least one form".into(),
            ));
        };
        let dim = first.dim();
        if forms.iter().any(|f| f.dim() != dim) {
            return Err(Error::DimensionMismatch(
                "quadratic set forms have mixed dimensions".into(),
            ));
        }
        Ok(Self { dim, forms })
    }

    /// `{x : b - a^T x >= 0}`, i.e. the halfspace `a^T x <= b`.
    pub fn halfspace(a: &DVector<f64>, b: f64) -> Result<Self> {
        if a.len() == 0 {
            return Err(Error::DimensionMismatch("halfspace normal is empty".into()));
        }
        if a.amax() == 0.0 {
            return Err(Error::InvalidArgument("halfspace normal is zero".into()));
        }
        let d = a.len();
        let mut m = DMatrix::zeros(d + 1, d + 1);
        for i in 0..d {
            m[(i, d)] = -0.5 * a[i];
            m[(d, i)] = -0.5 * a[i];
        }
        m[(d, d)] = b;
        Self::from_forms(vec![QuadraticForm::new(m)?])
    }

    /// The ring `safe \ interior(target)`: points inside the safe ellipsoid and
    /// outside (or on the boundary of) the target ellipsoid. Not convex.
    pub fn ring(safe: &Ellipsoid, target: &Ellipsoid) -> Result<Self> {
        if safe.dim() != target.dim() {
            return Err(Error::DimensionMismatch(
                "ring needs safe and target of equal dimension".into(),
            ));
        }
        Self::from_forms(vec![safe.inside_form(), target.outside_form()])
    }

    /// Cartesian product: forms of `self` act on the first block of
    /// coordinates, forms of `other` on the second.
    pub fn product(&self, other: &QuadraticSet) -> Result<Self> {
        let total = self.dim + other.dim;
        let mut forms = Vec::with_capacity(self.forms.len() + other.forms.len());
        for f in &self.forms {
            forms.push(f.pad(0, total)?);
        }
        for f in &other.forms {
            forms.push(f.pad(self.dim, total)?);
        }
        Self::from_forms(forms)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn forms(&self) -> &[QuadraticForm] {
        &self.forms
    }

    /// Non-strict membership: every form evaluates `>= 0`.
    pub fn contains(&self, x: &DVector<f64>) -> Result<bool> {
        for f in &self.forms {
            if f.evaluate(x)? < 0.0 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Axis-aligned box containing the set, derived from forms whose quadratic
    /// part is negative semidefinite with no linear term (ellipsoidal cuts
    /// `c - x^T Q x >= 0`): such a form bounds every axis in the row space of
    /// `Q`. Returns `None` when some axis is bounded by no form.
    pub fn bounding_box(&self) -> Option<Vec<(f64, f64)>> {
        let d = self.dim;
        let mut best = vec![f64::INFINITY; d];
        for f in &self.forms {
            let m = f.matrix();
            let p = -m.view((0, 0), (d, d)).clone_owned();
            let c = m[(d, d)];
            let has_linear = (0..d).any(|i| m[(i, d)] != 0.0);
            if has_linear || c <= 0.0 {
                continue;
            }
            // Need x^T P x <= c with P PSD; bound axis i by c * (P^+)_{ii}.
            let eig = nalgebra::SymmetricEigen::new(p.clone());
            let lam_max = eig.eigenvalues.amax();
            if lam_max <= 0.0 {
                continue;
            }
            if eig.eigenvalues.iter().any(|&l| l < -1e-10 * lam_max) {
                continue; // indefinite quadratic part, no box from this form
            }
            let cut = 1e-12 * lam_max;
            for i in 0..d {
                // (P^+)_{ii} = sum_k v_ki^2 / lambda_k over positive eigenvalues;
                // an axis with any component in the kernel stays unbounded.
                let mut diag = 0.0;
                let mut kernel_component = 0.0f64;
                for k in 0..d {
                    let l = eig.eigenvalues[k];
                    let v = eig.eigenvectors[(i, k)];
                    if l > cut {
                        diag += v * v / l;
                    } else {
                        kernel_component += v * v;
                    }
                }
                if kernel_component < 1e-10 {
                    best[i] = best[i].min((c * diag).max(0.0).sqrt());
                }
            }
        }
        if best.iter().any(|h| !h.is_finite()) {
            return None;
        }
        Some(best.into_iter().map(|h| (-h, h)).collect())
    }

    /// Uniform sample via rejection from the bounding box. Fails when no box
    /// exists or when `max_attempts` draws all miss (degenerate sets).
    pub fn sample_uniform(
        &self,
        rng: &mut ChaCha8Rng,
        max_attempts: usize,
    ) -> Result<DVector<f64>> {
        let bbox = self.bounding_box().ok_or_else(|| {
            Error::SamplingFailed("set has no ellipsoidal bounding box".into())
        })?;
        for _ in 0..max_attempts {
            let x = DVector::from_iterator(
                self.dim,
                bbox.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)),
            );
            if self.contains(&x)? {
                return Ok(x);
            }
        }
        Err(Error::SamplingFailed(format!(
            "no member found in {max_attempts} draws"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use approx::assert_relative_eq;

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    fn ball(dim: usize, rho: f64) -> Ellipsoid {
        Ellipsoid::new(DMatrix::identity(dim, dim), rho).unwrap()
    }

    #[test]
    fn rejects_asymmetric_matrix() {
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 1)] = 1.0;
        assert!(matches!(
            QuadraticForm::new(m),
            Err(Error::NotSymmetric(_))
        ));
    }

    #[test]
    fn ellipsoid_membership_matches_direct_inequality() {
        let e = Ellipsoid::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]), 0.7).unwrap();
        let set = e.as_set();
        let mut rng = derive_rng(11, "geom-test", &[0]);
        for _ in 0..500 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let direct = (e.shape() * &x).dot(&x) <= e.radius() * e.radius();
            assert_eq!(set.contains(&x).unwrap(), direct);
        }
    }

    #[test]
    fn boundary_points_are_members() {
        let e = ball(1, 0.5);
        assert!(e.as_set().contains(&vec1(0.5)).unwrap());
        assert!(e.as_set().contains(&vec1(-0.5)).unwrap());
        assert!(!e.as_set().contains(&vec1(0.5 + 1e-12)).unwrap());
    }

    #[test]
    fn halfspace_contains_matches_inequality() {
        let a = DVector::from_vec(vec![1.0, -2.0]);
        let h = QuadraticSet::halfspace(&a, 0.3).unwrap();
        let mut rng = derive_rng(11, "geom-test", &[1]);
        for _ in 0..500 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            assert_eq!(h.contains(&x).unwrap(), a.dot(&x) <= 0.3);
        }
    }

    #[test]
    fn ring_is_not_convex() {
        let ring = QuadraticSet::ring(&ball(1, 1.0), &ball(1, 0.1)).unwrap();
        let a = vec1(-0.5);
        let b = vec1(0.5);
        assert!(ring.contains(&a).unwrap() && ring.contains(&b).unwrap());
        let mid = (&a + &b) * 0.5;
        assert!(!ring.contains(&mid).unwrap());
    }

    #[test]
    fn product_membership_is_componentwise() {
        let ring = QuadraticSet::ring(&ball(2, 1.0), &ball(2, 0.1)).unwrap();
        let u = ball(1, 0.2).as_set();
        let prod = ring.product(&u).unwrap();
        assert_eq!(prod.dim(), 3);
        assert_eq!(prod.forms().len(), 3);
        let mut rng = derive_rng(11, "geom-test", &[2]);
        for _ in 0..500 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.2..1.2));
            let v = DVector::from_fn(1, |_, _| rng.random_range(-0.3..0.3));
            let z = DVector::from_iterator(3, x.iter().chain(v.iter()).copied());
            let joint = prod.contains(&z).unwrap();
            let split = ring.contains(&x).unwrap() && u.contains(&v).unwrap();
            assert_eq!(joint, split);
        }
    }

    #[test]
    fn padded_form_evaluates_like_original() {
        let e = Ellipsoid::new(DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.9]), 0.8).unwrap();
        let f = e.inside_form();
        let padded = f.pad(1, 4).unwrap();
        let mut rng = derive_rng(11, "geom-test", &[3]);
        for _ in 0..200 {
            let z = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let x = DVector::from_vec(vec![z[1], z[2]]);
            assert_relative_eq!(
                padded.evaluate(&z).unwrap(),
                f.evaluate(&x).unwrap(),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn bounding_box_is_tight_for_ellipsoids() {
        let q = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 9.0]);
        let e = Ellipsoid::new(q.clone(), 1.3).unwrap();
        let bbox = e.as_set().bounding_box().unwrap();
        let direct = e.bounding_box();
        for i in 0..2 {
            assert_relative_eq!(bbox[i].1, direct[i].1, epsilon = 1e-10);
        }
        // Supremum of |x_i| over the ellipsoid equals rho*sqrt((Q^{-1})_{ii}).
        let inv = q.try_inverse().unwrap();
        assert_relative_eq!(direct[0].1, 1.3 * inv[(0, 0)].sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn halfspace_only_set_has_no_box() {
        let h = QuadraticSet::halfspace(&DVector::from_vec(vec![1.0]), 1.0).unwrap();
        assert!(h.bounding_box().is_none());
        let mut rng = derive_rng(11, "geom-test", &[4]);
        assert!(matches!(
            h.sample_uniform(&mut rng, 10),
            Err(Error::SamplingFailed(_))
        ));
    }

    #[test]
    fn sampling_from_empty_interior_fails() {
        // safe == target leaves only the sphere surface, which has measure zero.
        let ring = QuadraticSet::ring(&ball(2, 0.5), &ball(2, 0.5)).unwrap();
        let mut rng = derive_rng(11, "geom-test", &[5]);
        assert!(matches!(
            ring.sample_uniform(&mut rng, 2000),
            Err(Error::SamplingFailed(_))
        ));
    }

    #[test]
    fn samples_land_in_set() {
        let ring = QuadraticSet::ring(&ball(2, 1.0), &ball(2, 0.3)).unwrap();
        let mut rng = derive_rng(11, "geom-test", &[6]);
        for _ in 0..200 {
            let x = ring.sample_uniform(&mut rng, 10_000).unwrap();
            assert!(ring.contains(&x).unwrap());
        }
    }
}
