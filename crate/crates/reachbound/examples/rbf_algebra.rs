//! Gaussian RBF sum algebra: products, expectations, pushforwards.
//!
//! The closed-form expectation identity is checked against a brute-force
//! Simpson quadrature to show there is no approximation hiding anywhere.

use nalgebra::{DMatrix, DVector};
use reachbound::rbf::{product_factorization, GaussianTerm, RbfSum, TransitionKernel};

fn main() {
    // Two 1-D Gaussians multiply into a rescaled Gaussian.
    let a = GaussianTerm::new(1.5, DVector::from_vec(vec![0.3]), DMatrix::from_element(1, 1, 0.04))
        .unwrap();
    let b = GaussianTerm::new(0.7, DVector::from_vec(vec![-0.2]), DMatrix::from_element(1, 1, 0.09))
        .unwrap();
    let (scale, prod) = product_factorization(&a, &b).unwrap();
    println!(
        "product scale {scale:.6}, mean {:.6}, var {:.6}",
        prod.mean[0],
        prod.cov.matrix()[(0, 0)]
    );
    let x = DVector::from_vec(vec![0.1]);
    println!(
        "pointwise check: {:.9} vs {:.9}",
        a.evaluate(&x) * b.evaluate(&x),
        scale * prod.evaluate(&x) / prod.weight
    );

    // E[g(X)] for an RBF g and a mixture density, closed form vs Simpson.
    let g = RbfSum::new(vec![
        GaussianTerm::new(2.0, DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 0.05))
            .unwrap(),
        GaussianTerm::new(0.5, DVector::from_vec(vec![0.4]), DMatrix::from_element(1, 1, 0.02))
            .unwrap(),
    ])
    .unwrap();
    let density = RbfSum::new(vec![
        GaussianTerm::new(0.6, DVector::from_vec(vec![0.1]), DMatrix::from_element(1, 1, 0.03))
            .unwrap(),
        GaussianTerm::new(0.4, DVector::from_vec(vec![-0.3]), DMatrix::from_element(1, 1, 0.08))
            .unwrap(),
    ])
    .unwrap();
    let exact = g.expected_value(&density).unwrap();
    let steps = 20_000;
    let (lo, hi) = (-4.0f64, 4.0f64);
    let h = (hi - lo) / steps as f64;
    let f = |t: f64| {
        let p = DVector::from_vec(vec![t]);
        g.evaluate(&p).unwrap() * density.evaluate(&p).unwrap()
    };
    let mut quad = f(lo) + f(hi);
    for i in 1..steps {
        quad += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    quad *= h / 3.0;
    println!("expectation closed form {exact:.12}");
    println!("expectation quadrature  {quad:.12}");
    println!("difference {:.3e}", (exact - quad).abs());

    // Pushforward: E[g(x+) | x, u] as an explicit function of (x, u).
    let kernel = TransitionKernel::linear_gaussian(
        DMatrix::from_element(1, 1, 0.9),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 0.001),
    )
    .unwrap();
    let push = kernel.pushforward_params(&g).unwrap();
    let x = DVector::from_vec(vec![0.2]);
    let u = DVector::from_vec(vec![-0.05]);
    println!(
        "pushforward at (x, u) = (0.2, -0.05): {:.9} over {} terms",
        push.evaluate(&x, &u).unwrap(),
        push.terms.len()
    );
}
