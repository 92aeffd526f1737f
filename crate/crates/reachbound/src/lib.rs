//! Certified upper bounds on finite-horizon stochastic reach-avoid probabilities
//! for linear systems with Gaussian (mixture) noise.
//!
//! The value function of the reach-avoid problem satisfies a backward dynamic
//! program whose exact solution is intractable in continuous state space. This
//! crate over-approximates it step by step with sums of Gaussian radial basis
//! functions: each backward step is a semidefinite program whose feasible points
//! certify, via the S-procedure and a Schur-complement lift, that the candidate
//! sum dominates the one-step lookahead of its successor on the safe set and
//! dominates 1 on the target set. The resulting `V̂_0` upper-bounds the true
//! reach-avoid probability for every initial state, and its greedy one-step
//! controller is evaluated against grid dynamic programming and LQG baselines
//! under shared noise.
//!
//! Module map:
//! * [`geometry`]: sets described by quadratic inequalities in homogeneous form.
//! * [`rbf`]: Gaussian RBF sums and their closed-form expectation algebra.
//! * [`sdpsolver`]: a small dense primal-dual interior-point conic solver.
//! * [`dominance`]: assembly of the dominance LMIs and bound-step SDPs.
//! * [`bound`]: target indicator bounds and the backward bound recursion.
//! * [`gridoracle`]: grid dynamic programming oracle for small dimensions.
//! * [`policy`]: greedy controllers induced by value bounds, plus LQG.
//! * [`eval`]: Monte Carlo rollouts and shared-noise controller comparison.
//! * [`cli`]: run configs, file formats and the five command entry points.

pub mod bound;
pub mod cli;
pub mod dominance;
pub mod errors;
pub mod eval;
pub mod geometry;
pub mod gridoracle;
pub mod policy;
pub mod rbf;
pub mod rng;
pub mod sdpsolver;

pub use errors::{Error, Result};
