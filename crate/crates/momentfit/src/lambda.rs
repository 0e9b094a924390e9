//! Selection of the smoothing level λ by maximizing the Laplace-approximated
//! marginal loglikelihood.
//!
//! At a mode of the penalized objective the marginal loglikelihood of λ has
//! derivative
//!
//! ```text
//! score(λ) = −½ { ‖D_r ω‖² − [(n−r) + 2a − 2]/λ + 2/b − Σ η_i/(1 − λη_i) }
//! ```
//!
//! where `η` are the eigenvalues of `−H⁻¹P_r` at the data-only Hessian `H`.
//! The trace term is evaluated through its closed rational form (valid for
//! every λ ≥ 0, unlike the series expansion that produced it), and the root
//! of the score is found by a damped fixed-point map safeguarded by
//! bisection.

use crate::error::{Error, Result};
use crate::linalg::SpdSolver;
use crate::penalty::PenaltyBundle;
use nalgebra::DMatrix;

/// Relative threshold below which an eigenvalue counts as zero.
const RANK_TOL: f64 = 1e-8;
/// Clamp interval for the smoothing level.
pub const LAMBDA_MIN: f64 = 1e-8;
pub const LAMBDA_MAX: f64 = 1e12;

/// The data-only Hessian `H = −∂²ℓ(ω,θ)/∂²(ω,θ)` at an iterate, together
/// with the penalty eigenvalues `η` of `−H⁻¹P_r` and their negatives
/// `τ = −η` (clipped at zero when roundoff or an indefinite iterate leaks
/// a negative value).
#[derive(Debug, Clone)]
pub struct HessianBundle {
    h: DMatrix<f64>,
    eta: Vec<f64>,
    tau: Vec<f64>,
    clipped_tau: usize,
    jitter_steps: usize,
}

impl HessianBundle {
    /// Pair a symmetric Hessian with a penalty matrix of identical size.
    pub fn new(h: DMatrix<f64>, penalty_matrix: &DMatrix<f64>) -> Result<Self> {
        let (eta, jitter_steps) = penalty_eigenvalues_with_diag(&h, penalty_matrix)?;
        let mut clipped = 0;
        let tau = eta
            .iter()
            .map(|&e| {
                if -e < 0.0 {
                    clipped += 1;
                    0.0
                } else {
                    -e
                }
            })
            .collect();
        Ok(HessianBundle {
            h,
            eta,
            tau,
            clipped_tau: clipped,
            jitter_steps,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    /// How many raw `τ` values were negative and clipped to zero.
    pub fn clipped_tau(&self) -> usize {
        self.clipped_tau
    }

    /// Jitter ladder steps needed to factor `H`.
    pub fn jitter_steps(&self) -> usize {
        self.jitter_steps
    }
}

/// Eigenvalues `η` of `−H⁻¹P`, computed through the symmetric equivalent
/// `−L⁻¹ P L⁻ᵀ` for `H = LLᵀ`, which guarantees real output.
pub fn penalty_eigenvalues(h: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<Vec<f64>> {
    penalty_eigenvalues_with_diag(h, p).map(|(eta, _)| eta)
}

fn penalty_eigenvalues_with_diag(
    h: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(Vec<f64>, usize)> {
    let n = h.nrows();
    if h.ncols() != n || p.nrows() != n || p.ncols() != n {
        return Err(Error::domain(
            "Hessian and penalty matrix must be square and of equal size",
        ));
    }
    let solver = SpdSolver::new(h).ok_or(Error::SingularHessian)?;
    // eigenvalues of G⁻¹ P G⁻ᵀ (H = GGᵀ) coincide with those of H⁻¹P and
    // are guaranteed real
    let sym = solver.congruence(p);
    let mut eta: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().map(|v| -v).collect();
    eta.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((eta, solver.jitter_steps()))
}

fn clipped_tau(eta: &[f64]) -> Vec<f64> {
    eta.iter().map(|&e| (-e).max(0.0)).collect()
}

/// `tr{(H + λP)⁻¹P} = −Σ η_i/(1−λη_i) = Σ τ_i/(1+λτ_i)`, the slope of
/// `½ log|H+λP|` in λ.
pub fn penalty_trace(tau: &[f64], lambda: f64) -> f64 {
    tau.iter().map(|&t| t / (1.0 + lambda * t)).sum()
}

/// Smoothness-adjusted count of penalized directions still active at a
/// smoothing level λ.
///
/// Each penalized direction contributes `τ_i/(τ_i + λ)`: one full degree
/// of freedom at λ = 0, decaying to zero as the penalty takes over. At
/// λ = 0 the value is exactly `rank(P)`; it decreases strictly in λ and
/// vanishes in the limit. Directions whose `τ` is zero up to a relative
/// tolerance (the penalty null space and the scale slot) never contribute.
pub fn effective_dimension(eta: &[f64], lambda: f64) -> f64 {
    let tau = clipped_tau(eta);
    let max = tau.iter().fold(0.0f64, |a, &b| a.max(b));
    if max == 0.0 {
        return 0.0;
    }
    tau.iter()
        .filter(|&&t| t > RANK_TOL * max)
        .map(|&t| t / (t + lambda))
        .sum()
}

/// Derivative of the Laplace-approximated marginal loglikelihood of λ.
pub fn marginal_score(
    lambda: f64,
    omega: &[f64],
    bundle: &PenaltyBundle,
    hess: &HessianBundle,
) -> f64 {
    let quad = bundle.quadratic_form(omega);
    score_from_parts(lambda, quad, bundle, hess.tau())
}

fn score_from_parts(lambda: f64, quad: f64, bundle: &PenaltyBundle, tau: &[f64]) -> f64 {
    let n_minus_r = (bundle.n() - bundle.order()) as f64;
    let a_coef = n_minus_r + 2.0 * bundle.a_lambda() - 2.0;
    -0.5 * (quad - a_coef / lambda + 2.0 / bundle.b_lambda() + penalty_trace(tau, lambda))
}

/// Result of a λ update: the located root (or clamp endpoint) and
/// diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct LambdaUpdate {
    pub lambda: f64,
    /// The score had no root inside the clamp interval; the returned value
    /// is the endpoint where the marginal loglikelihood is largest.
    pub clamped: bool,
    pub iterations: usize,
}

/// Solve `score(λ) = 0` for the next smoothing level.
///
/// Uses the fixed-point map `λ ← [(n−r) + 2a − 2] / (‖D_rω‖² + 2/b +
/// Σ τ_i/(1+λτ_i))`, damped by geometric averaging with the previous
/// iterate and safeguarded by bisection on a sign-change bracket. The
/// result is clamped to `[1e-8, 1e12]`; when the score never changes sign
/// on that interval, the corresponding endpoint is returned with the
/// `clamped` flag raised. Pass `lambda_prev <= 0` when no previous level
/// exists (the first outer iteration).
pub fn update_lambda(
    omega: &[f64],
    bundle: &PenaltyBundle,
    hess: &HessianBundle,
    lambda_prev: f64,
) -> Result<LambdaUpdate> {
    let n_minus_r = (bundle.n() - bundle.order()) as f64;
    let a_coef = n_minus_r + 2.0 * bundle.a_lambda() - 2.0;
    if a_coef <= 0.0 {
        return Err(Error::domain(format!(
            "lambda update needs (n−r) + 2a − 2 > 0, got {a_coef}"
        )));
    }
    let quad = bundle.quadratic_form(omega);
    let tau = hess.tau();
    let score = |lambda: f64| score_from_parts(lambda, quad, bundle, tau);

    if score(LAMBDA_MAX) >= 0.0 {
        // even infinite smoothing keeps improving the marginal likelihood
        return Ok(LambdaUpdate {
            lambda: LAMBDA_MAX,
            clamped: true,
            iterations: 0,
        });
    }
    if score(LAMBDA_MIN) <= 0.0 {
        return Ok(LambdaUpdate {
            lambda: LAMBDA_MIN,
            clamped: true,
            iterations: 0,
        });
    }

    let mut lo = LAMBDA_MIN;
    let mut hi = LAMBDA_MAX;
    let mut cur = if lambda_prev > 0.0 {
        lambda_prev.clamp(lo * 1.001, hi * 0.999)
    } else {
        (lo * hi).sqrt()
    };
    let mut iterations = 0;
    for i in 0..200 {
        iterations = i + 1;
        if score(cur) > 0.0 {
            lo = cur;
        } else {
            hi = cur;
        }
        if hi / lo - 1.0 < 1e-12 {
            break;
        }
        let fp = a_coef / (quad + 2.0 / bundle.b_lambda() + penalty_trace(tau, cur));
        let proposal = (fp * cur).sqrt();
        // force a bisection step periodically so the bracket always shrinks
        cur = if i % 4 == 3 || !(lo < proposal && proposal < hi) {
            (lo * hi).sqrt()
        } else {
            proposal
        };
    }
    Ok(LambdaUpdate {
        lambda: (lo * hi).sqrt(),
        clamped: false,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn diag_bundle(tau: &[f64]) -> HessianBundle {
        // identity Hessian with a diagonal penalty gives exactly these τ
        let n = tau.len();
        let h = DMatrix::identity(n, n);
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(tau));
        HessianBundle::new(h, &p).unwrap()
    }

    #[test]
    fn diagonal_eigenvalues() {
        let h = DMatrix::identity(2, 2);
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let eta = penalty_eigenvalues(&h, &p).unwrap();
        assert_abs_diff_eq!(eta[0], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eta[1], 0.0, epsilon = 1e-12);
        let eta2 = penalty_eigenvalues(&(h * 2.0), &p).unwrap();
        assert_abs_diff_eq!(eta2[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn agrees_with_nonsymmetric_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 6;
        let bundle = PenaltyBundle::new(2, n - 1, 1.0, 1e5).unwrap();
        let p = bundle.penalty_matrix();
        for _ in 0..5 {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let h = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
            let eta = penalty_eigenvalues(&h, p).unwrap();
            assert!(eta.iter().all(|&e| e <= 1e-10));
            let max_abs = eta.iter().fold(0.0f64, |m, &e| m.max(e.abs()));
            let nonzero = eta.iter().filter(|&&e| e.abs() > 1e-8 * max_abs).count();
            assert_eq!(nonzero, n - 1 - 2); // rank(D'D) = n − r on the weight block
            // oracle: eigenvalues of the nonsymmetric product −H⁻¹P
            let product = -(h.clone().try_inverse().unwrap() * p);
            let mut oracle: Vec<f64> = product
                .complex_eigenvalues()
                .iter()
                .map(|c| {
                    assert!(c.im.abs() < 1e-8, "non-real eigenvalue {c}");
                    c.re
                })
                .collect();
            oracle.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (mine, reference) in eta.iter().zip(&oracle) {
                assert_abs_diff_eq!(mine, reference, epsilon = 1e-8 * (1.0 + max_abs));
            }
        }
    }

    #[test]
    fn effective_dimension_limits() {
        let eta = [-2.0, -0.5, 0.0, -1e-14];
        assert_abs_diff_eq!(effective_dimension(&eta, 0.0), 2.0, epsilon = 1e-15);
        assert!(effective_dimension(&eta, 1e14) < 1e-10);
        // τ = (1, 1), λ = 1 → 2 · 1/2
        assert_abs_diff_eq!(effective_dimension(&[-1.0, -1.0], 1.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn effective_dimension_monotone_and_convex() {
        let eta = [-3.0, -1.0, -0.25, -0.01, 0.0];
        let grid: Vec<f64> = (0..40).map(|i| 10f64.powf(-4.0 + 0.2 * i as f64)).collect();
        let values: Vec<f64> = grid.iter().map(|&l| effective_dimension(&eta, l)).collect();
        for w in values.windows(2) {
            assert!(w[1] < w[0]);
        }
        // midpoint convexity in λ on a linear grid
        let lin: Vec<f64> = (0..50).map(|i| 0.1 + i as f64 * 0.3).collect();
        let v: Vec<f64> = lin.iter().map(|&l| effective_dimension(&eta, l)).collect();
        for w in v.windows(3) {
            assert!(w[0] + w[2] >= 2.0 * w[1] - 1e-12);
        }
    }

    #[test]
    fn trace_identity_between_eta_and_tau_forms() {
        let eta = [-4.0, -1.3, -0.2, 0.0];
        let tau = clipped_tau(&eta);
        for &lambda in &[1e-6, 0.1, 1.0, 42.0, 1e8] {
            let from_eta: f64 = eta.iter().map(|&e| -e / (1.0 - lambda * e)).sum();
            assert_abs_diff_eq!(from_eta, penalty_trace(&tau, lambda), epsilon = 1e-12);
        }
    }

    #[test]
    fn score_closed_form_root() {
        // n−r = 2, a = 1, b = ∞, ‖Dω‖² = 1, τ = (1,1): λ = 1 solves
        // 2/λ = 1 + 2/(1+λ)
        let bundle = PenaltyBundle::new(1, 3, 1.0, f64::INFINITY).unwrap();
        let hess = diag_bundle(&[1.0, 1.0]);
        let quad = 1.0;
        assert_abs_diff_eq!(
            score_from_parts(1.0, quad, &bundle, hess.tau()),
            0.0,
            epsilon = 1e-15
        );
        assert!(score_from_parts(1e-8, quad, &bundle, hess.tau()) > 0.0);
        assert!(score_from_parts(1e6, quad, &bundle, hess.tau()) < 0.0);
    }

    #[test]
    fn update_lambda_finds_closed_form_root() {
        let bundle = PenaltyBundle::new(1, 3, 1.0, f64::INFINITY).unwrap();
        let hess = diag_bundle(&[1.0, 1.0]);
        // ‖Dω‖² = 1 at ω = (1, 0, 0) for the first-difference matrix
        let omega = [1.0, 0.0, 0.0];
        assert_abs_diff_eq!(bundle.quadratic_form(&omega), 1.0, epsilon = 1e-15);
        for prev in [0.0, 0.3, 50.0] {
            let update = update_lambda(&omega, &bundle, &hess, prev).unwrap();
            assert!(!update.clamped);
            assert_relative_eq!(update.lambda, 1.0, max_relative = 1e-8);
        }
    }

    #[test]
    fn null_space_weights_hit_upper_clamp() {
        let bundle = PenaltyBundle::new(1, 4, 1.0, f64::INFINITY).unwrap();
        let hess = diag_bundle(&[0.5, 0.2, 0.0, 0.0, 0.0]);
        let omega = bundle.null_direction();
        let update = update_lambda(&omega, &bundle, &hess, 0.0).unwrap();
        assert!(update.clamped);
        assert_eq!(update.lambda, LAMBDA_MAX);
    }

    #[test]
    fn fixed_point_equation_holds_at_root_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bundle = PenaltyBundle::new(2, 8, 1.5, 1e4).unwrap();
        for _ in 0..10 {
            let tau: Vec<f64> = (0..6)
                .map(|_| 10f64.powf(rng.random::<f64>() * 4.0 - 2.0))
                .collect();
            let hess = diag_bundle(&tau);
            let raw: Vec<f64> = (0..8).map(|_| rng.random::<f64>() + 0.01).collect();
            let total: f64 = raw.iter().sum();
            let omega: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let update = update_lambda(&omega, &bundle, &hess, 0.0).unwrap();
            assert!(!update.clamped);
            let quad = bundle.quadratic_form(&omega);
            let a_coef = 6.0 + 2.0 * 1.5 - 2.0;
            let rhs = a_coef
                / (quad + 2.0 / bundle.b_lambda() + penalty_trace(hess.tau(), update.lambda));
            assert_relative_eq!(update.lambda, rhs, max_relative = 1e-8);

            // scaling H by c divides every τ by c; the root moves, but the
            // fixed-point equation must still hold exactly
            let scaled: Vec<f64> = tau.iter().map(|t| t / 4.0).collect();
            let hess_scaled = diag_bundle(&scaled);
            let update2 = update_lambda(&omega, &bundle, &hess_scaled, 0.0).unwrap();
            let rhs2 = a_coef
                / (quad
                    + 2.0 / bundle.b_lambda()
                    + penalty_trace(hess_scaled.tau(), update2.lambda));
            assert_relative_eq!(update2.lambda, rhs2, max_relative = 1e-8);
        }
    }

    #[test]
    fn root_matches_grid_argmax_of_integrated_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..5 {
            let n = 8;
            let bundle = PenaltyBundle::new(2, n, 1.0 + rng.random::<f64>(), 1e4).unwrap();
            let tau: Vec<f64> = (0..n - 1)
                .map(|_| 10f64.powf(rng.random::<f64>() * 5.0 - 3.0))
                .collect();
            let hess = diag_bundle(&tau);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = raw.iter().sum();
            let omega: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let update = update_lambda(&omega, &bundle, &hess, 0.0).unwrap();
            assert!(!update.clamped);

            // integrate the score over a log grid; its running maximum
            // must sit within one cell of the located root
            let grid_n = 2000;
            let (lo, hi) = (1e-6f64, 1e10f64);
            let step = (hi / lo).powf(1.0 / (grid_n - 1) as f64);
            let mut lambda = lo;
            let mut ell = 0.0;
            let mut best = (0usize, f64::NEG_INFINITY);
            let mut prev_score = marginal_score(lambda, &omega, &bundle, &hess);
            let mut prev_lambda = lambda;
            for i in 0..grid_n {
                if i > 0 {
                    lambda *= step;
                    let s = marginal_score(lambda, &omega, &bundle, &hess);
                    ell += 0.5 * (s + prev_score) * (lambda - prev_lambda);
                    prev_score = s;
                    prev_lambda = lambda;
                }
                if ell > best.1 {
                    best = (i, ell);
                }
            }
            let argmax = lo * step.powi(best.0 as i32);
            let ratio = (update.lambda / argmax).ln().abs();
            assert!(
                ratio <= step.ln() * 1.001,
                "root {} vs grid argmax {argmax}",
                update.lambda
            );
        }
    }
}
