//! Roughness penalties on Erlang-mixture weights.
//!
//! The discrete penalty monitors the sequence of weighted component modes:
//! component `j` (Gamma shape `j`, scale `θ`) peaks at height proportional
//! to `y_{j-1} = (j-1)^{j-1} e^{-(j-1)} / (j-1)!` at position `θ·(j-1)`,
//! with `y_0 = 1` for the exponential component. Penalizing the r-th finite
//! differences of `ω_j · y_{j-1}` smooths the density estimate while
//! keeping the penalty matrix banded. The continuous roughness matrix
//! `∫ f^{(r)}(x)² dx` is also available in closed form for comparison, but
//! the fitter always uses the banded discrete form.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

/// Finite-difference coefficients of order `r`: the alternating-sign
/// binomials `(−1)ᵏ C(r, k)`, built by the defining recursion
/// `c_{r,k} = c_{r−1,k} − c_{r−1,k−1}`.
pub fn fd_coeffs(r: usize) -> Vec<f64> {
    let mut c = vec![1.0];
    for _ in 0..r {
        let mut next = vec![0.0; c.len() + 1];
        for (k, slot) in next.iter_mut().enumerate() {
            let cur = if k < c.len() { c[k] } else { 0.0 };
            let prev = if k > 0 { c[k - 1] } else { 0.0 };
            *slot = cur - prev;
        }
        c = next;
    }
    c
}

/// The couples `(x_i, y_i) = (θ·i, iⁱ e⁻ⁱ / i!)` for `i = 0..n-1`, locating
/// (up to a factor `θ⁻¹` in height) the mode of each Erlang component.
///
/// `0⁰ = 1` so the exponential component contributes `y_0 = 1`; heights are
/// computed in log space for `i > 20`.
pub fn mode_sequence(n: usize, theta: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let fi = i as f64;
            let y = if i == 0 {
                1.0
            } else if i <= 20 {
                fi.powi(i as i32) * (-fi).exp() / (1..=i).map(|m| m as f64).product::<f64>()
            } else {
                (fi * fi.ln() - fi - ln_gamma(fi + 1.0)).exp()
            };
            (theta * fi, y)
        })
        .collect()
}

/// The r-th order difference matrix of shape `(n − r, n)` acting on the
/// weighted-mode sequence: row `k` of `D·ω` is the r-th finite difference
/// of `(ω_{k+1} y_k, …, ω_{k+r+1} y_{k+r})`.
pub fn difference_matrix(r: usize, n: usize, theta: f64) -> Result<DMatrix<f64>> {
    if r == 0 || r >= n {
        return Err(Error::domain(format!(
            "difference order must satisfy 1 <= r < n, got r={r}, n={n}"
        )));
    }
    let coeffs = fd_coeffs(r);
    let modes = mode_sequence(n, theta);
    let mut d = DMatrix::zeros(n - r, n);
    for k in 0..n - r {
        for (offset, &c) in coeffs.iter().enumerate() {
            let l = k + offset;
            d[(k, l)] = c * modes[l].1;
        }
    }
    Ok(d)
}

/// Closed-form continuous roughness matrix: for unit scale,
/// `ω' P̃_r ω = ∫ f^{(r)}(x)² dx` for the mixture density with weights `ω`.
pub fn continuous_penalty_matrix(r: usize, n: usize) -> DMatrix<f64> {
    let coeffs = fd_coeffs(r);
    let ln2 = std::f64::consts::LN_2;
    let mut p = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in 1..=i {
            let mut entry = 0.0;
            for (k, &ck) in coeffs.iter().enumerate() {
                for (l, &cl) in coeffs.iter().enumerate() {
                    let a = i as i64 - k as i64;
                    let b = j as i64 - l as i64;
                    if a <= 0 || b <= 0 {
                        continue;
                    }
                    let order = (a + b - 1) as f64;
                    let log_term =
                        ln_gamma(order) - ln_gamma(a as f64) - ln_gamma(b as f64) - order * ln2;
                    entry += ck * cl * log_term.exp();
                }
            }
            p[(i - 1, j - 1)] = entry;
            p[(j - 1, i - 1)] = entry;
        }
    }
    p
}

/// `θ^{−(2r+1)} · ω' P̃_r ω`, the continuous roughness `∫ f^{(r)}²` of the
/// mixture density at an arbitrary scale.
pub fn continuous_roughness(weights: &[f64], theta: f64, r: usize) -> f64 {
    let n = weights.len();
    let p = continuous_penalty_matrix(r, n);
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += weights[i] * p[(i, j)] * weights[j];
        }
    }
    quad * theta.powi(-(2 * r as i32 + 1))
}

/// Everything the fitter needs about the penalty: the difference matrix,
/// its Gram matrix, the padded block form, and the Gamma prior
/// hyperparameters for the smoothing level.
#[derive(Debug, Clone)]
pub struct PenaltyBundle {
    order: usize,
    n: usize,
    modes: Vec<(f64, f64)>,
    d: DMatrix<f64>,
    dtd: DMatrix<f64>,
    p: DMatrix<f64>,
    a_lambda: f64,
    b_lambda: f64,
}

/// Default shape of the Gamma prior on the smoothing level.
pub const DEFAULT_A_LAMBDA: f64 = 1.0;
/// Default rate-inverse of the Gamma prior; large, so the prior is
/// uninformative.
pub const DEFAULT_B_LAMBDA: f64 = 1e5;

impl PenaltyBundle {
    /// Build the penalty machinery for a mixture of size `n` at difference
    /// order `r`. `b_lambda` may be `+∞` (improper flat tail).
    pub fn new(r: usize, n: usize, a_lambda: f64, b_lambda: f64) -> Result<Self> {
        if !(a_lambda > 0.0) || !(b_lambda > 0.0) {
            return Err(Error::domain(format!(
                "prior hyperparameters must be positive, got a={a_lambda}, b={b_lambda}"
            )));
        }
        let d = difference_matrix(r, n, 1.0)?;
        let dtd = d.transpose() * &d;
        // block form [[D'D, 0], [0, 0]]: the scale slot is unpenalized
        let mut p = DMatrix::zeros(n + 1, n + 1);
        p.view_mut((0, 0), (n, n)).copy_from(&dtd);
        Ok(PenaltyBundle {
            order: r,
            n,
            modes: mode_sequence(n, 1.0),
            d,
            dtd,
            p,
            a_lambda,
            b_lambda,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn a_lambda(&self) -> f64 {
        self.a_lambda
    }

    pub fn b_lambda(&self) -> f64 {
        self.b_lambda
    }

    /// Mode couples at unit scale.
    pub fn modes(&self) -> &[(f64, f64)] {
        &self.modes
    }

    pub fn difference(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.dtd
    }

    /// The `(n+1) × (n+1)` block penalty matrix `[[D'D, 0], [0, 0]]`.
    pub fn penalty_matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// `‖D_r ω‖²`.
    pub fn quadratic_form(&self, weights: &[f64]) -> f64 {
        debug_assert_eq!(weights.len(), self.n);
        let mut total = 0.0;
        for k in 0..self.n - self.order {
            let mut row = 0.0;
            for l in k..=(k + self.order) {
                row += self.d[(k, l)] * weights[l];
            }
            total += row * row;
        }
        total
    }

    /// `D'D ω`, the gradient direction of `½‖D_r ω‖²`.
    pub fn gram_times(&self, weights: &[f64]) -> Vec<f64> {
        debug_assert_eq!(weights.len(), self.n);
        let w = nalgebra::DVector::from_column_slice(weights);
        (&self.dtd * w).iter().copied().collect()
    }

    /// The weight direction annihilated by the differences:
    /// `ω_j ∝ 1 / y_{j-1}`, normalized to the simplex.
    pub fn null_direction(&self) -> Vec<f64> {
        let raw: Vec<f64> = self.modes.iter().map(|&(_, y)| 1.0 / y).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn fd_coeffs_first_orders() {
        assert_eq!(fd_coeffs(0), vec![1.0]);
        assert_eq!(fd_coeffs(1), vec![1.0, -1.0]);
        assert_eq!(fd_coeffs(2), vec![1.0, -2.0, 1.0]);
        assert_eq!(fd_coeffs(3), vec![1.0, -3.0, 3.0, -1.0]);
    }

    #[test]
    fn fd_coeffs_sum_to_zero() {
        for r in 1..=6 {
            let s: f64 = fd_coeffs(r).iter().sum();
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mode_sequence_small_cases() {
        let theta = 0.7;
        let modes = mode_sequence(4, theta);
        assert_eq!(modes[0], (0.0, 1.0));
        assert_abs_diff_eq!(modes[1].0, theta, epsilon = 1e-15);
        assert_abs_diff_eq!(modes[1].1, (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(modes[2].0, 2.0 * theta, epsilon = 1e-15);
        // 2² e⁻² / 2! = 2 e⁻²
        assert_abs_diff_eq!(modes[2].1, 2.0 * (-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(modes[2].1, 0.2706706, epsilon = 1e-7);
    }

    #[test]
    fn mode_sequence_log_branch_continuous() {
        // heights around the log-space switch agree with direct evaluation
        let modes = mode_sequence(25, 1.0);
        for i in 18..25 {
            let fi = i as f64;
            let direct = (fi * fi.ln() - fi - ln_gamma(fi + 1.0)).exp();
            assert_relative_eq!(modes[i].1, direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn difference_matrix_hand_expansion() {
        let d = difference_matrix(1, 3, 1.0).unwrap();
        let y1 = (-1.0f64).exp();
        let y2 = 2.0 * (-2.0f64).exp();
        assert_eq!(d.nrows(), 2);
        assert_eq!(d.ncols(), 3);
        assert_abs_diff_eq!(d[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[(0, 1)], -y1, epsilon = 1e-15);
        assert_abs_diff_eq!(d[(0, 2)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[(1, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[(1, 1)], y1, epsilon = 1e-15);
        assert_abs_diff_eq!(d[(1, 2)], -y2, epsilon = 1e-15);
    }

    #[test]
    fn weighted_mode_constant_direction_is_annihilated() {
        for r in 1..=3 {
            let bundle = PenaltyBundle::new(r, 10, 1.0, 1e5).unwrap();
            let w = bundle.null_direction();
            assert_abs_diff_eq!(bundle.quadratic_form(&w), 0.0, epsilon = 1e-20);
        }
    }

    #[test]
    fn gram_bandwidth() {
        let bundle = PenaltyBundle::new(2, 10, 1.0, 1e5).unwrap();
        let g = bundle.gram();
        for i in 0..10 {
            for j in 0..10 {
                if (i as i64 - j as i64).abs() > 2 {
                    assert_eq!(g[(i, j)], 0.0, "({i},{j}) should vanish");
                }
            }
        }
    }

    #[test]
    fn gram_is_psd() {
        use rand::prelude::*;
        let bundle = PenaltyBundle::new(2, 8, 1.0, 1e5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let w: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.3).collect();
            assert!(bundle.quadratic_form(&w) >= 0.0);
        }
    }

    #[test]
    fn penalty_matrix_block_structure() {
        let bundle = PenaltyBundle::new(2, 6, 1.0, 1e5).unwrap();
        let p = bundle.penalty_matrix();
        assert_eq!(p.nrows(), 7);
        for i in 0..7 {
            assert_eq!(p[(i, 6)], 0.0);
            assert_eq!(p[(6, i)], 0.0);
        }
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(p[(i, j)], bundle.gram()[(i, j)]);
            }
        }
    }

    #[test]
    fn penalty_matrix_null_count() {
        // exactly r + 1 zero eigenvalues: r from the difference null space
        // plus the unpenalized scale slot
        for r in 1..=3 {
            let n = 9;
            let bundle = PenaltyBundle::new(r, n, 1.0, 1e5).unwrap();
            let eig = bundle.penalty_matrix().clone().symmetric_eigen();
            let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
            let zeros = eig
                .eigenvalues
                .iter()
                .filter(|&&v| v.abs() < 1e-10 * max)
                .count();
            assert_eq!(zeros, r + 1, "r={r}");
        }
    }

    #[test]
    fn continuous_matrix_r0_corner() {
        // ∫ (e^{−x})² dx = 1/2 for the unit exponential density
        let p = continuous_penalty_matrix(0, 3);
        assert_abs_diff_eq!(p[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn continuous_matrix_symmetric() {
        for r in 0..=3 {
            let p = continuous_penalty_matrix(r, 12);
            for i in 0..12 {
                for j in 0..12 {
                    assert_abs_diff_eq!(p[(i, j)], p[(j, i)], epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate_order() {
        assert!(difference_matrix(0, 5, 1.0).is_err());
        assert!(difference_matrix(5, 5, 1.0).is_err());
        assert!(difference_matrix(6, 5, 1.0).is_err());
    }
}
