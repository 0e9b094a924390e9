//! Small shared linear-algebra helpers.
//!
//! Moment covariances mix entries over many orders of magnitude (order-8
//! moments next to bin probabilities), so every symmetric solve here goes
//! through diagonal equilibration: factor `D⁻¹ M D⁻¹` with `D = √diag(M)`
//! instead of `M` itself. That keeps the factorization far away from its
//! breakdown cliff, which matters both for robustness and for the
//! smoothness of the objective in finite-difference checks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Neumaier-compensated accumulator. The objective's moment sums are
/// differentiated by finite differences in tests; plain summation leaves
/// enough irregular roundoff to pollute those differences once amplified
/// through the ill-conditioned covariance, compensation removes it.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }

    pub fn parts(&self) -> (f64, f64) {
        (self.sum, self.compensation)
    }
}

/// `a·b` with its exact roundoff, via fused multiply-add.
#[inline]
pub(crate) fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Double-double value: an unevaluated sum `hi + lo` carrying ~32 digits.
///
/// Binned moments of neighboring orders are near-collinear, so covariance
/// entries cancel down to 1e-2..1e-4 of the moments forming them. Keeping
/// the moments in double-double until the covariance is assembled leaves
/// covariance entries accurate relative to their own (small) size, which
/// the objective's smoothness under finite differences depends on.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

impl Dd {
    #[inline]
    pub fn from_f64(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    #[inline]
    pub fn from_parts(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        Dd {
            hi: s,
            lo: (hi - s) + lo,
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    pub fn add(self, other: Dd) -> Dd {
        let s = self.hi + other.hi;
        let v = s - self.hi;
        let e = (self.hi - (s - v)) + (other.hi - v);
        Dd::from_parts(s, e + self.lo + other.lo)
    }

    #[inline]
    pub fn sub(self, other: Dd) -> Dd {
        // two_sum on the high parts, low parts folded in
        let s = self.hi - other.hi;
        let v = s - self.hi;
        let e = (self.hi - (s - v)) + (-other.hi - v);
        Dd::from_parts(s, e + self.lo - other.lo)
    }

    #[inline]
    pub fn mul(self, other: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, other.hi);
        Dd::from_parts(p, e + self.hi * other.lo + self.lo * other.hi)
    }

    #[inline]
    pub fn scale(self, f: f64) -> Dd {
        let (p, e) = two_prod(self.hi, f);
        Dd::from_parts(p, e + self.lo * f)
    }
}

/// Relative jitter ladder applied to the (equilibrated, unit) diagonal
/// before declaring a factorization hopeless.
pub(crate) const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Equilibrated Cholesky factorization of a symmetric positive
/// (semi-)definite matrix, with an escalating jitter ladder.
#[derive(Debug, Clone)]
pub(crate) struct SpdSolver {
    scale: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter_steps: usize,
    dim: usize,
}

impl SpdSolver {
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        let n = m.nrows();
        if n == 0 || m.ncols() != n {
            return None;
        }
        let scale: Vec<f64> = (0..n)
            .map(|i| {
                let d = m[(i, i)];
                if d > 0.0 {
                    d.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let corr = DMatrix::from_fn(n, n, |i, j| m[(i, j)] / (scale[i] * scale[j]));
        for (step, factor) in JITTER_LADDER.iter().enumerate() {
            let mut attempt = corr.clone();
            if *factor > 0.0 {
                for i in 0..n {
                    attempt[(i, i)] += factor;
                }
            }
            if let Some(chol) = Cholesky::new(attempt) {
                return Some(SpdSolver {
                    scale,
                    chol,
                    jitter_steps: step,
                    dim: n,
                });
            }
        }
        None
    }

    pub fn jitter_steps(&self) -> usize {
        self.jitter_steps
    }

    /// `log |M|`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let corr_ld = 2.0 * (0..self.dim).map(|i| l[(i, i)].ln()).sum::<f64>();
        corr_ld + 2.0 * self.scale.iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `M⁻¹ b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let scaled = DVector::from_fn(self.dim, |i, _| b[i] / self.scale[i]);
        let solved = self.chol.solve(&scaled);
        DVector::from_fn(self.dim, |i, _| solved[i] / self.scale[i])
    }

    /// `b' M⁻¹ b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        b.dot(&self.solve_vec(b))
    }

    /// Dense `M⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let corr_inv = self.chol.inverse();
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            corr_inv[(i, j)] / (self.scale[i] * self.scale[j])
        })
    }

    /// `G⁻¹ P G⁻ᵀ` for the factor `G` with `M = GGᵀ`; the eigenvalues of
    /// this symmetric matrix are those of `M⁻¹P` for symmetric `P`.
    pub fn congruence(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim;
        let scaled = DMatrix::from_fn(n, n, |i, j| p[(i, j)] / (self.scale[i] * self.scale[j]));
        let l = self.chol.l();
        let y = l
            .solve_lower_triangular(&scaled)
            .expect("triangular factor is invertible");
        let m = l
            .solve_lower_triangular(&y.transpose())
            .expect("triangular factor is invertible")
            .transpose();
        (&m + m.transpose()) * 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn factors_spd_without_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = SpdSolver::new(&m).unwrap();
        assert_eq!(s.jitter_steps(), 0);
        assert_abs_diff_eq!(s.log_det(), (11.0f64).ln(), epsilon = 1e-12);
        let b = DVector::from_column_slice(&[1.0, 2.0]);
        let x = s.solve_vec(&b);
        let back = &m * &x;
        assert_abs_diff_eq!(back[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.quad_form(&b), b.dot(&x), epsilon = 1e-14);
    }

    #[test]
    fn equilibration_handles_wild_scales() {
        // diag spans 16 orders of magnitude; raw Cholesky would be fragile
        let m = DMatrix::from_row_slice(
            3,
            3,
            &[1e-8, 1e-2, 0.0, 1e-2, 1e8, 1.0, 0.0, 1.0, 1.0],
        );
        let s = SpdSolver::new(&m).unwrap();
        assert!(s.log_det().is_finite());
        let inv = s.inverse();
        let id = &m * &inv;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(id[(i, j)], expect, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn jitter_rescues_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = SpdSolver::new(&m).unwrap();
        assert!(s.jitter_steps() >= 1);
    }

    #[test]
    fn hopeless_matrix_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        assert!(SpdSolver::new(&m).is_none());
    }

    #[test]
    fn congruence_matches_direct_product_eigenvalues() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let s = SpdSolver::new(&h).unwrap();
        let mut sym: Vec<f64> = s
            .congruence(&p)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        sym.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let direct = h.clone().try_inverse().unwrap() * &p;
        let mut oracle: Vec<f64> = direct.complex_eigenvalues().iter().map(|c| c.re).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in sym.iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
