//! Delta-method confidence intervals from a fitted model.
//!
//! The variance of a smooth functional `f(ω, θ)` is approximated by the
//! quadratic form of its gradient in the inverse penalized Hessian
//! `H + λP` at the fitted mode; bands are `center ± z·√var`. Functional
//! gradients are taken by central finite differences in the original
//! coordinates, with implicit differentiation as a fallback for quantiles.

use crate::error::{Error, Result};
use crate::fitter::FitResult;
use crate::lambda::HessianBundle;
use crate::linalg::SpdSolver;
use crate::mixture::{boxed_moment_raw, cdf_raw, pdf_raw, quantile_raw};
use crate::penalty::PenaltyBundle;
use nalgebra::DVector;

/// A pointwise confidence band.
#[derive(Debug, Clone)]
pub struct ConfidenceBand {
    pub grid: Vec<f64>,
    pub center: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

impl ConfidenceBand {
    /// CSV rendering with columns `grid,center,lower,upper`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("grid,center,lower,upper\n");
        for i in 0..self.grid.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.grid[i], self.center[i], self.lower[i], self.upper[i]
            ));
        }
        out
    }
}

/// Delta-method variance `scale · g'(H+λP)⁻¹ g`.
///
/// `grad` may have length `n` (weights only, zero scale slot implied) or
/// `n+1`. With a sampling-scaled objective the `1/N` factor already lives
/// inside `H`, so `scale = 1`; for the unweighted objective `scale = 1/N`.
/// A negative quadratic form (possible only through roundoff) is clipped
/// to zero.
pub fn delta_variance(
    grad: &[f64],
    hess: &HessianBundle,
    penalty: &PenaltyBundle,
    lambda: f64,
    n_obs: u64,
    scaled_objective: bool,
) -> Result<f64> {
    let dim = hess.h().nrows();
    if grad.len() != dim && grad.len() != dim - 1 {
        return Err(Error::domain(format!(
            "gradient length {} incompatible with Hessian dimension {dim}",
            grad.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::domain("lambda must be nonnegative"));
    }
    let mut g = DVector::zeros(dim);
    for (i, &v) in grad.iter().enumerate() {
        g[i] = v;
    }
    let penalized = hess.h() + penalty.penalty_matrix() * lambda;
    let solver = SpdSolver::new(&penalized).ok_or(Error::SingularHessian)?;
    let quad = solver.quad_form(&g);
    let scale = if scaled_objective {
        1.0
    } else {
        1.0 / n_obs as f64
    };
    let variance = scale * quad;
    if variance < 0.0 {
        log::debug!("delta variance {variance} clipped to zero");
        return Ok(0.0);
    }
    Ok(variance)
}

fn functional_gradient<F>(fit: &FitResult, mut functional: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<f64>,
{
    let n = fit.mixture.n();
    let weights = fit.mixture.weights();
    let theta = fit.mixture.scale();
    let mut grad = vec![0.0; n + 1];
    for p in 0..=n {
        let h = if p < n {
            1e-6 * (1.0 + weights[p].abs())
        } else {
            1e-6 * (1.0 + theta.abs())
        };
        let mut up_w = weights.to_vec();
        let mut down_w = weights.to_vec();
        let (up, down) = if p < n {
            up_w[p] += h;
            down_w[p] -= h;
            (functional(&up_w, theta)?, functional(&down_w, theta)?)
        } else {
            (
                functional(weights, theta + h)?,
                functional(weights, theta - h)?,
            )
        };
        grad[p] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

fn band_from<F>(
    fit: &FitResult,
    grid: &[f64],
    level: f64,
    center_of: impl Fn(f64) -> Result<f64>,
    mut gradient_of: F,
    floor_at_zero: bool,
) -> Result<ConfidenceBand>
where
    F: FnMut(f64) -> Result<Vec<f64>>,
{
    if !(0.0..1.0).contains(&level) {
        return Err(Error::domain(format!(
            "band level must be in [0, 1), got {level}"
        )));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    let mut center = Vec::with_capacity(grid.len());
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    for &x in grid {
        let c = center_of(x)?;
        let grad = gradient_of(x)?;
        let var = delta_variance(
            &grad,
            &fit.hessian,
            fit.penalty(),
            fit.lambda,
            fit.n_obs(),
            fit.options().scale_by_n,
        )?;
        let half = z * var.sqrt();
        center.push(c);
        let lo = c - half;
        lower.push(if floor_at_zero { lo.max(0.0) } else { lo });
        upper.push(c + half);
    }
    Ok(ConfidenceBand {
        grid: grid.to_vec(),
        center,
        lower,
        upper,
        level,
    })
}

/// Pointwise density band on a grid of evaluation points.
pub fn density_band(fit: &FitResult, grid: &[f64], level: f64) -> Result<ConfidenceBand> {
    band_from(
        fit,
        grid,
        level,
        |x| Ok(fit.mixture.pdf(x)),
        |x| functional_gradient(fit, |w, t| Ok(pdf_raw(w, t, x))),
        true,
    )
}

/// Pointwise quantile band at the given probability levels.
///
/// Quantile gradients come from central finite differences of the solved
/// quantile; if a perturbed solve fails, the implicit-function form
/// `∂q/∂p = −(∂F/∂p)(q) / f(q)` takes over for that level.
pub fn quantile_band(fit: &FitResult, probs: &[f64], level: f64) -> Result<ConfidenceBand> {
    band_from(
        fit,
        probs,
        level,
        |p| fit.mixture.quantile(p),
        |p| {
            let fd = functional_gradient(fit, |w, t| quantile_raw(w, t, p));
            match fd {
                Ok(grad) => Ok(grad),
                Err(_) => {
                    // implicit differentiation through F(q; ω, θ) = p
                    let q = fit.mixture.quantile(p)?;
                    let density = fit.mixture.pdf(q).max(1e-300);
                    let cdf_grad =
                        functional_gradient(fit, |w, t| Ok(cdf_raw(w, t, q)))?;
                    Ok(cdf_grad.iter().map(|g| -g / density).collect())
                }
            }
        },
        true,
    )
}

/// Pointwise band for the tail value-at-risk at the given levels.
pub fn tvar_band(fit: &FitResult, levels: &[f64], level: f64) -> Result<ConfidenceBand> {
    let tvar = |w: &[f64], t: f64, alpha: f64| -> Result<f64> {
        let var = quantile_raw(w, t, alpha)?;
        Ok(boxed_moment_raw(w, t, var, f64::INFINITY, 1)? / (1.0 - alpha))
    };
    band_from(
        fit,
        levels,
        level,
        |alpha| tvar(fit.mixture.weights(), fit.mixture.scale(), alpha),
        |alpha| functional_gradient(fit, |w, t| tvar(w, t, alpha)),
        true,
    )
}

/// Standard normal quantile by the Wichura (AS 241) rational
/// approximation, accurate to well below 1e-9.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&p),
        "normal quantile needs p in [0,1], got {p}"
    );
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(
            r,
            &[
                3.387_132_872_796_366_608e0,
                1.331_416_678_917_843_774_5e2,
                1.971_590_950_306_551_442_7e3,
                1.373_169_376_550_946_112_5e4,
                4.592_195_393_154_987_145_7e4,
                6.726_577_092_700_870_085_3e4,
                3.343_057_558_358_812_810_5e4,
                2.509_080_928_730_122_672_7e3,
            ],
        ) / poly(
            r,
            &[
                1.0,
                4.231_333_070_160_091_125_2e1,
                6.871_870_074_920_579_083e2,
                5.394_196_021_424_751_107_7e3,
                2.121_379_430_158_659_586_7e4,
                3.930_789_580_009_271_061e4,
                2.872_908_573_572_194_267_4e4,
                5.226_495_278_852_854_561e3,
            ],
        );
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let value = if r <= 5.0 {
        let r = r - 1.6;
        poly(
            r,
            &[
                1.423_437_110_749_683_577_3e0,
                4.630_337_846_156_545_295_9e0,
                5.769_497_221_460_691_405_5e0,
                3.647_848_324_763_204_605e0,
                1.270_458_252_452_368_382_6e0,
                2.417_807_251_774_506_117_7e-1,
                2.272_384_498_926_918_458_3e-2,
                7.745_450_142_783_414_076_4e-4,
            ],
        ) / poly(
            r,
            &[
                1.0,
                2.053_191_626_637_758_821_9e0,
                1.676_384_830_183_803_849_4e0,
                6.897_673_349_851_000_045_5e-1,
                1.481_039_764_274_800_745_9e-1,
                1.519_866_656_361_645_719_7e-2,
                5.475_938_084_995_344_946e-4,
                1.050_750_071_644_416_843_2e-9,
            ],
        )
    } else {
        let r = r - 5.0;
        poly(
            r,
            &[
                6.657_904_643_501_103_777_2e0,
                5.463_784_911_164_114_369_9e0,
                1.784_826_539_917_291_335_8e0,
                2.965_605_718_285_048_912_3e-1,
                2.653_218_952_657_612_309_3e-2,
                1.242_660_947_388_078_438_6e-3,
                2.711_555_568_743_487_578_2e-5,
                2.010_334_399_292_288_132_6e-7,
            ],
        ) / poly(
            r,
            &[
                1.0,
                5.998_322_065_558_879_376_9e-1,
                1.369_298_809_227_358_053_1e-1,
                1.487_536_129_085_061_485_3e-2,
                7.868_691_311_456_132_591e-4,
                1.846_318_317_510_054_681_8e-5,
                1.421_511_758_316_445_888_7e-7,
                2.044_263_103_389_939_785_6e-15,
            ],
        )
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

fn poly(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    #[test]
    fn normal_quantile_reference_values() {
        assert_abs_diff_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-9);
        assert_abs_diff_eq!(normal_quantile(0.8413447460685429), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(
            normal_quantile(0.0013498980316300933),
            -3.0,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(normal_quantile(1e-12), -7.034483, epsilon = 1e-5);
        // symmetry
        for p in [0.01, 0.1, 0.3] {
            assert_abs_diff_eq!(
                normal_quantile(p),
                -normal_quantile(1.0 - p),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn delta_variance_identity_hessian() {
        // f = θ with unit gradient, H + λP = I, unscaled objective → 1/N
        let n = 3;
        let penalty = PenaltyBundle::new(1, n, 1.0, 1e5).unwrap();
        let hess = HessianBundle::new(
            DMatrix::identity(n + 1, n + 1),
            penalty.penalty_matrix(),
        )
        .unwrap();
        let mut grad = vec![0.0; n + 1];
        grad[n] = 1.0;
        let v = delta_variance(&grad, &hess, &penalty, 0.0, 200, false).unwrap();
        assert_abs_diff_eq!(v, 1.0 / 200.0, epsilon = 1e-12);
        // zero gradient → zero variance
        let v0 = delta_variance(&[0.0; 4], &hess, &penalty, 3.0, 200, true).unwrap();
        assert_abs_diff_eq!(v0, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_padding_is_equivalent() {
        let n = 4;
        let penalty = PenaltyBundle::new(2, n, 1.0, 1e5).unwrap();
        let mut h = DMatrix::identity(n + 1, n + 1) * 2.0;
        h[(0, 1)] = 0.3;
        h[(1, 0)] = 0.3;
        let hess = HessianBundle::new(h, penalty.penalty_matrix()).unwrap();
        let grad_short = vec![0.5, -0.2, 0.1, 0.7];
        let mut grad_full = grad_short.clone();
        grad_full.push(0.0);
        let a = delta_variance(&grad_short, &hess, &penalty, 1.5, 100, true).unwrap();
        let b = delta_variance(&grad_full, &hess, &penalty, 1.5, 100, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variance_shrinks_with_n_in_unscaled_mode() {
        let n = 3;
        let penalty = PenaltyBundle::new(1, n, 1.0, 1e5).unwrap();
        let hess = HessianBundle::new(
            DMatrix::identity(n + 1, n + 1),
            penalty.penalty_matrix(),
        )
        .unwrap();
        let grad = vec![1.0, 0.5, 0.0, 0.2];
        let v1 = delta_variance(&grad, &hess, &penalty, 2.0, 100, false).unwrap();
        let v2 = delta_variance(&grad, &hess, &penalty, 2.0, 1000, false).unwrap();
        assert!(v2 < v1);
        assert_abs_diff_eq!(v1 / v2, 10.0, epsilon = 1e-9);
    }
}
