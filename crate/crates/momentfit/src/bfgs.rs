//! Quasi-Newton (BFGS) minimizer with a strong-Wolfe line search.
//!
//! Dense inverse-Hessian form; adequate for the few dozen free parameters
//! of a mixture fit. Non-finite objective values are treated as infinitely
//! bad, so the line search backs away from invalid regions (for example a
//! scale crossing zero).

use nalgebra::{DMatrix, DVector};

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_ITER: usize = 60;

#[derive(Debug, Clone)]
pub(crate) struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `f` from `x0`. Convergence: `‖g‖∞ ≤ gtol_rel · (1 + |f|)`.
pub(crate) fn minimize<F>(
    mut eval: F,
    x0: &[f64],
    max_iter: usize,
    gtol_rel: f64,
) -> BfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = eval(x.as_slice());
    let mut g = DVector::from_column_slice(&g0);
    if !fx.is_finite() {
        return BfgsResult {
            x: x0.to_vec(),
            f: fx,
            grad_inf_norm: f64::INFINITY,
            iterations: 0,
            converged: false,
        };
    }
    let mut h_inv = DMatrix::identity(n, n);
    let mut first_update = true;

    for iter in 0..max_iter {
        let g_inf = g.amax();
        if g_inf <= gtol_rel * (1.0 + fx.abs()) {
            return BfgsResult {
                x: x.as_slice().to_vec(),
                f: fx,
                grad_inf_norm: g_inf,
                iterations: iter,
                converged: true,
            };
        }
        let mut direction = -(&h_inv * &g);
        let mut slope = direction.dot(&g);
        if slope >= 0.0 {
            // stale curvature; fall back to steepest descent
            h_inv = DMatrix::identity(n, n);
            direction = -g.clone();
            slope = -g.dot(&g);
        }

        let (step, f_new, x_new, g_new) =
            match wolfe_search(&mut eval, &x, fx, &g, &direction, slope) {
                Some(found) => found,
                None => {
                    return BfgsResult {
                        x: x.as_slice().to_vec(),
                        f: fx,
                        grad_inf_norm: g_inf,
                        iterations: iter,
                        converged: false,
                    }
                }
            };
        let _ = step;

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first_update {
                let scale = sy / y.dot(&y);
                h_inv = DMatrix::identity(n, n) * scale;
                first_update = false;
            }
            // standard BFGS inverse update
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H ← H + ρ²(s'y + y'Hy) ss' − ρ(Hy s' + s y'H)
            for i in 0..n {
                for j in 0..n {
                    h_inv[(i, j)] += rho * rho * (sy + yhy) * s[i] * s[j]
                        - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    BfgsResult {
        x: x.as_slice().to_vec(),
        f: fx,
        grad_inf_norm: g.amax(),
        iterations: max_iter,
        converged: false,
    }
}

type SearchOutcome = (f64, f64, DVector<f64>, DVector<f64>);

/// Bracket-and-zoom strong Wolfe line search (Nocedal & Wright alg. 3.5/3.6).
fn wolfe_search<F>(
    eval: &mut F,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    direction: &DVector<f64>,
    slope0: f64,
) -> Option<SearchOutcome>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let probe = |eval: &mut F, alpha: f64| -> (f64, DVector<f64>, DVector<f64>) {
        let xt = x + direction * alpha;
        let (f, g) = eval(xt.as_slice());
        (f, DVector::from_column_slice(&g), xt)
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut slope_prev = slope0;
    let mut alpha = 1.0;

    for i in 0..MAX_LINE_ITER {
        let (f, g, xt) = probe(eval, alpha);
        let slope = g.dot(direction);
        if !f.is_finite() || f > f0 + C1 * alpha * slope0 || (i > 0 && f >= f_prev) {
            return zoom(
                eval, x, f0, slope0, direction, alpha_prev, f_prev, slope_prev, alpha, f,
            );
        }
        if slope.abs() <= -C2 * slope0 {
            return Some((alpha, f, xt, g));
        }
        if slope >= 0.0 {
            return zoom(eval, x, f0, slope0, direction, alpha, f, slope, alpha_prev, f_prev);
        }
        alpha_prev = alpha;
        f_prev = f;
        slope_prev = slope;
        alpha *= 2.0;
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    eval: &mut F,
    x: &DVector<f64>,
    f0: f64,
    slope0: f64,
    direction: &DVector<f64>,
    mut alpha_lo: f64,
    mut f_lo: f64,
    mut slope_lo: f64,
    mut alpha_hi: f64,
    mut f_hi: f64,
) -> Option<SearchOutcome>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    for _ in 0..MAX_LINE_ITER {
        // cubic-ish interpolation with bisection safeguard
        let mut alpha = if f_hi.is_finite() {
            let d = alpha_hi - alpha_lo;
            let candidate = alpha_lo - 0.5 * slope_lo * d * d / (f_hi - f_lo - slope_lo * d);
            if candidate.is_finite()
                && (alpha_lo.min(alpha_hi)..=alpha_lo.max(alpha_hi)).contains(&candidate)
            {
                candidate
            } else {
                0.5 * (alpha_lo + alpha_hi)
            }
        } else {
            0.5 * (alpha_lo + alpha_hi)
        };
        let width = (alpha_hi - alpha_lo).abs();
        let margin = 0.1 * width;
        alpha = alpha.clamp(
            alpha_lo.min(alpha_hi) + margin,
            alpha_lo.max(alpha_hi) - margin,
        );
        if !alpha.is_finite() || width < 1e-16 * (1.0 + alpha_lo.abs()) {
            break;
        }
        let xt = x + direction * alpha;
        let (f, gvec) = eval(xt.as_slice());
        let g = DVector::from_column_slice(&gvec);
        let slope = g.dot(direction);
        if !f.is_finite() || f > f0 + C1 * alpha * slope0 || f >= f_lo {
            alpha_hi = alpha;
            f_hi = f;
        } else {
            if slope.abs() <= -C2 * slope0 {
                return Some((alpha, f, xt, g));
            }
            if slope * (alpha_hi - alpha_lo) >= 0.0 {
                alpha_hi = alpha_lo;
                f_hi = f_lo;
            }
            alpha_lo = alpha;
            f_lo = f;
            slope_lo = slope;
        }
    }
    // accept the best sufficient-decrease point even without curvature
    if f_lo < f0 && alpha_lo > 0.0 {
        let xt = x + direction * alpha_lo;
        let (f, gvec) = eval(xt.as_slice());
        if f.is_finite() {
            return Some((alpha_lo, f, xt, DVector::from_column_slice(&gvec)));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn solves_quadratic_exactly() {
        let eval = |x: &[f64]| {
            let f = 2.0 * x[0] * x[0] + 0.5 * (x[1] - 3.0) * (x[1] - 3.0);
            let g = vec![4.0 * x[0], x[1] - 3.0];
            (f, g)
        };
        let res = minimize(eval, &[5.0, -4.0], 100, 1e-10);
        assert!(res.converged);
        assert_abs_diff_eq!(res.x[0], 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(res.x[1], 3.0, epsilon = 1e-7);
    }

    #[test]
    fn solves_rosenbrock() {
        let eval = |x: &[f64]| {
            let (a, b) = (1.0, 100.0);
            let f = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
            let g = vec![
                -2.0 * (a - x[0]) - 4.0 * b * (x[1] - x[0] * x[0]) * x[0],
                2.0 * b * (x[1] - x[0] * x[0]),
            ];
            (f, g)
        };
        let res = minimize(eval, &[-1.2, 1.0], 500, 1e-9);
        assert!(res.converged, "not converged: {res:?}");
        assert_abs_diff_eq!(res.x[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(res.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn immediate_return_at_optimum() {
        let eval = |x: &[f64]| (x[0] * x[0], vec![2.0 * x[0]]);
        let res = minimize(eval, &[0.0], 100, 1e-8);
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn backs_away_from_invalid_region() {
        // objective undefined for x <= 0: the search must stay positive
        let eval = |x: &[f64]| {
            if x[0] <= 0.0 {
                (f64::INFINITY, vec![0.0])
            } else {
                (x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]])
            }
        };
        let res = minimize(eval, &[4.0], 200, 1e-9);
        assert!(res.converged);
        assert_abs_diff_eq!(res.x[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn reports_failure_on_non_finite_start() {
        let eval = |_: &[f64]| (f64::NAN, vec![0.0]);
        let res = minimize(eval, &[1.0], 50, 1e-8);
        assert!(!res.converged);
    }
}
