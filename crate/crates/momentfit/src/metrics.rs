//! Distances between distributions and the Kolmogorov–Smirnov test used by
//! the resampling experiments.

use crate::error::{Error, Result};
use crate::quad::adaptive_simpson;
use std::cell::Cell;

/// Truncation applied to quantile-scale integrals; heavy tails make the
/// untruncated integrals potentially infinite.
pub const QUANTILE_TRUNCATION: f64 = 1e-6;

/// Distances of a fitted distribution from a reference, plus the KS test
/// of the raw sample against the fitted distribution function.
#[derive(Debug, Clone, Copy)]
pub struct DistanceReport {
    /// `∫ (q₁ − q₂)² dp` over the truncated unit interval.
    pub l2_quantile: f64,
    /// `∫ (F₁ − F₂)² dx` over the support.
    pub l2_cdf: f64,
    /// `∫ |q₁ − q₂| dp`, equal to the L1 distance between the
    /// distribution functions.
    pub l1_quantile: f64,
    /// `∫ f₁ ln(f₁/f₂) dx` over the reference's effective support.
    pub kl: f64,
    pub ks_stat: f64,
    pub ks_pvalue: f64,
    /// The probability range the quantile integrals actually covered.
    pub quantile_range: (f64, f64),
}

fn guarded<'a, F: Fn(f64) -> f64 + 'a>(
    f: F,
    bad: &'a Cell<Option<f64>>,
) -> impl Fn(f64) -> f64 + 'a {
    move |x| {
        let v = f(x);
        if !v.is_finite() && bad.get().is_none() {
            bad.set(Some(x));
        }
        v
    }
}

fn quantile_integral<Q1, Q2, T>(q1: Q1, q2: Q2, transform: T) -> Result<f64>
where
    Q1: Fn(f64) -> f64,
    Q2: Fn(f64) -> f64,
    T: Fn(f64) -> f64,
{
    let delta = QUANTILE_TRUNCATION;
    let bad = Cell::new(None);
    let integrand = guarded(|p: f64| transform(q1(p) - q2(p)), &bad);
    // coarse pass to learn the scale, then adaptive refinement
    let coarse: f64 = (0..=64)
        .map(|i| integrand(delta + (1.0 - 2.0 * delta) * i as f64 / 64.0))
        .sum::<f64>()
        * (1.0 - 2.0 * delta)
        / 65.0;
    let tol = 1e-8 * (1.0 + coarse.abs());
    let value = adaptive_simpson(&integrand, delta, 1.0 - delta, tol);
    if let Some(p) = bad.get() {
        return Err(Error::domain(format!(
            "non-finite quantile difference at level {p}"
        )));
    }
    Ok(value)
}

/// Squared L2 distance between quantile functions:
/// `∫ (q₁(p) − q₂(p))² dp`, truncated at `(1e-6, 1 − 1e-6)`.
pub fn l2_quantile<Q1, Q2>(q1: Q1, q2: Q2) -> Result<f64>
where
    Q1: Fn(f64) -> f64,
    Q2: Fn(f64) -> f64,
{
    quantile_integral(q1, q2, |d| d * d)
}

/// L1 distance between quantile functions (equivalently between
/// distribution functions): `∫ |q₁(p) − q₂(p)| dp`.
pub fn l1_quantile<Q1, Q2>(q1: Q1, q2: Q2) -> Result<f64>
where
    Q1: Fn(f64) -> f64,
    Q2: Fn(f64) -> f64,
{
    quantile_integral(q1, q2, |d| d.abs())
}

/// Generic inversion of a distribution function by bracketed bisection;
/// used to locate integration endpoints for distance computations.
pub(crate) fn invert_cdf<C: Fn(f64) -> f64>(cdf: C, p: f64) -> f64 {
    let mut hi = 1.0;
    let mut count = 0;
    while cdf(hi) < p && count < 80 {
        hi *= 2.0;
        count += 1;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Squared L2 distance between distribution functions on `[0, ∞)`:
/// `∫ (F₁ − F₂)² dx`, integrated to the larger `1 − 1e-8` quantile with a
/// bounded tail segment added.
pub fn l2_cdf<C1, C2>(cdf1: C1, cdf2: C2) -> Result<f64>
where
    C1: Fn(f64) -> f64,
    C2: Fn(f64) -> f64,
{
    let x_main = invert_cdf(&cdf1, 1.0 - 1e-8).max(invert_cdf(&cdf2, 1.0 - 1e-8));
    let x_tail = invert_cdf(&cdf1, 1.0 - 1e-12).max(invert_cdf(&cdf2, 1.0 - 1e-12));
    let integrand = |x: f64| {
        let d = cdf1(x) - cdf2(x);
        d * d
    };
    let coarse: f64 = (0..=64)
        .map(|i| integrand(x_main * i as f64 / 64.0))
        .sum::<f64>()
        * x_main
        / 65.0;
    let tol = 1e-9 * (1.0 + coarse.abs());
    let main = adaptive_simpson(&integrand, 0.0, x_main, tol);
    // beyond x_tail both tails are below 1e-12; the remainder is negligible
    let tail = adaptive_simpson(&integrand, x_main, x_tail, tol);
    Ok(main + tail)
}

/// Kullback-Leibler divergence `∫ f₁ ln(f₁/f₂) dx` over the given support
/// range (the reference's 1e-9 .. 1−1e-9 quantile range in the
/// experiments).
///
/// Returns `+∞` when the candidate density vanishes where the reference
/// does not.
pub fn kl_divergence<F1, F2>(f1: F1, f2: F2, support: (f64, f64)) -> f64
where
    F1: Fn(f64) -> f64,
    F2: Fn(f64) -> f64,
{
    let degenerate = Cell::new(false);
    let integrand = |x: f64| {
        let a = f1(x);
        if a < 1e-300 {
            return 0.0;
        }
        let b = f2(x);
        if b < 1e-300 {
            degenerate.set(true);
            return 0.0;
        }
        a * (a / b).ln()
    };
    let value = adaptive_simpson(&integrand, support.0, support.1, 1e-10);
    if degenerate.get() {
        f64::INFINITY
    } else {
        value
    }
}

/// One-sample two-sided Kolmogorov-Smirnov test of a sorted sample against
/// a distribution function. Returns `(D, p)` with the asymptotic
/// Kolmogorov p-value.
pub fn ks_test<C: Fn(f64) -> f64>(sample: &[f64], cdf: C) -> Result<(f64, f64)> {
    if sample.is_empty() {
        return Err(Error::domain("KS test needs a nonempty sample"));
    }
    if sample.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::domain("KS test needs a sorted sample"));
    }
    let n = sample.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        let upper = (i + 1) as f64 / n - f;
        let lower = f - i as f64 / n;
        d = d.max(upper).max(lower);
    }
    Ok((d, kolmogorov_pvalue(n.sqrt() * d)))
}

/// Asymptotic two-sided Kolmogorov p-value `2 Σ (−1)^{k−1} e^{−2k²t²}`,
/// truncated once terms drop below 1e-12.
pub fn kolmogorov_pvalue(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..200 {
        let term = (-2.0 * (k * k) as f64 * t * t).exp();
        sum += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::ErlangMixture;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn exp_quantile(theta: f64) -> impl Fn(f64) -> f64 {
        move |p: f64| -theta * (1.0 - p).ln()
    }

    fn exp_cdf(theta: f64) -> impl Fn(f64) -> f64 {
        move |x: f64| 1.0 - (-x / theta).exp()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let q = exp_quantile(1.0);
        assert_abs_diff_eq!(l2_quantile(&q, &q).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l1_quantile(&q, &q).unwrap(), 0.0, epsilon = 1e-12);
        let c = exp_cdf(1.0);
        assert_abs_diff_eq!(l2_cdf(&c, &c).unwrap(), 0.0, epsilon = 1e-12);
        let f = |x: f64| (-x).exp();
        assert_abs_diff_eq!(kl_divergence(&f, &f, (0.0, 40.0)), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn constant_shift_closed_forms() {
        let q = exp_quantile(1.0);
        let shifted = |p: f64| q(p) + 0.7;
        assert_abs_diff_eq!(l2_quantile(&q, &shifted).unwrap(), 0.49, epsilon = 1e-5);
        assert_abs_diff_eq!(l1_quantile(&q, &shifted).unwrap(), 0.7, epsilon = 1e-5);
    }

    #[test]
    fn exponential_pair_closed_forms() {
        // q difference is ln(1−p); ∫ ln²(1−p) dp = 2
        let v = l2_quantile(exp_quantile(1.0), exp_quantile(2.0)).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 3e-4); // truncation bites ~2e-4
        let v1 = l1_quantile(exp_quantile(1.0), exp_quantile(2.0)).unwrap();
        assert_abs_diff_eq!(v1, 1.0, epsilon = 1e-4);
        // ∫ (e^{−x/2} − e^{−x})² dx = 1 − 4/3 + 1/2 = 1/6
        let vc = l2_cdf(exp_cdf(1.0), exp_cdf(2.0)).unwrap();
        assert_relative_eq!(vc, 1.0 / 6.0, max_relative = 1e-6);
        // symmetry
        let vc2 = l2_cdf(exp_cdf(2.0), exp_cdf(1.0)).unwrap();
        assert_relative_eq!(vc, vc2, max_relative = 1e-9);
    }

    #[test]
    fn exponential_kl_closed_form() {
        // KL(Exp rate 1, Exp rate ½) = ln 2 − ½
        let f1 = |x: f64| (-x).exp();
        let f2 = |x: f64| 0.5 * (-0.5 * x).exp();
        let v = kl_divergence(f1, f2, (0.0, 60.0));
        assert_abs_diff_eq!(v, std::f64::consts::LN_2 - 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(v, 0.1931472, epsilon = 1e-7);
    }

    #[test]
    fn kl_degenerate_support_is_infinite() {
        let f1 = |x: f64| if x < 2.0 { 0.5 } else { 0.0 };
        let f2 = |x: f64| if x < 1.0 { 1.0 } else { 0.0 };
        assert_eq!(kl_divergence(f1, f2, (0.0, 2.0)), f64::INFINITY);
    }

    #[test]
    fn kl_nonnegative_on_random_mixture_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let m1 = random_mixture(&mut rng);
            let m2 = random_mixture(&mut rng);
            let hi = invert_cdf(|x| m1.cdf(x), 1.0 - 1e-9);
            let v = kl_divergence(|x| m1.pdf(x), |x| m2.pdf(x), (1e-12, hi));
            assert!(v >= -1e-9, "KL {v} negative");
        }
    }

    fn random_mixture(rng: &mut ChaCha8Rng) -> ErlangMixture {
        let n = rng.random_range(2..=10);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        ErlangMixture::from_unnormalized(raw, 0.3 + rng.random::<f64>()).unwrap()
    }

    #[test]
    fn cauchy_schwarz_between_l1_and_l2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..8 {
            let m1 = random_mixture(&mut rng);
            let m2 = random_mixture(&mut rng);
            let q1 = |p: f64| m1.quantile(p).unwrap();
            let q2 = |p: f64| m2.quantile(p).unwrap();
            let l1 = l1_quantile(&q1, &q2).unwrap();
            let l2 = l2_quantile(&q1, &q2).unwrap();
            assert!(l1 <= l2.sqrt() + 1e-9, "l1 {l1} vs sqrt(l2) {}", l2.sqrt());
        }
    }

    #[test]
    fn ks_single_point_at_median() {
        let (d, _) = ks_test(&[0.0], |_| 0.5).unwrap();
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn ks_rejects_unsorted() {
        assert!(ks_test(&[2.0, 1.0], |x| x).is_err());
        assert!(ks_test(&[], |x| x).is_err());
    }

    #[test]
    fn kolmogorov_critical_value() {
        // √n·D = 1.36 is the classic 5% critical point
        assert_abs_diff_eq!(kolmogorov_pvalue(1.36), 0.049, epsilon = 5e-4);
    }

    #[test]
    fn pvalue_decreases_in_statistic() {
        let mut prev = 1.0;
        for i in 1..40 {
            let p = kolmogorov_pvalue(i as f64 * 0.1);
            assert!(p <= prev + 1e-15);
            prev = p;
        }
    }

    #[test]
    fn null_calibration_over_seeds() {
        // sampling from the fitted distribution itself: p-values should be
        // roughly uniform, certainly not collapsing to zero
        let mix = ErlangMixture::new(vec![0.3, 0.4, 0.3], 0.8).unwrap();
        let mut small = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sample = mix.sample(&mut rng, 750);
            sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (_, p) = ks_test(&sample, |x| mix.cdf(x)).unwrap();
            if p <= 0.001 {
                small += 1;
            }
        }
        assert!(small <= 1, "{small} of 20 null p-values below 0.001");
    }
}
