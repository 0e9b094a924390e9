//! Erlang mixture distributions: densities, distribution functions,
//! quantiles, boxed moments and the model-implied moment triplet.
//!
//! An [`ErlangMixture`] is a convex combination of Gamma densities with
//! integer shapes `1..=n` and a shared scale `θ`. Boxed moments
//! `E[Xᵏ 1{X ∈ [a,b)}]` have the closed form
//!
//! ```text
//! θᵏ Σ_i ω_i · Γ(i+k)/Γ(i) · (γ(b/θ, i+k) − γ(a/θ, i+k))
//! ```
//!
//! and are evaluated through one incomplete-gamma table per bin edge (the
//! shape recurrence) and rising factorials (the order recurrence) — never
//! by per-component quadrature.

use crate::error::{Error, Result};
use crate::gamma::{reg_gamma_table, rising_factorial, GammaTable};
use crate::linalg::{CompensatedSum, Dd};
use crate::summary::BinPartition;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Absolute tolerance on the probability scale for quantile inversion.
const QUANTILE_TOL: f64 = 1e-10;

/// A finite Erlang mixture: probability weights over integer shapes
/// `1..=n` and a positive scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ErlangMixture {
    weights: Vec<f64>,
    scale: f64,
}

impl ErlangMixture {
    /// Validating constructor: weights must be a probability vector
    /// (nonnegative, summing to one within 1e-12) and the scale strictly
    /// positive and finite.
    pub fn new(weights: Vec<f64>, scale: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::domain("mixture needs at least one component"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::domain("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::domain(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::domain(format!(
                "scale must be finite and positive, got {scale}"
            )));
        }
        Ok(ErlangMixture { weights, scale })
    }

    /// Renormalizing constructor for nonnegative raw weights.
    pub fn from_unnormalized(raw: Vec<f64>, scale: f64) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::domain("raw weights carry no mass"));
        }
        let weights = raw.into_iter().map(|w| (w / total).max(0.0)).collect();
        Self::new(weights, scale)
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mean(&self) -> f64 {
        self.scale
            * self
                .weights
                .iter()
                .enumerate()
                .map(|(i, w)| w * (i + 1) as f64)
                .sum::<f64>()
    }

    /// Mixture density at `x ≥ 0`.
    pub fn pdf(&self, x: f64) -> f64 {
        pdf_raw(&self.weights, self.scale, x)
    }

    /// Mixture distribution function `Σ ω_i γ(x/θ, i)`.
    pub fn cdf(&self, x: f64) -> f64 {
        cdf_raw(&self.weights, self.scale, x)
    }

    /// Inverse distribution function, solved by a bracketed
    /// bisection/secant hybrid to 1e-10 on the probability scale.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        quantile_raw(&self.weights, self.scale, p)
    }

    /// Value-at-risk (the quantile) and tail-value-at-risk (the mean
    /// beyond it) at a level in (0, 1).
    pub fn var_tvar(&self, level: f64) -> Result<(f64, f64)> {
        let var = self.quantile(level)?;
        let tail_mean = self.boxed_moment(var, f64::INFINITY, 1)? / (1.0 - level);
        Ok((var, tail_mean))
    }

    /// Boxed moment `E[Xᵏ 1{X ∈ [a, b)}]`, with `b = +∞` allowed.
    pub fn boxed_moment(&self, a: f64, b: f64, k: usize) -> Result<f64> {
        boxed_moment_raw(&self.weights, self.scale, a, b, k)
    }

    /// Model-implied binned proportions, moments and their covariance for
    /// a partition and per-bin moment counts.
    pub fn model_triplet(&self, partition: &BinPartition, k: &[usize]) -> Result<MomentTriplet> {
        let eval = eval_moments(&self.weights, self.scale, partition, k, false)?;
        Ok(eval.into_triplet())
    }

    /// Draw `count` observations from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<f64> {
        (0..count)
            .map(|_| {
                let mut u: f64 = rng.random();
                let mut shape = self.weights.len();
                for (i, &w) in self.weights.iter().enumerate() {
                    if u < w {
                        shape = i + 1;
                        break;
                    }
                    u -= w;
                }
                rand_distr::Gamma::new(shape as f64, self.scale)
                    .expect("valid gamma parameters")
                    .sample(rng)
            })
            .collect()
    }
}

/// Discretize a target distribution function on the grid `θ, 2θ, …, nθ`:
/// weight `i` receives `F(iθ) − F((i−1)θ)`. The untouched tail mass
/// `1 − F(nθ)` is folded back by renormalization so the result is a valid
/// mixture; the discretized distribution function converges pointwise to
/// `F` as `θ → 0`.
pub fn tijms_weights<F: Fn(f64) -> f64>(
    target_cdf: F,
    theta: f64,
    n: usize,
) -> Result<ErlangMixture> {
    if !(theta > 0.0) || n == 0 {
        return Err(Error::domain("tijms discretization needs theta > 0, n >= 1"));
    }
    let mut prev = target_cdf(0.0);
    let mut raw = Vec::with_capacity(n);
    for i in 1..=n {
        let cur = target_cdf(i as f64 * theta);
        raw.push((cur - prev).max(0.0));
        prev = cur;
    }
    if raw.iter().sum::<f64>() <= 0.0 {
        return Err(Error::domain(
            "target places no mass on (0, n·theta]; increase n or theta",
        ));
    }
    ErlangMixture::from_unnormalized(raw, theta)
}

// ---------------------------------------------------------------------------
// Raw-parameter evaluation (weights need not sum to one)
//
// The fitter and the delta method differentiate through these functions in
// free coordinates, so they must stay well-defined off the simplex.
// ---------------------------------------------------------------------------

pub(crate) fn pdf_raw(weights: &[f64], theta: f64, x: f64) -> f64 {
    if x < 0.0 || x.is_nan() {
        return 0.0;
    }
    let table = reg_gamma_table(x / theta, weights.len());
    weights
        .iter()
        .zip(&table.pmf)
        .map(|(w, p)| w * p)
        .sum::<f64>()
        / theta
}

pub(crate) fn cdf_raw(weights: &[f64], theta: f64, x: f64) -> f64 {
    if x <= 0.0 || x.is_nan() {
        return 0.0;
    }
    let table = reg_gamma_table(x / theta, weights.len());
    weights.iter().zip(&table.p).map(|(w, p)| w * p).sum()
}

pub(crate) fn quantile_raw(weights: &[f64], theta: f64, p: f64) -> Result<f64> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::domain(format!(
            "quantile level must be in (0, 1), got {p}"
        )));
    }
    let n = weights.len() as f64;
    let mut hi = theta * (n + 10.0 * n.sqrt() + 20.0 / (1.0 - p));
    let mut f_hi = cdf_raw(weights, theta, hi) - p;
    let mut expansions = 0;
    while f_hi < 0.0 {
        hi *= 2.0;
        f_hi = cdf_raw(weights, theta, hi) - p;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::Convergence(format!(
                "quantile bracket expansion failed at level {p}"
            )));
        }
    }
    let mut lo = 0.0;
    let mut f_lo = -p;
    // Illinois variant of regula falsi: guaranteed bracket shrinkage with
    // secant-rate convergence on this smooth monotone cdf.
    let mut side = 0i8;
    for _ in 0..200 {
        let mid = (f_hi * lo - f_lo * hi) / (f_hi - f_lo);
        let mid = if mid.is_finite() && lo < mid && mid < hi {
            mid
        } else {
            0.5 * (lo + hi)
        };
        let f_mid = cdf_raw(weights, theta, mid) - p;
        if f_mid.abs() <= QUANTILE_TOL || (hi - lo) <= f64::EPSILON * hi.max(1.0) {
            return Ok(mid);
        }
        if f_mid < 0.0 {
            lo = mid;
            f_lo = f_mid;
            if side == -1 {
                f_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = mid;
            f_hi = f_mid;
            if side == 1 {
                f_lo *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::Convergence(format!(
        "quantile solve stalled at level {p}"
    )))
}

pub(crate) fn boxed_moment_raw(
    weights: &[f64],
    theta: f64,
    a: f64,
    b: f64,
    k: usize,
) -> Result<f64> {
    if !(a >= 0.0) || !(a < b) {
        return Err(Error::domain(format!(
            "boxed moment needs 0 <= a < b, got [{a}, {b})"
        )));
    }
    let n = weights.len();
    let m_max = n + k;
    let lo = reg_gamma_table(a / theta, m_max);
    let hi = reg_gamma_table(b / theta, m_max);
    let theta_k = theta.powi(k as i32);
    let mut total = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        let shape = i + 1;
        let idx = shape + k - 1;
        total += w * rising_factorial(shape, k) * (hi.p[idx] - lo.p[idx]);
    }
    Ok(theta_k * total)
}

// ---------------------------------------------------------------------------
// Moment triplet
// ---------------------------------------------------------------------------

/// Model-implied sufficient statistics: binned probabilities `π_j`, binned
/// moments `μ_{j,k}` for the observed orders, and their covariance
/// `Σ_{(j,k),(i,m)} = μ_{j,k+m}·1{j=i} − μ_{j,k}·μ_{i,m}`.
///
/// The covariance rows follow the flattened layout (bin ascending, order
/// ascending), with rows only for bins exposing at least one moment.
#[derive(Debug, Clone)]
pub struct MomentTriplet {
    pi: Vec<f64>,
    mu: Vec<Vec<f64>>,
    sigma: DMatrix<f64>,
    layout: Vec<(usize, usize)>,
}

impl MomentTriplet {
    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn mu(&self) -> &[Vec<f64>] {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `(bin, order)` pairs indexing the covariance rows.
    pub fn layout(&self) -> &[(usize, usize)] {
        &self.layout
    }

    /// Moments flattened in layout order.
    pub fn mu_flat(&self) -> Vec<f64> {
        self.layout
            .iter()
            .map(|&(j, k)| self.mu[j][k - 1])
            .collect()
    }
}

/// Full evaluation of binned moments with everything the likelihood
/// gradient needs: extended orders up to `2k_j` and parameter derivatives.
#[derive(Debug, Clone)]
pub(crate) struct MomentEval {
    pub n: usize,
    /// `π_j` per bin.
    pub pi: Vec<f64>,
    /// Extended moments in double-double: `mu_ext[j][q-1] = μ_{j,q}` for
    /// `q = 1..=2k_j`. Kept unrounded until the covariance is assembled.
    pub mu_ext: Vec<Vec<Dd>>,
    /// Observed moment counts `k_j`.
    pub k: Vec<usize>,
    /// Per-component contributions `comp[j][q][i] = ∂μ_{j,q}/∂ω_{i+1}`
    /// (order `q = 0` is the probability row). Present when gradients were
    /// requested.
    pub comp: Option<Vec<Vec<Vec<f64>>>>,
    /// Scale derivatives `dtheta[j][q] = ∂μ_{j,q}/∂θ` (`q = 0` → `∂π_j/∂θ`).
    pub dtheta: Option<Vec<Vec<f64>>>,
}

impl MomentEval {
    /// `μ_{j,q}` as f64 (`q >= 1`).
    #[inline]
    pub fn mu_value(&self, j: usize, q: usize) -> f64 {
        self.mu_ext[j][q - 1].value()
    }

    pub fn layout(&self) -> Vec<(usize, usize)> {
        let mut layout = Vec::new();
        for (j, &kj) in self.k.iter().enumerate() {
            for order in 1..=kj {
                layout.push((j, order));
            }
        }
        layout
    }

    /// Assemble the covariance for the observed orders.
    pub fn sigma(&self) -> DMatrix<f64> {
        let layout = self.layout();
        let m = layout.len();
        let mut sigma = DMatrix::zeros(m, m);
        for (a, &(j, k)) in layout.iter().enumerate() {
            for (b, &(i, mth)) in layout.iter().enumerate() {
                // μ_{j,k+m}·1{i=j} − μ_{j,k}·μ_{i,m}; the within-bin
                // difference cancels heavily, so it is taken in
                // double-double before rounding
                let prod = self.mu_ext[j][k - 1].mul(self.mu_ext[i][mth - 1]);
                sigma[(a, b)] = if i == j {
                    self.mu_ext[j][k + mth - 1].sub(prod).value()
                } else {
                    -prod.value()
                };
            }
        }
        sigma
    }

    pub fn into_triplet(self) -> MomentTriplet {
        let layout = self.layout();
        let sigma = self.sigma();
        let mu = self
            .k
            .iter()
            .zip(&self.mu_ext)
            .map(|(&kj, ext)| ext[..kj].iter().map(|v| v.value()).collect())
            .collect();
        MomentTriplet {
            pi: self.pi,
            mu,
            sigma,
            layout,
        }
    }
}

/// Evaluate binned probabilities and moments (orders up to `2k_j` per bin)
/// for possibly-unnormalized weights, optionally with analytic derivatives
/// with respect to every weight and the scale.
pub(crate) fn eval_moments(
    weights: &[f64],
    theta: f64,
    partition: &BinPartition,
    k: &[usize],
    with_grad: bool,
) -> Result<MomentEval> {
    let n = weights.len();
    let j_bins = partition.n_bins();
    if k.len() != j_bins {
        return Err(Error::domain(format!(
            "partition has {j_bins} bins but {} moment counts given",
            k.len()
        )));
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::domain(format!("scale must be positive, got {theta}")));
    }
    let max_order = k.iter().map(|&kj| 2 * kj).max().unwrap_or(0);
    let m_max = n + max_order;

    let edges = partition.edges();
    let tables: Vec<GammaTable> = edges
        .iter()
        .map(|&e| reg_gamma_table(e / theta, m_max))
        .collect();

    // rising factorials rf[q][i-1] = Γ(i+q)/Γ(i)
    let rf: Vec<Vec<f64>> = (0..=max_order)
        .map(|q| (1..=n).map(|i| rising_factorial(i, q)).collect())
        .collect();
    // powers of θ as a double-double chain
    let theta_pow: Vec<Dd> = {
        let mut pows = Vec::with_capacity(max_order + 1);
        let mut cur = Dd::from_f64(1.0);
        pows.push(cur);
        for _ in 1..=max_order {
            cur = cur.scale(theta);
            pows.push(cur);
        }
        pows
    };

    let mut pi = vec![0.0; j_bins];
    let mut mu_ext: Vec<Vec<Dd>> = k
        .iter()
        .map(|&kj| vec![Dd::default(); 2 * kj])
        .collect();
    let mut comp: Option<Vec<Vec<Vec<f64>>>> = with_grad.then(|| {
        k.iter()
            .map(|&kj| vec![vec![0.0; n]; 2 * kj + 1])
            .collect()
    });
    let mut dtheta: Option<Vec<Vec<f64>>> =
        with_grad.then(|| k.iter().map(|&kj| vec![0.0; 2 * kj + 1]).collect());

    for j in 0..j_bins {
        let lo = &tables[j];
        let hi = &tables[j + 1];
        let x_lo = edges[j] / theta;
        let x_hi = edges[j + 1] / theta;
        for q in 0..=2 * k[j] {
            let mut value = CompensatedSum::default();
            let mut dth = 0.0;
            for i in 1..=n {
                let idx = i + q - 1;
                let coef = theta_pow[q].scale(rf[q][i - 1]);
                let delta = hi.p_dd(idx).sub(lo.p_dd(idx));
                let m_iq = coef.mul(delta);
                let term = m_iq.scale(weights[i - 1]);
                value.add(term.hi);
                value.add(term.lo);
                if with_grad {
                    // d/dθ of γ(edge/θ, m) is −(x/θ)·pmf[m−1](x)
                    let hi_term = if x_hi.is_finite() {
                        (x_hi / theta) * hi.pmf[idx]
                    } else {
                        0.0
                    };
                    let lo_term = (x_lo / theta) * lo.pmf[idx];
                    let m_iq_f = m_iq.value();
                    let dm = (q as f64 / theta) * m_iq_f
                        + coef.value() * (lo_term - hi_term);
                    dth += weights[i - 1] * dm;
                    comp.as_mut().unwrap()[j][q][i - 1] = m_iq_f;
                }
            }
            let (sum, comp_part) = value.parts();
            if q == 0 {
                pi[j] = sum + comp_part;
            } else {
                mu_ext[j][q - 1] = Dd::from_parts(sum, comp_part);
            }
            if with_grad {
                dtheta.as_mut().unwrap()[j][q] = dth;
            }
        }
    }

    Ok(MomentEval {
        n,
        pi,
        mu_ext,
        k: k.to_vec(),
        comp,
        dtheta,
    })
}

// ---------------------------------------------------------------------------
// Mixture JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MixtureFile {
    theta: f64,
    weights: Vec<f64>,
}

/// Parse a mixture from `{ "theta": number, "weights": [number, ...] }`.
pub fn mixture_from_json(text: &str) -> Result<ErlangMixture> {
    let file: MixtureFile = serde_json::from_str(text)?;
    ErlangMixture::new(file.weights, file.theta)
}

pub fn mixture_to_json(mix: &ErlangMixture) -> String {
    serde_json::to_string_pretty(&MixtureFile {
        theta: mix.scale(),
        weights: mix.weights().to_vec(),
    })
    .expect("mixture serialization cannot fail")
}
