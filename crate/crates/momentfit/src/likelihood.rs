//! The composite data loglikelihood and the penalized objective.
//!
//! The data term combines a multinomial contribution from the bin
//! proportions with a Gaussian contribution from the binned moments:
//!
//! ```text
//! ℓ = { π̂' log π } − ½ { log|Σ_eff| + ‖μ − μ̂‖²_{Σ_eff} }
//! ```
//!
//! With `scale_by_n` on (the default throughout the crate), the sampling
//! distribution of the moment averages is honored: the multinomial term is
//! weighted by `N` and the covariance becomes `Σ/N`. With the flag off the
//! unweighted form above is evaluated verbatim; that mode exists for
//! fidelity experiments.

use crate::error::{Error, Result};
use crate::linalg::SpdSolver;
use crate::mixture::{eval_moments, ErlangMixture, MomentEval, MomentTriplet};
use crate::penalty::PenaltyBundle;
use crate::summary::LocalMomentSummary;
use nalgebra::{DMatrix, DVector};

/// Decomposed value of the penalized objective; `total = loglik − penalty`
/// holds exactly by construction.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveValue {
    pub loglik: f64,
    pub penalty: f64,
    pub total: f64,
    pub multinomial_part: f64,
    pub gaussian_part: f64,
}

/// Relative variance floor on the moment covariance: the diagonal is
/// inflated by this factor before factorization. Within-bin moments of
/// neighboring orders are near-collinear, so `Σ` carries eigenvalues many
/// orders below its scale; the floor caps the condition number at ~1e6,
/// which keeps the objective numerically smooth while perturbing the
/// statistical weighting far below the sampling noise of the moments.
const VARIANCE_FLOOR: f64 = 1e-4;

fn apply_variance_floor(sigma: &mut DMatrix<f64>) {
    for i in 0..sigma.nrows() {
        sigma[(i, i)] *= 1.0 + VARIANCE_FLOOR;
    }
}

/// The two data blocks plus the Gaussian internals, for scaling tests.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DataParts {
    pub multinomial: f64,
    pub gaussian: f64,
    pub log_det: f64,
    pub mahalanobis: f64,
}

impl DataParts {
    fn value(&self) -> f64 {
        self.multinomial + self.gaussian
    }
}

fn multinomial_part(pi: &[f64], summary: &LocalMomentSummary, scale_by_n: bool) -> f64 {
    let n = summary.n_obs() as f64;
    let mut total = 0.0;
    for (j, &pi_hat) in summary.pi_hat().iter().enumerate() {
        if pi_hat == 0.0 {
            continue;
        }
        if pi[j] <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let weight = if scale_by_n { n * pi_hat } else { pi_hat };
        total += weight * pi[j].ln();
    }
    total
}

/// Gaussian block from an already-scaled covariance and residual; one
/// symmetric factorization serves both the determinant and the norm.
fn gaussian_core(sigma_eff: &DMatrix<f64>, residual: &DVector<f64>) -> Result<(f64, f64)> {
    let solver = SpdSolver::new(sigma_eff).ok_or(Error::SingularCovariance)?;
    Ok((solver.log_det(), solver.quad_form(residual)))
}

pub(crate) fn data_parts_from_eval(
    eval: &MomentEval,
    summary: &LocalMomentSummary,
    scale_by_n: bool,
) -> Result<DataParts> {
    let multinomial = multinomial_part(&eval.pi, summary, scale_by_n);
    if multinomial == f64::NEG_INFINITY {
        return Ok(DataParts {
            multinomial,
            gaussian: 0.0,
            log_det: 0.0,
            mahalanobis: 0.0,
        });
    }
    let layout = eval.layout();
    if layout.is_empty() {
        return Ok(DataParts {
            multinomial,
            gaussian: 0.0,
            log_det: 0.0,
            mahalanobis: 0.0,
        });
    }
    let c = sigma_scale(summary, scale_by_n);
    let mut sigma_eff = eval.sigma() * c;
    apply_variance_floor(&mut sigma_eff);
    let residual = DVector::from_iterator(
        layout.len(),
        layout
            .iter()
            .map(|&(j, k)| eval.mu_value(j, k) - summary.mu_hat()[j][k - 1]),
    );
    let (ld, mahal) = gaussian_core(&sigma_eff, &residual)?;
    Ok(DataParts {
        multinomial,
        gaussian: -0.5 * (ld + mahal),
        log_det: ld,
        mahalanobis: mahal,
    })
}

fn sigma_scale(summary: &LocalMomentSummary, scale_by_n: bool) -> f64 {
    if scale_by_n {
        1.0 / summary.n_obs() as f64
    } else {
        1.0
    }
}

/// Data loglikelihood of a model-implied triplet against an observed
/// summary.
///
/// Returns `−∞` (a sentinel, not an error) when the model puts zero mass
/// on a bin the data occupies.
pub fn data_loglik(
    triplet: &MomentTriplet,
    summary: &LocalMomentSummary,
    scale_by_n: bool,
) -> Result<f64> {
    if triplet.pi().len() != summary.n_bins() {
        return Err(Error::domain(
            "triplet and summary disagree on the number of bins",
        ));
    }
    let counts = summary.moment_counts();
    for &(j, k) in triplet.layout() {
        if k > counts[j] {
            return Err(Error::domain(format!(
                "triplet exposes order {k} in bin {j}, summary has only {}",
                counts[j]
            )));
        }
    }
    let multinomial = multinomial_part(triplet.pi(), summary, scale_by_n);
    if multinomial == f64::NEG_INFINITY {
        return Ok(multinomial);
    }
    if triplet.layout().is_empty() {
        return Ok(multinomial);
    }
    let c = sigma_scale(summary, scale_by_n);
    let mut sigma_eff = triplet.sigma() * c;
    apply_variance_floor(&mut sigma_eff);
    let residual = DVector::from_iterator(
        triplet.layout().len(),
        triplet
            .layout()
            .iter()
            .map(|&(j, k)| triplet.mu()[j][k - 1] - summary.mu_hat()[j][k - 1]),
    );
    let (ld, mahal) = gaussian_core(&sigma_eff, &residual)?;
    Ok(multinomial - 0.5 * (ld + mahal))
}

/// The penalty block: `½{−(n−r) log λ + λ‖D_r ω‖²} + λ/b − (a−1) log λ`.
pub(crate) fn penalty_terms(weights: &[f64], lambda: f64, bundle: &PenaltyBundle) -> f64 {
    let quad = bundle.quadratic_form(weights);
    let n_minus_r = (bundle.n() - bundle.order()) as f64;
    0.5 * (-n_minus_r * lambda.ln() + lambda * quad) + lambda / bundle.b_lambda()
        - (bundle.a_lambda() - 1.0) * lambda.ln()
}

/// Penalized objective `ℓ(ω, θ, λ)` for a validated mixture.
pub fn penalized_loglik(
    mix: &ErlangMixture,
    lambda: f64,
    summary: &LocalMomentSummary,
    bundle: &PenaltyBundle,
    scale_by_n: bool,
) -> Result<ObjectiveValue> {
    if !(lambda > 0.0) {
        return Err(Error::domain(format!(
            "penalty level must be positive, got {lambda}"
        )));
    }
    objective_raw(
        mix.weights(),
        mix.scale(),
        Some(lambda),
        summary,
        bundle,
        scale_by_n,
    )
}

/// Objective at raw coordinates. `lambda = None` evaluates the pure data
/// objective (the first pass of the fitting loop, before any smoothing
/// level exists).
pub(crate) fn objective_raw(
    weights: &[f64],
    theta: f64,
    lambda: Option<f64>,
    summary: &LocalMomentSummary,
    bundle: &PenaltyBundle,
    scale_by_n: bool,
) -> Result<ObjectiveValue> {
    if weights.len() != bundle.n() {
        return Err(Error::domain(format!(
            "penalty bundle built for n={}, mixture has {}",
            bundle.n(),
            weights.len()
        )));
    }
    let eval = eval_moments(
        weights,
        theta,
        summary.partition(),
        &summary.moment_counts(),
        false,
    )?;
    let parts = data_parts_from_eval(&eval, summary, scale_by_n)?;
    let loglik = parts.value();
    let penalty = match lambda {
        Some(l) => penalty_terms(weights, l, bundle),
        None => 0.0,
    };
    Ok(ObjectiveValue {
        loglik,
        penalty,
        total: loglik - penalty,
        multinomial_part: parts.multinomial,
        gaussian_part: parts.gaussian,
    })
}

/// Objective value together with its analytic gradient over the raw
/// coordinates `(ω_1, …, ω_n, θ)`, treating the weights as free variables.
pub(crate) fn objective_with_gradient_raw(
    weights: &[f64],
    theta: f64,
    lambda: Option<f64>,
    summary: &LocalMomentSummary,
    bundle: &PenaltyBundle,
    scale_by_n: bool,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    let n = weights.len();
    if n != bundle.n() {
        return Err(Error::domain(format!(
            "penalty bundle built for n={}, mixture has {}",
            bundle.n(),
            n
        )));
    }
    let k = summary.moment_counts();
    let eval = eval_moments(weights, theta, summary.partition(), &k, true)?;
    let parts = data_parts_from_eval(&eval, summary, scale_by_n)?;
    let penalty = match lambda {
        Some(l) => penalty_terms(weights, l, bundle),
        None => 0.0,
    };
    let value = ObjectiveValue {
        loglik: parts.value(),
        penalty,
        total: parts.value() - penalty,
        multinomial_part: parts.multinomial,
        gaussian_part: parts.gaussian,
    };
    if !value.total.is_finite() {
        return Ok((value, vec![0.0; n + 1]));
    }

    let comp = eval.comp.as_ref().expect("gradients requested");
    let dtheta = eval.dtheta.as_ref().expect("gradients requested");
    let n_obs = summary.n_obs() as f64;
    let layout = eval.layout();
    let m = layout.len();

    // derivative of μ_{j,q} (q = 0 is the probability row) w.r.t. param p
    let dmoment = |j: usize, q: usize, p: usize| -> f64 {
        if p < n {
            comp[j][q][p]
        } else {
            dtheta[j][q]
        }
    };

    let mut grad = vec![0.0; n + 1];

    // multinomial block
    for (j, &pi_hat) in summary.pi_hat().iter().enumerate() {
        if pi_hat == 0.0 {
            continue;
        }
        let weight = if scale_by_n { n_obs * pi_hat } else { pi_hat };
        let ratio = weight / eval.pi[j];
        for (p, g) in grad.iter_mut().enumerate() {
            *g += ratio * dmoment(j, 0, p);
        }
    }

    // Gaussian block
    if m > 0 {
        let c = sigma_scale(summary, scale_by_n);
        let mut sigma_eff = eval.sigma() * c;
        apply_variance_floor(&mut sigma_eff);
        let solver = SpdSolver::new(&sigma_eff).ok_or(Error::SingularCovariance)?;
        let residual = DVector::from_iterator(
            m,
            layout
                .iter()
                .map(|&(j, q)| eval.mu_value(j, q) - summary.mu_hat()[j][q - 1]),
        );
        let inv = solver.inverse();
        let u = solver.solve_vec(&residual);
        let mut d_sigma = DMatrix::zeros(m, m);
        for (p, g) in grad.iter_mut().enumerate() {
            // ∂Σ_{(j,q),(i,s)} = ∂μ_{j,q+s}·1{i=j} − ∂μ_{j,q}·μ_{i,s} − μ_{j,q}·∂μ_{i,s}
            for (a, &(j, q)) in layout.iter().enumerate() {
                for (b, &(i, s)) in layout.iter().enumerate() {
                    let mut v = -dmoment(j, q, p) * eval.mu_value(i, s)
                        - eval.mu_value(j, q) * dmoment(i, s, p);
                    if i == j {
                        v += dmoment(j, q + s, p);
                    }
                    if a == b {
                        v *= 1.0 + VARIANCE_FLOOR;
                    }
                    d_sigma[(a, b)] = v * c;
                }
            }
            let mut trace = 0.0;
            let mut quad = 0.0;
            let mut cross = 0.0;
            for a in 0..m {
                let ua = u[a];
                cross += ua * dmoment(layout[a].0, layout[a].1, p);
                for b in 0..m {
                    trace += inv[(a, b)] * d_sigma[(a, b)];
                    quad += ua * d_sigma[(a, b)] * u[b];
                }
            }
            *g += -0.5 * trace + 0.5 * quad - cross;
        }
    }

    // penalty block: ∂/∂ω {−½ λ‖Dω‖²} = −λ D'D ω; the scale slot is free
    if let Some(l) = lambda {
        let gram_w = bundle.gram_times(weights);
        for (g, dw) in grad.iter_mut().zip(&gram_w) {
            *g -= l * dw;
        }
    }

    Ok((value, grad))
}

/// Push a raw-coordinate gradient through the positivity parameterization
/// `ω_i = s_i²/Σ s²`, `θ = t²`.
pub(crate) fn chain_to_unconstrained(s: &[f64], t: f64, raw: &[f64]) -> Vec<f64> {
    let n = s.len();
    debug_assert_eq!(raw.len(), n + 1);
    let norm: f64 = s.iter().map(|v| v * v).sum();
    let weights: Vec<f64> = s.iter().map(|v| v * v / norm).collect();
    let dot: f64 = raw[..n]
        .iter()
        .zip(&weights)
        .map(|(g, w)| g * w)
        .sum();
    let mut out = Vec::with_capacity(n + 1);
    for l in 0..n {
        out.push(2.0 * s[l] / norm * (raw[l] - dot));
    }
    out.push(2.0 * t * raw[n]);
    out
}

/// Analytic gradient of the penalized objective in the optimizer's
/// unconstrained coordinates `(s_1, …, s_n, t)` with `ω = s²/Σs²`,
/// `θ = t²`, evaluated at the canonical representative `s = √ω`, `t = √θ`.
pub fn objective_gradient(
    mix: &ErlangMixture,
    lambda: f64,
    summary: &LocalMomentSummary,
    bundle: &PenaltyBundle,
    scale_by_n: bool,
) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::domain(format!(
            "penalty level must be positive, got {lambda}"
        )));
    }
    let (_, raw) = objective_with_gradient_raw(
        mix.weights(),
        mix.scale(),
        Some(lambda),
        summary,
        bundle,
        scale_by_n,
    )?;
    let s: Vec<f64> = mix.weights().iter().map(|w| w.sqrt()).collect();
    Ok(chain_to_unconstrained(&s, mix.scale().sqrt(), &raw))
}
