//! The fitting loop: alternate maximization of the penalized objective over
//! the mixture parameters with marginal-likelihood updates of the smoothing
//! level, until all three of parameters, smoothing level and objective have
//! stabilized.
//!
//! The first pass maximizes the pure data objective (no smoothing level
//! exists yet); every later pass maximizes at the current level. After each
//! pass the data-only Hessian is rebuilt by central finite differences of
//! the analytic gradient, its penalty eigenvalues are extracted, and the
//! smoothing level is re-solved.

use crate::bfgs;
use crate::error::{Error, Result};
use crate::lambda::{effective_dimension, update_lambda, HessianBundle};
use crate::likelihood::{
    chain_to_unconstrained, objective_raw, objective_with_gradient_raw, ObjectiveValue,
};
use crate::mixture::ErlangMixture;
use crate::penalty::{PenaltyBundle, DEFAULT_A_LAMBDA, DEFAULT_B_LAMBDA};
use crate::summary::LocalMomentSummary;
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Everything configurable about a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Mixture size: integer shapes `1..=n`.
    pub n: usize,
    /// Difference-penalty order.
    pub r: usize,
    pub a_lambda: f64,
    pub b_lambda: f64,
    pub max_outer: usize,
    /// Convergence threshold on the sup-norm parameter change.
    pub tol_params: f64,
    /// Convergence threshold on `|Δ log λ|`.
    pub tol_lambda: f64,
    /// Relative convergence threshold on the objective change.
    pub tol_objective: f64,
    /// Absolute ridge added to the Hessian diagonal; `None` uses
    /// `1e-8 ×` the mean absolute diagonal.
    pub hessian_jitter: Option<f64>,
    pub seed: u64,
    /// Honor the sampling scale of the data (multinomial weighted by `N`,
    /// covariance divided by `N`). Off reproduces the unweighted
    /// loglikelihood, kept for fidelity experiments.
    pub scale_by_n: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n: 50,
            r: 2,
            a_lambda: DEFAULT_A_LAMBDA,
            b_lambda: DEFAULT_B_LAMBDA,
            max_outer: 50,
            tol_params: 1e-6,
            tol_lambda: 1e-4,
            tol_objective: 1e-8,
            hessian_jitter: None,
            seed: 0,
            scale_by_n: true,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if self.r == 0 || self.n <= self.r {
            return Err(Error::domain(format!(
                "need n > r >= 1, got n={}, r={}",
                self.n, self.r
            )));
        }
        if !(self.tol_params > 0.0 && self.tol_lambda > 0.0 && self.tol_objective > 0.0) {
            return Err(Error::domain("tolerances must be positive"));
        }
        if self.max_outer == 0 {
            return Err(Error::domain("max_outer must be at least 1"));
        }
        Ok(())
    }
}

/// Flags and counters accumulated during a fit.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// The summary carries no moment information beyond a single bin.
    pub degenerate_information: bool,
    /// The smoothing level hit a clamp endpoint at least once.
    pub lambda_clamped: bool,
    /// Negative penalty eigenvalues clipped to zero, summed over passes.
    pub tau_clipped: usize,
    /// Worst jitter-ladder step needed to factor a Hessian.
    pub hessian_jitter_steps: usize,
    /// Passes whose Hessian needed eigenvalue flooring to become positive
    /// definite (an iterate far from a data-objective mode).
    pub hessian_floored: usize,
    /// Inner-solver restarts actually consumed.
    pub restarts_used: usize,
}

/// A completed fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub mixture: ErlangMixture,
    pub lambda: f64,
    pub hessian: HessianBundle,
    pub effective_dim: f64,
    pub outer_iters: usize,
    pub converged: bool,
    /// Objective total at the end of each outer pass.
    pub objective_trace: Vec<f64>,
    pub diagnostics: FitDiagnostics,
    penalty: PenaltyBundle,
    options: FitOptions,
    n_obs: u64,
}

impl FitResult {
    pub fn penalty(&self) -> &PenaltyBundle {
        &self.penalty
    }

    pub fn options(&self) -> &FitOptions {
        &self.options
    }

    /// Sample size of the summary the fit was computed from.
    pub fn n_obs(&self) -> u64 {
        self.n_obs
    }
}

/// Run the full fitting loop on a summary.
pub fn fit(summary: &LocalMomentSummary, options: &FitOptions) -> Result<FitResult> {
    options.validate()?;
    let pi_total: f64 = summary.pi_hat().iter().sum();
    if (pi_total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidSummary(format!(
            "fit needs a complete summary; proportions sum to {pi_total}"
        )));
    }
    let bundle = PenaltyBundle::new(options.r, options.n, options.a_lambda, options.b_lambda)?;
    let mut diagnostics = FitDiagnostics {
        degenerate_information: summary.n_bins() == 1
            && summary.moment_counts().iter().all(|&k| k == 0),
        ..Default::default()
    };
    if diagnostics.degenerate_information {
        log::warn!("summary carries only a single saturated bin; fit is penalty-dominated");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let last_edge = summary.partition().last_finite_edge();
    let theta0 = if last_edge > 0.0 {
        last_edge / options.n as f64
    } else {
        1.0
    };
    let mut weights: Vec<f64> = (0..options.n)
        .map(|_| 1.0 + 0.1 * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let mut theta = theta0;

    let mut trace = Vec::new();
    let mut lambda: Option<f64> = None;
    let mut prev: Option<(Vec<f64>, f64, f64, f64)> = None; // (w, θ, λ, total)
    let mut converged = false;
    let mut outer_done = 0;
    let mut last_hessian: Option<HessianBundle> = None;
    let mut last_lambda = f64::NAN;

    for outer in 0..options.max_outer {
        let inner = inner_optimize(
            summary,
            lambda,
            (&weights, theta),
            options,
            &bundle,
            &mut diagnostics,
            outer as u64,
        )?;
        weights = inner.0;
        theta = inner.1;
        let objective = inner.2;
        trace.push(objective.total);

        let (hess, floored) = hessian_at_raw(summary, &weights, theta, options, &bundle)?;
        diagnostics.tau_clipped += hess.clipped_tau();
        diagnostics.hessian_jitter_steps = diagnostics.hessian_jitter_steps.max(hess.jitter_steps());
        diagnostics.hessian_floored += floored as usize;

        let update = update_lambda(&weights, &bundle, &hess, prev.as_ref().map_or(0.0, |p| p.2))?;
        if update.clamped {
            diagnostics.lambda_clamped = true;
        }
        last_lambda = update.lambda;
        last_hessian = Some(hess);
        outer_done = outer + 1;

        if let Some((pw, pt, pl, ptotal)) = &prev {
            let dparams = weights
                .iter()
                .zip(pw)
                .map(|(a, b)| (a - b).abs())
                .fold((theta - pt).abs(), f64::max);
            let dlambda = (update.lambda.ln() - pl.ln()).abs();
            let dtotal = (objective.total - ptotal).abs();
            if dparams < options.tol_params
                && dlambda < options.tol_lambda
                && dtotal < options.tol_objective * (1.0 + objective.total.abs())
            {
                converged = true;
                break;
            }
        }
        prev = Some((weights.clone(), theta, update.lambda, objective.total));
        lambda = Some(update.lambda);
    }

    let hessian = last_hessian.expect("at least one outer pass ran");
    let effective_dim = effective_dimension(hessian.eta(), last_lambda);
    let mixture = {
        let total: f64 = weights.iter().sum();
        ErlangMixture::new(weights.iter().map(|w| w / total).collect(), theta)?
    };
    Ok(FitResult {
        mixture,
        lambda: last_lambda,
        hessian,
        effective_dim,
        outer_iters: outer_done,
        converged,
        objective_trace: trace,
        diagnostics,
        penalty: bundle,
        options: options.clone(),
        n_obs: summary.n_obs(),
    })
}

type InnerOutcome = (Vec<f64>, f64, ObjectiveValue);

/// Maximize the (penalized) objective over the unconstrained coordinates
/// `(s, t)` with `ω = s²/Σs²`, `θ = t²`, starting from the given iterate.
///
/// Restarts from jittered initials only when the primary start fails to
/// converge, so a call at an optimum returns immediately; the best total
/// across attempted starts wins.
fn inner_optimize(
    summary: &LocalMomentSummary,
    lambda: Option<f64>,
    init: (&[f64], f64),
    options: &FitOptions,
    bundle: &PenaltyBundle,
    diagnostics: &mut FitDiagnostics,
    pass: u64,
) -> Result<InnerOutcome> {
    let n = options.n;
    let make_eval = |summary: &LocalMomentSummary| {
        let scale_by_n = options.scale_by_n;
        let bundle = bundle.clone();
        let summary = summary.clone();
        move |z: &[f64]| -> (f64, Vec<f64>) {
            let (s, t) = (&z[..n], z[n]);
            let norm: f64 = s.iter().map(|v| v * v).sum();
            let theta = t * t;
            if !(norm > 0.0) || !(theta > 0.0) {
                return (f64::INFINITY, vec![0.0; n + 1]);
            }
            let weights: Vec<f64> = s.iter().map(|v| v * v / norm).collect();
            match objective_with_gradient_raw(&weights, theta, lambda, &summary, &bundle, scale_by_n)
            {
                Ok((value, raw)) if value.total.is_finite() => {
                    let grad = chain_to_unconstrained(s, t, &raw);
                    (-value.total, grad.iter().map(|g| -g).collect())
                }
                _ => (f64::INFINITY, vec![0.0; n + 1]),
            }
        }
    };

    let run = |w0: &[f64], th0: f64| -> bfgs::BfgsResult {
        let mut z0: Vec<f64> = w0.iter().map(|w| w.max(0.0).sqrt()).collect();
        z0.push(th0.sqrt());
        bfgs::minimize(make_eval(summary), &z0, 600, 1e-6)
    };

    let mut best: Option<bfgs::BfgsResult> = None;
    let primary = run(init.0, init.1);
    let primary_converged = primary.converged;
    if primary.f.is_finite() {
        best = Some(primary);
    }
    if !primary_converged {
        // jittered restarts; seeds derive from the fit seed and the pass
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ (0x9e37 + pass));
        for _ in 0..2 {
            diagnostics.restarts_used += 1;
            let w_j: Vec<f64> = init
                .0
                .iter()
                .map(|w| w.max(1e-8) * (1.0 + 0.1 * (2.0 * rng.random::<f64>() - 1.0)))
                .collect();
            let total: f64 = w_j.iter().sum();
            let w_j: Vec<f64> = w_j.iter().map(|w| w / total).collect();
            let t_j = init.1 * (1.0 + 0.1 * (2.0 * rng.random::<f64>() - 1.0));
            let attempt = run(&w_j, t_j);
            if attempt.f.is_finite() && best.as_ref().is_none_or(|b| attempt.f < b.f) {
                let stop = attempt.converged;
                best = Some(attempt);
                if stop {
                    break;
                }
            }
        }
    }
    let best = best.ok_or(Error::NonFiniteObjective)?;
    let (s, t) = (&best.x[..n], best.x[n]);
    let norm: f64 = s.iter().map(|v| v * v).sum();
    let weights: Vec<f64> = s.iter().map(|v| v * v / norm).collect();
    let theta = t * t;
    let value = objective_raw(&weights, theta, lambda, summary, bundle, options.scale_by_n)?;
    Ok((weights, theta, value))
}

/// Public wrapper for a single inner maximization at a fixed smoothing
/// level; returns the optimized mixture parameters and the objective there.
pub fn inner_maximize(
    summary: &LocalMomentSummary,
    lambda: f64,
    init_weights: &[f64],
    init_theta: f64,
    options: &FitOptions,
) -> Result<(Vec<f64>, f64, ObjectiveValue)> {
    options.validate()?;
    let bundle = PenaltyBundle::new(options.r, options.n, options.a_lambda, options.b_lambda)?;
    let mut diag = FitDiagnostics::default();
    inner_optimize(
        summary,
        Some(lambda),
        (init_weights, init_theta),
        options,
        &bundle,
        &mut diag,
        0,
    )
}

/// Central finite differences of a gradient field; the workhorse behind
/// the Hessian construction, exposed for direct verification on model
/// objectives.
pub(crate) fn fd_jacobian<G>(mut grad: G, x: &[f64], rel_step: f64) -> DMatrix<f64>
where
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for p in 0..n {
        let h = rel_step * (1.0 + x[p].abs());
        let mut up = x.to_vec();
        up[p] += h;
        let gu = grad(&up);
        let mut down = x.to_vec();
        down[p] -= h;
        let gd = grad(&down);
        for i in 0..n {
            jac[(i, p)] = (gu[i] - gd[i]) / (2.0 * h);
        }
    }
    jac
}

fn hessian_at_raw(
    summary: &LocalMomentSummary,
    weights: &[f64],
    theta: f64,
    options: &FitOptions,
    bundle: &PenaltyBundle,
) -> Result<(HessianBundle, bool)> {
    let n = options.n;
    let mut point = weights.to_vec();
    point.push(theta);
    let grad = |p: &[f64]| -> Vec<f64> {
        objective_with_gradient_raw(
            &p[..n],
            p[n],
            None,
            summary,
            bundle,
            options.scale_by_n,
        )
        .map(|(_, g)| g)
        .unwrap_or_else(|_| vec![f64::NAN; n + 1])
    };
    let jac = fd_jacobian(grad, &point, 1e-5);
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::FitFailed {
            message: "non-finite Hessian entries".into(),
            trace: vec![],
        });
    }
    // H = −∂²ℓ, symmetrized, with a small ridge for conditioning
    let mut h = (&jac + jac.transpose()) * -0.5;
    let mean_diag = (0..=n).map(|i| h[(i, i)].abs()).sum::<f64>() / (n + 1) as f64;
    let eps = options
        .hessian_jitter
        .unwrap_or(1e-8 * if mean_diag > 0.0 { mean_diag } else { 1.0 });
    for i in 0..=n {
        h[(i, i)] += eps;
    }
    match HessianBundle::new(h.clone(), bundle.penalty_matrix()) {
        Ok(bundle_ok) => Ok((bundle_ok, false)),
        Err(Error::SingularHessian) => {
            // mid-algorithm iterates sit at modes of the penalized
            // objective, where the data-only curvature can be indefinite;
            // project onto the nearest comfortably-definite matrix
            let eig = h.symmetric_eigen();
            let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let floor = 1e-8 * if max > 0.0 { max } else { 1.0 };
            let floored = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(floor)));
            let rebuilt = &eig.eigenvectors * floored * eig.eigenvectors.transpose();
            let sym = (&rebuilt + rebuilt.transpose()) * 0.5;
            Ok((HessianBundle::new(sym, bundle.penalty_matrix())?, true))
        }
        Err(other) => Err(other),
    }
}

/// Data-only Hessian `−∂²ℓ(ω, θ)` at a mixture, from central finite
/// differences of the analytic gradient in the original coordinates, with
/// its penalty eigenvalues.
pub fn hessian_at(
    summary: &LocalMomentSummary,
    mix: &ErlangMixture,
    options: &FitOptions,
) -> Result<HessianBundle> {
    options.validate()?;
    if mix.n() != options.n {
        return Err(Error::domain(format!(
            "options built for n={}, mixture has {}",
            options.n,
            mix.n()
        )));
    }
    let bundle = PenaltyBundle::new(options.r, options.n, options.a_lambda, options.b_lambda)?;
    hessian_at_raw(summary, mix.weights(), mix.scale(), options, &bundle).map(|(h, _)| h)
}

// ---------------------------------------------------------------------------
// FitResult JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FitFile {
    theta: f64,
    weights: Vec<f64>,
    lambda: f64,
    effective_dim: f64,
    converged: bool,
    outer_iters: usize,
    diagnostics: FitDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    hessian: Option<Vec<Vec<f64>>>,
}

/// Serialize a fit result; `include_hessian` embeds the dense data-only
/// Hessian row by row.
pub fn fit_to_json(result: &FitResult, include_hessian: bool) -> String {
    let hessian = include_hessian.then(|| {
        (0..result.hessian.h().nrows())
            .map(|i| {
                (0..result.hessian.h().ncols())
                    .map(|j| result.hessian.h()[(i, j)])
                    .collect()
            })
            .collect()
    });
    serde_json::to_string_pretty(&FitFile {
        theta: result.mixture.scale(),
        weights: result.mixture.weights().to_vec(),
        lambda: result.lambda,
        effective_dim: result.effective_dim,
        converged: result.converged,
        outer_iters: result.outer_iters,
        diagnostics: result.diagnostics.clone(),
        hessian,
    })
    .expect("fit serialization cannot fail")
}
