//! Local-moment summaries: the binned proportions and per-bin scaled moments
//! that are the only data the estimator ever sees.
//!
//! A summary over a partition `b_0 < b_1 < … < b_J` (last edge possibly
//! `+∞`) records, for a sample of size `N`,
//!
//! * `pi_hat[j]  = N⁻¹ · #{X_i ∈ [b_j, b_{j+1})}` and
//! * `mu_hat[j][k-1] = N⁻¹ · Σ X_iᵏ · 1{X_i ∈ [b_j, b_{j+1})}` for
//!   `k = 1..=k_j`,
//!
//! where each bin may expose a different number of moments `k_j ≥ 0`. The
//! divide-by-`N` convention makes the entries additive across bins: summing
//! `mu_hat[·][k-1]` over all bins recovers the unbinned sample moment.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Tolerance used when validating that proportions sum to one.
const PI_SUM_TOL: f64 = 1e-9;

/// An ordered partition of `[b_0, b_J)` into half-open bins.
///
/// Edges are strictly increasing, the first edge is nonnegative, and only
/// the last edge may be `+∞`. A point equal to the last finite edge of an
/// unbounded partition belongs to the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinPartition {
    edges: Vec<f64>,
}

impl BinPartition {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidPartition(
                "need at least two edges (one bin)".into(),
            ));
        }
        if edges.iter().any(|e| e.is_nan()) {
            return Err(Error::InvalidPartition("NaN edge".into()));
        }
        if edges[0] < 0.0 {
            return Err(Error::InvalidPartition(format!(
                "first edge must be >= 0, got {}",
                edges[0]
            )));
        }
        for w in edges.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidPartition(format!(
                    "edges not strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let last = edges.len() - 1;
        if edges[..last].iter().any(|e| e.is_infinite()) {
            return Err(Error::InvalidPartition(
                "only the last edge may be infinite".into(),
            ));
        }
        Ok(BinPartition { edges })
    }

    /// Edges at the empirical quantiles of a sample.
    ///
    /// `levels` must increase strictly from 0 to 1. Level 0 maps to the
    /// support origin 0 and level 1 to `+∞` (an unbounded last bin);
    /// interior levels use the interpolating empirical quantile.
    pub fn from_sample_quantiles(sample: &[f64], levels: &[f64]) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::InvalidPartition("empty sample".into()));
        }
        if levels.len() < 2 || levels[0] != 0.0 || *levels.last().unwrap() != 1.0 {
            return Err(Error::InvalidPartition(
                "levels must run from 0 to 1".into(),
            ));
        }
        for w in levels.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidPartition(
                    "levels not strictly increasing".into(),
                ));
            }
        }
        let mut sorted = sample.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in sample"));
        let mut edges = vec![0.0];
        for &p in &levels[1..levels.len() - 1] {
            edges.push(empirical_quantile(&sorted, p));
        }
        edges.push(f64::INFINITY);
        BinPartition::new(edges)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Number of bins `J`.
    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn lower(&self, j: usize) -> f64 {
        self.edges[j]
    }

    pub fn upper(&self, j: usize) -> f64 {
        self.edges[j + 1]
    }

    pub fn is_unbounded(&self) -> bool {
        self.edges.last().unwrap().is_infinite()
    }

    /// Largest finite edge.
    pub fn last_finite_edge(&self) -> f64 {
        self.edges
            .iter()
            .rev()
            .find(|e| e.is_finite())
            .copied()
            .unwrap()
    }

    /// Bin index containing `x`, or `None` when `x` falls outside
    /// `[b_0, b_J)`.
    pub fn locate(&self, x: f64) -> Option<usize> {
        if x.is_nan() || x < self.edges[0] || x >= *self.edges.last().unwrap() {
            return None;
        }
        // partition_point: first edge strictly greater than x.
        let idx = self.edges.partition_point(|&e| e <= x);
        Some(idx - 1)
    }
}

/// Interpolating (type-7) empirical quantile of an already-sorted sample.
pub(crate) fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Binned proportions and scaled moments for a sample of known size.
///
/// Immutable after construction; all operations on summaries are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMomentSummary {
    partition: BinPartition,
    n_obs: u64,
    pi_hat: Vec<f64>,
    mu_hat: Vec<Vec<f64>>,
}

impl LocalMomentSummary {
    /// Validating constructor. Proportions must sum to one; moment lists
    /// may have any per-bin length (including empty, `k_j = 0`).
    pub fn new(
        partition: BinPartition,
        n_obs: u64,
        pi_hat: Vec<f64>,
        mu_hat: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let s = Self::new_unnormalized(partition, n_obs, pi_hat, mu_hat)?;
        let total: f64 = s.pi_hat.iter().sum();
        if (total - 1.0).abs() > PI_SUM_TOL {
            return Err(Error::InvalidSummary(format!(
                "proportions sum to {total}, expected 1"
            )));
        }
        Ok(s)
    }

    /// Constructor without the sum-to-one check, for partial summaries that
    /// cover only part of the support (e.g. the attritional block below a
    /// value-at-risk threshold, see [`from_var_tvar`]).
    pub fn new_unnormalized(
        partition: BinPartition,
        n_obs: u64,
        pi_hat: Vec<f64>,
        mu_hat: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let j = partition.n_bins();
        if n_obs == 0 {
            return Err(Error::InvalidSummary("n_obs must be positive".into()));
        }
        if pi_hat.len() != j || mu_hat.len() != j {
            return Err(Error::InvalidSummary(format!(
                "expected {j} bins, got {} proportions and {} moment lists",
                pi_hat.len(),
                mu_hat.len()
            )));
        }
        for (idx, &p) in pi_hat.iter().enumerate() {
            if !(0.0..=1.0 + PI_SUM_TOL).contains(&p) || p.is_nan() {
                return Err(Error::InvalidSummary(format!(
                    "bin {idx}: proportion {p} not in [0, 1]"
                )));
            }
        }
        for (idx, moments) in mu_hat.iter().enumerate() {
            for (k, &m) in moments.iter().enumerate() {
                if !(m >= 0.0) || !m.is_finite() {
                    return Err(Error::InvalidSummary(format!(
                        "bin {idx}: moment of order {} is {m}, must be finite and >= 0",
                        k + 1
                    )));
                }
            }
        }
        Ok(LocalMomentSummary {
            partition,
            n_obs,
            pi_hat,
            mu_hat,
        })
    }

    /// Build from integer bin counts; proportions become `count / n_obs`.
    pub fn from_counts(
        partition: BinPartition,
        counts: &[u64],
        mu_hat: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_obs: u64 = counts.iter().sum();
        let pi_hat = counts.iter().map(|&c| c as f64 / n_obs as f64).collect();
        Self::new(partition, n_obs, pi_hat, mu_hat)
    }

    pub fn partition(&self) -> &BinPartition {
        &self.partition
    }

    pub fn n_obs(&self) -> u64 {
        self.n_obs
    }

    pub fn pi_hat(&self) -> &[f64] {
        &self.pi_hat
    }

    pub fn mu_hat(&self) -> &[Vec<f64>] {
        &self.mu_hat
    }

    /// Per-bin moment counts `k_j`.
    pub fn moment_counts(&self) -> Vec<usize> {
        self.mu_hat.iter().map(|m| m.len()).collect()
    }

    pub fn n_bins(&self) -> usize {
        self.partition.n_bins()
    }
}

/// Summarize a raw sample into binned proportions and scaled moments.
///
/// Every sample point must fall inside the partition; the first point that
/// does not is reported in the error.
pub fn summarize_sample(
    sample: &[f64],
    partition: &BinPartition,
    k: &[usize],
) -> Result<LocalMomentSummary> {
    if sample.is_empty() {
        return Err(Error::InvalidSummary("empty sample".into()));
    }
    let j = partition.n_bins();
    if k.len() != j {
        return Err(Error::InvalidSummary(format!(
            "expected {j} moment counts, got {}",
            k.len()
        )));
    }
    let n = sample.len() as f64;
    let mut counts = vec![0u64; j];
    let mut sums: Vec<Vec<f64>> = k.iter().map(|&kj| vec![0.0; kj]).collect();
    for &x in sample {
        let bin = partition.locate(x).ok_or(Error::SampleOutOfRange {
            value: x,
            lower: partition.edges()[0],
            upper: *partition.edges().last().unwrap(),
        })?;
        counts[bin] += 1;
        let mut power = 1.0;
        for slot in sums[bin].iter_mut() {
            power *= x;
            *slot += power;
        }
    }
    let pi_hat = counts.iter().map(|&c| c as f64 / n).collect();
    let mu_hat = sums
        .into_iter()
        .map(|bin| bin.into_iter().map(|s| s / n).collect())
        .collect();
    LocalMomentSummary::new(partition.clone(), sample.len() as u64, pi_hat, mu_hat)
}

/// Extend a summary of the body of a distribution with a tail bin encoding
/// value-at-risk and tail-value-at-risk information.
///
/// The appended bin is `[var_value, ∞)` with proportion `1 − var_level`,
/// one moment, and `μ = (1 − var_level)·tvar_value` (the scaled first
/// moment of the tail). The core block — which may be normalized on its own
/// or already carry the global scaling — is rescaled so that its
/// proportions sum to `var_level`; its moments are rescaled by the same
/// factor to keep the divide-by-`N` convention coherent. If `var_value`
/// lies beyond the core's last edge, the last core bin is extended up to
/// `var_value` (the core is assumed to describe everything below the
/// threshold).
pub fn from_var_tvar(
    core: &LocalMomentSummary,
    var_level: f64,
    var_value: f64,
    tvar_value: f64,
    n_obs: u64,
) -> Result<LocalMomentSummary> {
    if !(0.0 < var_level && var_level < 1.0) {
        return Err(Error::domain(format!(
            "var_level must be in (0, 1), got {var_level}"
        )));
    }
    if 1.0 - var_level == 0.0 {
        return Err(Error::domain(
            "var_level too close to 1: tail bin would be empty",
        ));
    }
    if tvar_value < var_value {
        return Err(Error::domain(format!(
            "tvar {tvar_value} must dominate var {var_value}"
        )));
    }
    if core.partition().is_unbounded() {
        return Err(Error::domain(
            "core summary must cover a bounded range below the VaR",
        ));
    }
    let last_edge = core.partition().last_finite_edge();
    if var_value < last_edge {
        return Err(Error::domain(format!(
            "var_value {var_value} below the core's last edge {last_edge}"
        )));
    }
    let mut edges = core.partition().edges().to_vec();
    *edges.last_mut().unwrap() = var_value;
    edges.push(f64::INFINITY);
    let partition = BinPartition::new(edges)?;

    let core_total: f64 = core.pi_hat().iter().sum();
    if core_total <= 0.0 {
        return Err(Error::domain("core summary carries no mass"));
    }
    let factor = var_level / core_total;
    let mut pi_hat: Vec<f64> = core.pi_hat().iter().map(|p| p * factor).collect();
    let mut mu_hat: Vec<Vec<f64>> = core
        .mu_hat()
        .iter()
        .map(|bin| bin.iter().map(|m| m * factor).collect())
        .collect();
    pi_hat.push(1.0 - var_level);
    mu_hat.push(vec![(1.0 - var_level) * tvar_value]);
    LocalMomentSummary::new(partition, n_obs, pi_hat, mu_hat)
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SummaryFile {
    n_obs: u64,
    bins: Vec<BinFile>,
}

#[derive(Serialize, Deserialize)]
struct BinFile {
    lower: f64,
    upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    count: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pi: Option<f64>,
    moments: Vec<f64>,
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::InvalidFile {
        path: path.into(),
        message: message.into(),
    }
}

/// Parse a summary from its JSON text.
///
/// The schema is one object: `{ "n_obs": int, "bins": [ { "lower": number,
/// "upper": number|null, "count": int (or "pi": number), "moments":
/// [number, ...] }, ... ] }`. `"upper": null` encodes `+∞` and is legal
/// only on the last bin. Moments are stored in the scaled, divide-by-`N`
/// convention.
pub fn summary_from_json(text: &str) -> Result<LocalMomentSummary> {
    let file: SummaryFile = serde_json::from_str(text)?;
    if file.bins.is_empty() {
        return Err(invalid("bins", "at least one bin required"));
    }
    let last = file.bins.len() - 1;
    let mut edges = Vec::with_capacity(file.bins.len() + 1);
    edges.push(file.bins[0].lower);
    for (i, bin) in file.bins.iter().enumerate() {
        let path = format!("bins[{i}]");
        if i > 0 && bin.lower != edges[i] {
            return Err(invalid(
                format!("{path}.lower"),
                format!(
                    "bin lower {} does not meet previous upper {}",
                    bin.lower, edges[i]
                ),
            ));
        }
        match bin.upper {
            Some(u) => {
                if !(u > bin.lower) {
                    return Err(invalid(
                        format!("{path}.upper"),
                        format!("upper {} must exceed lower {}", u, bin.lower),
                    ));
                }
                edges.push(u);
            }
            None => {
                if i != last {
                    return Err(invalid(
                        format!("{path}.upper"),
                        "null (infinite) upper edge only legal on the last bin",
                    ));
                }
                edges.push(f64::INFINITY);
            }
        }
        if bin.count.is_none() && bin.pi.is_none() {
            return Err(invalid(path, "each bin needs either 'count' or 'pi'"));
        }
        if let (Some(c), Some(p)) = (bin.count, bin.pi) {
            if (c as f64 - p * file.n_obs as f64).abs() > 1e-6 * file.n_obs as f64 {
                return Err(invalid(
                    path,
                    format!("count {c} inconsistent with pi {p} at n_obs {}", file.n_obs),
                ));
            }
        }
        for (k, &m) in bin.moments.iter().enumerate() {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(invalid(
                    format!("{path}.moments[{k}]"),
                    format!("moment {m} must be finite and >= 0"),
                ));
            }
        }
    }
    let partition =
        BinPartition::new(edges).map_err(|e| invalid("bins", e.to_string()))?;
    let n = file.n_obs as f64;
    let pi_hat: Vec<f64> = file
        .bins
        .iter()
        .map(|b| match b.count {
            Some(c) => c as f64 / n,
            None => b.pi.unwrap(),
        })
        .collect();
    let total: f64 = pi_hat.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(invalid("bins", format!("proportions sum to {total}")));
    }
    let mu_hat = file.bins.into_iter().map(|b| b.moments).collect();
    LocalMomentSummary::new_unnormalized(partition, file.n_obs, pi_hat, mu_hat)
}

/// Serialize a summary to JSON text. Counts are emitted when `n_obs·π̂_j`
/// is integral (the common case for summaries built from raw samples);
/// otherwise the proportion is stored directly.
pub fn summary_to_json(summary: &LocalMomentSummary) -> String {
    let n = summary.n_obs() as f64;
    let bins: Vec<BinFile> = (0..summary.n_bins())
        .map(|j| {
            let pi = summary.pi_hat()[j];
            let scaled = pi * n;
            let count = if (scaled - scaled.round()).abs() < 1e-9 {
                Some(scaled.round() as u64)
            } else {
                None
            };
            BinFile {
                lower: summary.partition().lower(j),
                upper: {
                    let u = summary.partition().upper(j);
                    u.is_finite().then_some(u)
                },
                count,
                pi: count.is_none().then_some(pi),
                moments: summary.mu_hat()[j].clone(),
            }
        })
        .collect();
    serde_json::to_string_pretty(&SummaryFile {
        n_obs: summary.n_obs(),
        bins,
    })
    .expect("summary serialization cannot fail")
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<LocalMomentSummary> {
    let text = std::fs::read_to_string(path)?;
    summary_from_json(&text)
}

pub fn write_summary(summary: &LocalMomentSummary, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, summary_to_json(summary))?;
    Ok(())
}
