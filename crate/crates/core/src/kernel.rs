//! Gaussian kernel mixtures and bandwidth selection.
//!
//! Throughout the crate the bandwidth `gamma` is a squared-distance scale:
//! `k(x, y) = exp(-||x - y||^2 / gamma)`, and [`median_bandwidth`] returns
//! the median of squared pairwise distances accordingly.

use crate::embedding::EmbeddingSet;
use crate::error::CdaError;
use crate::Result;

/// A convex combination of Gaussian kernels: `sum_u weights[u] *
/// exp(-||x - y||^2 / bandwidths[u])`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelSpec {
    /// Validates and builds a kernel mixture: every bandwidth positive,
    /// every weight nonnegative, weights summing to 1 within 1e-12.
    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(CdaError::Invalid("at least one kernel required".into()));
        }
        if bandwidths.len() != weights.len() {
            return Err(CdaError::Invalid(format!(
                "{} bandwidths but {} weights",
                bandwidths.len(),
                weights.len()
            )));
        }
        if bandwidths.iter().any(|&g| !g.is_finite() || g <= 0.0) {
            return Err(CdaError::Invalid(
                "bandwidths must be positive and finite".into(),
            ));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(CdaError::Invalid(
                "weights must be nonnegative and finite".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CdaError::Invalid(format!(
                "weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(KernelSpec {
            bandwidths,
            weights,
        })
    }

    /// Single-kernel spec with weight 1.
    pub fn single(gamma: f64) -> Result<Self> {
        KernelSpec::new(vec![gamma], vec![1.0])
    }

    /// Number of component kernels.
    pub fn len(&self) -> usize {
        self.bandwidths.len()
    }

    /// True when the spec holds no kernels (never constructible).
    pub fn is_empty(&self) -> bool {
        self.bandwidths.is_empty()
    }

    /// Component bandwidths.
    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Component weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mixture kernel value for a precomputed squared distance.
    pub(crate) fn eval_sq_dist(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(&g, &w)| w * (-d2 / g).exp())
            .sum()
    }

    /// Coefficient `c` such that the gradient of the mixture kernel with
    /// respect to `x` is `c * (x - y)`, for a precomputed squared distance.
    pub(crate) fn grad_coeff_sq_dist(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(&g, &w)| w * (-2.0 / g) * (-d2 / g).exp())
            .sum()
    }
}

pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(CdaError::DimMismatch(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Single Gaussian kernel `exp(-||x - y||^2 / gamma)`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    check_dims(x, y)?;
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(CdaError::Invalid(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok((-sq_dist(x, y) / gamma).exp())
}

/// Mixture kernel value `sum_u beta_u * exp(-||x - y||^2 / gamma_u)`.
pub fn multi_kernel(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_dims(x, y)?;
    Ok(spec.eval_sq_dist(sq_dist(x, y)))
}

/// Median of squared pairwise distances over the pooled samples of two
/// sets, self-pairs excluded.
///
/// An even pair count takes the mean of the two central order statistics.
/// A zero median (duplicate-heavy data) falls back to the smallest positive
/// squared distance, and 1.0 when all points coincide.
pub fn median_bandwidth(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CdaError::DimMismatch(format!(
            "sets of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let rows: Vec<Vec<f64>> = a
        .rows()
        .chain(b.rows())
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let n = rows.len();
    if n < 2 {
        return Err(CdaError::Invalid(format!(
            "need at least 2 pooled samples, got {n}"
        )));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_dist(&rows[i], &rows[j]));
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let k = dists.len();
    let median = if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    };
    if median > 0.0 {
        return Ok(median);
    }
    match dists.iter().find(|&&d| d > 0.0) {
        Some(&d) => Ok(d),
        None => Ok(1.0),
    }
}

/// Geometric ladder of `m` kernels: bandwidths `gamma_m * 2^j` for
/// `j = 0..m-1`, uniform weights `1/m`.
pub fn bandwidth_ladder(gamma_m: f64, m: usize) -> Result<KernelSpec> {
    if !gamma_m.is_finite() || gamma_m <= 0.0 {
        return Err(CdaError::Invalid(format!(
            "gamma_m must be positive and finite, got {gamma_m}"
        )));
    }
    if m == 0 {
        return Err(CdaError::Invalid("m must be at least 1".into()));
    }
    let bandwidths = (0..m).map(|j| gamma_m * f64::powi(2.0, j as i32)).collect();
    let weights = vec![1.0 / m as f64; m];
    KernelSpec::new(bandwidths, weights)
}
