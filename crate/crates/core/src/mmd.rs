//! Maximum mean discrepancy estimators and their gradients.
//!
//! Three estimators are provided over a common kernel mixture:
//!
//! * [`mmd_biased`]: the V-statistic expansion including self-pairs;
//!   always nonnegative up to roundoff.
//! * [`mmd_unbiased_quadratic`]: the U-statistic excluding self-pairs;
//!   may be negative.
//! * [`mmd_linear_streaming`]: the linear-time h-statistic over disjoint
//!   sample quadruples; one pass, O(N) kernel evaluations.
//!
//! Sums are accumulated per row and folded in fixed index order, so values
//! do not depend on the rayon thread count.

use crate::embedding::EmbeddingSet;
use crate::error::CdaError;
use crate::kernel::{sq_dist, KernelSpec};
use crate::Result;
use rayon::prelude::*;

/// Which estimator produced an [`MmdEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Biased,
    UnbiasedQuadratic,
    LinearStreaming,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Estimator::Biased => "biased",
            Estimator::UnbiasedQuadratic => "unbiased_quadratic",
            Estimator::LinearStreaming => "linear_streaming",
        };
        f.write_str(s)
    }
}

/// An MMD statistic together with the kernel that produced it.
#[derive(Debug, Clone)]
pub struct MmdEstimate {
    /// The squared-MMD statistic.
    pub value: f64,
    /// Which estimator was used.
    pub estimator: Estimator,
    /// Kernel mixture the estimate was computed under.
    pub kernel: KernelSpec,
    /// Samples dropped by the linear estimator's truncation to a common
    /// even length; 0 for the other estimators.
    pub truncated_samples: usize,
}

/// Selects which operand a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    A,
    B,
}

fn check_pair(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CdaError::DimMismatch(format!(
            "sets of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(CdaError::Invalid("MMD requires nonempty sets".into()));
    }
    Ok(())
}

fn rows_of(m: &[f64], d: usize, i: usize) -> &[f64] {
    &m[i * d..(i + 1) * d]
}

/// Sum of `k(x_i, y_j)` over all rows of two flat matrices, parallel over
/// `x` rows, folded in fixed order.
fn cross_sum(x: &[f64], y: &[f64], d: usize, spec: &KernelSpec) -> f64 {
    let n = x.len() / d;
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = rows_of(x, d, i);
            y.chunks_exact(d)
                .map(|yj| spec.eval_sq_dist(sq_dist(xi, yj)))
                .sum()
        })
        .collect();
    row_sums.iter().sum()
}

pub(crate) fn biased_flat(a: &[f64], b: &[f64], d: usize, spec: &KernelSpec) -> f64 {
    let m = (a.len() / d) as f64;
    let n = (b.len() / d) as f64;
    let saa = cross_sum(a, a, d, spec);
    let sbb = cross_sum(b, b, d, spec);
    let sab = cross_sum(a, b, d, spec);
    saa / (m * m) + sbb / (n * n) - 2.0 * sab / (m * n)
}

/// Biased V-statistic and its gradients with respect to both sets, in one
/// pass. Gradients are row-major flat matrices shaped like the inputs.
pub(crate) fn biased_with_grads_flat(
    a: &[f64],
    b: &[f64],
    d: usize,
    spec: &KernelSpec,
) -> (f64, Vec<f64>, Vec<f64>) {
    let m = a.len() / d;
    let n = b.len() / d;
    let mf = m as f64;
    let nf = n as f64;

    struct RowOut {
        own_sum: f64,
        cross_sum: f64,
        grad: Vec<f64>,
    }

    let row_pass = |x: &[f64], other: &[f64], nx: f64, ny: f64| -> Vec<RowOut> {
        // own-pair coefficient 2/nx^2, cross coefficient -2/(nx*ny)
        let rows = x.len() / d;
        (0..rows)
            .into_par_iter()
            .map(|p| {
                let xp = rows_of(x, d, p);
                let mut grad = vec![0.0f64; d];
                let mut own = 0.0;
                for xj in x.chunks_exact(d) {
                    let d2 = sq_dist(xp, xj);
                    own += spec.eval_sq_dist(d2);
                    let c = spec.grad_coeff_sq_dist(d2) * 2.0 / (nx * nx);
                    for (g, (&u, &v)) in grad.iter_mut().zip(xp.iter().zip(xj)) {
                        *g += c * (u - v);
                    }
                }
                let mut cross = 0.0;
                for yj in other.chunks_exact(d) {
                    let d2 = sq_dist(xp, yj);
                    cross += spec.eval_sq_dist(d2);
                    let c = spec.grad_coeff_sq_dist(d2) * -2.0 / (nx * ny);
                    for (g, (&u, &v)) in grad.iter_mut().zip(xp.iter().zip(yj)) {
                        *g += c * (u - v);
                    }
                }
                RowOut {
                    own_sum: own,
                    cross_sum: cross,
                    grad,
                }
            })
            .collect()
    };

    let a_rows = row_pass(a, b, mf, nf);
    let b_rows = row_pass(b, a, nf, mf);

    let saa: f64 = a_rows.iter().map(|r| r.own_sum).sum();
    let sab: f64 = a_rows.iter().map(|r| r.cross_sum).sum();
    let sbb: f64 = b_rows.iter().map(|r| r.own_sum).sum();
    let value = saa / (mf * mf) + sbb / (nf * nf) - 2.0 * sab / (mf * nf);

    let mut grad_a = Vec::with_capacity(a.len());
    for r in &a_rows {
        grad_a.extend_from_slice(&r.grad);
    }
    let mut grad_b = Vec::with_capacity(b.len());
    for r in &b_rows {
        grad_b.extend_from_slice(&r.grad);
    }
    (value, grad_a, grad_b)
}

/// Orders a set pair by content (length, then raw value bits) so that the
/// symmetric estimators sum in the same sequence regardless of argument
/// order, making their values bitwise symmetric.
fn content_ordered<'a>(
    a: &'a EmbeddingSet,
    b: &'a EmbeddingSet,
) -> (&'a EmbeddingSet, &'a EmbeddingSet) {
    use std::cmp::Ordering;
    match a.len().cmp(&b.len()) {
        Ordering::Less => return (a, b),
        Ordering::Greater => return (b, a),
        Ordering::Equal => {}
    }
    for (x, y) in a.data().iter().zip(b.data()) {
        match x.to_bits().cmp(&y.to_bits()) {
            Ordering::Less => return (a, b),
            Ordering::Greater => return (b, a),
            Ordering::Equal => {}
        }
    }
    (a, b)
}

/// Biased MMD estimate (Eq. 3 squared-norm expansion): value is
/// nonnegative up to roundoff (>= -1e-12).
pub fn mmd_biased(a: &EmbeddingSet, b: &EmbeddingSet, spec: &KernelSpec) -> Result<MmdEstimate> {
    check_pair(a, b)?;
    let (a, b) = content_ordered(a, b);
    let value = biased_flat(&a.data_f64(), &b.data_f64(), a.dim(), spec);
    Ok(MmdEstimate {
        value,
        estimator: Estimator::Biased,
        kernel: spec.clone(),
        truncated_samples: 0,
    })
}

/// Unbiased quadratic U-statistic (self-pairs excluded); may be negative.
/// Requires at least 2 samples in each set.
pub fn mmd_unbiased_quadratic(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    spec: &KernelSpec,
) -> Result<MmdEstimate> {
    check_pair(a, b)?;
    if a.len() < 2 || b.len() < 2 {
        return Err(CdaError::Invalid(format!(
            "unbiased estimator needs >= 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (a, b) = content_ordered(a, b);
    let (m, n) = (a.len(), b.len());
    let (af, bf) = (a.data_f64(), b.data_f64());
    let d = a.dim();
    // The diagonal of an own-pair sum is exactly the number of rows since
    // every kernel evaluates to 1 at zero distance.
    let saa = cross_sum(&af, &af, d, spec) - m as f64;
    let sbb = cross_sum(&bf, &bf, d, spec) - n as f64;
    let sab = cross_sum(&af, &bf, d, spec);
    let (mf, nf) = (m as f64, n as f64);
    let value = saa / (mf * (mf - 1.0)) + sbb / (nf * (nf - 1.0)) - 2.0 * sab / (mf * nf);
    Ok(MmdEstimate {
        value,
        estimator: Estimator::UnbiasedQuadratic,
        kernel: spec.clone(),
        truncated_samples: 0,
    })
}

/// Linear-time streaming estimator: the mean of
/// `h = k(a,a') + k(b,b') - k(a,b') - k(a',b)` over disjoint consecutive
/// sample quadruples. Inputs are truncated to a common even length (the
/// drop count is recorded on the estimate); needs >= 4 usable samples.
pub fn mmd_linear_streaming(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    spec: &KernelSpec,
) -> Result<MmdEstimate> {
    check_pair(a, b)?;
    let l = a.len().min(b.len()) & !1;
    if l < 4 {
        return Err(CdaError::Invalid(format!(
            "linear estimator needs >= 4 usable samples, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let truncated = (a.len() - l) + (b.len() - l);
    let d = a.dim();
    let (af, bf) = (a.data_f64(), b.data_f64());
    let pairs = l / 2;
    let mut acc = 0.0;
    for i in 0..pairs {
        let a0 = rows_of(&af, d, 2 * i);
        let a1 = rows_of(&af, d, 2 * i + 1);
        let b0 = rows_of(&bf, d, 2 * i);
        let b1 = rows_of(&bf, d, 2 * i + 1);
        acc += spec.eval_sq_dist(sq_dist(a0, a1));
        acc += spec.eval_sq_dist(sq_dist(b0, b1));
        acc -= spec.eval_sq_dist(sq_dist(a0, b1));
        acc -= spec.eval_sq_dist(sq_dist(a1, b0));
    }
    Ok(MmdEstimate {
        value: acc / pairs as f64,
        estimator: Estimator::LinearStreaming,
        kernel: spec.clone(),
        truncated_samples: truncated,
    })
}

/// Analytic gradient of [`mmd_biased`] with respect to every component of
/// the chosen set, as a row-major flat matrix shaped like that set.
pub fn mmd_biased_gradient(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    spec: &KernelSpec,
    wrt: Wrt,
) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let (_, ga, gb) = biased_with_grads_flat(&a.data_f64(), &b.data_f64(), a.dim(), spec);
    Ok(match wrt {
        Wrt::A => ga,
        Wrt::B => gb,
    })
}
