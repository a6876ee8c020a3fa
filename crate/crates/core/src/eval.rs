//! Biometric verification and identification metrics.
//!
//! All thresholds are exact empirical order statistics with strict `>`
//! comparisons; nothing is interpolated, so every rate is reproducible to
//! the bit. Scores are cosine similarities throughout.

use crate::embedding::EmbeddingSet;
use crate::error::CdaError;
use crate::Result;

/// Genuine (same identity) and impostor (different identity) similarity
/// scores.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    fn validate(&self) -> Result<()> {
        if self
            .genuine
            .iter()
            .chain(&self.impostor)
            .any(|v| !v.is_finite())
        {
            return Err(CdaError::Invalid("scores must be finite".into()));
        }
        Ok(())
    }
}

/// Aggregated metric report.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    /// `(far, tar)` pairs swept over every distinct impostor threshold,
    /// sorted by increasing far.
    pub roc_points: Vec<(f64, f64)>,
    /// Requested FAR targets mapped to achieved TAR.
    pub tar_at_far: Vec<(f64, f64)>,
    /// Requested ranks mapped to identification rates.
    pub cmc: Vec<(usize, f64)>,
    /// Requested FPIR targets mapped to achieved TPIR.
    pub tpir_at_fpir: Vec<(f64, f64)>,
    /// Free-form remarks (protocol notes, degenerate cases).
    pub notes: Vec<String>,
}

impl EvalReport {
    /// One metric per line: `metric<TAB>operating_point<TAB>value`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (far, tar) in &self.tar_at_far {
            out.push_str(&format!("tar_at_far\t{far}\t{tar}\n"));
        }
        for (rank, rate) in &self.cmc {
            out.push_str(&format!("cmc\trank_{rank}\t{rate}\n"));
        }
        for (fpir, tpir) in &self.tpir_at_fpir {
            out.push_str(&format!("tpir_at_fpir\t{fpir}\t{tpir}\n"));
        }
        for note in &self.notes {
            out.push_str(&format!("note\t-\t{note}\n"));
        }
        out
    }

    /// ROC points as `far,tar` CSV.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("far,tar\n");
        for (far, tar) in &self.roc_points {
            out.push_str(&format!("{far},{tar}\n"));
        }
        out
    }

    /// CMC points as `rank,rate` CSV.
    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("rank,rate\n");
        for (rank, rate) in &self.cmc {
            out.push_str(&format!("{rank},{rate}\n"));
        }
        out
    }
}

fn cosine_f64(a: &[f32], b: &[f32]) -> Result<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(CdaError::Invalid("zero-norm vector in pair".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Scores explicit `(probe_index, gallery_index, same_identity)` pairs.
pub fn pair_scores(
    probe: &EmbeddingSet,
    gallery: &EmbeddingSet,
    pairs: &[(usize, usize, bool)],
) -> Result<ScoreSet> {
    if probe.dim() != gallery.dim() {
        return Err(CdaError::DimMismatch(format!(
            "probe dimension {} vs gallery dimension {}",
            probe.dim(),
            gallery.dim()
        )));
    }
    let mut scores = ScoreSet::default();
    for &(i, j, same) in pairs {
        if i >= probe.len() || j >= gallery.len() {
            return Err(CdaError::Invalid(format!(
                "pair ({i}, {j}) out of range for {} probes and {} gallery items",
                probe.len(),
                gallery.len()
            )));
        }
        let s = cosine_f64(probe.row(i), gallery.row(j))?;
        if same {
            scores.genuine.push(s);
        } else {
            scores.impostor.push(s);
        }
    }
    Ok(scores)
}

/// All-pairs verification scores within one labeled set: every unordered
/// pair `(i, j)`, genuine iff labels match. Unlabeled samples (sentinel
/// label) are excluded.
pub fn verification_scores(set: &EmbeddingSet) -> Result<ScoreSet> {
    let labels = set
        .labels()
        .ok_or_else(|| CdaError::Invalid("verification requires labels".into()))?;
    let mut scores = ScoreSet::default();
    for i in 0..set.len() {
        if labels[i] < 0 {
            continue;
        }
        for j in (i + 1)..set.len() {
            if labels[j] < 0 {
                continue;
            }
            let s = cosine_f64(set.row(i), set.row(j))?;
            if labels[i] == labels[j] {
                scores.genuine.push(s);
            } else {
                scores.impostor.push(s);
            }
        }
    }
    Ok(scores)
}

/// Threshold for a FAR target: the smallest impostor order statistic such
/// that the fraction of impostors strictly above it does not exceed the
/// target.
fn far_threshold(sorted_impostor: &[f64], far_target: f64) -> f64 {
    let n = sorted_impostor.len();
    // count strictly above sorted_impostor[k] = n - upper_bound(value at k)
    let mut lo = 0usize;
    let mut hi = n - 1;
    let frac_above = |k: usize| {
        let v = sorted_impostor[k];
        let above = n - sorted_impostor.partition_point(|&x| x <= v);
        above as f64 / n as f64
    };
    // frac_above is non-increasing in k; binary search the first k meeting
    // the target
    while lo < hi {
        let mid = (lo + hi) / 2;
        if frac_above(mid) <= far_target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    sorted_impostor[lo]
}

fn frac_above(scores: &[f64], t: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s > t).count() as f64 / scores.len() as f64
}

/// TAR at each requested FAR target, by exact empirical order statistics.
pub fn tar_at_far(scores: &ScoreSet, far_targets: &[f64]) -> Result<Vec<(f64, f64)>> {
    scores.validate()?;
    if scores.impostor.is_empty() || scores.genuine.is_empty() {
        return Err(CdaError::Invalid(
            "tar_at_far needs at least one genuine and one impostor score".into(),
        ));
    }
    for &t in far_targets {
        if !(t > 0.0 && t < 1.0) {
            return Err(CdaError::Invalid(format!(
                "FAR target must lie in (0, 1), got {t}"
            )));
        }
    }
    let mut sorted = scores.impostor.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(far_targets
        .iter()
        .map(|&target| {
            let t = far_threshold(&sorted, target);
            (target, frac_above(&scores.genuine, t))
        })
        .collect())
}

/// Full ROC: `(far, tar)` at every distinct impostor-score threshold,
/// plus the all-reject point, sorted by increasing far.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    scores.validate()?;
    if scores.impostor.is_empty() || scores.genuine.is_empty() {
        return Err(CdaError::Invalid(
            "roc needs at least one genuine and one impostor score".into(),
        ));
    }
    let mut thresholds = scores.impostor.clone();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut pts: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            (
                frac_above(&scores.impostor, t),
                frac_above(&scores.genuine, t),
            )
        })
        .collect();
    pts.push((
        frac_above(&scores.impostor, f64::INFINITY),
        frac_above(&scores.genuine, f64::INFINITY),
    ));
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    Ok(pts)
}

/// For each probe row: gallery indices sorted by descending score, ties
/// broken by smaller gallery index.
fn ranked_gallery(probe_row: &[f32], gallery: &EmbeddingSet) -> Result<Vec<usize>> {
    let mut scored: Vec<(usize, f64)> = (0..gallery.len())
        .map(|j| cosine_f64(probe_row, gallery.row(j)).map(|s| (j, s)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(j, _)| j).collect())
}

/// Cumulative match characteristic: rank-k identification rates for the
/// requested ranks. Every probe label must appear in the gallery.
pub fn cmc(
    probe: &EmbeddingSet,
    gallery: &EmbeddingSet,
    ranks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let plabels = probe
        .labels()
        .ok_or_else(|| CdaError::Invalid("cmc requires probe labels".into()))?;
    let glabels = gallery
        .labels()
        .ok_or_else(|| CdaError::Invalid("cmc requires gallery labels".into()))?;
    if probe.is_empty() {
        return Err(CdaError::Invalid("cmc requires at least one probe".into()));
    }
    if ranks.contains(&0) {
        return Err(CdaError::Invalid("ranks must be positive".into()));
    }
    for (i, &l) in plabels.iter().enumerate() {
        if !glabels.contains(&l) {
            return Err(CdaError::Invalid(format!(
                "probe {i} has label {l} absent from the gallery"
            )));
        }
    }
    // first_hit[i] = 1-based rank of the first same-label gallery item
    let mut first_hit = Vec::with_capacity(probe.len());
    for (i, &label) in plabels.iter().enumerate() {
        let order = ranked_gallery(probe.row(i), gallery)?;
        let hit = order
            .iter()
            .position(|&j| glabels[j] == label)
            .expect("label presence checked above");
        first_hit.push(hit + 1);
    }
    Ok(ranks
        .iter()
        .map(|&r| {
            let hits = first_hit.iter().filter(|&&h| h <= r).count();
            (r, hits as f64 / probe.len() as f64)
        })
        .collect())
}

/// Open-set identification: TPIR at each requested FPIR.
///
/// Probes whose label is absent from the gallery are the unenrolled set;
/// their top-1 scores provide the threshold order statistics. A probe
/// identifies when its top-1 score strictly exceeds the threshold and the
/// top-1 gallery item shares its label.
pub fn tpir_at_fpir(
    probe: &EmbeddingSet,
    gallery: &EmbeddingSet,
    fpir_targets: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let plabels = probe
        .labels()
        .ok_or_else(|| CdaError::Invalid("tpir_at_fpir requires probe labels".into()))?;
    let glabels = gallery
        .labels()
        .ok_or_else(|| CdaError::Invalid("tpir_at_fpir requires gallery labels".into()))?;
    for &t in fpir_targets {
        if !(t > 0.0 && t < 1.0) {
            return Err(CdaError::Invalid(format!(
                "FPIR target must lie in (0, 1), got {t}"
            )));
        }
    }
    let mut unenrolled_top1 = Vec::new();
    let mut enrolled = Vec::new(); // (top1_score, top1_correct)
    for (i, &label) in plabels.iter().enumerate() {
        let order = ranked_gallery(probe.row(i), gallery)?;
        let top = order[0];
        let score = cosine_f64(probe.row(i), gallery.row(top))?;
        if glabels.contains(&label) {
            enrolled.push((score, glabels[top] == label));
        } else {
            unenrolled_top1.push(score);
        }
    }
    if unenrolled_top1.is_empty() {
        return Err(CdaError::Invalid(
            "open-set protocol requires unenrolled probes".into(),
        ));
    }
    if enrolled.is_empty() {
        return Err(CdaError::Invalid(
            "open-set protocol requires enrolled probes".into(),
        ));
    }
    unenrolled_top1.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(fpir_targets
        .iter()
        .map(|&target| {
            let t = far_threshold(&unenrolled_top1, target);
            let tp = enrolled
                .iter()
                .filter(|&&(s, correct)| s > t && correct)
                .count();
            (target, tp as f64 / enrolled.len() as f64)
        })
        .collect())
}

/// Jacobi eigensolver for a symmetric matrix (row-major `n` x `n`).
/// Returns eigenvalues (descending) with their eigenvectors as rows.
fn jacobi_symmetric(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigenvectors = vec![0.0f64; n * n];
    for (row, &i) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors[row * n + k] = v[k * n + i];
        }
    }
    (eigenvalues, eigenvectors)
}

/// Top-2 principal components of mean-centered data as an `N` x 2
/// row-major matrix.
///
/// Axis signs follow a fixed convention: the largest-magnitude component
/// of each eigenvector is made positive. Rank-deficient data (second
/// eigenvalue vanishing relative to the first) yields a zero second axis.
pub fn export_projection(set: &EmbeddingSet) -> Result<Vec<f64>> {
    let n = set.len();
    if n < 2 {
        return Err(CdaError::Invalid(
            "projection needs at least 2 samples".into(),
        ));
    }
    let d = set.dim();
    let mut mean = vec![0.0f64; d];
    for row in set.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += f64::from(v);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<f64> = set
        .rows()
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(&v, m)| f64::from(v) - m)
                .collect::<Vec<_>>()
        })
        .collect();
    let mut cov = vec![0.0f64; d * d];
    for row in centered.chunks_exact(d) {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let val = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = val;
            cov[j * d + i] = val;
        }
    }
    let (eigenvalues, eigenvectors) = jacobi_symmetric(cov, d);

    let mut axes = [vec![0.0f64; d], vec![0.0f64; d]];
    axes[0].copy_from_slice(&eigenvectors[0..d]);
    let rank_deficient = d < 2
        || eigenvalues.get(1).copied().unwrap_or(0.0)
            <= 1e-12 * eigenvalues[0].max(f64::MIN_POSITIVE);
    if !rank_deficient {
        axes[1].copy_from_slice(&eigenvectors[d..2 * d]);
    }
    for axis in &mut axes {
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if axis[lead] < 0.0 {
            for x in axis.iter_mut() {
                *x = -*x;
            }
        }
    }

    let mut out = Vec::with_capacity(n * 2);
    for row in centered.chunks_exact(d) {
        for axis in &axes {
            out.push(row.iter().zip(axis).map(|(x, a)| x * a).sum());
        }
    }
    Ok(out)
}
