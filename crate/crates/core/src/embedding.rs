//! Embedding datasets and synthetic two-domain generation.

use crate::error::CdaError;
use crate::rng::stage_rng;
use crate::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Label value marking an unlabeled sample in label files.
pub const UNLABELED: i64 = -1;

/// A dense set of `N` feature vectors of dimension `dim`, with optional
/// integer labels (`>= 0` is a class id, [`UNLABELED`] marks no label).
///
/// Vectors are stored as `f32` row-major, matching the binary interchange
/// format exactly; numeric routines promote to `f64` at the point of use.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f32>,
    labels: Option<Vec<i64>>,
}

impl EmbeddingSet {
    /// Creates an empty set of the given dimension.
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CdaError::Invalid("dimension must be positive".into()));
        }
        Ok(EmbeddingSet {
            dim,
            data: Vec::new(),
            labels: None,
        })
    }

    /// Builds a set from row-major data. Every value must be finite and
    /// `data.len()` must be a multiple of `dim`.
    pub fn from_rows(dim: usize, data: Vec<f32>, labels: Option<Vec<i64>>) -> Result<Self> {
        if dim == 0 {
            return Err(CdaError::Invalid("dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(CdaError::Invalid(format!(
                "data length {} is not a multiple of dim {}",
                data.len(),
                dim
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(CdaError::Invalid(format!(
                "non-finite value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        let n = data.len() / dim;
        if let Some(ref l) = labels {
            if l.len() != n {
                return Err(CdaError::Invalid(format!(
                    "label count {} does not match sample count {}",
                    l.len(),
                    n
                )));
            }
        }
        Ok(EmbeddingSet { dim, data, labels })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    /// True when the set holds no samples.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Feature dimension `D`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row `i` as a slice of length `dim`.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// All rows, row-major.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Iterator over rows.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Labels, when present.
    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    /// Attaches labels (length must equal `len()`); `None` detaches.
    pub fn set_labels(&mut self, labels: Option<Vec<i64>>) -> Result<()> {
        if let Some(ref l) = labels {
            if l.len() != self.len() {
                return Err(CdaError::Invalid(format!(
                    "label count {} does not match sample count {}",
                    l.len(),
                    self.len()
                )));
            }
        }
        self.labels = labels;
        Ok(())
    }

    /// Returns a copy of this set without labels.
    pub fn without_labels(&self) -> EmbeddingSet {
        EmbeddingSet {
            dim: self.dim,
            data: self.data.clone(),
            labels: None,
        }
    }

    /// Appends one row (and optionally a label, required iff the set is
    /// labeled or empty-with-label).
    pub fn push_row(&mut self, row: &[f32], label: Option<i64>) -> Result<()> {
        if row.len() != self.dim {
            return Err(CdaError::DimMismatch(format!(
                "row has {} components, set dimension is {}",
                row.len(),
                self.dim
            )));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(CdaError::Invalid(format!("non-finite value {v}")));
        }
        match (&mut self.labels, label) {
            (Some(l), Some(lab)) => {
                self.data.extend_from_slice(row);
                l.push(lab);
            }
            (None, Some(lab)) if self.data.is_empty() => {
                self.data.extend_from_slice(row);
                self.labels = Some(vec![lab]);
            }
            (None, None) => self.data.extend_from_slice(row),
            (Some(_), None) => {
                return Err(CdaError::Invalid(
                    "labeled set requires a label for every row".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(CdaError::Invalid(
                    "cannot add a labeled row to an unlabeled set".into(),
                ))
            }
        }
        Ok(())
    }

    /// Row `i` widened to `f64`.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Entire matrix widened to `f64`, row-major.
    pub fn data_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Configuration for [`synthesize_domain_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Number of classes (identities); at least 2.
    pub num_classes: usize,
    /// Samples generated per class in each domain.
    pub samples_per_class: usize,
    /// Feature dimension.
    pub dim: usize,
    /// Within-class standard deviation around the class mean.
    pub class_spread: f64,
    /// Norm of the global offset added to every target sample.
    pub shift_vector_scale: f64,
    /// Standard deviation of the per-sample magnitude noise applied along
    /// the shift direction.
    pub shift_noise: f64,
    /// Seed controlling every random draw.
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CdaError::Invalid("num_classes must be at least 2".into()));
        }
        if self.samples_per_class == 0 || self.dim == 0 {
            return Err(CdaError::Invalid(
                "samples_per_class and dim must be positive".into(),
            ));
        }
        for (name, v) in [
            ("class_spread", self.class_spread),
            ("shift_vector_scale", self.shift_vector_scale),
            ("shift_noise", self.shift_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CdaError::Invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if self.class_spread <= 0.0 {
            return Err(CdaError::Invalid("class_spread must be positive".into()));
        }
        Ok(())
    }
}

fn unit_normal_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

/// Draws `k` class means. When the dimension allows (`d >= k`) the raw
/// Gaussian draws are orthonormalized with Gram-Schmidt so classes are
/// mutually orthogonal unit vectors; otherwise each draw is normalized
/// independently.
fn class_means(rng: &mut impl Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    if d < k {
        for v in &mut means {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in v.iter_mut() {
                    *x /= norm;
                }
            } else {
                v[0] = 1.0;
            }
        }
        return means;
    }
    for i in 0..k {
        let mut v = means[i].clone();
        for prev in means.iter().take(i) {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vc, mc) in v.iter_mut().zip(prev) {
                *vc -= dot * mc;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for x in &mut v {
                *x /= norm;
            }
        } else {
            for (c, x) in v.iter_mut().enumerate() {
                *x = if c == i % d { 1.0 } else { 0.0 };
            }
        }
        means[i] = v;
    }
    means
}

/// Generates a labeled source set and a shifted target set sharing class
/// means.
///
/// Class means are orthonormal unit vectors when `dim >= num_classes`
/// (independent random unit vectors otherwise); samples are
/// `mean + class_spread * noise`. Every target sample is additionally
/// offset along one fixed random unit direction by
/// `shift_vector_scale + shift_noise * z`, where `z` is a fresh standard
/// normal per sample. Ground-truth labels are attached to both sets;
/// adaptation must treat the target as unlabeled.
pub fn synthesize_domain_pair(cfg: &SynthConfig) -> Result<(EmbeddingSet, EmbeddingSet)> {
    cfg.validate()?;
    let mut rng = stage_rng(cfg.seed, "synth");
    let d = cfg.dim;

    let means = class_means(&mut rng, cfg.num_classes, d);
    let dir = unit_normal_vec(&mut rng, d);

    let n = cfg.num_classes * cfg.samples_per_class;
    let mut src = Vec::with_capacity(n * d);
    let mut tgt = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            labels.push(c as i64);
            for &m in mean.iter() {
                let e: f64 = StandardNormal.sample(&mut rng);
                src.push((m + cfg.class_spread * e) as f32);
            }
        }
    }
    for mean in &means {
        for _ in 0..cfg.samples_per_class {
            let z: f64 = StandardNormal.sample(&mut rng);
            let off = cfg.shift_vector_scale + cfg.shift_noise * z;
            for (j, &m) in mean.iter().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                tgt.push((m + cfg.class_spread * e + off * dir[j]) as f32);
            }
        }
    }

    let source = EmbeddingSet::from_rows(d, src, Some(labels.clone()))?;
    let target = EmbeddingSet::from_rows(d, tgt, Some(labels))?;
    Ok((source, target))
}
