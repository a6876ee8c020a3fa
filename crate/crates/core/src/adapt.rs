//! Trainable adapter and the staged CDA procedure of Algorithm 1.
//!
//! The "network" is a single affine layer with a tanh nonlinearity,
//! `hidden = tanh(W x + b)`, followed by two linear softmax heads: a source
//! classifier trained on labeled source data and a target classifier created
//! at Stage-4 from cluster prototypes. The composite loss is
//! `L = L_S + lambda * L_M + L_T` where `L_M` is the biased multi-kernel MMD
//! between source and target representations (post-activation, plus
//! pre-activation when `MmdLayers::LastTwo`).
//!
//! Stages:
//! 1. source-only warmup (`lambda = 0` for `warmup_frac` of `max_iters`),
//! 2. joint classification + MMD adaptation,
//! 3. pseudo-labeling of target hidden features (see [`crate::cluster`]),
//! 4. pseudo-label fine-tuning with a frozen source head.
//!
//! Optimization is plain SGD (optional momentum) over mini-batches drawn
//! without replacement per epoch and reshuffled under the seeded RNG; a
//! short epoch tail (fewer than `batch_size` indices) triggers an early
//! reshuffle. Full-data losses are evaluated every [`EVAL_INTERVAL`]
//! iterations; these checkpoints form the loss history and drive the
//! plateau stopping rule.

use crate::cluster::{pseudo_label_pipeline, ClusterConfig, PseudoLabeling};
use crate::embedding::EmbeddingSet;
use crate::error::CdaError;
use crate::eval::{tar_at_far, verification_scores};
use crate::kernel::{bandwidth_ladder, median_bandwidth, KernelSpec};
use crate::mmd::{biased_flat, biased_with_grads_flat};
use crate::rng::stage_rng;
use crate::Result;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Iterations between full-data loss evaluations (history checkpoints).
pub const EVAL_INTERVAL: usize = 100;

const CKPT_MAGIC: &[u8; 4] = b"CDAP";
const CKPT_VERSION: u32 = 1;

/// Which representations the MMD penalty is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmdLayers {
    /// Post-activation hidden features only.
    Last,
    /// Pre-activation and post-activation features, summed.
    LastTwo,
}

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// MMD penalty weight (default 0.5).
    pub lambda: f64,
    /// SGD step size.
    pub learning_rate: f64,
    /// Iteration cap.
    pub max_iters: usize,
    /// Samples drawn per domain per step.
    pub batch_size: usize,
    /// Relative improvement below which training stops.
    pub plateau_tolerance: f64,
    /// Number of evaluation checkpoints the plateau rule looks back over.
    pub plateau_window: usize,
    /// Seed for every stream this run derives.
    pub seed: u64,
    /// MMD placement.
    pub mmd_layers: MmdLayers,
    /// SGD momentum; 0 disables (the default, keeping updates exactly
    /// Algorithm 1's rule).
    pub momentum: f64,
    /// Fraction of `max_iters` trained source-only before the MMD term is
    /// enabled (realizes Stage-1).
    pub warmup_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            learning_rate: 0.1,
            max_iters: 2000,
            batch_size: 32,
            plateau_tolerance: 1e-4,
            plateau_window: 10,
            seed: 0,
            mmd_layers: MmdLayers::LastTwo,
            momentum: 0.0,
            warmup_frac: 0.2,
        }
    }
}

impl TrainConfig {
    /// Checks every numeric range.
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(CdaError::Invalid("lambda must be finite and >= 0".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(CdaError::Invalid("learning_rate must be positive".into()));
        }
        if self.max_iters == 0 || self.batch_size == 0 || self.plateau_window == 0 {
            return Err(CdaError::Invalid(
                "max_iters, batch_size and plateau_window must be positive".into(),
            ));
        }
        if !self.plateau_tolerance.is_finite() || self.plateau_tolerance < 0.0 {
            return Err(CdaError::Invalid(
                "plateau_tolerance must be finite and >= 0".into(),
            ));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(CdaError::Invalid("momentum must lie in [0, 1)".into()));
        }
        if !self.warmup_frac.is_finite() || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(CdaError::Invalid("warmup_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One evaluated loss, split into its Eq. 10 terms. `total` is the sum
/// `source_cls + lambda_in_force * mmd + target_pseudo_cls`, where the
/// lambda in force is 0 during warmup and in Stage-4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub source_cls: f64,
    pub mmd: f64,
    pub target_pseudo_cls: f64,
    pub total: f64,
}

/// A loss history entry at one evaluation checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: LossBreakdown,
}

/// Renders a loss history in the interchange CSV layout.
pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iter,source_cls,mmd,target_pseudo_cls,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter, r.loss.source_cls, r.loss.mmd, r.loss.target_pseudo_cls, r.loss.total
        ));
    }
    out
}

/// The layer parameters Theta: affine adapter plus classifier heads.
/// Held as `f64` in memory; checkpoints store `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// Input dimension.
    pub d_in: usize,
    /// Hidden dimension.
    pub d_out: usize,
    /// Source class count.
    pub n_source: usize,
    /// Adapter weight, `d_out x d_in` row-major.
    pub weight: Vec<f64>,
    /// Adapter bias, length `d_out`.
    pub bias: Vec<f64>,
    /// Source head weight, `n_source x d_out` row-major.
    pub source_classifier: Vec<f64>,
    /// Source head bias, length `n_source`.
    pub source_bias: Vec<f64>,
    /// Target head weight, `n_target x d_out`; empty until Stage-4.
    pub target_classifier: Vec<f64>,
    /// Target head bias, length `n_target`; empty until Stage-4.
    pub target_bias: Vec<f64>,
}

impl AdapterParams {
    /// Fresh parameters: adapter weights `N(0,1)/sqrt(d_in)` drawn from the
    /// seed's `"init"` stream, all biases and classifier weights zero, no
    /// target head.
    pub fn init(d_in: usize, d_out: usize, n_source: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(CdaError::Invalid("dimensions must be positive".into()));
        }
        if n_source < 2 {
            return Err(CdaError::Invalid(
                "source class count must be at least 2".into(),
            ));
        }
        let mut rng = stage_rng(seed, "init");
        let scale = 1.0 / (d_in as f64).sqrt();
        let weight = (0..d_out * d_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(AdapterParams {
            d_in,
            d_out,
            n_source,
            weight,
            bias: vec![0.0; d_out],
            source_classifier: vec![0.0; n_source * d_out],
            source_bias: vec![0.0; n_source],
            target_classifier: Vec::new(),
            target_bias: Vec::new(),
        })
    }

    /// Target class count; 0 before Stage-4.
    pub fn n_target(&self) -> usize {
        self.target_bias.len()
    }

    /// True once a target head exists.
    pub fn has_target_head(&self) -> bool {
        !self.target_bias.is_empty()
    }

    /// Checks shapes and finiteness of every field.
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 {
            return Err(CdaError::Invalid("dimensions must be positive".into()));
        }
        if self.weight.len() != self.d_out * self.d_in
            || self.bias.len() != self.d_out
            || self.source_classifier.len() != self.n_source * self.d_out
            || self.source_bias.len() != self.n_source
            || self.target_classifier.len() != self.target_bias.len() * self.d_out
        {
            return Err(CdaError::Invalid("parameter shape mismatch".into()));
        }
        let all = self
            .weight
            .iter()
            .chain(&self.bias)
            .chain(&self.source_classifier)
            .chain(&self.source_bias)
            .chain(&self.target_classifier)
            .chain(&self.target_bias);
        for v in all {
            if !v.is_finite() {
                return Err(CdaError::Invalid("non-finite parameter value".into()));
            }
        }
        Ok(())
    }

    /// Writes the checkpoint: magic `CDAP`, version, dims, parameter
    /// matrices as `f32` LE in field order.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let pstr = path.display().to_string();
        let file = File::create(path).map_err(|e| CdaError::io(pstr.clone(), e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| -> Result<()> {
            w.write_all(bytes)
                .map_err(|e| CdaError::io(pstr.clone(), e))
        };
        write(CKPT_MAGIC)?;
        write(&CKPT_VERSION.to_le_bytes())?;
        for dim in [self.d_in, self.d_out, self.n_source, self.n_target()] {
            write(&(dim as u32).to_le_bytes())?;
        }
        for field in [
            &self.weight,
            &self.bias,
            &self.source_classifier,
            &self.source_bias,
            &self.target_classifier,
            &self.target_bias,
        ] {
            for &v in field.iter() {
                write(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| CdaError::io(pstr, e))
    }

    /// Reads a checkpoint written by [`AdapterParams::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let pstr = path.display().to_string();
        let file = File::open(path).map_err(|e| CdaError::io(pstr.clone(), e))?;
        let mut r = BufReader::new(file);
        let mut offset = 0usize;
        let mut read = |buf: &mut [u8], what: &str, offset: &mut usize| -> Result<()> {
            r.read_exact(buf).map_err(|_| {
                CdaError::format(
                    "CDAP",
                    pstr.clone(),
                    format!("truncated at byte {}: expected {what}", *offset),
                )
            })?;
            *offset += buf.len();
            Ok(())
        };
        let mut magic = [0u8; 4];
        read(&mut magic, "magic", &mut offset)?;
        if &magic != CKPT_MAGIC {
            return Err(CdaError::format(
                "CDAP",
                path.display().to_string(),
                format!("bad magic at byte 0: {magic:?}"),
            ));
        }
        let mut u32buf = [0u8; 4];
        read(&mut u32buf, "version", &mut offset)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CKPT_VERSION {
            return Err(CdaError::format(
                "CDAP",
                path.display().to_string(),
                format!("unsupported version {version}"),
            ));
        }
        let mut dims = [0usize; 4];
        for (d, what) in dims
            .iter_mut()
            .zip(["d_in", "d_out", "n_source", "n_target"])
        {
            read(&mut u32buf, what, &mut offset)?;
            *d = u32::from_le_bytes(u32buf) as usize;
        }
        let [d_in, d_out, n_source, n_target] = dims;
        let mut read_matrix = |len: usize, what: &str, offset: &mut usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len);
            let mut fbuf = [0u8; 4];
            for _ in 0..len {
                read(&mut fbuf, what, offset)?;
                out.push(f64::from(f32::from_le_bytes(fbuf)));
            }
            Ok(out)
        };
        let weight = read_matrix(d_out * d_in, "weight", &mut offset)?;
        let bias = read_matrix(d_out, "bias", &mut offset)?;
        let source_classifier = read_matrix(n_source * d_out, "source classifier", &mut offset)?;
        let source_bias = read_matrix(n_source, "source bias", &mut offset)?;
        let target_classifier = read_matrix(n_target * d_out, "target classifier", &mut offset)?;
        let target_bias = read_matrix(n_target, "target bias", &mut offset)?;
        let mut tail = [0u8; 1];
        if r.read(&mut tail)
            .map_err(|e| CdaError::io(pstr.clone(), e))?
            != 0
        {
            return Err(CdaError::format(
                "CDAP",
                pstr,
                format!("trailing bytes after offset {offset}"),
            ));
        }
        let params = AdapterParams {
            d_in,
            d_out,
            n_source,
            weight,
            bias,
            source_classifier,
            source_bias,
            target_classifier,
            target_bias,
        };
        params.validate()?;
        Ok(params)
    }
}

/// A mini-batch in `f64`, gathered from an [`EmbeddingSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    x: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl Batch {
    /// Builds a batch from raw parts.
    pub fn from_parts(dim: usize, x: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if dim == 0 || !x.len().is_multiple_of(dim) {
            return Err(CdaError::Invalid(
                "batch data length must be a positive multiple of dim".into(),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CdaError::Invalid("non-finite batch value".into()));
        }
        if let Some(ref l) = labels {
            if l.len() != x.len() / dim {
                return Err(CdaError::Invalid("label count mismatch".into()));
            }
        }
        Ok(Batch { dim, x, labels })
    }

    /// Gathers the given rows without labels.
    pub fn unlabeled(set: &EmbeddingSet, idx: &[usize]) -> Result<Self> {
        Ok(Batch {
            dim: set.dim(),
            x: gather(set, idx)?,
            labels: None,
        })
    }

    /// Gathers the given rows with their labels; every gathered label must
    /// be nonnegative.
    pub fn labeled(set: &EmbeddingSet, idx: &[usize]) -> Result<Self> {
        let labels = set
            .labels()
            .ok_or_else(|| CdaError::Invalid("labeled batch from unlabeled set".into()))?;
        let mapped = idx
            .iter()
            .map(|&i| {
                let l = labels[i];
                if l < 0 {
                    Err(CdaError::Invalid(format!("sample {i} is unlabeled")))
                } else {
                    Ok(l as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            dim: set.dim(),
            x: gather(set, idx)?,
            labels: Some(mapped),
        })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.x.len() / self.dim
    }

    /// True when empty.
    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major samples.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Class ids, when labeled.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }
}

fn gather(set: &EmbeddingSet, idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len() * set.dim());
    for &i in idx {
        if i >= set.len() {
            return Err(CdaError::Invalid(format!(
                "row index {i} out of range for {} samples",
                set.len()
            )));
        }
        out.extend(set.row(i).iter().map(|&v| f64::from(v)));
    }
    Ok(out)
}

/// Output of [`forward`] for one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub source_logits: Vec<f64>,
    pub target_logits: Option<Vec<f64>>,
}

/// Applies the adapter and both heads to one input vector.
pub fn forward(params: &AdapterParams, x: &[f64]) -> Result<Forward> {
    if x.len() != params.d_in {
        return Err(CdaError::DimMismatch(format!(
            "input has {} components, adapter expects {}",
            x.len(),
            params.d_in
        )));
    }
    let (_, h) = affine_batch(params, x);
    let source_logits = head_logits(
        &params.source_classifier,
        &params.source_bias,
        &h,
        params.d_out,
    );
    let target_logits = if params.has_target_head() {
        Some(head_logits(
            &params.target_classifier,
            &params.target_bias,
            &h,
            params.d_out,
        ))
    } else {
        None
    };
    Ok(Forward {
        hidden: h,
        source_logits,
        target_logits,
    })
}

/// `z = W x + b` and `h = tanh(z)` for a flat row-major batch.
fn affine_batch(params: &AdapterParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / params.d_in;
    let (di, dh) = (params.d_in, params.d_out);
    let mut z = vec![0.0f64; n * dh];
    for i in 0..n {
        let xi = &x[i * di..(i + 1) * di];
        let zi = &mut z[i * dh..(i + 1) * dh];
        for (r, zr) in zi.iter_mut().enumerate() {
            let row = &params.weight[r * di..(r + 1) * di];
            let mut acc = params.bias[r];
            for (w, v) in row.iter().zip(xi) {
                acc += w * v;
            }
            *zr = acc;
        }
    }
    let h = z.iter().map(|v| v.tanh()).collect();
    (z, h)
}

/// `logits = C h + c` for a flat batch of hiddens.
fn head_logits(cw: &[f64], cb: &[f64], h: &[f64], dh: usize) -> Vec<f64> {
    let n = h.len() / dh;
    let classes = cb.len();
    let mut out = vec![0.0f64; n * classes];
    for i in 0..n {
        let hi = &h[i * dh..(i + 1) * dh];
        let oi = &mut out[i * classes..(i + 1) * classes];
        for (c, oc) in oi.iter_mut().enumerate() {
            let row = &cw[c * dh..(c + 1) * dh];
            let mut acc = cb[c];
            for (w, v) in row.iter().zip(hi) {
                acc += w * v;
            }
            *oc = acc;
        }
    }
    out
}

/// Mean negative log softmax probability of the true class, max-shifted for
/// stability.
pub fn softmax_cls_loss(logits_batch: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits_batch.is_empty() || logits_batch.len() != labels.len() {
        return Err(CdaError::Invalid(
            "softmax loss needs matching nonempty logits and labels".into(),
        ));
    }
    let classes = logits_batch[0].len();
    let mut flat = Vec::with_capacity(logits_batch.len() * classes);
    for (row, &label) in logits_batch.iter().zip(labels) {
        if row.len() != classes {
            return Err(CdaError::Invalid("ragged logits batch".into()));
        }
        if label >= classes {
            return Err(CdaError::Invalid(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        flat.extend_from_slice(row);
    }
    Ok(ce_loss_grad(&flat, classes, labels).0)
}

/// Mean cross-entropy over a flat logits batch plus gradient w.r.t. logits.
fn ce_loss_grad(logits: &[f64], classes: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let n = labels.len();
    let nf = n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; logits.len()];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - m).exp();
        }
        let log_denom = denom.ln();
        loss += -(row[label] - m - log_denom);
        let grow = &mut grad[i * classes..(i + 1) * classes];
        for (c, g) in grow.iter_mut().enumerate() {
            let p = (row[c] - m).exp() / denom;
            *g = (p - if c == label { 1.0 } else { 0.0 }) / nf;
        }
    }
    (loss / nf, grad)
}

/// Gradients for every [`AdapterParams`] field, shaped like the parameters.
/// Target-head entries are empty when no target head exists or no pseudo
/// batch was given.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub source_classifier: Vec<f64>,
    pub source_bias: Vec<f64>,
    pub target_classifier: Vec<f64>,
    pub target_bias: Vec<f64>,
}

impl Gradients {
    fn zeros(params: &AdapterParams, with_target: bool) -> Self {
        Gradients {
            weight: vec![0.0; params.weight.len()],
            bias: vec![0.0; params.bias.len()],
            source_classifier: vec![0.0; params.source_classifier.len()],
            source_bias: vec![0.0; params.source_bias.len()],
            target_classifier: if with_target {
                vec![0.0; params.target_classifier.len()]
            } else {
                Vec::new()
            },
            target_bias: if with_target {
                vec![0.0; params.target_bias.len()]
            } else {
                Vec::new()
            },
        }
    }
}

fn check_loss_inputs(
    batch_s: &Batch,
    batch_t: &Batch,
    pseudo: Option<&Batch>,
    params: &AdapterParams,
) -> Result<()> {
    if batch_s.is_empty() || batch_t.is_empty() {
        return Err(CdaError::Invalid("batches must be nonempty".into()));
    }
    if batch_s.dim() != params.d_in || batch_t.dim() != params.d_in {
        return Err(CdaError::DimMismatch(format!(
            "batch dimension does not match adapter input {}",
            params.d_in
        )));
    }
    let labels = batch_s
        .labels()
        .ok_or_else(|| CdaError::Invalid("source batch must be labeled".into()))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= params.n_source) {
        return Err(CdaError::Invalid(format!(
            "source label {bad} out of range for {} classes",
            params.n_source
        )));
    }
    if let Some(p) = pseudo {
        if p.is_empty() {
            return Err(CdaError::Invalid("pseudo batch must be nonempty".into()));
        }
        if p.dim() != params.d_in {
            return Err(CdaError::DimMismatch("pseudo batch dimension".into()));
        }
        if !params.has_target_head() {
            return Err(CdaError::Invalid(
                "pseudo loss requires an initialized target head".into(),
            ));
        }
        let pl = p
            .labels()
            .ok_or_else(|| CdaError::Invalid("pseudo batch must be labeled".into()))?;
        if let Some(&bad) = pl.iter().find(|&&l| l >= params.n_target()) {
            return Err(CdaError::Invalid(format!(
                "pseudo label {bad} out of range for {} clusters",
                params.n_target()
            )));
        }
    }
    Ok(())
}

/// Composite Eq. 10 loss over one batch triple.
pub fn total_loss(
    batch_s: &Batch,
    batch_t: &Batch,
    pseudo: Option<&Batch>,
    params: &AdapterParams,
    spec: &KernelSpec,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    check_loss_inputs(batch_s, batch_t, pseudo, params)?;
    let (zs, hs) = affine_batch(params, batch_s.x());
    let (zt, ht) = affine_batch(params, batch_t.x());

    let logits = head_logits(
        &params.source_classifier,
        &params.source_bias,
        &hs,
        params.d_out,
    );
    let (source_cls, _) = ce_loss_grad(&logits, params.n_source, batch_s.labels().unwrap());

    let mut mmd = biased_flat(&hs, &ht, params.d_out, spec);
    if cfg.mmd_layers == MmdLayers::LastTwo {
        mmd += biased_flat(&zs, &zt, params.d_out, spec);
    }

    let target_pseudo_cls = match pseudo {
        Some(p) => {
            let (_, hp) = affine_batch(params, p.x());
            let plogits = head_logits(
                &params.target_classifier,
                &params.target_bias,
                &hp,
                params.d_out,
            );
            ce_loss_grad(&plogits, params.n_target(), p.labels().unwrap()).0
        }
        None => 0.0,
    };

    Ok(LossBreakdown {
        source_cls,
        mmd,
        target_pseudo_cls,
        total: source_cls + cfg.lambda * mmd + target_pseudo_cls,
    })
}

/// Composite loss and analytic gradients of `total` w.r.t. every parameter.
pub fn backward(
    batch_s: &Batch,
    batch_t: &Batch,
    pseudo: Option<&Batch>,
    params: &AdapterParams,
    spec: &KernelSpec,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    check_loss_inputs(batch_s, batch_t, pseudo, params)?;
    let (di, dh) = (params.d_in, params.d_out);
    let (zs, hs) = affine_batch(params, batch_s.x());
    let (zt, ht) = affine_batch(params, batch_t.x());
    let mut grads = Gradients::zeros(params, pseudo.is_some());

    let labels = batch_s.labels().unwrap();
    let logits = head_logits(&params.source_classifier, &params.source_bias, &hs, dh);
    let (source_cls, glogits) = ce_loss_grad(&logits, params.n_source, labels);

    // dL_S/dh_s rows, then the head's own gradients
    let ns = batch_s.len();
    let mut dhs = vec![0.0f64; hs.len()];
    for i in 0..ns {
        let g = &glogits[i * params.n_source..(i + 1) * params.n_source];
        let hi = &hs[i * dh..(i + 1) * dh];
        for (c, &gc) in g.iter().enumerate() {
            grads.source_bias[c] += gc;
            let wrow = &params.source_classifier[c * dh..(c + 1) * dh];
            let grow = &mut grads.source_classifier[c * dh..(c + 1) * dh];
            for k in 0..dh {
                grow[k] += gc * hi[k];
                dhs[i * dh + k] += gc * wrow[k];
            }
        }
    }

    let mut dht = vec![0.0f64; ht.len()];
    let mut dzs_direct = vec![0.0f64; zs.len()];
    let mut dzt_direct = vec![0.0f64; zt.len()];
    let mut mmd = 0.0;
    if cfg.lambda != 0.0 {
        let (v, ga, gb) = biased_with_grads_flat(&hs, &ht, dh, spec);
        mmd += v;
        for (d, g) in dhs.iter_mut().zip(&ga) {
            *d += cfg.lambda * g;
        }
        for (d, g) in dht.iter_mut().zip(&gb) {
            *d += cfg.lambda * g;
        }
        if cfg.mmd_layers == MmdLayers::LastTwo {
            let (v2, gza, gzb) = biased_with_grads_flat(&zs, &zt, dh, spec);
            mmd += v2;
            for (d, g) in dzs_direct.iter_mut().zip(&gza) {
                *d += cfg.lambda * g;
            }
            for (d, g) in dzt_direct.iter_mut().zip(&gzb) {
                *d += cfg.lambda * g;
            }
        }
    } else {
        // value still reported so the breakdown is complete
        mmd = biased_flat(&hs, &ht, dh, spec);
        if cfg.mmd_layers == MmdLayers::LastTwo {
            mmd += biased_flat(&zs, &zt, dh, spec);
        }
    }

    // chain rule through tanh into the adapter, source then target rows
    let accumulate =
        |x: &[f64], h: &[f64], dh_rows: &[f64], dz_direct: &[f64], grads: &mut Gradients| {
            let n = x.len() / di;
            for i in 0..n {
                let xi = &x[i * di..(i + 1) * di];
                for r in 0..dh {
                    let hv = h[i * dh + r];
                    let dz = dh_rows[i * dh + r] * (1.0 - hv * hv) + dz_direct[i * dh + r];
                    if dz == 0.0 {
                        continue;
                    }
                    grads.bias[r] += dz;
                    let wrow = &mut grads.weight[r * di..(r + 1) * di];
                    for (w, v) in wrow.iter_mut().zip(xi) {
                        *w += dz * v;
                    }
                }
            }
        };
    accumulate(batch_s.x(), &hs, &dhs, &dzs_direct, &mut grads);
    accumulate(batch_t.x(), &ht, &dht, &dzt_direct, &mut grads);

    let target_pseudo_cls = match pseudo {
        Some(p) => {
            let (_, hp) = affine_batch(params, p.x());
            let nt = params.n_target();
            let plabels = p.labels().unwrap();
            let plogits = head_logits(&params.target_classifier, &params.target_bias, &hp, dh);
            let (lt, gplogits) = ce_loss_grad(&plogits, nt, plabels);
            let np = p.len();
            let mut dhp = vec![0.0f64; hp.len()];
            for i in 0..np {
                let g = &gplogits[i * nt..(i + 1) * nt];
                let hi = &hp[i * dh..(i + 1) * dh];
                for (c, &gc) in g.iter().enumerate() {
                    grads.target_bias[c] += gc;
                    let wrow = &params.target_classifier[c * dh..(c + 1) * dh];
                    let grow = &mut grads.target_classifier[c * dh..(c + 1) * dh];
                    for k in 0..dh {
                        grow[k] += gc * hi[k];
                        dhp[i * dh + k] += gc * wrow[k];
                    }
                }
            }
            let zeros = vec![0.0f64; hp.len()];
            accumulate(p.x(), &hp, &dhp, &zeros, &mut grads);
            lt
        }
        None => 0.0,
    };

    let loss = LossBreakdown {
        source_cls,
        mmd,
        target_pseudo_cls,
        total: source_cls + cfg.lambda * mmd + target_pseudo_cls,
    };
    Ok((loss, grads))
}

/// SGD state: one velocity per parameter tensor.
struct Sgd {
    lr: f64,
    momentum: f64,
    vel: Gradients,
}

impl Sgd {
    fn new(params: &AdapterParams, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            vel: Gradients::zeros(params, true),
        }
    }

    fn step(&mut self, params: &mut AdapterParams, grads: &Gradients, freeze_source_head: bool) {
        let apply = |theta: &mut [f64], vel: &mut [f64], g: &[f64], lr: f64, mom: f64| {
            for ((t, v), gi) in theta.iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = mom * *v + gi;
                *t -= lr * *v;
            }
        };
        apply(
            &mut params.weight,
            &mut self.vel.weight,
            &grads.weight,
            self.lr,
            self.momentum,
        );
        apply(
            &mut params.bias,
            &mut self.vel.bias,
            &grads.bias,
            self.lr,
            self.momentum,
        );
        if !freeze_source_head {
            apply(
                &mut params.source_classifier,
                &mut self.vel.source_classifier,
                &grads.source_classifier,
                self.lr,
                self.momentum,
            );
            apply(
                &mut params.source_bias,
                &mut self.vel.source_bias,
                &grads.source_bias,
                self.lr,
                self.momentum,
            );
        }
        if !grads.target_bias.is_empty() {
            if self.vel.target_classifier.len() != grads.target_classifier.len() {
                self.vel.target_classifier = vec![0.0; grads.target_classifier.len()];
                self.vel.target_bias = vec![0.0; grads.target_bias.len()];
            }
            apply(
                &mut params.target_classifier,
                &mut self.vel.target_classifier,
                &grads.target_classifier,
                self.lr,
                self.momentum,
            );
            apply(
                &mut params.target_bias,
                &mut self.vel.target_bias,
                &grads.target_bias,
                self.lr,
                self.momentum,
            );
        }
    }
}

/// Without-replacement batch index stream, reshuffled each epoch; an epoch
/// tail shorter than the batch triggers an early reshuffle.
struct IndexPool {
    order: Vec<usize>,
    pos: usize,
}

impl IndexPool {
    fn new(n: usize) -> Self {
        IndexPool {
            order: (0..n).collect(),
            pos: usize::MAX,
        }
    }

    fn next_batch(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let bs = batch.min(self.order.len());
        if self.pos == usize::MAX || self.pos + bs > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + bs].to_vec();
        self.pos += bs;
        out
    }
}

/// Plateau rule over evaluation checkpoints: stop when the relative
/// improvement from `window` checkpoints back falls below `tol`.
struct Plateau {
    window: usize,
    tol: f64,
    totals: Vec<f64>,
}

impl Plateau {
    fn new(window: usize, tol: f64) -> Self {
        Plateau {
            window,
            tol,
            totals: Vec::new(),
        }
    }

    fn push_and_check(&mut self, total: f64) -> bool {
        self.totals.push(total);
        if self.totals.len() <= self.window {
            return false;
        }
        let old = self.totals[self.totals.len() - 1 - self.window];
        let improvement = (old - total) / old.abs().max(1e-12);
        improvement < self.tol
    }
}

struct Stage2Run {
    params: AdapterParams,
    baseline: AdapterParams,
    history: Vec<LossRecord>,
}

fn stage2_run(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    params: &AdapterParams,
    cfg: &TrainConfig,
    spec: &KernelSpec,
) -> Result<Stage2Run> {
    cfg.validate()?;
    params.validate()?;
    let labels = source
        .labels()
        .ok_or_else(|| CdaError::Invalid("stage-2 requires a labeled source set".into()))?;
    if labels.iter().any(|&l| l < 0) {
        return Err(CdaError::Invalid("source set has unlabeled samples".into()));
    }
    if source.is_empty() || target.is_empty() {
        return Err(CdaError::Invalid("stage-2 requires nonempty sets".into()));
    }
    if source.dim() != params.d_in || target.dim() != params.d_in {
        return Err(CdaError::DimMismatch(format!(
            "set dimension does not match adapter input {}",
            params.d_in
        )));
    }

    let warmup_iters = ((cfg.max_iters as f64) * cfg.warmup_frac).floor() as usize;
    let warm_cfg = TrainConfig {
        lambda: 0.0,
        ..cfg.clone()
    };

    let full_s = Batch::labeled(source, &(0..source.len()).collect::<Vec<_>>())?;
    let full_t = Batch::unlabeled(target, &(0..target.len()).collect::<Vec<_>>())?;

    let mut rng = stage_rng(cfg.seed, "stage2");
    let mut pool_s = IndexPool::new(source.len());
    let mut pool_t = IndexPool::new(target.len());
    let mut sgd = Sgd::new(params, cfg.learning_rate, cfg.momentum);
    let mut plateau = Plateau::new(cfg.plateau_window, cfg.plateau_tolerance);
    let mut history = Vec::new();
    let mut out = params.clone();
    let mut baseline = if warmup_iters == 0 {
        Some(out.clone())
    } else {
        None
    };

    let evaluate = |iter: usize,
                    params: &AdapterParams,
                    active: &TrainConfig,
                    history: &mut Vec<LossRecord>,
                    plateau: &mut Plateau|
     -> Result<bool> {
        let loss = total_loss(&full_s, &full_t, None, params, spec, active)?;
        if !loss.total.is_finite() {
            return Err(CdaError::Diverged { iter });
        }
        history.push(LossRecord { iter, loss });
        if iter >= warmup_iters {
            return Ok(plateau.push_and_check(loss.total));
        }
        Ok(false)
    };

    let mut stop_iter = cfg.max_iters;
    for iter in 0..cfg.max_iters {
        if iter == warmup_iters && baseline.is_none() {
            baseline = Some(out.clone());
        }
        let active = if iter < warmup_iters { &warm_cfg } else { cfg };
        if iter % EVAL_INTERVAL == 0 && evaluate(iter, &out, active, &mut history, &mut plateau)? {
            stop_iter = iter;
            break;
        }
        let idx_s = pool_s.next_batch(cfg.batch_size, &mut rng);
        let idx_t = pool_t.next_batch(cfg.batch_size, &mut rng);
        let batch_s = Batch::labeled(source, &idx_s)?;
        let batch_t = Batch::unlabeled(target, &idx_t)?;
        let (loss, grads) = backward(&batch_s, &batch_t, None, &out, spec, active)?;
        if !loss.total.is_finite() {
            return Err(CdaError::Diverged { iter });
        }
        sgd.step(&mut out, &grads, false);
    }
    if baseline.is_none() {
        baseline = Some(out.clone());
    }
    if stop_iter == cfg.max_iters {
        let active = if cfg.max_iters < warmup_iters {
            &warm_cfg
        } else {
            cfg
        };
        if history.last().map(|r| r.iter) != Some(cfg.max_iters) {
            evaluate(cfg.max_iters, &out, active, &mut history, &mut plateau)?;
        }
    }
    Ok(Stage2Run {
        params: out,
        baseline: baseline.unwrap(),
        history,
    })
}

/// Stage-2 (with its Stage-1 warmup): mini-batch SGD on
/// `L_S + lambda * L_M` against a fixed kernel.
pub fn stage2_mmd_adapt(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    params: &AdapterParams,
    cfg: &TrainConfig,
    spec: &KernelSpec,
) -> Result<(AdapterParams, Vec<LossRecord>)> {
    let run = stage2_run(source, target, params, cfg, spec)?;
    Ok((run.params, run.history))
}

/// Stage-4: pseudo-label fine-tuning. Creates the target head from the
/// cluster means of the assigned samples mapped through the current adapter
/// (rows L2-normalized, biases zero), freezes the source head, and descends
/// on `L_T` over assigned samples only.
pub fn stage4_pseudo_adapt(
    target: &EmbeddingSet,
    pseudo: &PseudoLabeling,
    params: &AdapterParams,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, Vec<LossRecord>)> {
    cfg.validate()?;
    params.validate()?;
    if pseudo.cluster_count < 2 {
        return Err(CdaError::Stage {
            stage: "stage-4",
            detail: format!(
                "{} cluster(s) found; pseudo-label training needs at least 2",
                pseudo.cluster_count
            ),
        });
    }
    if pseudo.assignments.len() != target.len() {
        return Err(CdaError::Invalid(format!(
            "assignment count {} does not match target samples {}",
            pseudo.assignments.len(),
            target.len()
        )));
    }
    if target.dim() != params.d_in {
        return Err(CdaError::DimMismatch(format!(
            "target dimension does not match adapter input {}",
            params.d_in
        )));
    }

    let assigned: Vec<usize> = (0..target.len())
        .filter(|&i| pseudo.assignments[i].is_some())
        .collect();
    let labels: Vec<usize> = assigned
        .iter()
        .map(|&i| pseudo.assignments[i].unwrap())
        .collect();
    let x = gather(target, &assigned)?;

    let mut out = params.clone();
    init_target_head(&mut out, &x, &labels, pseudo.cluster_count);

    let n = assigned.len();
    let full = Batch::from_parts(params.d_in, x.clone(), Some(labels.clone()))?;
    let mut rng = stage_rng(cfg.seed, "stage4");
    let mut pool = IndexPool::new(n);
    let mut sgd = Sgd::new(&out, cfg.learning_rate, cfg.momentum);
    let mut plateau = Plateau::new(cfg.plateau_window, cfg.plateau_tolerance);
    let mut history = Vec::new();

    let eval =
        |iter: usize, params: &AdapterParams, history: &mut Vec<LossRecord>| -> Result<f64> {
            let (_, hp) = affine_batch(params, full.x());
            let logits = head_logits(
                &params.target_classifier,
                &params.target_bias,
                &hp,
                params.d_out,
            );
            let (lt, _) = ce_loss_grad(&logits, params.n_target(), full.labels().unwrap());
            if !lt.is_finite() {
                return Err(CdaError::Diverged { iter });
            }
            history.push(LossRecord {
                iter,
                loss: LossBreakdown {
                    source_cls: 0.0,
                    mmd: 0.0,
                    target_pseudo_cls: lt,
                    total: lt,
                },
            });
            Ok(lt)
        };

    let mut stop_iter = cfg.max_iters;
    for iter in 0..cfg.max_iters {
        if iter % EVAL_INTERVAL == 0 {
            let lt = eval(iter, &out, &mut history)?;
            if plateau.push_and_check(lt) {
                stop_iter = iter;
                break;
            }
        }
        let idx = pool.next_batch(cfg.batch_size, &mut rng);
        let bx = idx
            .iter()
            .flat_map(|&i| {
                full.x()[i * params.d_in..(i + 1) * params.d_in]
                    .iter()
                    .cloned()
            })
            .collect();
        let bl: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let batch = Batch::from_parts(params.d_in, bx, Some(bl))?;
        let (lt, grads) = stage4_backward(&batch, &out)?;
        if !lt.is_finite() {
            return Err(CdaError::Diverged { iter });
        }
        sgd.step(&mut out, &grads, true);
    }
    if stop_iter == cfg.max_iters && history.last().map(|r| r.iter) != Some(cfg.max_iters) {
        let lt = eval(cfg.max_iters, &out, &mut history)?;
        let _ = lt;
    }
    Ok((out, history))
}

/// Target head rows: L2-normalized `tanh(W mu_k + b)` over the assigned
/// members' mean vector of each cluster; biases zero.
fn init_target_head(params: &mut AdapterParams, x: &[f64], labels: &[usize], clusters: usize) {
    let di = params.d_in;
    let mut means = vec![0.0f64; clusters * di];
    let mut counts = vec![0usize; clusters];
    for (i, &k) in labels.iter().enumerate() {
        counts[k] += 1;
        for (m, v) in means[k * di..(k + 1) * di]
            .iter_mut()
            .zip(&x[i * di..(i + 1) * di])
        {
            *m += v;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            for m in means[k * di..(k + 1) * di].iter_mut() {
                *m /= c as f64;
            }
        }
    }
    let (_, h) = affine_batch(params, &means);
    let dh = params.d_out;
    let mut head = vec![0.0f64; clusters * dh];
    for k in 0..clusters {
        let row = &h[k * dh..(k + 1) * dh];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dst = &mut head[k * dh..(k + 1) * dh];
        if norm > 0.0 {
            for (d, v) in dst.iter_mut().zip(row) {
                *d = v / norm;
            }
        }
    }
    params.target_classifier = head;
    params.target_bias = vec![0.0; clusters];
}

/// `L_T` and its gradients only (adapter + target head; source head frozen).
fn stage4_backward(batch: &Batch, params: &AdapterParams) -> Result<(f64, Gradients)> {
    let (di, dh) = (params.d_in, params.d_out);
    let nt = params.n_target();
    let labels = batch.labels().unwrap();
    let (_, hp) = affine_batch(params, batch.x());
    let logits = head_logits(&params.target_classifier, &params.target_bias, &hp, dh);
    let (lt, glogits) = ce_loss_grad(&logits, nt, labels);
    let mut grads = Gradients::zeros(params, true);
    let n = batch.len();
    let mut dhp = vec![0.0f64; hp.len()];
    for i in 0..n {
        let g = &glogits[i * nt..(i + 1) * nt];
        let hi = &hp[i * dh..(i + 1) * dh];
        for (c, &gc) in g.iter().enumerate() {
            grads.target_bias[c] += gc;
            let wrow = &params.target_classifier[c * dh..(c + 1) * dh];
            let grow = &mut grads.target_classifier[c * dh..(c + 1) * dh];
            for k in 0..dh {
                grow[k] += gc * hi[k];
                dhp[i * dh + k] += gc * wrow[k];
            }
        }
    }
    for i in 0..n {
        let xi = &batch.x()[i * di..(i + 1) * di];
        for r in 0..dh {
            let hv = hp[i * dh + r];
            let dz = dhp[i * dh + r] * (1.0 - hv * hv);
            if dz == 0.0 {
                continue;
            }
            grads.bias[r] += dz;
            let wrow = &mut grads.weight[r * di..(r + 1) * di];
            for (w, v) in wrow.iter_mut().zip(xi) {
                *w += dz * v;
            }
        }
    }
    Ok((lt, grads))
}

/// Maps a whole set through the adapter; labels are carried over.
pub fn hidden_features(params: &AdapterParams, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != params.d_in {
        return Err(CdaError::DimMismatch(format!(
            "set dimension {} does not match adapter input {}",
            set.dim(),
            params.d_in
        )));
    }
    let x = set.data_f64();
    let (_, h) = affine_batch(params, &x);
    EmbeddingSet::from_rows(
        params.d_out,
        h.iter().map(|&v| v as f32).collect(),
        set.labels().map(|l| l.to_vec()),
    )
}

/// Kernel selection policy for [`run_cda`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelPolicy {
    /// Median heuristic on the first batch pair's hidden features under the
    /// initial parameters, widened into a `kernels`-rung doubling ladder.
    MedianLadder { kernels: usize },
}

/// Stages 1-2 of the procedure, packaged for reuse by [`run_cda`] and the
/// alpha sweep (which reruns only Stages 3-4).
#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    /// Stage-1 source-only snapshot (end of warmup).
    pub baseline: AdapterParams,
    /// Parameters after Stage-2.
    pub params: AdapterParams,
    /// Stage-2 loss history.
    pub history: Vec<LossRecord>,
    /// Kernel the run used.
    pub kernel: KernelSpec,
    /// Biased hidden-feature MMD under the initial parameters.
    pub mmd_initial: f64,
    /// Biased hidden-feature MMD under the Stage-2 parameters.
    pub mmd_final: f64,
}

/// Everything produced by [`run_cda`].
#[derive(Debug, Clone)]
pub struct CdaOutcome {
    /// Final parameters after Stage-4.
    pub params: AdapterParams,
    /// Stage-1 source-only snapshot (end of warmup).
    pub baseline: AdapterParams,
    /// Parameters after Stage-2, before pseudo-label fine-tuning.
    pub stage2_params: AdapterParams,
    /// Stage-3 pseudo-labeling of the target set.
    pub pseudo: PseudoLabeling,
    /// Stage-2 loss history.
    pub stage2_history: Vec<LossRecord>,
    /// Stage-4 loss history.
    pub stage4_history: Vec<LossRecord>,
    /// Kernel the run used.
    pub kernel: KernelSpec,
    /// Biased hidden-feature MMD under the initial parameters.
    pub mmd_initial: f64,
    /// Biased hidden-feature MMD under the Stage-2 parameters.
    pub mmd_final: f64,
    /// Human-readable stage summary.
    pub report: String,
}

/// Stages 1-2 only: fresh parameters (hidden width twice the input
/// dimension, source class count inferred from the labels), kernel from the
/// median heuristic on the first batch pair under the initial parameters,
/// then warmup + joint MMD descent.
pub fn run_stage2(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    cfg: &TrainConfig,
    policy: KernelPolicy,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    let labels = source
        .labels()
        .ok_or_else(|| CdaError::Invalid("adaptation requires a labeled source set".into()))?;
    if labels.iter().any(|&l| l < 0) {
        return Err(CdaError::Invalid("source set has unlabeled samples".into()));
    }
    if source.dim() != target.dim() {
        return Err(CdaError::DimMismatch(format!(
            "source dimension {} vs target {}",
            source.dim(),
            target.dim()
        )));
    }
    if source.is_empty() || target.is_empty() {
        return Err(CdaError::Invalid(
            "adaptation requires nonempty sets".into(),
        ));
    }
    let n_source = labels.iter().max().copied().unwrap_or(0) as usize + 1;
    if n_source < 2 {
        return Err(CdaError::Invalid(
            "source set must contain at least 2 classes".into(),
        ));
    }

    let d_in = source.dim();
    let params0 = AdapterParams::init(d_in, 2 * d_in, n_source, cfg.seed)?;

    // Kernel from the same first batch pair the trainer will draw.
    let KernelPolicy::MedianLadder { kernels } = policy;
    let spec = {
        let mut rng = stage_rng(cfg.seed, "stage2");
        let mut pool_s = IndexPool::new(source.len());
        let mut pool_t = IndexPool::new(target.len());
        let idx_s = pool_s.next_batch(cfg.batch_size, &mut rng);
        let idx_t = pool_t.next_batch(cfg.batch_size, &mut rng);
        let hs = hidden_features(&params0, &subset(source, &idx_s)?)?;
        let ht = hidden_features(&params0, &subset(target, &idx_t)?)?;
        let gamma = median_bandwidth(&hs, &ht)?;
        bandwidth_ladder(gamma, kernels)?
    };

    let hidden0_src = hidden_features(&params0, source)?;
    let hidden0_tgt = hidden_features(&params0, target)?;
    let mmd_initial = crate::mmd::mmd_biased(&hidden0_src, &hidden0_tgt, &spec)?.value;

    let s2 = stage2_run(source, target, &params0, cfg, &spec)?;

    let hidden2_src = hidden_features(&s2.params, source)?;
    let hidden2_tgt = hidden_features(&s2.params, target)?;
    let mmd_final = crate::mmd::mmd_biased(&hidden2_src, &hidden2_tgt, &spec)?.value;

    Ok(Stage2Outcome {
        baseline: s2.baseline,
        params: s2.params,
        history: s2.history,
        kernel: spec,
        mmd_initial,
        mmd_final,
    })
}

/// Algorithm 1 end to end. The adapter's hidden width is twice the input
/// dimension; the source class count is inferred from the labels.
pub fn run_cda(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    cfg: &TrainConfig,
    ccfg: &ClusterConfig,
    policy: KernelPolicy,
) -> Result<CdaOutcome> {
    ccfg.validate()?;
    let s2 = run_stage2(source, target, cfg, policy)?;
    let spec = s2.kernel.clone();
    let (mmd_initial, mmd_final) = (s2.mmd_initial, s2.mmd_final);

    let hidden2_tgt = hidden_features(&s2.params, target)?;
    let pseudo = pseudo_label_pipeline(&hidden2_tgt.without_labels(), ccfg)?;
    if pseudo.cluster_count < 2 {
        let hint = if pseudo.cluster_count == 0 {
            "lower alpha or min_size to keep more clusters"
        } else {
            "raise alpha to split the graph"
        };
        return Err(CdaError::Stage {
            stage: "stage-3",
            detail: format!(
                "{} cluster(s) at alpha = {}; {hint}",
                pseudo.cluster_count, ccfg.alpha
            ),
        });
    }

    let (params4, stage4_history) = stage4_pseudo_adapt(target, &pseudo, &s2.params, cfg)?;

    let mut report = String::new();
    report.push_str(&format!(
        "stage-1\twarmup source-only iterations\t{}\n",
        ((cfg.max_iters as f64) * cfg.warmup_frac).floor() as usize
    ));
    report.push_str(&format!(
        "stage-2\tkernel bandwidths\t{}\n",
        spec.bandwidths()
            .iter()
            .map(|b| format!("{b:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    ));
    report.push_str(&format!(
        "stage-2\tbiased hidden MMD initial -> final\t{mmd_initial:.6e} -> {mmd_final:.6e}\n"
    ));
    report.push_str(&format!(
        "stage-3\tclusters\t{} ({} of {} samples assigned)\n",
        pseudo.cluster_count,
        pseudo.assigned_count,
        target.len()
    ));
    report.push_str(&format!(
        "stage-4\titerations\t{}\n",
        stage4_history.last().map(|r| r.iter).unwrap_or(0)
    ));

    Ok(CdaOutcome {
        params: params4,
        baseline: s2.baseline,
        stage2_params: s2.params,
        pseudo,
        stage2_history: s2.history,
        stage4_history,
        kernel: spec,
        mmd_initial,
        mmd_final,
        report,
    })
}

fn subset(set: &EmbeddingSet, idx: &[usize]) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity(idx.len() * set.dim());
    for &i in idx {
        data.extend_from_slice(set.row(i));
    }
    EmbeddingSet::from_rows(set.dim(), data, None)
}

/// One row of the alpha-sensitivity table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub cluster_count: usize,
    pub assigned_count: usize,
    /// Target verification TAR at the requested FAR after Stage-4; `None`
    /// when the alpha yields fewer than 2 clusters (no model trained) or
    /// the target set is unlabeled.
    pub tar: Option<f64>,
    /// Pairwise F-score of the pseudo-labels against the target's labels,
    /// when present.
    pub pairwise_f: Option<f64>,
}

/// Reruns Stage-3/4 from a fixed Stage-2 model per alpha and scores each
/// final model on the target set (Fig. 10's sensitivity experiment).
pub fn sweep_alpha(
    stage2_params: &AdapterParams,
    target: &EmbeddingSet,
    cfg: &TrainConfig,
    ccfg: &ClusterConfig,
    alphas: &[f64],
    far_target: f64,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(CdaError::Invalid("sweep needs at least one alpha".into()));
    }
    let hidden = hidden_features(stage2_params, target)?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cc = ClusterConfig {
            alpha,
            ..ccfg.clone()
        };
        cc.validate()?;
        let pseudo = pseudo_label_pipeline(&hidden.without_labels(), &cc)?;
        let pairwise_f = match target.labels() {
            Some(truth) => Some(crate::cluster::cluster_quality(&pseudo, truth)?.pairwise_f),
            None => None,
        };
        if pseudo.cluster_count < 2 {
            rows.push(SweepRow {
                alpha,
                cluster_count: pseudo.cluster_count,
                assigned_count: pseudo.assigned_count,
                tar: None,
                pairwise_f,
            });
            continue;
        }
        let (params4, _) = stage4_pseudo_adapt(target, &pseudo, stage2_params, cfg)?;
        let tar = match target.labels() {
            Some(_) => {
                let h4 = hidden_features(&params4, target)?;
                let scores = verification_scores(&h4)?;
                Some(tar_at_far(&scores, &[far_target])?[0].1)
            }
            None => None,
        };
        rows.push(SweepRow {
            alpha,
            cluster_count: pseudo.cluster_count,
            assigned_count: pseudo.assigned_count,
            tar,
            pairwise_f,
        });
    }
    Ok(rows)
}
