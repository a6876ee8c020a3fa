//! Clustering-based domain adaptation (CDA) for recognition embeddings.
//!
//! The crate operates on precomputed or synthetic feature vectors and provides
//! four layers that compose into the full adaptation workflow:
//!
//! * [`embedding`] / [`io`]: embedding datasets, binary/CSV persistence,
//!   synthetic two-domain generation.
//! * [`kernel`] / [`mmd`]: Gaussian kernel mixtures and maximum mean
//!   discrepancy estimators (biased, unbiased quadratic, linear streaming)
//!   with analytic gradients.
//! * [`cluster`]: similarity-graph pseudo-labeling: thresholded cosine
//!   graph, connected components, prototypes, scattered-point pickup.
//! * [`adapt`]: a trainable affine adapter with softmax heads and the
//!   staged adaptation procedure combining classification and MMD losses.
//! * [`eval`]: biometric verification and identification metrics
//!   (TAR@FAR, CMC, TPIR@FPIR) plus a 2-D PCA export for plotting.
//!
//! All randomized operations are deterministic functions of an explicit
//! 64-bit seed; results are independent of thread count.

pub mod adapt;
pub mod cluster;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernel;
pub mod mmd;
pub mod rng;

pub use adapt::{
    backward, forward, hidden_features, loss_history_csv, run_cda, run_stage2, softmax_cls_loss,
    stage2_mmd_adapt, stage4_pseudo_adapt, sweep_alpha, total_loss, AdapterParams, Batch,
    CdaOutcome, Forward, Gradients, KernelPolicy, LossBreakdown, LossRecord, MmdLayers,
    Stage2Outcome, SweepRow, TrainConfig,
};
pub use cluster::{
    assign_scattered, build_graph, cluster_quality, components_to_clusters, compute_prototypes,
    connected_components, cosine_similarity_matrix, pseudo_label_pipeline, ClusterConfig,
    ClusterGraph, ClusterQuality, PseudoLabeling, SimilarityMatrix,
};
pub use embedding::{synthesize_domain_pair, EmbeddingSet, SynthConfig, UNLABELED};
pub use error::CdaError;
pub use eval::{
    cmc, export_projection, pair_scores, roc_points, tar_at_far, tpir_at_fpir, verification_scores,
    EvalReport, ScoreSet,
};
pub use kernel::{bandwidth_ladder, gaussian_kernel, median_bandwidth, multi_kernel, KernelSpec};
pub use mmd::{
    mmd_biased, mmd_biased_gradient, mmd_linear_streaming, mmd_unbiased_quadratic, Estimator,
    MmdEstimate, Wrt,
};

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CdaError>;
