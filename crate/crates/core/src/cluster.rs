//! Graph-based pseudo-labeling ("simplified spectral clustering").
//!
//! The pipeline builds a cosine-similarity graph over target samples with
//! edges where similarity strictly exceeds `alpha`, takes connected
//! components of size at least `min_component_size` as clusters, averages
//! raw member vectors into prototypes, and finally assigns scattered
//! points to the nearest prototype when that cosine strictly exceeds
//! `beta`. Prototypes stay frozen during the single pickup pass.

use crate::embedding::EmbeddingSet;
use crate::error::CdaError;
use crate::Result;
use rayon::prelude::*;

/// Thresholds controlling the pseudo-label pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    /// Edge threshold on cosine similarity (open interval (-1, 1)).
    pub alpha: f64,
    /// Scattered-point pickup threshold (open interval (-1, 1)).
    pub beta: f64,
    /// Minimum component size for a cluster.
    pub min_component_size: usize,
    /// Largest sample count for which the similarity matrix is
    /// materialized; larger inputs stream edges blockwise.
    pub materialize_cap: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            alpha: 0.675,
            beta: 0.8,
            min_component_size: 3,
            materialize_cap: 30_000,
        }
    }
}

impl ClusterConfig {
    /// Checks threshold ranges and the minimum component size.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v <= -1.0 || v >= 1.0 {
                return Err(CdaError::Invalid(format!(
                    "{name} must lie strictly between -1 and 1, got {v}"
                )));
            }
        }
        if self.min_component_size == 0 {
            return Err(CdaError::Invalid(
                "min_component_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Symmetric N x N cosine-similarity matrix.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from row-major data; must be square, symmetric,
    /// with unit diagonal.
    pub fn from_data(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(CdaError::Invalid(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                data.len()
            )));
        }
        for i in 0..n {
            if (data[i * n + i] - 1.0).abs() > 1e-9 {
                return Err(CdaError::Invalid(format!(
                    "diagonal entry {i} is {}, expected 1",
                    data[i * n + i]
                )));
            }
            for j in (i + 1)..n {
                if (data[i * n + j] - data[j * n + i]).abs() > 1e-9 {
                    return Err(CdaError::Invalid(format!(
                        "matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SimilarityMatrix { n, data })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.n
    }

    /// True for the 0 x 0 matrix.
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Entry `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Undirected graph over sample indices; edges stored as `(i, j)` with
/// `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
}

impl ClusterGraph {
    /// Builds a graph, normalizing and validating edges.
    pub fn new(node_count: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        for e in &mut edges {
            if e.0 == e.1 {
                return Err(CdaError::Invalid(format!("self-loop at node {}", e.0)));
            }
            if e.0.max(e.1) >= node_count {
                return Err(CdaError::Invalid(format!(
                    "edge ({}, {}) out of range for {node_count} nodes",
                    e.0, e.1
                )));
            }
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(ClusterGraph { node_count, edges })
    }

    /// Number of nodes.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Normalized edge list.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

/// Cluster assignments with prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeling {
    /// Per-sample cluster id, `None` when unassigned.
    pub assignments: Vec<Option<usize>>,
    /// Mean raw vector of each cluster's members (before pickup).
    pub prototypes: Vec<Vec<f64>>,
    /// Number of clusters.
    pub cluster_count: usize,
    /// Number of assigned samples.
    pub assigned_count: usize,
    /// Set when pickup was requested but no clusters existed to assign to.
    pub no_cluster_warning: bool,
}

impl PseudoLabeling {
    /// Assignments in label-file form: cluster id or -1 for unassigned.
    pub fn to_labels(&self) -> Vec<i64> {
        self.assignments
            .iter()
            .map(|a| a.map_or(-1, |c| c as i64))
            .collect()
    }

    /// Cluster sizes indexed by cluster id.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.cluster_count];
        for a in self.assignments.iter().flatten() {
            sizes[*a] += 1;
        }
        sizes
    }

    /// Plain-text report: cluster count, assigned count, size histogram.
    pub fn report(&self) -> String {
        let sizes = self.cluster_sizes();
        let mut hist = std::collections::BTreeMap::new();
        for s in sizes {
            *hist.entry(s).or_insert(0usize) += 1;
        }
        let mut out = String::new();
        out.push_str(&format!("cluster_count\t{}\n", self.cluster_count));
        out.push_str(&format!("assigned_count\t{}\n", self.assigned_count));
        out.push_str(&format!(
            "unassigned_count\t{}\n",
            self.assignments.len() - self.assigned_count
        ));
        out.push_str("size_histogram\tsize\tclusters\n");
        for (size, count) in hist {
            out.push_str(&format!("size_histogram\t{size}\t{count}\n"));
        }
        if self.no_cluster_warning {
            out.push_str("warning\tno clusters; scattered points left unassigned\n");
        }
        out
    }
}

fn row_norms(set: &EmbeddingSet) -> Result<Vec<f64>> {
    set.rows()
        .enumerate()
        .map(|(i, r)| {
            let n = r
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if n == 0.0 {
                Err(CdaError::ZeroNorm { index: i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn cosine(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    dot / (na * nb)
}

/// Full cosine-similarity matrix of a set; errors on zero-norm rows.
pub fn cosine_similarity_matrix(set: &EmbeddingSet) -> Result<SimilarityMatrix> {
    if set.is_empty() {
        return Err(CdaError::Invalid(
            "similarity matrix needs at least one sample".into(),
        ));
    }
    let n = set.len();
    let norms = row_norms(set)?;
    let mut data = vec![0.0f64; n * n];
    let rows: Vec<&[f32]> = set.rows().collect();
    data.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        for (j, item) in out.iter_mut().enumerate() {
            *item = if i == j {
                1.0
            } else {
                cosine(rows[i], rows[j], norms[i], norms[j])
            };
        }
    });
    Ok(SimilarityMatrix { n, data })
}

/// Thresholded graph: edge `(i, j)` iff `s(i, j) > alpha` strictly.
pub fn build_graph(sim: &SimilarityMatrix, alpha: f64) -> Result<ClusterGraph> {
    let n = sim.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if sim.get(i, j) > alpha {
                edges.push((i, j));
            }
        }
    }
    Ok(ClusterGraph {
        node_count: n,
        edges,
    })
}

/// Streamed equivalent of `build_graph(cosine_similarity_matrix(set))`
/// that never materializes the matrix.
fn build_graph_streaming(set: &EmbeddingSet, alpha: f64) -> Result<ClusterGraph> {
    let n = set.len();
    let norms = row_norms(set)?;
    let rows: Vec<&[f32]> = set.rows().collect();
    let per_row: Vec<Vec<(usize, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut es = Vec::new();
            for j in (i + 1)..n {
                if cosine(rows[i], rows[j], norms[i], norms[j]) > alpha {
                    es.push((i, j));
                }
            }
            es
        })
        .collect();
    let edges = per_row.into_iter().flatten().collect();
    Ok(ClusterGraph {
        node_count: n,
        edges,
    })
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Connected components as sorted index lists, ordered by smallest member.
pub fn connected_components(graph: &ClusterGraph) -> Vec<Vec<usize>> {
    let n = graph.node_count();
    let mut uf = UnionFind::new(n);
    for &(i, j) in graph.edges() {
        uf.union(i, j);
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    let mut root_min: std::collections::HashMap<usize, usize> = Default::default();
    for i in 0..n {
        let r = uf.find(i);
        let entry = root_min.entry(r).or_insert(i);
        let key = *entry;
        groups.entry(key).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Components of size at least `p` become clusters (ids dense, ordered by
/// smallest member); everything else is unassigned. Prototypes are left
/// empty for [`compute_prototypes`].
pub fn components_to_clusters(
    components: &[Vec<usize>],
    n: usize,
    p: usize,
) -> Result<PseudoLabeling> {
    let mut seen = vec![false; n];
    for c in components {
        for &i in c {
            if i >= n {
                return Err(CdaError::Invalid(format!(
                    "component index {i} out of range for {n} nodes"
                )));
            }
            if seen[i] {
                return Err(CdaError::Invalid(format!(
                    "components overlap at index {i}"
                )));
            }
            seen[i] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(CdaError::Invalid(format!(
            "components do not cover index {missing}"
        )));
    }

    let mut keep: Vec<&Vec<usize>> = components.iter().filter(|c| c.len() >= p).collect();
    keep.sort_by_key(|c| c.iter().min().copied().unwrap_or(usize::MAX));
    let mut assignments = vec![None; n];
    for (id, comp) in keep.iter().enumerate() {
        for &i in comp.iter() {
            assignments[i] = Some(id);
        }
    }
    let assigned_count = assignments.iter().filter(|a| a.is_some()).count();
    Ok(PseudoLabeling {
        assignments,
        prototypes: Vec::new(),
        cluster_count: keep.len(),
        assigned_count,
        no_cluster_warning: false,
    })
}

/// Fills prototypes with the arithmetic mean of each cluster's raw member
/// vectors.
pub fn compute_prototypes(set: &EmbeddingSet, labeling: &PseudoLabeling) -> Result<PseudoLabeling> {
    if labeling.assignments.len() != set.len() {
        return Err(CdaError::Invalid(format!(
            "labeling covers {} samples, set has {}",
            labeling.assignments.len(),
            set.len()
        )));
    }
    let d = set.dim();
    let mut sums = vec![vec![0.0f64; d]; labeling.cluster_count];
    let mut counts = vec![0usize; labeling.cluster_count];
    for (i, a) in labeling.assignments.iter().enumerate() {
        if let Some(c) = a {
            counts[*c] += 1;
            for (s, &v) in sums[*c].iter_mut().zip(set.row(i)) {
                *s += f64::from(v);
            }
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(CdaError::Invalid(format!("cluster {empty} has no members")));
    }
    let prototypes = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    let mut out = labeling.clone();
    out.prototypes = prototypes;
    Ok(out)
}

/// Single-pass scattered-point pickup against frozen prototypes: an
/// unassigned point joins the cluster of its most-similar prototype when
/// that cosine strictly exceeds `beta`; ties break to the smallest cluster
/// id. When no clusters exist the labeling is returned unchanged with
/// `no_cluster_warning` set.
pub fn assign_scattered(
    set: &EmbeddingSet,
    labeling: &PseudoLabeling,
    beta: f64,
) -> Result<PseudoLabeling> {
    let mut out = labeling.clone();
    let any_unassigned = out.assignments.iter().any(|a| a.is_none());
    if out.cluster_count == 0 {
        out.no_cluster_warning = any_unassigned;
        return Ok(out);
    }
    if out.prototypes.len() != out.cluster_count {
        return Err(CdaError::Invalid(
            "prototypes not computed before pickup".into(),
        ));
    }
    let proto_norms: Vec<f64> = out
        .prototypes
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for i in 0..set.len() {
        if out.assignments[i].is_some() {
            continue;
        }
        let row = set.row_f64(i);
        let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn == 0.0 {
            return Err(CdaError::ZeroNorm { index: i });
        }
        let mut best: Option<(usize, f64)> = None;
        for (c, (proto, &pn)) in out.prototypes.iter().zip(&proto_norms).enumerate() {
            if pn == 0.0 {
                continue;
            }
            let dot: f64 = row.iter().zip(proto).map(|(a, b)| a * b).sum();
            let s = dot / (rn * pn);
            // strictly-greater keeps the smallest cluster id on ties
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((c, s));
            }
        }
        if let Some((c, s)) = best {
            if s > beta {
                out.assignments[i] = Some(c);
                out.assigned_count += 1;
            }
        }
    }
    Ok(out)
}

/// The full pipeline: similarity graph, components, size filter,
/// prototypes, scattered-point pickup.
pub fn pseudo_label_pipeline(set: &EmbeddingSet, cfg: &ClusterConfig) -> Result<PseudoLabeling> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(CdaError::Invalid(
            "pseudo-labeling needs at least one sample".into(),
        ));
    }
    let graph = if set.len() <= cfg.materialize_cap {
        let sim = cosine_similarity_matrix(set)?;
        build_graph(&sim, cfg.alpha)?
    } else {
        build_graph_streaming(set, cfg.alpha)?
    };
    let components = connected_components(&graph);
    let labeling = components_to_clusters(&components, set.len(), cfg.min_component_size)?;
    let labeling = if labeling.cluster_count > 0 {
        compute_prototypes(set, &labeling)?
    } else {
        labeling
    };
    assign_scattered(set, &labeling, cfg.beta)
}

/// Pairwise clustering quality of assigned points against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterQuality {
    pub pairwise_precision: f64,
    pub pairwise_recall: f64,
    pub pairwise_f: f64,
    pub purity: f64,
}

/// Scores a labeling against ground-truth labels over assigned points:
/// precision is the fraction of same-cluster pairs sharing a true label,
/// recall the fraction of same-truth pairs sharing a cluster, purity the
/// weighted majority-label fraction. Vacuous ratios (no qualifying pairs)
/// count as 1.
pub fn cluster_quality(labeling: &PseudoLabeling, truth: &[i64]) -> Result<ClusterQuality> {
    if truth.len() != labeling.assignments.len() {
        return Err(CdaError::Invalid(format!(
            "truth has {} labels, labeling covers {} samples",
            truth.len(),
            labeling.assignments.len()
        )));
    }
    let assigned: Vec<(usize, usize, i64)> = labeling
        .assignments
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|c| (i, c, truth[i])))
        .collect();
    let mut same_cluster = 0u64;
    let mut same_both = 0u64;
    let mut same_truth = 0u64;
    for (i, &(_, ci, ti)) in assigned.iter().enumerate() {
        for &(_, cj, tj) in assigned.iter().skip(i + 1) {
            let sc = ci == cj;
            let st = ti == tj;
            same_cluster += u64::from(sc);
            same_truth += u64::from(st);
            same_both += u64::from(sc && st);
        }
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(same_both, same_cluster);
    let recall = ratio(same_both, same_truth);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };

    let mut majority = vec![std::collections::HashMap::<i64, usize>::new(); labeling.cluster_count];
    for &(_, c, t) in &assigned {
        *majority[c].entry(t).or_insert(0) += 1;
    }
    let purity = if assigned.is_empty() {
        1.0
    } else {
        let hits: usize = majority
            .iter()
            .map(|m| m.values().max().copied().unwrap_or(0))
            .sum();
        hits as f64 / assigned.len() as f64
    };
    Ok(ClusterQuality {
        pairwise_precision: precision,
        pairwise_recall: recall,
        pairwise_f: f,
        purity,
    })
}
