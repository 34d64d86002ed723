//! Evaluation protocols over document representations: cosine retrieval
//! precision-recall curves, label-based clustering indices, word-embedding
//! neighborhoods and a logistic-regression probe.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::inference::DocRepresentation;
use crate::model::{ModelParams, ParamSet};
use crate::numerics::{dot, norm, sigmoid, Matrix, Rng};
use crate::training::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no {0} documents supplied")]
    Empty(&'static str),
    #[error("document {0} has no labels")]
    Unlabeled(usize),
    #[error("every query was skipped: no relevant documents in the index")]
    AllQueriesSkipped,
    #[error("at least two clusters are required, found {0}")]
    TooFewClusters(usize),
    #[error("clusters '{0}' and '{1}' have coincident centroids")]
    DegenerateCentroids(String, String),
    #[error("every cluster has zero dispersion")]
    DegenerateClusters,
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("model has no local embedding space")]
    NoLocalSpace,
    #[error("probe needs exactly two classes in the training set, found {0:?}")]
    DegenerateLabels(Vec<String>),
    #[error("test label '{0}' was not seen in training")]
    UnseenLabel(String),
    #[error("representation dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `1 - a.b / (|a| |b|)`; defined as 1 when either vector is zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

fn cosine_distance_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

/// Default recall levels for precision-recall curves.
pub const RECALL_GRID: [f64; 16] = [
    0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
];

pub fn recall_grid() -> Vec<f64> {
    RECALL_GRID.to_vec()
}


#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relevance {
    /// 1 when label sets are identical, 0 otherwise.
    Exact,
    /// Jaccard similarity of the label sets.
    Jaccard,
}

impl std::str::FromStr for Relevance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Relevance::Exact),
            "jaccard" => Ok(Relevance::Jaccard),
            other => Err(format!("unknown relevance mode '{other}' (expected exact or jaccard)")),
        }
    }
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn relevance_gain(mode: Relevance, query: &BTreeSet<String>, doc: &BTreeSet<String>) -> f64 {
    match mode {
        Relevance::Exact => {
            if query == doc {
                1.0
            } else {
                0.0
            }
        }
        Relevance::Jaccard => jaccard(query, doc),
    }
}

/// Relative slack applied to recall targets so that products like
/// `0.7 * 10` still land on the intended rank.
pub const RECALL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    /// Mean precision over evaluated queries at each recall level.
    pub precision: Vec<f64>,
    pub queries: usize,
    /// Queries with no relevant document in the index.
    pub skipped: usize,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("recall,precision\n");
        for (r, p) in self.recall.iter().zip(&self.precision) {
            let _ = writeln!(out, "{r},{p}");
        }
        out
    }

    /// Mean precision over the grid points whose recall lies in `[lo, hi]`.
    pub fn mean_precision_between(&self, lo: f64, hi: f64) -> Option<f64> {
        let sel: Vec<f64> = self
            .recall
            .iter()
            .zip(&self.precision)
            .filter(|(r, _)| **r >= lo && **r <= hi)
            .map(|(_, p)| *p)
            .collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }
}

/// Indices of `index` ranked by ascending cosine distance to `query`;
/// ties keep index order.
pub fn rank_by_cosine(query: &[f64], index: &[DocRepresentation], index_norms: &[f64]) -> Vec<usize> {
    let qn = norm(query);
    let dist: Vec<f64> = index
        .iter()
        .zip(index_norms)
        .map(|(d, &n)| cosine_distance_with_norms(query, qn, &d.vector, n))
        .collect();
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    order
}

/// Exact-label precision for one ranking, or `None` when no index document
/// shares the query's label set. With `R` relevant documents, recall level
/// `rho` is read at rank `r = ceil(rho * R)` and the precision there is the
/// fraction of the top `r` that are relevant.
pub fn exact_precision_at_recall(ranked_relevant: &[bool], grid: &[f64]) -> Option<Vec<f64>> {
    let mut cumulative = Vec::with_capacity(ranked_relevant.len());
    let mut hits = 0usize;
    for &rel in ranked_relevant {
        hits += rel as usize;
        cumulative.push(hits);
    }
    let total = hits;
    if total == 0 {
        return None;
    }
    Some(
        grid.iter()
            .map(|&rho| {
                let r = ((rho * total as f64 * (1.0 - RECALL_SLACK)).ceil() as usize).clamp(1, total);
                cumulative[r - 1] as f64 / r as f64
            })
            .collect(),
    )
}

/// Graded precision for one ranked gain list, or `None` when the total gain
/// is zero. Recall level `rho` is read at the smallest rank `r` whose
/// cumulative gain reaches `rho * total_gain`; the precision there is the
/// cumulative gain divided by `r`.
pub fn graded_precision_at_recall(ranked_gains: &[f64], grid: &[f64]) -> Option<Vec<f64>> {
    let mut cumulative = Vec::with_capacity(ranked_gains.len());
    let mut acc = 0.0;
    for g in ranked_gains {
        acc += g;
        cumulative.push(acc);
    }
    let total = acc;
    if total <= 0.0 {
        return None;
    }
    Some(
        grid.iter()
            .map(|&rho| {
                let target = rho * total * (1.0 - RECALL_SLACK);
                let r = cumulative
                    .partition_point(|&c| c < target)
                    .min(cumulative.len() - 1);
                cumulative[r] / (r + 1) as f64
            })
            .collect(),
    )
}

pub fn retrieval_pr(
    queries: &[DocRepresentation],
    index: &[DocRepresentation],
    relevance: Relevance,
    grid: &[f64],
) -> Result<PrCurve> {
    if queries.is_empty() {
        return Err(EvalError::Empty("query"));
    }
    if index.is_empty() {
        return Err(EvalError::Empty("index"));
    }
    for d in queries.iter().chain(index) {
        if d.labels.is_empty() {
            return Err(EvalError::Unlabeled(d.id));
        }
    }
    let dim = index[0].vector.len();
    if let Some(bad) = queries.iter().chain(index).find(|d| d.vector.len() != dim) {
        return Err(EvalError::DimensionMismatch(dim, bad.vector.len()));
    }
    let index_norms: Vec<f64> = index.iter().map(|d| norm(&d.vector)).collect();
    let per_query: Vec<Option<Vec<f64>>> = queries
        .par_iter()
        .map(|q| {
            let order = rank_by_cosine(&q.vector, index, &index_norms);
            match relevance {
                Relevance::Exact => {
                    let rel: Vec<bool> = order.iter().map(|&i| index[i].labels == q.labels).collect();
                    exact_precision_at_recall(&rel, grid)
                }
                Relevance::Jaccard => {
                    let gains: Vec<f64> = order.iter().map(|&i| jaccard(&q.labels, &index[i].labels)).collect();
                    graded_precision_at_recall(&gains, grid)
                }
            }
        })
        .collect();

    let mut sums = vec![0.0; grid.len()];
    let mut evaluated = 0usize;
    for p in per_query.iter().flatten() {
        for (s, v) in sums.iter_mut().zip(p) {
            *s += v;
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(EvalError::AllQueriesSkipped);
    }
    Ok(PrCurve {
        recall: grid.to_vec(),
        precision: sums.iter().map(|s| s / evaluated as f64).collect(),
        queries: evaluated,
        skipped: queries.len() - evaluated,
    })
}

/// Gold-label clusters with arithmetic-mean centroids and mean cosine
/// distance of members to their centroid.
#[derive(Debug, Clone)]
pub struct ClusterGeometry {
    pub names: Vec<String>,
    pub members: Vec<Vec<usize>>,
    pub centroids: Vec<Vec<f64>>,
    pub dispersion: Vec<f64>,
}

impl ClusterGeometry {
    /// Clusters are keyed by the `|`-joined label set and ordered by key.
    pub fn from_representations(reps: &[DocRepresentation]) -> Result<Self> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in reps.iter().enumerate() {
            if r.labels.is_empty() {
                return Err(EvalError::Unlabeled(r.id));
            }
            groups
                .entry(crate::corpus::join_labels(&r.labels))
                .or_default()
                .push(i);
        }
        if groups.len() < 2 {
            return Err(EvalError::TooFewClusters(groups.len()));
        }
        let dim = reps[0].vector.len();
        if let Some(bad) = reps.iter().find(|r| r.vector.len() != dim) {
            return Err(EvalError::DimensionMismatch(dim, bad.vector.len()));
        }
        let (names, members): (Vec<String>, Vec<Vec<usize>>) = groups.into_iter().unzip();
        let centroids: Vec<Vec<f64>> = members
            .iter()
            .map(|idx| {
                let mut c = vec![0.0; dim];
                for &i in idx {
                    for (cj, x) in c.iter_mut().zip(&reps[i].vector) {
                        *cj += x;
                    }
                }
                c.iter_mut().for_each(|x| *x /= idx.len() as f64);
                c
            })
            .collect();
        let dispersion = members
            .iter()
            .zip(&centroids)
            .map(|(idx, c)| {
                idx.iter()
                    .map(|&i| cosine_distance(&reps[i].vector, c))
                    .sum::<f64>()
                    / idx.len() as f64
            })
            .collect();
        Ok(Self {
            names,
            members,
            centroids,
            dispersion,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation over clusters of
/// `max_{j != i} (pi_i + pi_j) / d(c_i, c_j)`.
pub fn davies_bouldin(reps: &[DocRepresentation]) -> Result<(f64, f64)> {
    davies_bouldin_from(&ClusterGeometry::from_representations(reps)?)
}

pub fn davies_bouldin_from(g: &ClusterGeometry) -> Result<(f64, f64)> {
    let n = g.len();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = cosine_distance(&g.centroids[i], &g.centroids[j]);
            if d == 0.0 {
                return Err(EvalError::DegenerateCentroids(g.names[i].clone(), g.names[j].clone()));
            }
            worst = worst.max((g.dispersion[i] + g.dispersion[j]) / d);
        }
        scores.push(worst);
    }
    Ok(mean_std(&scores))
}

/// Smallest centroid distance over the largest dispersion.
pub fn dunn(reps: &[DocRepresentation]) -> Result<f64> {
    dunn_from(&ClusterGeometry::from_representations(reps)?)
}

pub fn dunn_from(g: &ClusterGeometry) -> Result<f64> {
    let max_spread = g.dispersion.iter().copied().fold(0.0, f64::max);
    if max_spread == 0.0 {
        return Err(EvalError::DegenerateClusters);
    }
    let mut min_sep = f64::INFINITY;
    for i in 0..g.len() {
        for j in i + 1..g.len() {
            min_sep = min_sep.min(cosine_distance(&g.centroids[i], &g.centroids[j]));
        }
    }
    Ok(min_sep / max_spread)
}

/// Centroid silhouette averaged within each cluster, then mean and
/// population standard deviation over clusters.
pub fn silhouette(reps: &[DocRepresentation]) -> Result<(f64, f64)> {
    silhouette_from(reps, &ClusterGeometry::from_representations(reps)?)
}

pub fn silhouette_from(reps: &[DocRepresentation], g: &ClusterGeometry) -> Result<(f64, f64)> {
    let per_cluster: Vec<f64> = (0..g.len())
        .map(|i| {
            let sum: f64 = g.members[i]
                .iter()
                .map(|&p| {
                    let x = &reps[p].vector;
                    let own = cosine_distance(x, &g.centroids[i]);
                    let nearest_other = (0..g.len())
                        .filter(|&j| j != i)
                        .map(|j| cosine_distance(x, &g.centroids[j]))
                        .fold(f64::INFINITY, f64::min);
                    let denom = own.max(nearest_other);
                    if denom == 0.0 {
                        0.0
                    } else {
                        (nearest_other - own) / denom
                    }
                })
                .sum();
            sum / g.members[i].len() as f64
        })
        .collect();
    Ok(mean_std(&per_cluster))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMetrics {
    pub davies_bouldin: (f64, f64),
    pub dunn: f64,
    pub silhouette: (f64, f64),
    pub clusters: Vec<(String, usize, f64)>,
}

pub fn cluster_metrics(reps: &[DocRepresentation]) -> Result<ClusterMetrics> {
    let g = ClusterGeometry::from_representations(reps)?;
    Ok(ClusterMetrics {
        davies_bouldin: davies_bouldin_from(&g)?,
        dunn: dunn_from(&g)?,
        silhouette: silhouette_from(reps, &g)?,
        clusters: g
            .names
            .iter()
            .zip(&g.members)
            .zip(&g.dispersion)
            .map(|((n, m), d)| (n.clone(), m.len(), *d))
            .collect(),
    })
}

impl ClusterMetrics {
    /// Flat `key=value` report.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "davies_bouldin_mean={}", self.davies_bouldin.0);
        let _ = writeln!(out, "davies_bouldin_std={}", self.davies_bouldin.1);
        let _ = writeln!(out, "dunn={}", self.dunn);
        let _ = writeln!(out, "silhouette_mean={}", self.silhouette.0);
        let _ = writeln!(out, "silhouette_std={}", self.silhouette.1);
        let _ = writeln!(out, "clusters={}", self.clusters.len());
        for (name, size, spread) in &self.clusters {
            let _ = writeln!(out, "cluster.{name}.size={size}");
            let _ = writeln!(out, "cluster.{name}.dispersion={spread}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSpace {
    /// Decoder output embeddings.
    Global,
    /// Local-context embeddings (SAVAE only).
    Local,
}

impl std::str::FromStr for EmbeddingSpace {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "global" => Ok(EmbeddingSpace::Global),
            "local" => Ok(EmbeddingSpace::Local),
            other => Err(format!("unknown embedding space '{other}' (expected global or local)")),
        }
    }
}

pub fn word_embeddings(params: &ModelParams, space: EmbeddingSpace) -> Result<&Matrix> {
    match space {
        EmbeddingSpace::Global => Ok(&params.decoder_emb),
        EmbeddingSpace::Local => params.local_emb.as_ref().ok_or(EvalError::NoLocalSpace),
    }
}

/// The `n` tokens closest to `query` by cosine distance, query excluded,
/// ties broken by vocabulary id.
pub fn nearest_words(query: &str, vocab: &Vocabulary, embeddings: &Matrix, n: usize) -> Result<Vec<(String, f64)>> {
    let q = vocab
        .id(query)
        .ok_or_else(|| EvalError::UnknownToken(query.to_string()))? as usize;
    let qrow = embeddings.row(q);
    let mut scored: Vec<(usize, f64)> = (0..embeddings.rows().min(vocab.len()))
        .filter(|&v| v != q)
        .map(|v| (v, cosine_distance(qrow, embeddings.row(v))))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(n)
        .map(|(v, d)| (vocab.tokens()[v].clone(), d))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Z-score features with training-set statistics before fitting.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 100,
            batch_size: 256,
            seed: 2,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub negative_label: String,
    pub positive_label: String,
    pub train_size: usize,
    pub test_size: usize,
}

impl ProbeReport {
    pub fn report(&self) -> String {
        format!(
            "accuracy={}\nnegative_label={}\npositive_label={}\ntrain_size={}\ntest_size={}\n",
            self.accuracy, self.negative_label, self.positive_label, self.train_size, self.test_size
        )
    }
}

struct Logistic {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ParamSet for Logistic {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![("probe.weight".into(), &self.weights), ("probe.bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("probe.weight".into(), &mut self.weights),
            ("probe.bias".into(), &mut self.bias),
        ]
    }
}

impl Logistic {
    fn score(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias[0]
    }
}

/// Logistic regression on frozen representations, fitted with Adam on the
/// mean log-likelihood; returns test accuracy.
pub fn linear_probe(train: &[DocRepresentation], test: &[DocRepresentation], config: &ProbeConfig) -> Result<ProbeReport> {
    if train.is_empty() {
        return Err(EvalError::Empty("training"));
    }
    if test.is_empty() {
        return Err(EvalError::Empty("test"));
    }
    let classes: BTreeSet<String> = train.iter().map(|r| crate::corpus::join_labels(&r.labels)).collect();
    if classes.len() != 2 {
        return Err(EvalError::DegenerateLabels(classes.into_iter().collect()));
    }
    let classes: Vec<String> = classes.into_iter().collect();
    let target = |r: &DocRepresentation| -> Result<f64> {
        let key = crate::corpus::join_labels(&r.labels);
        if key == classes[1] {
            Ok(1.0)
        } else if key == classes[0] {
            Ok(0.0)
        } else {
            Err(EvalError::UnseenLabel(key))
        }
    };
    let dim = train[0].vector.len();
    if let Some(bad) = train.iter().chain(test).find(|r| r.vector.len() != dim) {
        return Err(EvalError::DimensionMismatch(dim, bad.vector.len()));
    }

    let (shift, scale) = if config.standardize {
        let n = train.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in train {
            for (m, x) in mean.iter_mut().zip(&r.vector) {
                *m += x / n;
            }
        }
        let mut sd = vec![0.0; dim];
        for r in train {
            for ((s, x), m) in sd.iter_mut().zip(&r.vector).zip(&mean) {
                *s += (x - m) * (x - m) / n;
            }
        }
        let sd = sd.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        (mean, sd)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let features = |r: &DocRepresentation| -> Vec<f64> {
        r.vector
            .iter()
            .zip(&shift)
            .zip(&scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(features).collect();
    let ys: Vec<f64> = train.iter().map(target).collect::<Result<_>>()?;
    let test_xs: Vec<Vec<f64>> = test.iter().map(features).collect();
    let test_ys: Vec<f64> = test.iter().map(target).collect::<Result<_>>()?;

    let mut model = Logistic {
        weights: vec![0.0; dim],
        bias: vec![0.0],
    };
    let mut grads = Logistic {
        weights: vec![0.0; dim],
        bias: vec![0.0],
    };
    let mut state = AdamState::new(&model);
    let adam = AdamConfig::with_learning_rate(config.learning_rate);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..config.epochs {
        Rng::substream(config.seed, &[epoch as u64]).shuffle(&mut order);
        for batch in order.chunks(config.batch_size.max(1)) {
            grads.weights.iter_mut().for_each(|g| *g = 0.0);
            grads.bias[0] = 0.0;
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let residual = (ys[i] - sigmoid(model.score(&xs[i]))) * inv;
                for (g, x) in grads.weights.iter_mut().zip(&xs[i]) {
                    *g += residual * x;
                }
                grads.bias[0] += residual;
            }
            adam_step(&mut model, &grads, &mut state, &adam)
                .expect("probe gradients are finite for finite representations");
        }
    }
    let correct = test_xs
        .iter()
        .zip(&test_ys)
        .filter(|(x, &y)| (model.score(x) > 0.0) == (y == 1.0))
        .count();
    Ok(ProbeReport {
        accuracy: correct as f64 / test.len() as f64,
        negative_label: classes[0].clone(),
        positive_label: classes[1].clone(),
        train_size: train.len(),
        test_size: test.len(),
    })
}
