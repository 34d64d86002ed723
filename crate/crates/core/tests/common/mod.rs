#![allow(dead_code)]

use std::collections::BTreeSet;

use savae::evaluation::cosine_distance;
use savae::inference::DocRepresentation;
use savae::model::{elbo_gradients_with_eps, ModelConfig, ModelMode, ModelParams, ParamSet};
use savae::numerics::{logsumexp, standard_normal_log_density, Rng};
use savae::Document;

pub fn small_config(mode: ModelMode, m: usize, d: usize, k: usize, layers: Vec<usize>) -> ModelConfig {
    match mode {
        ModelMode::Savae => ModelConfig::savae(m, d, k),
        ModelMode::Nvdm => ModelConfig::nvdm(m, d),
    }
    .with_encoder_layers(layers)
}

/// Every entry uniform in `[-scale, scale]`, biases included.
pub fn random_params(config: &ModelConfig, rng: &mut Rng, scale: f64) -> ModelParams {
    let mut p = ModelParams::zeros(config);
    for (_, t) in p.tensors_mut() {
        for x in t.iter_mut() {
            *x = rng.uniform_range(-scale, scale);
        }
    }
    p
}

/// Entry `j` of tensor number `t` set to `0.1 * ((7j + 3t + 1) mod 11) - 0.5`.
pub fn patterned_params(config: &ModelConfig) -> ModelParams {
    let mut p = ModelParams::zeros(config);
    for (t, (_, data)) in p.tensors_mut().into_iter().enumerate() {
        for (j, x) in data.iter_mut().enumerate() {
            *x = 0.1 * ((7 * j + 3 * t + 1) % 11) as f64 - 0.5;
        }
    }
    p
}

pub fn random_doc(rng: &mut Rng, m: usize, min_len: usize, max_len: usize) -> Document {
    let len = min_len + rng.below((max_len - min_len + 1) as u64) as usize;
    let ids = (0..len).map(|_| rng.below(m as u64) as u32).collect();
    Document::new(ids, BTreeSet::new())
}

pub fn elbo_at(doc: &Document, params: &ModelParams, config: &ModelConfig, eps: &[f64]) -> f64 {
    elbo_gradients_with_eps(doc, params, config, eps).unwrap().0.total
}

/// Worst violation of `|a - n| <= max(rel * max(|a|, |n|), abs_floor)`
/// over every parameter entry, as `(name, index, analytic, numeric)`.
pub fn gradient_mismatches(
    doc: &Document,
    params: &ModelParams,
    config: &ModelConfig,
    eps: &[f64],
    h: f64,
    rel: f64,
    abs_floor: f64,
) -> Vec<(String, usize, f64, f64)> {
    let (_, grads) = elbo_gradients_with_eps(doc, params, config, eps).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();
    let mut bad = Vec::new();
    let mut probe = params.clone();
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = probe.tensors()[ti].1[j];
            probe.tensors_mut()[ti].1[j] = orig + h;
            let up = elbo_at(doc, &probe, config, eps);
            probe.tensors_mut()[ti].1[j] = orig - h;
            let down = elbo_at(doc, &probe, config, eps);
            probe.tensors_mut()[ti].1[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let diff = (a[j] - numeric).abs();
            if diff > (rel * a[j].abs().max(numeric.abs())).max(abs_floor) {
                bad.push((name.clone(), j, a[j], numeric));
            }
        }
    }
    bad
}

/// `log p(w) ~= logsumexp_s [log p(w|z_s) + log p(z_s) - log q(z_s)] - ln S`.
pub fn importance_log_likelihood(
    doc: &Document,
    params: &ModelParams,
    config: &ModelConfig,
    rng: &mut Rng,
    samples: usize,
) -> f64 {
    let q = savae::model::encode(doc, params, config).unwrap();
    let weights: Vec<f64> = (0..samples)
        .map(|_| {
            let z = q.sample_reparameterized(&rng.normals(config.latent_dim));
            savae::model::doc_log_likelihood(doc, &z, params, config).unwrap() + standard_normal_log_density(&z)
                - q.log_density(&z)
        })
        .collect();
    logsumexp(&weights) - (samples as f64).ln()
}

pub fn rep(id: usize, labels: &[&str], vector: Vec<f64>) -> DocRepresentation {
    DocRepresentation {
        id,
        labels: labels.iter().map(|s| s.to_string()).collect(),
        vector,
    }
}

/// Points scattered around `clusters` random directions; labels `c0, c1, ...`.
pub fn clustered_points(rng: &mut Rng, clusters: usize, per_cluster: usize, dim: usize, spread: f64) -> Vec<DocRepresentation> {
    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| rng.normals(dim)).collect();
    let mut out = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_cluster {
            let v = center.iter().map(|x| x + spread * rng.normal()).collect();
            out.push(DocRepresentation {
                id: out.len(),
                labels: BTreeSet::from([format!("c{c}")]),
                vector: v,
            });
        }
    }
    out
}

pub fn naive_groups(reps: &[DocRepresentation]) -> Vec<Vec<usize>> {
    let mut keys: Vec<String> = reps.iter().map(|r| savae::corpus::join_labels(&r.labels)).collect();
    keys.sort();
    keys.dedup();
    keys.iter()
        .map(|k| {
            (0..reps.len())
                .filter(|&i| &savae::corpus::join_labels(&reps[i].labels) == k)
                .collect()
        })
        .collect()
}

fn naive_centroid(reps: &[DocRepresentation], members: &[usize]) -> Vec<f64> {
    let dim = reps[0].vector.len();
    (0..dim)
        .map(|j| members.iter().map(|&i| reps[i].vector[j]).sum::<f64>() / members.len() as f64)
        .collect()
}

fn naive_spread(reps: &[DocRepresentation], members: &[usize], c: &[f64]) -> f64 {
    members.iter().map(|&i| cosine_distance(&reps[i].vector, c)).sum::<f64>() / members.len() as f64
}

fn population_mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn naive_davies_bouldin(reps: &[DocRepresentation]) -> (f64, f64) {
    let groups = naive_groups(reps);
    let cents: Vec<Vec<f64>> = groups.iter().map(|g| naive_centroid(reps, g)).collect();
    let spreads: Vec<f64> = groups.iter().zip(&cents).map(|(g, c)| naive_spread(reps, g, c)).collect();
    let scores: Vec<f64> = (0..groups.len())
        .map(|i| {
            (0..groups.len())
                .filter(|&j| j != i)
                .map(|j| (spreads[i] + spreads[j]) / cosine_distance(&cents[i], &cents[j]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    population_mean_std(&scores)
}

pub fn naive_dunn(reps: &[DocRepresentation]) -> f64 {
    let groups = naive_groups(reps);
    let cents: Vec<Vec<f64>> = groups.iter().map(|g| naive_centroid(reps, g)).collect();
    let max_spread = groups
        .iter()
        .zip(&cents)
        .map(|(g, c)| naive_spread(reps, g, c))
        .fold(0.0, f64::max);
    let mut min_sep = f64::INFINITY;
    for i in 0..cents.len() {
        for j in 0..cents.len() {
            if i != j {
                min_sep = min_sep.min(cosine_distance(&cents[i], &cents[j]));
            }
        }
    }
    min_sep / max_spread
}

pub fn naive_silhouette(reps: &[DocRepresentation]) -> (f64, f64) {
    let groups = naive_groups(reps);
    let cents: Vec<Vec<f64>> = groups.iter().map(|g| naive_centroid(reps, g)).collect();
    let per: Vec<f64> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut total = 0.0;
            for &p in g {
                let a = cosine_distance(&reps[p].vector, &cents[i]);
                let mut b = f64::INFINITY;
                for (j, c) in cents.iter().enumerate() {
                    if j != i {
                        b = b.min(cosine_distance(&reps[p].vector, c));
                    }
                }
                let m = a.max(b);
                total += if m == 0.0 { 0.0 } else { (b - a) / m };
            }
            total / g.len() as f64
        })
        .collect();
    population_mean_std(&per)
}

/// Brute-force ranking: repeatedly pick the unused index document with the
/// smallest distance, lowest position first on ties.
fn naive_ranking(q: &DocRepresentation, index: &[DocRepresentation]) -> Vec<usize> {
    let mut used = vec![false; index.len()];
    let mut order = Vec::new();
    for _ in 0..index.len() {
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in index.iter().enumerate() {
            if used[i] {
                continue;
            }
            let dist = cosine_distance(&q.vector, &d.vector);
            if best.map_or(true, |(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.unwrap();
        used[i] = true;
        order.push(i);
    }
    order
}

fn naive_jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.iter().filter(|x| b.contains(*x)).count() as f64;
    let union = a.iter().chain(b.iter()).collect::<BTreeSet<_>>().len() as f64;
    inter / union
}

/// Exact mode: precision at rank `ceil(rho * R)` over queries with `R > 0`.
pub fn naive_pr_exact(queries: &[DocRepresentation], index: &[DocRepresentation], grid: &[f64]) -> (Vec<f64>, usize) {
    let mut sums = vec![0.0; grid.len()];
    let mut used = 0;
    for q in queries {
        let order = naive_ranking(q, index);
        let relevant = index.iter().filter(|d| d.labels == q.labels).count();
        if relevant == 0 {
            continue;
        }
        used += 1;
        for (g, &rho) in grid.iter().enumerate() {
            // smallest integer r with r >= rho * R, at least 1
            let mut r = 1;
            while (r as f64) < rho * relevant as f64 - 1e-9 {
                r += 1;
            }
            let hits = order[..r].iter().filter(|&&i| index[i].labels == q.labels).count();
            sums[g] += hits as f64 / r as f64;
        }
    }
    (sums.iter().map(|s| s / used as f64).collect(), queries.len() - used)
}

/// Jaccard mode: precision at the first rank whose cumulative gain reaches
/// `rho` of the total; cumulative gains recomputed from scratch per rank.
pub fn naive_pr_jaccard(queries: &[DocRepresentation], index: &[DocRepresentation], grid: &[f64]) -> (Vec<f64>, usize) {
    let mut sums = vec![0.0; grid.len()];
    let mut used = 0;
    for q in queries {
        let order = naive_ranking(q, index);
        let gains: Vec<f64> = order.iter().map(|&i| naive_jaccard(&q.labels, &index[i].labels)).collect();
        let total: f64 = gains.iter().sum();
        if total == 0.0 {
            continue;
        }
        used += 1;
        for (g, &rho) in grid.iter().enumerate() {
            let mut r = 1;
            loop {
                let cum: f64 = gains[..r].iter().sum();
                if cum >= rho * total - 1e-9 * total || r == gains.len() {
                    sums[g] += cum / r as f64;
                    break;
                }
                r += 1;
            }
        }
    }
    (sums.iter().map(|s| s / used as f64).collect(), queries.len() - used)
}

pub fn two_topic_corpus(rng: &mut Rng, docs: usize, len: usize, m: usize) -> Vec<Document> {
    let half = (m / 2) as u64;
    (0..docs)
        .map(|i| {
            let topic = (i % 2) as u64;
            let ids = (0..len).map(|_| (topic * half + rng.below(half)) as u32).collect();
            Document::new(ids, BTreeSet::from([format!("t{topic}")]))
        })
        .collect()
}
