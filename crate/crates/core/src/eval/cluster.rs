use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::groups::EvalGroup;
use crate::error::{Error, Result};
use crate::metrics::Embedding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// L2-normalize points first.
    pub normalize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 2,
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
    /// Fewer distinct points than clusters.
    pub degenerate: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            d2.iter()
                .position(|&d| {
                    target -= d;
                    target < 0.0 && d > 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            0
        };
        centroids.push(points[pick].clone());
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> KMeansResult {
    let dim = points[0].len();
    let mut assignments = vec![0usize; points.len()];
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iter {
        let mut inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centroids);
            *a = c;
            inertia += d;
        }
        trace.push(inertia);

        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        for (c, cen) in centroids.iter_mut().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(cen, &next).sqrt());
            *cen = next;
        }
        if shift < cfg.tol {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&mut assignments)
        .map(|(p, a)| {
            let (c, d) = nearest(p, &centroids);
            *a = c;
            d
        })
        .sum();
    KMeansResult {
        assignments,
        centroids,
        inertia,
        inertia_trace: trace,
        degenerate: false,
    }
}

/// Euclidean K-means with k-means++ seeding and restarts; the restart with the
/// lowest inertia wins (earliest on ties).
pub fn kmeans(points: &[Vec<f32>], cfg: &KMeansConfig, seed: u64) -> Result<KMeansResult> {
    if cfg.k == 0 || points.len() < cfg.k {
        return Err(Error::Invalid(format!(
            "k-means needs at least k = {} points, got {}",
            cfg.k,
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Invalid("k-means points must share a nonzero dimension".into()));
    }
    let pts: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let v: Vec<f64> = p.iter().map(|&x| x as f64).collect();
            if !cfg.normalize {
                return v;
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter().map(|x| x / n).collect()
            } else {
                v
            }
        })
        .collect();

    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in &pts {
        if distinct.len() >= cfg.k {
            break;
        }
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    let degenerate = distinct.len() < cfg.k;
    if degenerate {
        log::warn!(
            "k-means: only {} distinct point(s) for k = {}; clustering is degenerate",
            distinct.len(),
            cfg.k
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let init = seed_centroids(&pts, cfg.k, &mut rng);
        let run = lloyd(&pts, init, cfg);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    best.degenerate = degenerate;
    Ok(best)
}

fn comb2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index (permutation model) from the contingency table.
/// Returns 1.0 when both partitions are trivial in the same way.
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} labels", truth.len()), pred.len()));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::Invalid("adjusted Rand index needs at least 2 items".into()));
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = a * b / comb2(n);
    let max = (a + b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCluster {
    pub category: String,
    pub key: String,
    pub ari: f64,
    pub degenerate: bool,
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterReport {
    /// Mean over categories (object pairs) of their mean group ARI.
    pub ari: f64,
    pub mean_over_groups: f64,
    pub k: usize,
    pub per_pair: BTreeMap<String, f64>,
    pub per_group: Vec<GroupCluster>,
    pub failures: Vec<String>,
}

/// Clusters each group's embeddings with K = number of identities and scores
/// against the identity labels. Group `i` uses a seed derived from `(seed, i)`.
pub fn cluster_eval(
    groups: &[EvalGroup],
    embedding_of: &(dyn Fn(usize) -> Option<Embedding> + Sync),
    cfg: &KMeansConfig,
    seed: u64,
) -> ClusterReport {
    let results: Vec<std::result::Result<GroupCluster, String>> = groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let pts: Vec<Vec<f32>> = g
                .members
                .iter()
                .map(|m| {
                    embedding_of(m.index)
                        .map(|e| e.values().to_vec())
                        .ok_or_else(|| format!("{}/{}: missing embedding for record {}", g.category, g.key, m.index))
                })
                .collect::<std::result::Result<_, _>>()?;
            let gcfg = KMeansConfig {
                k: g.identities().max(1),
                ..*cfg
            };
            let res = kmeans(&pts, &gcfg, derive_seed(seed, i as u64)).map_err(|e| e.to_string())?;
            let truth: Vec<usize> = g.labels().iter().map(|&l| l as usize).collect();
            let ari = adjusted_rand_index(&res.assignments, &truth).map_err(|e| e.to_string())?;
            Ok(GroupCluster {
                category: g.category.clone(),
                key: g.key.clone(),
                ari,
                degenerate: res.degenerate,
                assignments: res.assignments,
            })
        })
        .collect();

    let mut per_group = Vec::new();
    let mut failures = Vec::new();
    let mut by_pair: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        match r {
            Ok(gc) => {
                by_pair.entry(gc.category.clone()).or_default().push(gc.ari);
                per_group.push(gc);
            }
            Err(e) => failures.push(e),
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let per_pair: BTreeMap<String, f64> = by_pair.iter().map(|(k, v)| (k.clone(), mean(v))).collect();
    let pair_values: Vec<f64> = per_pair.values().copied().collect();
    let group_values: Vec<f64> = per_group.iter().map(|g| g.ari).collect();
    ClusterReport {
        ari: mean(&pair_values),
        mean_over_groups: mean(&group_values),
        k: cfg.k,
        per_pair,
        per_group,
        failures,
    }
}
