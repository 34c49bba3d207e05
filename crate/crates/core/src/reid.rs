//! Late fusion of two distance matrices and CMC scoring for re-identification.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DistanceMatrix;
use crate::metrics::{cosine_slices, Embedding};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReidEntry {
    pub path: PathBuf,
    pub vehicle_id: u32,
    pub camera_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReidSet {
    pub queries: Vec<ReidEntry>,
    pub gallery: Vec<ReidEntry>,
}

#[derive(Debug, Deserialize)]
struct ReidRow {
    path: PathBuf,
    vehicle_id: u32,
    #[serde(default)]
    camera_id: Option<u32>,
}

/// Reads a `path,vehicle_id,camera_id` CSV (camera column may be empty).
pub fn load_reid_manifest(path: impl AsRef<Path>) -> Result<Vec<ReidEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let bad = |reason: String| Error::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ReidRow>().enumerate() {
        let row = row.map_err(|e| bad(format!("row {}: {e}", i + 2)))?;
        if row.vehicle_id == 0 {
            return Err(bad(format!("row {}: vehicle_id must be positive", i + 2)));
        }
        out.push(ReidEntry {
            path: base.join(row.path),
            vehicle_id: row.vehicle_id,
            camera_id: row.camera_id,
        });
    }
    Ok(out)
}

impl ReidSet {
    pub fn load(queries: impl AsRef<Path>, gallery: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            queries: load_reid_manifest(queries)?,
            gallery: load_reid_manifest(gallery)?,
        })
    }

    /// Set with only the listed query rows.
    pub fn select_queries(&self, rows: &[usize]) -> Self {
        Self {
            queries: rows.iter().map(|&r| self.queries[r].clone()).collect(),
            gallery: self.gallery.clone(),
        }
    }

    fn check(&self, d: &DistanceMatrix) -> Result<()> {
        let want = (self.queries.len(), self.gallery.len());
        if d.shape() != want {
            return Err(Error::shape(
                format!("{}x{} (queries x gallery)", want.0, want.1),
                format!("{}x{}", d.rows(), d.cols()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f32,
    pub grid: Vec<f32>,
    pub camera_exclusion: bool,
    /// Per-query min-max normalization of both inputs before fusing.
    pub normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            grid: default_grid(),
            camera_exclusion: true,
            normalize: false,
        }
    }
}

/// `0.1, 0.2, …, 0.9`.
pub fn default_grid() -> Vec<f32> {
    (1..=9).map(|i| i as f32 / 10.0).collect()
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        validate_grid(&self.grid)
    }
}

pub fn validate_grid(grid: &[f32]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    if grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Config("alpha grid values must lie in [0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("alpha grid must be strictly increasing".into()));
    }
    Ok(())
}

pub fn cosine_to_distance(s: f32) -> f32 {
    1.0 - s
}

/// Cosine distances between query and gallery embeddings.
pub fn cosine_distance_matrix(queries: &[Embedding], gallery: &[Embedding]) -> Result<DistanceMatrix> {
    if let Some(e) = queries.iter().chain(gallery).find(|e| e.dim() != queries[0].dim()) {
        return Err(Error::shape(queries[0].dim(), e.dim()));
    }
    let data: Vec<f32> = queries
        .par_iter()
        .flat_map_iter(|q| {
            gallery
                .iter()
                .map(move |g| cosine_to_distance(cosine_slices(q.values(), g.values()) as f32))
        })
        .collect();
    DistanceMatrix::new(queries.len(), gallery.len(), data)
}

/// Elementwise `alpha * model + (1 - alpha) * external`. The endpoints return
/// the corresponding input unchanged.
pub fn fuse(model: &DistanceMatrix, external: &DistanceMatrix, alpha: f32) -> Result<DistanceMatrix> {
    if model.shape() != external.shape() {
        return Err(Error::shape(
            format!("{}x{}", model.rows(), model.cols()),
            format!("{}x{}", external.rows(), external.cols()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(model.clone());
    }
    if alpha == 0.0 {
        return Ok(external.clone());
    }
    let (a, b) = (alpha as f64, 1.0 - alpha as f64);
    let data = model
        .data()
        .iter()
        .zip(external.data())
        .map(|(&m, &s)| (a * m as f64 + b * s as f64) as f32)
        .collect();
    DistanceMatrix::new(model.rows(), model.cols(), data)
}

/// Rescales each row to `[0, 1]`; constant rows become zeros.
pub fn normalize_rows(d: &DistanceMatrix) -> DistanceMatrix {
    let mut out = d.clone();
    for r in 0..d.rows() {
        let row = d.row(r);
        let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for (c, &v) in row.iter().enumerate() {
            out.set(r, c, if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CmcReport {
    pub ks: Vec<usize>,
    /// Fraction of evaluated queries with a correct match in the first k.
    pub topk: Vec<f64>,
    pub evaluated: usize,
    /// Queries with no valid correct gallery entry.
    pub excluded: usize,
}

impl CmcReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.topk[i])
    }
}

/// 0-based rank of the first correct match among valid gallery entries, or
/// `None` when no correct entry survives filtering.
fn first_match_rank(d: &DistanceMatrix, set: &ReidSet, q: usize, camera_exclusion: bool) -> Option<usize> {
    let query = &set.queries[q];
    let valid = |g: &ReidEntry| {
        !(camera_exclusion
            && g.vehicle_id == query.vehicle_id
            && query.camera_id.is_some()
            && g.camera_id == query.camera_id)
    };
    let row = d.row(q);
    let best = set
        .gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| valid(g) && g.vehicle_id == query.vehicle_id)
        .min_by(|(a, _), (b, _)| row[*a].total_cmp(&row[*b]).then(a.cmp(b)))?
        .0;
    let ahead = set
        .gallery
        .iter()
        .enumerate()
        .filter(|(j, g)| valid(g) && row[*j].total_cmp(&row[best]).then(j.cmp(&best)).is_lt())
        .count();
    Some(ahead)
}

/// CMC at each `k` in `ks`. Gallery entries rank by ascending distance, ties by
/// index; with camera exclusion, same-id same-camera entries are dropped.
pub fn cmc(d: &DistanceMatrix, set: &ReidSet, ks: &[usize], camera_exclusion: bool) -> Result<CmcReport> {
    set.check(d)?;
    if ks.contains(&0) {
        return Err(Error::Invalid("CMC k must be >= 1".into()));
    }
    let ranks: Vec<Option<usize>> = (0..d.rows())
        .into_par_iter()
        .map(|q| first_match_rank(d, set, q, camera_exclusion))
        .collect();
    let evaluated = ranks.iter().flatten().count();
    let excluded = ranks.len() - evaluated;
    let topk = ks
        .iter()
        .map(|&k| {
            if evaluated == 0 {
                0.0
            } else {
                ranks.iter().flatten().filter(|&&r| r < k).count() as f64 / evaluated as f64
            }
        })
        .collect();
    Ok(CmcReport {
        ks: ks.to_vec(),
        topk,
        evaluated,
        excluded,
    })
}

pub fn cmc_topk(d: &DistanceMatrix, set: &ReidSet, k: usize, camera_exclusion: bool) -> Result<f64> {
    Ok(cmc(d, set, &[k], camera_exclusion)?.topk[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f32,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub best_alpha: f32,
    pub rows: Vec<SweepRow>,
}

fn prepare(d: &DistanceMatrix, normalize: bool) -> DistanceMatrix {
    if normalize {
        normalize_rows(d)
    } else {
        d.clone()
    }
}

/// Fused top-1 for each grid alpha; the best alpha is the earliest (smallest)
/// one reaching the maximum.
pub fn alpha_sweep(
    model: &DistanceMatrix,
    external: &DistanceMatrix,
    set: &ReidSet,
    cfg: &FusionConfig,
) -> Result<SweepResult> {
    validate_grid(&cfg.grid)?;
    let (m, s) = (prepare(model, cfg.normalize), prepare(external, cfg.normalize));
    let rows = cfg
        .grid
        .par_iter()
        .map(|&alpha| {
            let r = cmc(&fuse(&m, &s, alpha)?, set, &[1, 5], cfg.camera_exclusion)?;
            Ok(SweepRow {
                alpha,
                top1: r.topk[0],
                top5: r.topk[1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = rows[0];
    for r in &rows[1..] {
        if r.top1 > best.top1 {
            best = *r;
        }
    }
    Ok(SweepResult {
        best_alpha: best.alpha,
        rows,
    })
}

/// Fuses with the configured normalization and scores top-1/top-5.
pub fn fused_cmc(
    model: &DistanceMatrix,
    external: &DistanceMatrix,
    set: &ReidSet,
    alpha: f32,
    cfg: &FusionConfig,
) -> Result<CmcReport> {
    let (m, s) = (prepare(model, cfg.normalize), prepare(external, cfg.normalize));
    cmc(&fuse(&m, &s, alpha)?, set, &[1, 5], cfg.camera_exclusion)
}

/// Seeded validation sample: `n_ids` vehicle ids drawn from the queries, then
/// up to `n_queries` query rows of those ids. Returned rows are ascending.
pub fn sample_validation(set: &ReidSet, n_ids: usize, n_queries: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: BTreeSet<u32> = set.queries.iter().map(|q| q.vehicle_id).collect();
    let mut ids: Vec<u32> = ids.into_iter().collect();
    ids.shuffle(&mut rng);
    ids.truncate(n_ids);
    let chosen: BTreeSet<u32> = ids.into_iter().collect();
    let mut rows: Vec<usize> = (0..set.queries.len())
        .filter(|&i| chosen.contains(&set.queries[i].vehicle_id))
        .collect();
    rows.shuffle(&mut rng);
    rows.truncate(n_queries);
    rows.sort_unstable();
    rows
}
