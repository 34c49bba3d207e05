//! Python bindings for the similarity kernels, evaluation metrics and run
//! commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use ffasim_core::config::{Command, RunConfig, Variant};
use ffasim_core::eval::{self, KMeansConfig, Protocol};
use ffasim_core::inference::PatchEncoder;
use ffasim_core::metrics::{self, EmbeddingSource};
use ffasim_core::reid::{self, ReidEntry, ReidSet};
use ffasim_core::{imaging, runner, ssim as ssim_mod, Embedding, ForegroundMask, Matrix, PatchFeatureGrid};

fn py_err(e: ffasim_core::Error) -> PyErr {
    match e {
        ffasim_core::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn embedding(v: Vec<f32>) -> PyResult<Embedding> {
    Embedding::new(v, EmbeddingSource::GlobalToken).map_err(py_err)
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

/// Cosine similarity of two vectors.
#[pyfunction]
fn cosine(a: Vec<f32>, b: Vec<f32>) -> PyResult<f32> {
    metrics::cosine(&embedding(a)?, &embedding(b)?).map_err(py_err)
}

/// Average precision of a ranked relevance list.
#[pyfunction]
fn average_precision(relevance: Vec<bool>) -> PyResult<f64> {
    eval::average_precision(&relevance).map_err(py_err)
}

#[pyfunction]
fn adjusted_rand_index(pred: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    eval::adjusted_rand_index(&pred, &truth).map_err(py_err)
}

/// K-means++ with restarts. Returns `(assignments, inertia)`.
#[pyfunction]
#[pyo3(signature = (points, k, seed=0, restarts=10, max_iter=300, normalize=true))]
fn kmeans(
    points: Vec<Vec<f32>>,
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
    normalize: bool,
) -> PyResult<(Vec<usize>, f64)> {
    let cfg = KMeansConfig {
        k,
        restarts,
        max_iter,
        normalize,
        ..Default::default()
    };
    let r = eval::kmeans(&points, &cfg, seed).map_err(py_err)?;
    Ok((r.assignments, r.inertia))
}

/// Index of the odd one out among four embeddings.
#[pyfunction]
fn oddity(embeddings: Vec<Vec<f32>>) -> PyResult<usize> {
    let es = embeddings.into_iter().map(embedding).collect::<PyResult<Vec<_>>>()?;
    eval::oddity(&es).map_err(py_err)
}

/// `alpha * model + (1 - alpha) * external`.
#[pyfunction]
fn fuse(model: Vec<Vec<f32>>, external: Vec<Vec<f32>>, alpha: f32) -> PyResult<Vec<Vec<f32>>> {
    Ok(reid::fuse(&matrix(model)?, &matrix(external)?, alpha)
        .map_err(py_err)?
        .to_rows())
}

fn entries(ids: Vec<u32>, cams: Option<Vec<u32>>) -> PyResult<Vec<ReidEntry>> {
    if cams.as_ref().is_some_and(|c| c.len() != ids.len()) {
        return Err(PyValueError::new_err("camera ids must match vehicle ids in length"));
    }
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, vehicle_id)| ReidEntry {
            path: PathBuf::new(),
            vehicle_id,
            camera_id: cams.as_ref().map(|c| c[i]),
        })
        .collect())
}

/// Top-k accuracy of a query x gallery distance matrix.
#[pyfunction]
#[pyo3(signature = (distances, query_ids, gallery_ids, k=1, query_cams=None, gallery_cams=None, camera_exclusion=true))]
fn cmc_topk(
    distances: Vec<Vec<f32>>,
    query_ids: Vec<u32>,
    gallery_ids: Vec<u32>,
    k: usize,
    query_cams: Option<Vec<u32>>,
    gallery_cams: Option<Vec<u32>>,
    camera_exclusion: bool,
) -> PyResult<f64> {
    let set = ReidSet {
        queries: entries(query_ids, query_cams)?,
        gallery: entries(gallery_ids, gallery_cams)?,
    };
    reid::cmc_topk(&matrix(distances)?, &set, k, camera_exclusion).map_err(py_err)
}

#[pyfunction]
fn read_matrix(path: PathBuf) -> PyResult<Vec<Vec<f32>>> {
    Ok(Matrix::read(path).map_err(py_err)?.to_rows())
}

#[pyfunction]
fn write_matrix(path: PathBuf, rows: Vec<Vec<f32>>) -> PyResult<()> {
    matrix(rows)?.write(path).map_err(py_err)
}

/// Square alpha matte to a patch-level foreground mask (row-major booleans).
#[pyfunction]
#[pyo3(signature = (alpha, patch_size=14, threshold=0.5))]
fn downsample_mask(alpha: Vec<Vec<f32>>, patch_size: usize, threshold: f32) -> PyResult<Vec<Vec<bool>>> {
    let size = alpha.len();
    if alpha.iter().any(|r| r.len() != size) {
        return Err(PyValueError::new_err("alpha must be square"));
    }
    let mask = ForegroundMask::new(size, alpha.concat()).map_err(py_err)?;
    let pm = metrics::downsample_mask(&mask, patch_size, threshold).map_err(py_err)?;
    Ok(pm.bits().chunks(pm.side()).map(<[bool]>::to_vec).collect())
}

/// Mean of the patch features (`side*side` rows) selected by a patch mask.
#[pyfunction]
#[pyo3(signature = (patches, mask, normalize=false))]
fn ffa_crop_feat(patches: Vec<Vec<f32>>, mask: Vec<Vec<bool>>, normalize: bool) -> PyResult<Vec<f32>> {
    let side = mask.len();
    let dim = patches.first().map_or(0, Vec::len);
    if patches.len() != side * side || patches.iter().any(|p| p.len() != dim) {
        return Err(PyValueError::new_err("patches must be side*side rows of equal width"));
    }
    let grid = PatchFeatureGrid::new(side, dim, patches.concat(), None).map_err(py_err)?;
    let pm = metrics::PatchMask::from_bits(side, mask.concat()).map_err(py_err)?;
    Ok(metrics::ffa_crop_feat(&grid, &pm, normalize)
        .map_err(py_err)?
        .values()
        .to_vec())
}

/// SSIM of two image files after preprocessing to 336x336.
#[pyfunction]
fn ssim(a: PathBuf, b: PathBuf) -> PyResult<f32> {
    let x = imaging::preprocess(&a).map_err(py_err)?;
    let y = imaging::preprocess(&b).map_err(py_err)?;
    ssim_mod::ssim(&x, &y).map_err(py_err)
}

/// `(category, key, record indices, identity labels)`.
type GroupRow = (String, String, Vec<usize>, Vec<u32>);

/// Patch features and optional global token.
type Features = (Vec<Vec<f32>>, Option<Vec<f32>>);

#[pyclass(name = "Catalog", frozen)]
struct PyCatalog {
    inner: ffasim_core::Catalog,
}

#[pymethods]
impl PyCatalog {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(category, instance, condition, path)` per record, in catalog order.
    fn records(&self) -> Vec<(String, u32, String, PathBuf)> {
        self.inner
            .records()
            .iter()
            .map(|r| (r.category.clone(), r.instance, r.condition.descriptor(), r.path.clone()))
            .collect()
    }

    fn warnings(&self) -> Vec<String> {
        self.inner.warnings().to_vec()
    }

    /// `(category, key, record indices, identity labels)` per complete group.
    fn groups(&self, protocol: &str) -> PyResult<Vec<GroupRow>> {
        let p: Protocol = protocol.parse().map_err(py_err)?;
        Ok(eval::build_groups(&self.inner, p)
            .groups
            .into_iter()
            .map(|g| {
                let idx = g.members.iter().map(|m| m.index).collect();
                let labels = g.labels();
                (g.category, g.key, idx, labels)
            })
            .collect())
    }
}

#[pyfunction]
fn load_catalog(root: PathBuf) -> PyResult<PyCatalog> {
    Ok(PyCatalog {
        inner: ffasim_core::load_catalog(root).map_err(py_err)?,
    })
}

#[pyclass(name = "Backbone", frozen)]
struct PyBackbone {
    inner: ffasim_core::OnnxBackbone,
}

#[pymethods]
impl PyBackbone {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ffasim_core::OnnxBackbone::load(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn engine_id(&self) -> String {
        self.inner.engine_id().to_string()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.spec().feature_dim
    }

    /// Patch features (576 rows) and the global token, if exported.
    fn embed(&self, py: Python<'_>, path: PathBuf) -> PyResult<Features> {
        let img = imaging::preprocess(&path).map_err(py_err)?;
        let grid = py.detach(|| self.inner.embed(&img)).map_err(py_err)?;
        Ok((
            grid.patches().map(<[f32]>::to_vec).collect(),
            grid.token().map(<[f32]>::to_vec),
        ))
    }
}

/// Runs a subcommand from a TOML config and returns `report.json` as text.
#[pyfunction]
#[pyo3(signature = (command, config, variant=None, out=None))]
fn run(
    py: Python<'_>,
    command: &str,
    config: PathBuf,
    variant: Option<&str>,
    out: Option<PathBuf>,
) -> PyResult<String> {
    let cmd = match command {
        "extract" => Command::Extract,
        "benchmark" => Command::Benchmark,
        "oddity" => Command::Oddity,
        "fuse" => Command::Fuse,
        "sweep" => Command::Sweep,
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    };
    let mut cfg = RunConfig::load(&config).map_err(py_err)?;
    if let Some(v) = variant {
        cfg.variant = v.parse::<Variant>().map_err(py_err)?;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    let outcome = py.detach(|| runner::run(cmd, &cfg)).map_err(py_err)?;
    Ok(outcome.report.to_string())
}

#[pymodule]
mod ffasim {
    #[pymodule_export]
    use super::{
        adjusted_rand_index, average_precision, cmc_topk, cosine, downsample_mask, ffa_crop_feat, fuse, kmeans,
        load_catalog, oddity, read_matrix, run, ssim, write_matrix, PyBackbone, PyCatalog,
    };

    #[allow(non_upper_case_globals)]
    #[pymodule_export]
    const __version__: &str = ffasim_core::VERSION;
}
