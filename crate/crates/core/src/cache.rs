//! On-disk cache of grids, masks and embeddings.
//!
//! Entries live at `<dir>/<engine_id>/<content_hash>.<kind>.ismx` with a JSON
//! sidecar next to them. A missing, unreadable or inconsistent entry is a miss.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{ForegroundMask, PatchFeatureGrid};
use crate::matrix::Matrix;
use crate::metrics::{Embedding, EmbeddingSource};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Hex SHA-256 of a byte buffer, the content half of every cache key.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Sidecar {
    pub engine_id: String,
    pub kind: String,
    pub shape: Vec<usize>,
    pub created: u64,
    #[serde(default)]
    pub token: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<EmbeddingSource>,
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry(&self, engine_id: &str, hash: &str, kind: &str) -> (PathBuf, PathBuf) {
        let base = self.dir.join(engine_id);
        (
            base.join(format!("{hash}.{kind}.ismx")),
            base.join(format!("{hash}.{kind}.json")),
        )
    }

    fn read(&self, engine_id: &str, hash: &str, kind: &str) -> Option<(Matrix, Sidecar)> {
        let (data_path, meta_path) = self.entry(engine_id, hash, kind);
        if !data_path.exists() && !meta_path.exists() {
            return None;
        }
        let attempt = || -> Result<(Matrix, Sidecar)> {
            let meta = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let sidecar: Sidecar = serde_json::from_slice(&meta).map_err(|e| Error::Format(e.to_string()))?;
            if sidecar.engine_id != engine_id || sidecar.kind != kind {
                return Err(Error::Format("sidecar does not match key".into()));
            }
            Ok((Matrix::read(&data_path)?, sidecar))
        };
        match attempt() {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("corrupt cache entry {}: {e}; treating as miss", data_path.display());
                None
            }
        }
    }

    fn write(&self, engine_id: &str, hash: &str, kind: &str, m: &Matrix, sidecar: &Sidecar) -> Result<()> {
        let (data_path, meta_path) = self.entry(engine_id, hash, kind);
        let parent = data_path.parent().expect("entry has parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let meta = serde_json::to_vec_pretty(sidecar).map_err(|e| Error::Format(e.to_string()))?;
        atomic_write(&data_path, &m.to_bytes())?;
        atomic_write(&meta_path, &meta)
    }

    fn sidecar(engine_id: &str, kind: &str, shape: Vec<usize>) -> Sidecar {
        Sidecar {
            engine_id: engine_id.into(),
            kind: kind.into(),
            shape,
            created: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            token: false,
            source: None,
        }
    }

    /// Grid rows are patches; with a token, it is stored as one extra row.
    pub fn put_grid(&self, hash: &str, engine_id: &str, grid: &PatchFeatureGrid) -> Result<()> {
        let mut data = grid.data().to_vec();
        if let Some(t) = grid.token() {
            data.extend_from_slice(t);
        }
        let rows = grid.num_patches() + usize::from(grid.token().is_some());
        let m = Matrix::new(rows, grid.dim(), data)?;
        let mut sc = Self::sidecar(engine_id, "grid", vec![grid.side(), grid.side(), grid.dim()]);
        sc.token = grid.token().is_some();
        self.write(engine_id, hash, "grid", &m, &sc)
    }

    pub fn get_grid(&self, hash: &str, engine_id: &str) -> Option<PatchFeatureGrid> {
        let (m, sc) = self.read(engine_id, hash, "grid")?;
        let parsed = (|| -> Result<PatchFeatureGrid> {
            let [side, side2, dim] = sc.shape[..] else {
                return Err(Error::Format("grid shape must have 3 dims".into()));
            };
            let rows = side * side2 + usize::from(sc.token);
            if side != side2 || m.shape() != (rows, dim) {
                return Err(Error::Format(format!("grid payload {:?} vs {:?}", m.shape(), sc.shape)));
            }
            let mut data = m.into_data();
            let token = sc.token.then(|| data.split_off(side * side * dim));
            PatchFeatureGrid::new(side, dim, data, token)
        })();
        parsed
            .inspect_err(|e| log::warn!("corrupt grid cache entry {hash}: {e}; treating as miss"))
            .ok()
    }

    pub fn put_mask(&self, hash: &str, engine_id: &str, mask: &ForegroundMask) -> Result<()> {
        let m = Matrix::new(mask.size(), mask.size(), mask.alpha().to_vec())?;
        let sc = Self::sidecar(engine_id, "mask", vec![mask.size(), mask.size()]);
        self.write(engine_id, hash, "mask", &m, &sc)
    }

    pub fn get_mask(&self, hash: &str, engine_id: &str) -> Option<ForegroundMask> {
        let (m, _) = self.read(engine_id, hash, "mask")?;
        if m.rows() != m.cols() {
            log::warn!("corrupt mask cache entry {hash}: non-square; treating as miss");
            return None;
        }
        let size = m.rows();
        ForegroundMask::new(size, m.into_data())
            .inspect_err(|e| log::warn!("corrupt mask cache entry {hash}: {e}; treating as miss"))
            .ok()
    }

    pub fn put_embedding(&self, hash: &str, engine_id: &str, e: &Embedding) -> Result<()> {
        let m = Matrix::new(1, e.dim(), e.values().to_vec())?;
        let mut sc = Self::sidecar(engine_id, "embedding", vec![1, e.dim()]);
        sc.source = Some(e.source());
        self.write(engine_id, hash, "embedding", &m, &sc)
    }

    pub fn get_embedding(&self, hash: &str, engine_id: &str) -> Option<Embedding> {
        let (m, sc) = self.read(engine_id, hash, "embedding")?;
        let source = sc.source?;
        Embedding::new(m.into_data(), source)
            .inspect_err(|e| log::warn!("corrupt embedding cache entry {hash}: {e}; treating as miss"))
            .ok()
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp{}-{n}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
