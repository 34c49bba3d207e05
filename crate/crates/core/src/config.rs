//! Declarative run configuration (TOML) with command-line overrides applied
//! by the caller. Relative paths resolve against the config file's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{KMeansConfig, Protocol};
use crate::imaging::INPUT_SIZE;
use crate::metrics::{CropImgOptions, DEFAULT_THRESHOLD};
use crate::reid::{default_grid, validate_grid, FusionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CropFeat,
    CropImg,
    Global,
    Ssim,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::CropFeat, Variant::CropImg, Variant::Global, Variant::Ssim];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CropFeat => "crop_feat",
            Variant::CropImg => "crop_img",
            Variant::Global => "global",
            Variant::Ssim => "ssim",
        }
    }

    pub fn is_embedding(self) -> bool {
        self != Variant::Ssim
    }

    pub fn needs_backbone(self) -> bool {
        self.is_embedding()
    }

    pub fn needs_segmenter(self) -> bool {
        matches!(self, Variant::CropFeat | Variant::CropImg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OddityInputs {
    /// CSV `path0,path1,path2,path3,odd,subset`.
    pub panels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionInputs {
    pub queries: PathBuf,
    pub gallery: PathBuf,
    /// Distances of the external re-identification model.
    pub external_distances: PathBuf,
    /// Precomputed distances of the similarity metric; computed from the
    /// query and gallery images when absent.
    #[serde(default)]
    pub model_distances: Option<PathBuf>,
    #[serde(default)]
    pub val_queries: Option<PathBuf>,
    #[serde(default)]
    pub val_gallery: Option<PathBuf>,
    #[serde(default)]
    pub val_external_distances: Option<PathBuf>,
    #[serde(default)]
    pub val_model_distances: Option<PathBuf>,
    /// Subsample validation queries: number of vehicle ids, then query rows.
    #[serde(default)]
    pub val_ids: Option<usize>,
    #[serde(default)]
    pub val_query_count: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f32>,
    #[serde(default = "default_grid")]
    pub grid: Vec<f32>,
    #[serde(default = "yes")]
    pub camera_exclusion: bool,
    #[serde(default)]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

impl FusionInputs {
    pub fn params(&self) -> FusionConfig {
        FusionConfig {
            alpha: self.alpha.unwrap_or(0.5),
            grid: self.grid.clone(),
            camera_exclusion: self.camera_exclusion,
            normalize: self.normalize,
        }
    }

    pub fn has_validation(&self) -> bool {
        self.val_queries.is_some() && self.val_gallery.is_some() && self.val_external_distances.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// CSV catalog `path,category,instance,condition`, used instead of a tree scan.
    pub manifest: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub segmenter: Option<PathBuf>,
    /// Square input resolution of the segmentation graph.
    pub segmenter_input: usize,
    pub variant: Variant,
    pub protocols: Vec<Protocol>,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub threshold: f32,
    pub normalize_patches: bool,
    /// Cluster embeddings per group; defaults on for embedding variants.
    pub clustering: Option<bool>,
    pub crop: CropImgOptions,
    pub kmeans: KMeansConfig,
    pub oddity: Option<OddityInputs>,
    pub fusion: Option<FusionInputs>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            manifest: None,
            backbone: None,
            segmenter: None,
            segmenter_input: INPUT_SIZE,
            variant: Variant::CropFeat,
            protocols: Protocol::ALL.to_vec(),
            cache_dir: None,
            seed: 0,
            out: PathBuf::from("out"),
            jobs: 0,
            threshold: DEFAULT_THRESHOLD,
            normalize_patches: false,
            clustering: None,
            crop: CropImgOptions::default(),
            kmeans: KMeansConfig::default(),
            oddity: None,
            fusion: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Extract,
    Benchmark,
    Oddity,
    Fuse,
    Sweep,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Extract => "extract",
            Command::Benchmark => "benchmark",
            Command::Oddity => "oddity",
            Command::Fuse => "fuse",
            Command::Sweep => "sweep",
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve_opt(base, &mut self.dataset);
        resolve_opt(base, &mut self.manifest);
        resolve_opt(base, &mut self.backbone);
        resolve_opt(base, &mut self.segmenter);
        resolve_opt(base, &mut self.cache_dir);
        resolve(base, &mut self.out);
        if let Some(o) = &mut self.oddity {
            resolve(base, &mut o.panels);
        }
        if let Some(f) = &mut self.fusion {
            resolve(base, &mut f.queries);
            resolve(base, &mut f.gallery);
            resolve(base, &mut f.external_distances);
            for p in [
                &mut f.model_distances,
                &mut f.val_queries,
                &mut f.val_gallery,
                &mut f.val_external_distances,
                &mut f.val_model_distances,
            ] {
                resolve_opt(base, p);
            }
        }
    }

    pub fn clustering_enabled(&self) -> bool {
        self.clustering.unwrap_or(self.variant.is_embedding())
    }

    /// Checks that the paths a command needs exist and that the settings are
    /// mutually consistent.
    pub fn validate(&self, cmd: Command) -> Result<()> {
        let need = |p: &Option<PathBuf>, what: &str| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("{}: `{what}` is required", cmd.as_str()))),
                Some(p) if !p.exists() => Err(Error::Config(format!("{what} {} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        let exists = |p: &Path, what: &str| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} {} does not exist", p.display())))
            }
        };
        if self.clustering == Some(true) && !self.variant.is_embedding() {
            return Err(Error::Config("clustering needs an embedding variant, not ssim".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1)", self.threshold)));
        }
        if self.segmenter_input < INPUT_SIZE {
            return Err(Error::Config(format!("segmenter_input must be >= {INPUT_SIZE}")));
        }
        if self.kmeans.restarts == 0 || self.kmeans.max_iter == 0 {
            return Err(Error::Config("kmeans restarts and max_iter must be positive".into()));
        }
        let engines = |cfg: &Self| -> Result<()> {
            if cfg.variant.needs_backbone() {
                need(&cfg.backbone, "backbone")?;
            }
            if cfg.variant.needs_segmenter() {
                need(&cfg.segmenter, "segmenter")?;
            }
            Ok(())
        };
        let dataset = |cfg: &Self| -> Result<()> {
            match (&cfg.dataset, &cfg.manifest) {
                (None, None) => Err(Error::Config("`dataset` or `manifest` is required".into())),
                (d, m) => {
                    if d.is_some() {
                        need(d, "dataset")?;
                    }
                    if m.is_some() {
                        need(m, "manifest")?;
                    }
                    Ok(())
                }
            }
        };
        match cmd {
            Command::Extract => {
                dataset(self)?;
                need(&self.backbone, "backbone")?;
                need(&self.segmenter, "segmenter")?;
                if self.cache_dir.is_none() {
                    return Err(Error::Config("extract: `cache_dir` is required".into()));
                }
            }
            Command::Benchmark => {
                dataset(self)?;
                if self.protocols.is_empty() {
                    return Err(Error::Config("no protocols selected".into()));
                }
                engines(self)?;
            }
            Command::Oddity => {
                let o = self
                    .oddity
                    .as_ref()
                    .ok_or_else(|| Error::Config("oddity: [oddity] section is required".into()))?;
                exists(&o.panels, "panels")?;
                engines(self)?;
            }
            Command::Fuse | Command::Sweep => {
                let f = self
                    .fusion
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{}: [fusion] section is required", cmd.as_str())))?;
                exists(&f.queries, "queries")?;
                exists(&f.gallery, "gallery")?;
                exists(&f.external_distances, "external_distances")?;
                for p in [
                    &f.val_queries,
                    &f.val_gallery,
                    &f.val_external_distances,
                    &f.val_model_distances,
                ]
                .into_iter()
                .flatten()
                {
                    exists(p, "validation input")?;
                }
                validate_grid(&f.grid)?;
                if let Some(a) = f.alpha {
                    if !(0.0..=1.0).contains(&a) {
                        return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
                    }
                }
                match &f.model_distances {
                    Some(p) => exists(p, "model_distances")?,
                    None => {
                        if !self.variant.is_embedding() {
                            return Err(Error::Config(
                                "computing model distances needs an embedding variant".into(),
                            ));
                        }
                        engines(self)?;
                    }
                }
                if f.has_validation() && f.val_model_distances.is_none() && f.model_distances.is_some() {
                    return Err(Error::Config(
                        "validation inputs need `val_model_distances` when `model_distances` is given".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Hash of every setting that affects results (worker count and output
    /// directory excluded).
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.jobs = 0;
        c.out = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let text = r#"
            dataset = "data"
            backbone = "/abs/backbone.onnx"
            variant = "global"
            protocols = ["wild", "all"]
            seed = 9
            [crop]
            padding = 0.1
            [fusion]
            queries = "q.csv"
            gallery = "g.csv"
            external_distances = "ext.ismx"
        "#;
        let mut cfg = RunConfig::from_toml(text).unwrap();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.dataset, Some(PathBuf::from("/base/data")));
        assert_eq!(cfg.backbone, Some(PathBuf::from("/abs/backbone.onnx")));
        assert_eq!(cfg.variant, Variant::Global);
        assert_eq!(cfg.protocols, vec![Protocol::Wild, Protocol::All]);
        assert_eq!(cfg.crop.padding, 0.1);
        assert_eq!(cfg.crop.fill, [255, 255, 255]);
        let f = cfg.fusion.unwrap();
        assert_eq!(f.grid.len(), 9);
        assert!(f.camera_exclusion);
        assert_eq!(f.queries, PathBuf::from("/base/q.csv"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_combos() {
        assert!(RunConfig::from_toml("datset = \"x\"").is_err());
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            dataset: Some(tmp.path().to_path_buf()),
            variant: Variant::Ssim,
            clustering: Some(true),
            ..Default::default()
        };
        assert!(cfg.validate(Command::Benchmark).is_err());
        let cfg = RunConfig {
            clustering: None,
            ..cfg
        };
        assert!(cfg.validate(Command::Benchmark).is_ok());
        assert!(!cfg.clustering_enabled());
        let cfg = RunConfig {
            variant: Variant::CropFeat,
            ..cfg
        };
        let err = cfg.validate(Command::Benchmark).unwrap_err().to_string();
        assert!(err.contains("backbone"), "{err}");
    }

    #[test]
    fn hash_ignores_jobs_and_out() {
        let a = RunConfig::default();
        let b = RunConfig {
            jobs: 8,
            out: "elsewhere".into(),
            ..Default::default()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig {
            seed: 1,
            ..Default::default()
        };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn documented_example_parses() {
        let text = r#"
dataset = "data/cute"
backbone = "models/backbone.onnx"
segmenter = "models/segmenter.onnx"
cache_dir = "cache"
variant = "crop_feat"
protocols = ["wild", "illumination", "pose", "all"]
seed = 0
jobs = 0                # 0 = all cores

[crop]                  # Crop-Img options
threshold = 0.5
padding = 0.05
fill = [255, 255, 255]
mode = "box_whiten"     # or "whiten_only"

[kmeans]
restarts = 10
max_iter = 300

[oddity]
panels = "panels.csv"

[fusion]
queries = "reid/query.csv"            # path,vehicle_id,camera_id
gallery = "reid/gallery.csv"
external_distances = "reid/spcl.ismx"
model_distances = "reid/ffa.ismx"     # computed from the images when omitted
val_queries = "reid/val_query.csv"
val_gallery = "reid/val_gallery.csv"
val_external_distances = "reid/val_spcl.ismx"
val_model_distances = "reid/val_ffa.ismx"
camera_exclusion = true
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.crop.mode, crate::metrics::CropMode::BoxWhiten);
        assert_eq!(cfg.kmeans.restarts, 10);
        assert_eq!(cfg.protocols.len(), 4);
        let f = cfg.fusion.unwrap();
        assert!(f.has_validation());
        assert_eq!(f.grid.len(), 9);
    }
}
