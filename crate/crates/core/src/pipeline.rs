//! Image file → grid / mask / embedding, through the cache when one is set.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cache::{content_hash, FeatureCache};
use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::imaging::{decode_bytes, ImageTensor, INPUT_SIZE};
use crate::inference::{
    ForegroundMask, ForegroundSegmenter, OnnxBackbone, OnnxSegmenter, PatchEncoder, PatchFeatureGrid,
};
use crate::metrics::{self, CropImgOptions, Embedding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipelineOptions {
    pub threshold: f32,
    pub normalize_patches: bool,
    pub crop: CropImgOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            threshold: metrics::DEFAULT_THRESHOLD,
            normalize_patches: false,
            crop: CropImgOptions::default(),
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    grid_hits: AtomicUsize,
    grid_computed: AtomicUsize,
    mask_hits: AtomicUsize,
    mask_computed: AtomicUsize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub grid_hits: usize,
    pub grid_computed: usize,
    pub mask_hits: usize,
    pub mask_computed: usize,
}

/// An embedding plus whether its foreground mask fell back to the full frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingOutcome {
    pub embedding: Embedding,
    pub degenerate_mask: bool,
}

pub struct FeaturePipeline {
    backbone: Option<Arc<dyn PatchEncoder>>,
    segmenter: Option<Arc<dyn ForegroundSegmenter>>,
    cache: Option<FeatureCache>,
    opts: PipelineOptions,
    counters: Counters,
}

impl FeaturePipeline {
    pub fn new(
        backbone: Option<Arc<dyn PatchEncoder>>,
        segmenter: Option<Arc<dyn ForegroundSegmenter>>,
        cache: Option<FeatureCache>,
        opts: PipelineOptions,
    ) -> Self {
        Self {
            backbone,
            segmenter,
            cache,
            opts,
            counters: Counters::default(),
        }
    }

    /// Loads whichever engines `variant` needs (plus any configured ones when
    /// `all_engines` is set) and opens the cache.
    pub fn from_config(cfg: &RunConfig, all_engines: bool) -> Result<Self> {
        let backbone = match &cfg.backbone {
            Some(p) if all_engines || cfg.variant.needs_backbone() => {
                Some(Arc::new(OnnxBackbone::load(p)?) as Arc<dyn PatchEncoder>)
            }
            _ => None,
        };
        let segmenter = match &cfg.segmenter {
            Some(p) if all_engines || cfg.variant.needs_segmenter() => {
                Some(Arc::new(OnnxSegmenter::load_with(p, cfg.segmenter_input)?) as Arc<dyn ForegroundSegmenter>)
            }
            _ => None,
        };
        let cache = cfg.cache_dir.as_ref().map(FeatureCache::open).transpose()?;
        Ok(Self::new(
            backbone,
            segmenter,
            cache,
            PipelineOptions {
                threshold: cfg.threshold,
                normalize_patches: cfg.normalize_patches,
                crop: cfg.crop,
            },
        ))
    }

    pub fn backbone_id(&self) -> Option<&str> {
        self.backbone.as_ref().map(|b| b.engine_id())
    }

    pub fn segmenter_id(&self) -> Option<&str> {
        self.segmenter.as_ref().map(|s| s.engine_id())
    }

    pub fn stats(&self) -> CacheStats {
        let c = &self.counters;
        CacheStats {
            grid_hits: c.grid_hits.load(Ordering::Relaxed),
            grid_computed: c.grid_computed.load(Ordering::Relaxed),
            mask_hits: c.mask_hits.load(Ordering::Relaxed),
            mask_computed: c.mask_computed.load(Ordering::Relaxed),
        }
    }

    fn backbone(&self) -> Result<&dyn PatchEncoder> {
        self.backbone
            .as_deref()
            .ok_or_else(|| Error::Config("no backbone configured".into()))
    }

    fn segmenter(&self) -> Result<&dyn ForegroundSegmenter> {
        self.segmenter
            .as_deref()
            .ok_or_else(|| Error::Config("no segmenter configured".into()))
    }

    fn read(path: &Path) -> Result<(Vec<u8>, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let hash = content_hash(&bytes);
        Ok((bytes, hash))
    }

    fn load(path: &Path, size: usize) -> Result<ImageTensor> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(decode_bytes(&bytes, path)?.resize_bilinear(size, size))
    }

    /// The 336×336 preprocessed image.
    pub fn image(&self, path: &Path) -> Result<ImageTensor> {
        Self::load(path, INPUT_SIZE)
    }

    fn grid_for(&self, path: &Path, hash: &str, image: Option<&ImageTensor>) -> Result<PatchFeatureGrid> {
        let backbone = self.backbone()?;
        if let Some(g) = self.cache.as_ref().and_then(|c| c.get_grid(hash, backbone.engine_id())) {
            self.counters.grid_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(g);
        }
        let owned;
        let image = match image {
            Some(i) => i,
            None => {
                owned = Self::load(path, backbone.spec().input_size)?;
                &owned
            }
        };
        let grid = backbone.embed(image)?;
        self.counters.grid_computed.fetch_add(1, Ordering::Relaxed);
        if let Some(c) = &self.cache {
            c.put_grid(hash, backbone.engine_id(), &grid)?;
        }
        Ok(grid)
    }

    fn mask_for(&self, path: &Path, hash: &str) -> Result<ForegroundMask> {
        let seg = self.segmenter()?;
        if let Some(m) = self.cache.as_ref().and_then(|c| c.get_mask(hash, seg.engine_id())) {
            self.counters.mask_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(m);
        }
        let image = Self::load(path, seg.input_size())?;
        let mask = seg.segment(&image)?.area_downsample(INPUT_SIZE)?;
        self.counters.mask_computed.fetch_add(1, Ordering::Relaxed);
        if let Some(c) = &self.cache {
            c.put_mask(hash, seg.engine_id(), &mask)?;
        }
        Ok(mask)
    }

    pub fn grid(&self, path: &Path) -> Result<PatchFeatureGrid> {
        let (_, hash) = Self::read(path)?;
        self.grid_for(path, &hash, None)
    }

    /// Alpha matte at 336×336 (area-averaged from the segmenter's resolution).
    pub fn mask(&self, path: &Path) -> Result<ForegroundMask> {
        let (_, hash) = Self::read(path)?;
        self.mask_for(path, &hash)
    }

    /// Populates grid and mask for one image. Returns whether the mask is
    /// degenerate at patch level.
    pub fn extract(&self, path: &Path) -> Result<bool> {
        let (bytes, hash) = Self::read(path)?;
        let size = self.backbone()?.spec().input_size;
        let image = decode_bytes(&bytes, path)?.resize_bilinear(size, size);
        let grid = self.grid_for(path, &hash, Some(&image))?;
        let mask = self.mask_for(path, &hash)?;
        let pmask = self.patch_mask(&mask, grid.side())?;
        Ok(pmask.is_degenerate())
    }

    fn patch_mask(&self, mask: &ForegroundMask, side: usize) -> Result<metrics::PatchMask> {
        if !mask.size().is_multiple_of(side) {
            return Err(Error::shape(format!("mask divisible by grid side {side}"), mask.size()));
        }
        metrics::downsample_mask(mask, mask.size() / side, self.opts.threshold)
    }

    fn crop_img_engine_id(&self) -> Result<String> {
        let opts = serde_json::to_vec(&(self.opts.crop, self.opts.normalize_patches))
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(format!(
            "cropimg-{}-{}-{}",
            self.backbone()?.engine_id(),
            self.segmenter()?.engine_id(),
            hex::encode(&Sha256::digest(opts)[..4])
        ))
    }

    pub fn embedding(&self, path: &Path, variant: Variant) -> Result<EmbeddingOutcome> {
        let (_, hash) = Self::read(path)?;
        match variant {
            Variant::Global => {
                let grid = self.grid_for(path, &hash, None)?;
                Ok(EmbeddingOutcome {
                    embedding: metrics::global_embed(&grid)?,
                    degenerate_mask: false,
                })
            }
            Variant::CropFeat => {
                let grid = self.grid_for(path, &hash, None)?;
                let mask = self.mask_for(path, &hash)?;
                let pmask = self.patch_mask(&mask, grid.side())?;
                Ok(EmbeddingOutcome {
                    embedding: metrics::ffa_crop_feat(&grid, &pmask, self.opts.normalize_patches)?,
                    degenerate_mask: pmask.is_degenerate(),
                })
            }
            Variant::CropImg => {
                let engine = self.crop_img_engine_id()?;
                let mask = self.mask_for(path, &hash)?;
                let degenerate = metrics::foreground_box(&mask, self.opts.crop.threshold).is_none();
                if let Some(e) = self.cache.as_ref().and_then(|c| c.get_embedding(&hash, &engine)) {
                    return Ok(EmbeddingOutcome {
                        embedding: e,
                        degenerate_mask: degenerate,
                    });
                }
                let image = self.image(path)?;
                let (e, _) = metrics::ffa_crop_img(
                    &image,
                    &mask,
                    self.backbone()?,
                    &self.opts.crop,
                    self.opts.normalize_patches,
                )?;
                if let Some(c) = &self.cache {
                    c.put_embedding(&hash, &engine, &e)?;
                }
                Ok(EmbeddingOutcome {
                    embedding: e,
                    degenerate_mask: degenerate,
                })
            }
            Variant::Ssim => Err(Error::Config("ssim has no embedding".into())),
        }
    }
}
