//! Foreground feature averaging and pairwise similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::inference::{ForegroundMask, PatchEncoder, PatchFeatureGrid};
use crate::ssim;

/// Alpha threshold used at both pixel and patch level.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Patch-resolution foreground bits, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    side: usize,
    bits: Vec<bool>,
    fg_count: usize,
    degenerate: bool,
}

impl PatchMask {
    pub fn from_bits(side: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != side * side {
            return Err(Error::shape(format!("{side}x{side} bits"), bits.len()));
        }
        let fg_count = bits.iter().filter(|b| **b).count();
        Ok(Self {
            side,
            bits,
            fg_count,
            degenerate: false,
        })
    }

    pub fn all(side: usize) -> Self {
        Self {
            side,
            bits: vec![true; side * side],
            fg_count: side * side,
            degenerate: false,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.side + col]
    }

    pub fn fg_count(&self) -> usize {
        self.fg_count
    }

    /// True when no block passed the threshold and every block was marked.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

/// Averages alpha over `patch × patch` blocks; a block is foreground iff its
/// mean exceeds `threshold`. An all-background result falls back to marking
/// every block.
pub fn downsample_mask(mask: &ForegroundMask, patch_size: usize, threshold: f32) -> Result<PatchMask> {
    let size = mask.size();
    if patch_size == 0 || !size.is_multiple_of(patch_size) {
        return Err(Error::shape(format!("mask side divisible by {patch_size}"), size));
    }
    let side = size / patch_size;
    let area = (patch_size * patch_size) as f64;
    let mut bits = vec![false; side * side];
    for (i, bit) in bits.iter_mut().enumerate() {
        let (br, bc) = (i / side, i % side);
        let mut sum = 0.0f64;
        for y in br * patch_size..(br + 1) * patch_size {
            let row = &mask.alpha()[y * size + bc * patch_size..y * size + (bc + 1) * patch_size];
            sum += row.iter().map(|&a| a as f64).sum::<f64>();
        }
        *bit = sum / area > threshold as f64;
    }
    let mut pmask = PatchMask::from_bits(side, bits)?;
    if pmask.fg_count == 0 {
        log::warn!("degenerate foreground mask: no patch above {threshold}; using all patches");
        pmask = PatchMask::all(side);
        pmask.degenerate = true;
    }
    Ok(pmask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    CropFeat,
    CropImg,
    GlobalToken,
}

/// A finite, nonzero pooled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
    source: EmbeddingSource,
}

impl Embedding {
    pub fn new(values: Vec<f32>, source: EmbeddingSource) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("embedding has non-finite values".into()));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(Error::Invalid("zero embedding (degenerate features)".into()));
        }
        Ok(Self { values, source })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * factor).collect(), self.source)
    }
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Mean of the patch features selected by `pmask`. With `normalize`, each
/// patch is L2-normalized before averaging.
pub fn ffa_crop_feat(grid: &PatchFeatureGrid, pmask: &PatchMask, normalize: bool) -> Result<Embedding> {
    if grid.side() != pmask.side() {
        return Err(Error::shape(
            format!("{0}x{0} patch mask", grid.side()),
            format!("{0}x{0}", pmask.side()),
        ));
    }
    let mut acc = vec![0.0f64; grid.dim()];
    let mut count = 0usize;
    for (patch, _) in grid.patches().zip(pmask.bits()).filter(|(_, b)| **b) {
        let scale = if normalize {
            let n = l2(patch);
            if n > 0.0 {
                1.0 / n
            } else {
                0.0
            }
        } else {
            1.0
        };
        for (a, &v) in acc.iter_mut().zip(patch) {
            *a += v as f64 * scale;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Invalid("patch mask selects no patches".into()));
    }
    let values = acc.iter().map(|a| (a / count as f64) as f32).collect();
    Embedding::new(values, EmbeddingSource::CropFeat)
}

/// Plain mean over every patch.
pub fn mean_pool(grid: &PatchFeatureGrid, normalize: bool) -> Result<Embedding> {
    ffa_crop_feat(grid, &PatchMask::all(grid.side()), normalize)
}

pub fn global_embed(grid: &PatchFeatureGrid) -> Result<Embedding> {
    let token = grid
        .token()
        .ok_or_else(|| Error::Invalid("backbone exported without global token".into()))?;
    Embedding::new(token.to_vec(), EmbeddingSource::GlobalToken)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Crop to the padded foreground box and whiten background inside it.
    BoxWhiten,
    /// Keep the full frame, whiten background only.
    WhitenOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropImgOptions {
    pub threshold: f32,
    /// Box growth per side as a fraction of the box extent on that axis.
    pub padding: f64,
    pub fill: [u8; 3],
    pub mode: CropMode,
}

impl Default for CropImgOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            padding: 0.05,
            fill: [255, 255, 255],
            mode: CropMode::BoxWhiten,
        }
    }
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CroppedInput {
    pub image: ImageTensor,
    pub bbox: PixelBox,
    /// Empty mask: the whole, unmodified image was used.
    pub fallback: bool,
}

/// Tight box around pixels with alpha above `threshold`, or `None`.
pub fn foreground_box(mask: &ForegroundMask, threshold: f32) -> Option<PixelBox> {
    let size = mask.size();
    let mut b: Option<PixelBox> = None;
    for (i, &a) in mask.alpha().iter().enumerate() {
        if a > threshold {
            let (x, y) = (i % size, i / size);
            let bb = b.get_or_insert(PixelBox {
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            });
            bb.x0 = bb.x0.min(x);
            bb.y0 = bb.y0.min(y);
            bb.x1 = bb.x1.max(x + 1);
            bb.y1 = bb.y1.max(y + 1);
        }
    }
    b
}

/// Grows a box by `round(padding * extent)` per side, clipped to the image.
pub fn pad_box(b: PixelBox, padding: f64, width: usize, height: usize) -> PixelBox {
    let px = (padding * (b.x1 - b.x0) as f64).round() as usize;
    let py = (padding * (b.y1 - b.y0) as f64).round() as usize;
    PixelBox {
        x0: b.x0.saturating_sub(px),
        y0: b.y0.saturating_sub(py),
        x1: (b.x1 + px).min(width),
        y1: (b.y1 + py).min(height),
    }
}

/// Builds the image that the Crop-Img variant feeds to the backbone, at
/// `out_size × out_size`.
pub fn crop_img_input(
    image: &ImageTensor,
    mask: &ForegroundMask,
    opts: &CropImgOptions,
    out_size: usize,
) -> Result<CroppedInput> {
    let (w, h) = (image.width(), image.height());
    if w != mask.size() || h != mask.size() {
        return Err(Error::shape(
            format!("{0}x{0} image to match mask", mask.size()),
            format!("{w}x{h}"),
        ));
    }
    let full = PixelBox {
        x0: 0,
        y0: 0,
        x1: w,
        y1: h,
    };
    let Some(tight) = foreground_box(mask, opts.threshold) else {
        log::warn!("empty foreground mask; Crop-Img falls back to the full image");
        return Ok(CroppedInput {
            image: image.resize_bilinear(out_size, out_size),
            bbox: full,
            fallback: true,
        });
    };
    let bbox = match opts.mode {
        CropMode::BoxWhiten => pad_box(tight, opts.padding, w, h),
        CropMode::WhitenOnly => full,
    };
    let mut work = image.clone();
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            if mask.at(x, y) <= opts.threshold {
                work.set_pixel(x, y, opts.fill);
            }
        }
    }
    let cropped = work.crop(bbox.x0, bbox.y0, bbox.x1, bbox.y1)?;
    Ok(CroppedInput {
        image: cropped.resize_bilinear(out_size, out_size),
        bbox,
        fallback: false,
    })
}

/// Crop-Img FFA: re-encode the cropped, whitened image and average all of its
/// patch features.
pub fn ffa_crop_img(
    image: &ImageTensor,
    mask: &ForegroundMask,
    backbone: &dyn PatchEncoder,
    opts: &CropImgOptions,
    normalize_patches: bool,
) -> Result<(Embedding, CroppedInput)> {
    let input = crop_img_input(image, mask, opts, backbone.spec().input_size)?;
    let grid = backbone.embed(&input.image)?;
    let pooled = mean_pool(&grid, normalize_patches)?;
    let e = Embedding::new(pooled.values, EmbeddingSource::CropImg)?;
    Ok((e, input))
}

pub(crate) fn cosine_slices(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    (dot / (l2(a) * l2(b))).clamp(-1.0, 1.0)
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    Ok(cosine_slices(&a.values, &b.values) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Cosine,
    Ssim,
}

/// Symmetric `n × n` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f32>,
    kind: SimilarityKind,
}

impl SimilarityMatrix {
    fn build(n: usize, kind: SimilarityKind, mut f: impl FnMut(usize, usize) -> Result<f32>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Invalid(format!("need at least 2 items, got {n}")));
        }
        let mut data = vec![0.0f32; n * n];
        for i in 0..n {
            data[i * n + i] = match kind {
                SimilarityKind::Cosine => 1.0,
                SimilarityKind::Ssim => f(i, i)?,
            };
            for j in i + 1..n {
                let v = f(i, j)?;
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Ok(Self { n, data, kind })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        self.data.chunks(self.n).map(<[f32]>::to_vec).collect()
    }
}

pub fn pairwise_cosine(embeddings: &[Embedding]) -> Result<SimilarityMatrix> {
    SimilarityMatrix::build(embeddings.len(), SimilarityKind::Cosine, |i, j| {
        cosine(&embeddings[i], &embeddings[j])
    })
}

pub fn pairwise_ssim(images: &[ImageTensor]) -> Result<SimilarityMatrix> {
    let stats = images.iter().map(ssim::SsimStats::new).collect::<Result<Vec<_>>>()?;
    SimilarityMatrix::build(images.len(), SimilarityKind::Ssim, |i, j| {
        ssim::ssim_from_stats(&stats[i], &stats[j])
    })
}
