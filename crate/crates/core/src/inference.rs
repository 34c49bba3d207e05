//! Patch feature grids and foreground mattes produced by exported ONNX graphs.
//!
//! Backbone graphs take `image: f32[1,3,S,S]` (raw RGB in `[0, 1]`, any
//! normalization folded into the graph) and emit `patches: f32[1,G*G,D]` plus
//! `token: f32[1,D]`. Segmentation graphs take the same input and emit
//! `alpha: f32[1,1,S,S]`.

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use tract_onnx::prelude::*;
use tract_onnx::tract_hir::infer::Factoid;

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, INPUT_SIZE};

pub const PATCH_SIZE: usize = 14;
pub const REFERENCE_FEATURE_DIM: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneSpec {
    pub input_size: usize,
    pub patch_size: usize,
    pub feature_dim: usize,
}

impl BackboneSpec {
    pub fn new(input_size: usize, patch_size: usize, feature_dim: usize) -> Result<Self> {
        if patch_size == 0 || !input_size.is_multiple_of(patch_size) || feature_dim == 0 {
            return Err(Error::Invalid(format!(
                "input {input_size} must be a positive multiple of patch {patch_size}, dim {feature_dim} > 0"
            )));
        }
        Ok(Self {
            input_size,
            patch_size,
            feature_dim,
        })
    }

    /// 336 px input, 14 px patches, given feature width.
    pub fn standard(feature_dim: usize) -> Self {
        Self {
            input_size: INPUT_SIZE,
            patch_size: PATCH_SIZE,
            feature_dim,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

/// `side × side × dim` patch features in row-major patch order, plus the
/// optional global token.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureGrid {
    side: usize,
    dim: usize,
    data: Vec<f32>,
    token: Option<Vec<f32>>,
}

impl PatchFeatureGrid {
    pub fn new(side: usize, dim: usize, data: Vec<f32>, token: Option<Vec<f32>>) -> Result<Self> {
        if side == 0 || dim == 0 || data.len() != side * side * dim {
            return Err(Error::shape(
                format!("{side}x{side}x{dim}"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(t) = &token {
            if t.len() != dim {
                return Err(Error::shape(format!("token of {dim}"), t.len()));
            }
        }
        let finite = data.iter().chain(token.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("non-finite value in patch features".into()));
        }
        Ok(Self { side, dim, data, token })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_patches(&self) -> usize {
        self.side * self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn patch_at(&self, row: usize, col: usize) -> &[f32] {
        self.patch(row * self.side + col)
    }

    pub fn patches(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn token(&self) -> Option<&[f32]> {
        self.token.as_deref()
    }
}

/// Square alpha matte with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    size: usize,
    alpha: Vec<f32>,
}

impl ForegroundMask {
    /// Values are clamped into `[0, 1]`; non-finite values are rejected.
    pub fn new(size: usize, mut alpha: Vec<f32>) -> Result<Self> {
        if size == 0 || alpha.len() != size * size {
            return Err(Error::shape(format!("{size}x{size}"), alpha.len()));
        }
        for a in &mut alpha {
            if !a.is_finite() {
                return Err(Error::Invalid("non-finite alpha value".into()));
            }
            *a = a.clamp(0.0, 1.0);
        }
        Ok(Self { size, alpha })
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut alpha = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                alpha.push(f(x, y));
            }
        }
        Self::new(size, alpha)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.alpha[y * self.size + x]
    }

    /// Area-average resampling to a smaller square.
    pub fn area_downsample(&self, size: usize) -> Result<Self> {
        if size == self.size {
            return Ok(self.clone());
        }
        if size == 0 || size > self.size {
            return Err(Error::Invalid(format!(
                "cannot area-downsample {} to {size}",
                self.size
            )));
        }
        let weights = area_weights(self.size, size);
        let mut out = vec![0.0f32; size * size];
        for (oy, wy) in weights.iter().enumerate() {
            for (ox, wx) in weights.iter().enumerate() {
                let mut acc = 0.0f64;
                for &(iy, fy) in wy {
                    for &(ix, fx) in wx {
                        acc += self.alpha[iy * self.size + ix] as f64 * fy * fx;
                    }
                }
                out[oy * size + ox] = acc as f32;
            }
        }
        Self::new(size, out)
    }
}

/// For each output cell, the overlapping input cells and their normalized
/// overlap weights.
fn area_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut cells = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < input {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push((i, overlap / scale));
                }
                i += 1;
            }
            cells
        })
        .collect()
}

/// Produces patch feature grids for preprocessed images.
pub trait PatchEncoder: Send + Sync {
    fn engine_id(&self) -> &str;
    fn spec(&self) -> BackboneSpec;
    fn embed(&self, image: &ImageTensor) -> Result<PatchFeatureGrid>;
}

/// Produces alpha mattes at the engine's input resolution.
pub trait ForegroundSegmenter: Send + Sync {
    fn engine_id(&self) -> &str;
    fn input_size(&self) -> usize;
    fn segment(&self, image: &ImageTensor) -> Result<ForegroundMask>;
}

type Plan = TypedRunnableModel;

fn engine_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Engine(format!("{}: {e}", path.display()))
}

/// Short content hash of a model file, used as its engine identifier.
pub fn engine_id_for(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

fn check_square_input(image: &ImageTensor, size: usize) -> Result<()> {
    if image.width() != size || image.height() != size {
        return Err(Error::shape(
            format!("{size}x{size} image"),
            format!("{}x{}", image.width(), image.height()),
        ));
    }
    Ok(())
}

fn image_tensor(image: &ImageTensor) -> Result<Tensor> {
    let (w, h) = (image.width(), image.height());
    Tensor::from_shape(&[1, 3, h, w], &image.to_chw_unit()).map_err(|e| Error::Engine(e.to_string()))
}

/// Loads a graph, checks the declared input against `[1,3,size,size]`, pins
/// it, and returns the typed model ready for output inspection.
fn load_typed(path: &Path, size: usize) -> Result<TypedModel> {
    let expected = [1usize, 3, size, size];
    let mut model = tract_onnx::onnx()
        .model_for_path(path)
        .map_err(|e| engine_err(path, e))?;
    if model.input_outlets().map_err(|e| engine_err(path, e))?.len() != 1 {
        return Err(Error::Engine(format!("{}: expected exactly one input", path.display())));
    }
    let declared = model.input_fact(0).map_err(|e| engine_err(path, e))?.clone();
    let dims: Vec<Option<usize>> = declared
        .shape
        .dims()
        .map(|d| {
            d.concretize()
                .and_then(|d| d.as_i64())
                .and_then(|d| usize::try_from(d).ok())
        })
        .collect();
    let rank_ok = declared.shape.is_open() || dims.len() == 4;
    let dims_ok = dims
        .iter()
        .zip(expected)
        .all(|(found, want)| found.is_none_or(|f| f == want));
    if !rank_ok || !dims_ok {
        let found: Vec<String> = dims
            .iter()
            .map(|d| d.map_or("?".to_string(), |v| v.to_string()))
            .collect();
        return Err(Error::shape(
            format!("input image f32{expected:?}"),
            format!("[{}] in {}", found.join(", "), path.display()),
        ));
    }
    model
        .set_input_fact(0, f32::fact(expected).into())
        .map_err(|e| engine_err(path, e))?;
    model.into_typed().map_err(|e| engine_err(path, e))
}

/// Output positions of the named outputs, falling back to declaration order.
fn output_positions(model: &TypedModel, names: &[&str]) -> Result<Vec<usize>> {
    let outlets = model.output_outlets().map_err(|e| Error::Engine(e.to_string()))?;
    let labels: Vec<Option<&str>> = outlets.iter().map(|o| model.outlet_label(*o)).collect();
    names
        .iter()
        .enumerate()
        .map(|(fallback, name)| Ok(labels.iter().position(|l| *l == Some(*name)).unwrap_or(fallback)))
        .collect()
}

fn output_shape(model: &TypedModel, ix: usize) -> Result<Vec<usize>> {
    let fact = model.output_fact(ix).map_err(|e| Error::Engine(e.to_string()))?;
    fact.shape
        .as_concrete()
        .map(<[usize]>::to_vec)
        .ok_or_else(|| Error::Engine(format!("output {ix} has symbolic shape {:?}", fact.shape)))
}

fn finish(model: TypedModel, path: &Path) -> Result<Arc<Plan>> {
    model
        .into_optimized()
        .and_then(|m| m.into_runnable())
        .map_err(|e| engine_err(path, e))
}

/// Backbone session over an exported graph. The compiled plan is immutable
/// and shared across worker threads.
#[derive(Clone)]
pub struct OnnxBackbone {
    plan: Arc<Plan>,
    spec: BackboneSpec,
    engine_id: String,
    patches_ix: usize,
    token_ix: Option<usize>,
}

impl std::fmt::Debug for OnnxBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxBackbone")
            .field("engine_id", &self.engine_id)
            .field("spec", &self.spec)
            .finish()
    }
}

impl OnnxBackbone {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, INPUT_SIZE, PATCH_SIZE)
    }

    pub fn load_with(path: impl AsRef<Path>, input_size: usize, patch_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let model = load_typed(path, input_size)?;
        let n_out = model.output_outlets().map_err(|e| engine_err(path, e))?.len();
        let positions = output_positions(&model, &["patches", "token"])?;
        let patches_ix = positions[0];
        let token_ix = (n_out > 1).then_some(positions[1]);

        let shape = output_shape(&model, patches_ix)?;
        let side = input_size / patch_size.max(1);
        let n_patches = side * side;
        if shape.len() != 3 || shape[0] != 1 || shape[1] != n_patches {
            return Err(Error::shape(
                format!("patches f32[1,{n_patches},D]"),
                format!("{shape:?} in {}", path.display()),
            ));
        }
        let dim = shape[2];
        if let Some(t) = token_ix {
            let tshape = output_shape(&model, t)?;
            if tshape != [1, dim] {
                return Err(Error::shape(
                    format!("token f32[1,{dim}]"),
                    format!("{tshape:?} in {}", path.display()),
                ));
            }
        }
        let spec = BackboneSpec::new(input_size, patch_size, dim)?;
        Ok(Self {
            plan: finish(model, path)?,
            spec,
            engine_id: engine_id_for(path)?,
            patches_ix,
            token_ix,
        })
    }
}

impl PatchEncoder for OnnxBackbone {
    fn engine_id(&self) -> &str {
        &self.engine_id
    }

    fn spec(&self) -> BackboneSpec {
        self.spec
    }

    fn embed(&self, image: &ImageTensor) -> Result<PatchFeatureGrid> {
        check_square_input(image, self.spec.input_size)?;
        let outputs = self
            .plan
            .run(tvec!(image_tensor(image)?.into()))
            .map_err(|e| Error::Engine(e.to_string()))?;
        let read = |ix: usize| -> Result<Vec<f32>> {
            let view = outputs[ix]
                .to_plain_array_view::<f32>()
                .map_err(|e| Error::Engine(e.to_string()))?;
            Ok(view.iter().copied().collect())
        };
        let patches = read(self.patches_ix)?;
        let token = self.token_ix.map(read).transpose()?;
        PatchFeatureGrid::new(self.spec.grid_side(), self.spec.feature_dim, patches, token)
    }
}

#[derive(Clone)]
pub struct OnnxSegmenter {
    plan: Arc<Plan>,
    size: usize,
    engine_id: String,
    alpha_ix: usize,
}

impl std::fmt::Debug for OnnxSegmenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxSegmenter")
            .field("engine_id", &self.engine_id)
            .field("size", &self.size)
            .finish()
    }
}

impl OnnxSegmenter {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, INPUT_SIZE)
    }

    /// `size` is the graph's square input resolution; mattes produced above
    /// 336 are area-averaged down by the pipeline.
    pub fn load_with(path: impl AsRef<Path>, size: usize) -> Result<Self> {
        let path = path.as_ref();
        let model = load_typed(path, size)?;
        let alpha_ix = output_positions(&model, &["alpha"])?[0];
        let shape = output_shape(&model, alpha_ix)?;
        if shape != [1, 1, size, size] {
            return Err(Error::shape(
                format!("alpha f32[1,1,{size},{size}]"),
                format!("{shape:?} in {}", path.display()),
            ));
        }
        Ok(Self {
            plan: finish(model, path)?,
            size,
            engine_id: engine_id_for(path)?,
            alpha_ix,
        })
    }
}

impl ForegroundSegmenter for OnnxSegmenter {
    fn engine_id(&self) -> &str {
        &self.engine_id
    }

    fn input_size(&self) -> usize {
        self.size
    }

    fn segment(&self, image: &ImageTensor) -> Result<ForegroundMask> {
        check_square_input(image, self.size)?;
        let outputs = self
            .plan
            .run(tvec!(image_tensor(image)?.into()))
            .map_err(|e| Error::Engine(e.to_string()))?;
        let alpha: Vec<f32> = outputs[self.alpha_ix]
            .to_plain_array_view::<f32>()
            .map_err(|e| Error::Engine(e.to_string()))?
            .iter()
            .copied()
            .collect();
        ForegroundMask::new(self.size, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_spec_geometry() {
        let spec = BackboneSpec::standard(REFERENCE_FEATURE_DIM);
        assert_eq!(spec.grid_side(), 24);
        assert_eq!(spec.num_patches(), 576);
        assert!(BackboneSpec::new(336, 15, 8).is_err());
    }

    #[test]
    fn grid_rejects_nan_and_bad_shape() {
        assert!(PatchFeatureGrid::new(2, 2, vec![0.0; 8], None).is_ok());
        assert!(PatchFeatureGrid::new(2, 2, vec![0.0; 7], None).is_err());
        let mut d = vec![0.0; 8];
        d[3] = f32::NAN;
        assert!(PatchFeatureGrid::new(2, 2, d, None).is_err());
        assert!(PatchFeatureGrid::new(2, 2, vec![0.0; 8], Some(vec![f32::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn mask_clamps() {
        let m = ForegroundMask::new(2, vec![1.0001, -0.2, 0.5, 1.0]).unwrap();
        assert_eq!(m.alpha(), &[1.0, 0.0, 0.5, 1.0]);
        assert!(ForegroundMask::new(2, vec![f32::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn area_downsample_integer_and_fractional() {
        let m = ForegroundMask::from_fn(4, |x, _| if x < 2 { 1.0 } else { 0.0 }).unwrap();
        let d = m.area_downsample(2).unwrap();
        assert_eq!(d.alpha(), &[1.0, 0.0, 1.0, 0.0]);

        let m = ForegroundMask::from_fn(3, |x, _| x as f32 / 2.0).unwrap();
        let d = m.area_downsample(2).unwrap();
        // Left cell covers column 0 fully and half of column 1.
        let expected = (0.0 + 0.5 * 0.5) / 1.5;
        assert!((d.at(0, 0) - expected).abs() < 1e-6);
        let total_in: f32 = m.alpha().iter().sum::<f32>() / 9.0;
        let total_out: f32 = d.alpha().iter().sum::<f32>() / 4.0;
        assert!((total_in - total_out).abs() < 1e-6);
    }
}
