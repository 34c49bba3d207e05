//! 8-bit RGB rasters and the fixed-size preprocessing step.

use std::path::Path;

use crate::error::{Error, Result};

/// Side length of the square network input.
pub const INPUT_SIZE: usize = 336;

/// Interleaved 8-bit sRGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape(
                format!("{width}x{height}x3 bytes"),
                format!("{} bytes", data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// BT.601 luma, `0.299 R + 0.587 G + 0.114 B`, on the 0..255 scale.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Planar `[3, H, W]` floats in `[0, 1]`, the layout fed to the graphs.
    pub fn to_chw_unit(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        out
    }

    /// Copies the half-open box `[x0, x1) × [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(Error::Invalid(format!(
                "crop box ({x0},{y0})-({x1},{y1}) outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(x1 - x0, y1 - y0, |x, y| self.pixel(x0 + x, y0 + y)))
    }

    /// Bilinear resampling with half-pixel centers: destination pixel `d`
    /// samples source coordinate `(d + 0.5) * in / out - 0.5`, clamped to the
    /// image. Same-size resizes return the input unchanged.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xs = axis_taps(self.width, width);
        let ys = axis_taps(self.height, height);
        let mut data = Vec::with_capacity(width * height * 3);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..3 {
                    let at = |x: usize, y: usize| self.data[(y * self.width + x) * 3 + c] as f32;
                    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Self { width, height, data }
    }
}

pub(crate) fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub fn decode(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageTensor::new(w as usize, h as usize, rgb.into_raw())
}

pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageTensor::new(w as usize, h as usize, rgb.into_raw())
}

/// Decodes an image file and squashes it to the 336×336 network input.
pub fn preprocess(path: impl AsRef<Path>) -> Result<ImageTensor> {
    preprocess_to(path, INPUT_SIZE)
}

pub fn preprocess_to(path: impl AsRef<Path>, size: usize) -> Result<ImageTensor> {
    Ok(decode(path)?.resize_bilinear(size, size))
}

pub fn save_png(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer(
        path,
        &image.data,
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
