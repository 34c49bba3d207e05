//! Structural similarity on BT.601 luma: 11×11 Gaussian window (σ = 1.5),
//! `C1 = (0.01·255)²`, `C2 = (0.03·255)²`, averaged over all valid window
//! positions.

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable 'valid' Gaussian filter; output is `(w-10) × (h-10)`.
fn filter(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = kernel();
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = row[x..x + WINDOW].iter().zip(&k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| tmp[(y + i) * ow + x] * k[i]).sum();
        }
    }
    out
}

/// Per-image filtered moments, reusable across many pairs.
#[derive(Debug, Clone)]
pub struct SsimStats {
    width: usize,
    height: usize,
    luma: Vec<f64>,
    mu: Vec<f64>,
    sq: Vec<f64>,
}

impl SsimStats {
    pub fn new(image: &ImageTensor) -> Result<Self> {
        let (w, h) = (image.width(), image.height());
        if w < WINDOW || h < WINDOW {
            return Err(Error::Invalid(format!(
                "SSIM needs at least {WINDOW}x{WINDOW}, got {w}x{h}"
            )));
        }
        let luma = image.luma();
        let squares: Vec<f64> = luma.iter().map(|v| v * v).collect();
        Ok(Self {
            width: w,
            height: h,
            mu: filter(&luma, w, h),
            sq: filter(&squares, w, h),
            luma,
        })
    }
}

pub fn ssim_from_stats(a: &SsimStats, b: &SsimStats) -> Result<f32> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let prod: Vec<f64> = a.luma.iter().zip(&b.luma).map(|(x, y)| x * y).collect();
    let cross = filter(&prod, a.width, a.height);
    let mut total = 0.0;
    for (i, &c) in cross.iter().enumerate() {
        let (mx, my) = (a.mu[i], b.mu[i]);
        let vx = a.sq[i] - mx * mx;
        let vy = b.sq[i] - my * my;
        let cov = c - mx * my;
        total += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
    }
    Ok((total / cross.len() as f64).clamp(-1.0, 1.0) as f32)
}

pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f32> {
    if (x.width(), x.height()) != (y.width(), y.height()) {
        return Err(Error::shape(
            format!("{}x{}", x.width(), x.height()),
            format!("{}x{}", y.width(), y.height()),
        ));
    }
    ssim_from_stats(&SsimStats::new(x)?, &SsimStats::new(y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(w: usize, h: usize, seed: u64) -> ImageTensor {
        let mut s = seed | 1;
        ImageTensor::from_fn(w, h, |_, _| {
            let mut px = [0u8; 3];
            for c in &mut px {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *c = (s >> 56) as u8;
            }
            px
        })
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..WINDOW {
            assert_eq!(k[i], k[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn self_similarity_is_one() {
        let x = noise(40, 30, 9);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn constant_closed_form() {
        let (c1, c2) = (40.0f64, 200.0f64);
        let a = ImageTensor::filled(20, 20, [40, 40, 40]);
        let b = ImageTensor::filled(20, 20, [200, 200, 200]);
        let expected = (2.0 * c1 * c2 + C1) / (c1 * c1 + c2 * c2 + C1);
        assert!((ssim(&a, &b).unwrap() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn size_mismatch_and_tiny_inputs() {
        assert!(ssim(&noise(20, 20, 1), &noise(21, 20, 1)).is_err());
        assert!(ssim(&noise(10, 20, 1), &noise(10, 20, 2)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
            let (x, y) = (noise(24, 19, s1), noise(24, 19, s2));
            let a = ssim(&x, &y).unwrap();
            let b = ssim(&y, &x).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
