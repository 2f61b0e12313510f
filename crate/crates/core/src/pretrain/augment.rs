//! Minimal image augmentations for clean-view pairs.
//!
//! Images are `[C, H, W]` row-major with pixels nominally in `[-1, 1]`.
//! Stages run in a fixed order (crop, color jitter, grayscale, blur,
//! solarize, flip); each stage draws its coin flip first, then its
//! parameters only when it fires. Outputs are not clipped.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Area fraction range of the random resized crop.
    pub crop_scale: [f64; 2],
    /// Aspect-ratio range of the crop.
    pub crop_ratio: [f64; 2],
    pub p_jitter: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub p_grayscale: f64,
    pub p_blur: f64,
    pub blur_sigma: [f64; 2],
    pub p_solarize: f64,
    pub p_flip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.08, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            p_jitter: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            p_grayscale: 0.2,
            p_blur: 0.1,
            blur_sigma: [0.1, 2.0],
            p_solarize: 0.2,
            p_flip: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Crop at full scale and every probabilistic stage disabled.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            p_jitter: 0.0,
            p_grayscale: 0.0,
            p_blur: 0.0,
            p_solarize: 0.0,
            p_flip: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_jitter", self.p_jitter),
            ("p_grayscale", self.p_grayscale),
            ("p_blur", self.p_blur),
            ("p_solarize", self.p_solarize),
            ("p_flip", self.p_flip),
        ] {
            crate::numerics::check_probability(p, name)?;
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(invalid!("crop scale must satisfy 0 < lo <= hi <= 1"));
        }
        let [rlo, rhi] = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(invalid!("crop ratio must satisfy 0 < lo <= hi"));
        }
        let [slo, shi] = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(invalid!("blur sigma must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// One augmented view of `image` (`shape = [C, H, W]`).
pub fn augment(image: &[f64], shape: [usize; 3], rng: &mut SeededRng, cfg: &AugmentConfig) -> Vec<f64> {
    let [c, h, w] = shape;
    debug_assert_eq!(image.len(), c * h * w);
    let mut x = random_resized_crop(image, shape, rng, cfg);
    if rng.bernoulli(cfg.p_jitter) {
        color_jitter(&mut x, shape, rng, cfg);
    }
    if rng.bernoulli(cfg.p_grayscale) {
        grayscale(&mut x, shape);
    }
    if rng.bernoulli(cfg.p_blur) {
        let sigma = rng.uniform_range(cfg.blur_sigma[0], cfg.blur_sigma[1]);
        x = gaussian_blur(&x, shape, sigma);
    }
    if rng.bernoulli(cfg.p_solarize) {
        solarize(&mut x);
    }
    if rng.bernoulli(cfg.p_flip) {
        horizontal_flip(&mut x, shape);
    }
    x
}

fn random_resized_crop(image: &[f64], shape: [usize; 3], rng: &mut SeededRng, cfg: &AugmentConfig) -> Vec<f64> {
    let [_, h, w] = shape;
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (cfg.crop_ratio[0].ln(), cfg.crop_ratio[1].ln());
    let mut bbox = (0.0, 0.0, h as f64, w as f64);
    for _ in 0..10 {
        let target = area * rng.uniform_range(cfg.crop_scale[0], cfg.crop_scale[1]);
        let ratio = rng.uniform_range(log_lo, log_hi).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w as f64 && ch <= h as f64 {
            let top = rng.uniform() * (h as f64 - ch);
            let left = rng.uniform() * (w as f64 - cw);
            bbox = (top, left, ch, cw);
            break;
        }
    }
    resize_bilinear(image, shape, bbox)
}

/// Resamples the box `(top, left, height, width)` of each channel back to the
/// full `H x W` grid with bilinear interpolation and clamped borders.
fn resize_bilinear(image: &[f64], shape: [usize; 3], bbox: (f64, f64, f64, f64)) -> Vec<f64> {
    let [c, h, w] = shape;
    let (top, left, bh, bw) = bbox;
    let mut out = vec![0.0; image.len()];
    let sample = |plane: &[f64], y: f64, x: f64| {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top_row = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
        let bottom_row = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
        top_row * (1.0 - fy) + bottom_row * fy
    };
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let y = top + (i as f64 + 0.5) * bh / h as f64 - 0.5;
            for j in 0..w {
                let x = left + (j as f64 + 0.5) * bw / w as f64 - 0.5;
                out[ch * h * w + i * w + j] = sample(plane, y, x);
            }
        }
    }
    out
}

fn luma(x: &[f64], shape: [usize; 3], idx: usize) -> f64 {
    let [c, h, w] = shape;
    if c == 3 {
        let n = h * w;
        0.299 * x[idx] + 0.587 * x[n + idx] + 0.114 * x[2 * n + idx]
    } else {
        x[idx]
    }
}

/// Brightness, contrast, saturation and hue, in that order. Saturation and
/// hue need three channels and are skipped otherwise.
fn color_jitter(x: &mut [f64], shape: [usize; 3], rng: &mut SeededRng, cfg: &AugmentConfig) {
    let [c, h, w] = shape;
    let n = h * w;
    let b = rng.uniform_range(1.0 - cfg.brightness, 1.0 + cfg.brightness);
    // Work in [0, 1]: brightness scales towards black.
    x.iter_mut().for_each(|v| *v = (*v + 1.0) * b - 1.0);

    let k = rng.uniform_range(1.0 - cfg.contrast, 1.0 + cfg.contrast);
    let mean = (0..n).map(|i| luma(x, shape, i)).sum::<f64>() / n as f64;
    x.iter_mut().for_each(|v| *v = (*v - mean) * k + mean);

    let s = rng.uniform_range(1.0 - cfg.saturation, 1.0 + cfg.saturation);
    let hue_shift = rng.uniform_range(-cfg.hue, cfg.hue);
    if c != 3 {
        return;
    }
    for i in 0..n {
        let g = luma(x, shape, i);
        for ch in 0..3 {
            x[ch * n + i] = g + (x[ch * n + i] - g) * s;
        }
        let rgb = [0, 1, 2].map(|ch| (x[ch * n + i] + 1.0) / 2.0);
        let shifted = shift_hue(rgb, hue_shift);
        for ch in 0..3 {
            x[ch * n + i] = 2.0 * shifted[ch] - 1.0;
        }
    }
}

fn shift_hue([r, g, b]: [f64; 3], shift: f64) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return [r, g, b];
    }
    let hue = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let hue = (hue + shift).rem_euclid(1.0) * 6.0;
    let x = delta * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r1, g1, b1) = match hue as usize {
        0 => (delta, x, 0.0),
        1 => (x, delta, 0.0),
        2 => (0.0, delta, x),
        3 => (0.0, x, delta),
        4 => (x, 0.0, delta),
        _ => (delta, 0.0, x),
    };
    [r1 + min, g1 + min, b1 + min]
}

fn grayscale(x: &mut [f64], shape: [usize; 3]) {
    let [c, h, w] = shape;
    if c != 3 {
        return;
    }
    let n = h * w;
    for i in 0..n {
        let g = luma(x, shape, i);
        for ch in 0..3 {
            x[ch * n + i] = g;
        }
    }
}

/// Separable 3x3 Gaussian blur with clamped borders.
fn gaussian_blur(x: &[f64], shape: [usize; 3], sigma: f64) -> Vec<f64> {
    let [c, h, w] = shape;
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    let k = [side / norm, 1.0 / norm, side / norm];
    let mut tmp = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let off = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let l = j.saturating_sub(1);
                let r = (j + 1).min(w - 1);
                let row = off + i * w;
                tmp[row + j] = k[0] * x[row + l] + k[1] * x[row + j] + k[2] * x[row + r];
            }
        }
        for i in 0..h {
            let u = i.saturating_sub(1);
            let d = (i + 1).min(h - 1);
            for j in 0..w {
                out[off + i * w + j] =
                    k[0] * tmp[off + u * w + j] + k[1] * tmp[off + i * w + j] + k[2] * tmp[off + d * w + j];
            }
        }
    }
    out
}

/// Inverts pixels at or above mid-gray.
fn solarize(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v >= 0.0 {
            *v = -*v;
        }
    });
}

pub fn horizontal_flip(x: &mut [f64], shape: [usize; 3]) {
    let [c, h, w] = shape;
    for row in x.chunks_mut(w).take(c * h) {
        row.reverse();
    }
}
