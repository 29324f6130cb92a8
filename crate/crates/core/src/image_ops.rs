//! Planar RGB float images, bilinear resampling and the SimCLR-style
//! augmentation chain used for crop inputs.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image with values in `[0, 1]`, stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Image::new(width, height);
        let plane = width * height;
        for c in 0..3 {
            img.data[c * plane..(c + 1) * plane].fill(rgb[c]);
        }
        img
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, x, y, v);
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut out = Image::new(w as usize, h as usize);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, x as usize, y as usize, p[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.pixel(x as usize, y as usize);
            image::Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?
            .to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Bilinear sample at continuous coordinates (pixel centers at `+0.5`),
    /// replicating edges.
    pub fn sample(&self, c: usize, x: f32, y: f32) -> f32 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f32);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f32);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f32;
        let ay = fy - y0 as f32;
        let top = self.get(c, x0, y0) * (1.0 - ax) + self.get(c, x1, y0) * ax;
        let bottom = self.get(c, x0, y1) * (1.0 - ax) + self.get(c, x1, y1) * ax;
        top * (1.0 - ay) + bottom * ay
    }

    /// Resamples the region `[x0, x1) × [y0, y1)` to `out_w × out_h` using
    /// half-pixel-centered bilinear interpolation.
    pub fn resample(&self, region: [f32; 4], out_w: usize, out_h: usize) -> Result<Image> {
        let [x0, y0, x1, y1] = region;
        if !(x1 > x0 && y1 > y0) || out_w == 0 || out_h == 0 {
            return Err(Error::Degenerate(format!("empty resample region {region:?}")));
        }
        let sx = (x1 - x0) / out_w as f32;
        let sy = (y1 - y0) / out_h as f32;
        let mut out = Image::new(out_w, out_h);
        for c in 0..3 {
            for v in 0..out_h {
                let y = y0 + (v as f32 + 0.5) * sy;
                for u in 0..out_w {
                    let x = x0 + (u as f32 + 0.5) * sx;
                    out.set(c, u, v, self.sample(c, x, y));
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&mut self) {
        for c in 0..3 {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                self.data[row..row + self.width].reverse();
            }
        }
    }

    pub fn to_tensor(&self, norm: &Normalization) -> Tensor {
        let plane = self.width * self.height;
        let mut data = self.data.clone();
        for c in 0..3 {
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v = (*v - norm.mean[c]) / norm.std[c];
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("image tensor")
    }
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    /// Channel statistics over a set of images.
    pub fn estimate<'a>(images: impl IntoIterator<Item = &'a Image>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0f64;
        for img in images {
            let plane = img.width * img.height;
            for c in 0..3 {
                for &v in &img.data[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            n += plane as f64;
        }
        if n == 0.0 {
            return Normalization::default();
        }
        let mean = sum.map(|s| s / n);
        let mut std = [0f32; 3];
        for c in 0..3 {
            std[c] = ((sq[c] / n - mean[c] * mean[c]).max(1e-6)).sqrt() as f32;
        }
        Normalization {
            mean: mean.map(|m| m as f32),
            std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop_scale: (f32, f32),
    pub crop_ratio: (f32, f32),
    pub hflip_p: f32,
    pub jitter_p: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub grayscale_p: f32,
    pub blur_p: f32,
    pub blur_sigma: (f32, f32),
    /// Crop size the blur sigma range refers to; sigma scales with the
    /// actual crop size.
    pub blur_reference_size: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (0.5, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            blur_reference_size: 224.0,
        }
    }
}

impl AugmentConfig {
    /// No randomness at all: plain resize of the whole box.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            hflip_p: 0.0,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            blur_sigma: (0.1, 2.0),
            blur_reference_size: 224.0,
        }
    }
}

fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn color_jitter(img: &mut Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let factor = |rng: &mut ChaCha8Rng, amount: f32| {
        if amount > 0.0 {
            rng.random_range((1.0 - amount).max(0.0)..=1.0 + amount)
        } else {
            1.0
        }
    };
    let b = factor(rng, cfg.brightness);
    let c = factor(rng, cfg.contrast);
    let s = factor(rng, cfg.saturation);
    let h = if cfg.hue > 0.0 {
        rng.random_range(-cfg.hue..=cfg.hue)
    } else {
        0.0
    };
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let (w, hgt) = (img.width, img.height);
    for op in order {
        match op {
            0 => img.data.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0)),
            1 => {
                let mut mean = 0.0;
                for y in 0..hgt {
                    for x in 0..w {
                        mean += luma(img.pixel(x, y));
                    }
                }
                mean /= (w * hgt) as f32;
                img.data
                    .iter_mut()
                    .for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
            }
            2 => {
                for y in 0..hgt {
                    for x in 0..w {
                        let p = img.pixel(x, y);
                        let l = luma(p);
                        img.put(x, y, p.map(|v| ((v - l) * s + l).clamp(0.0, 1.0)));
                    }
                }
            }
            _ => {
                if h != 0.0 {
                    for y in 0..hgt {
                        for x in 0..w {
                            let mut hsv = rgb_to_hsv(img.pixel(x, y));
                            hsv[0] += h;
                            img.put(x, y, hsv_to_rgb(hsv));
                        }
                    }
                }
            }
        }
    }
}

fn gaussian_blur(img: &mut Image, sigma: f32) {
    let plane = img.width * img.height;
    for c in 0..3 {
        blur_plane(&mut img.data[c * plane..(c + 1) * plane], img.width, img.height, sigma);
    }
}

/// Separable Gaussian blur of one row-major plane with edge replication.
pub fn blur_plane(data: &mut [f32], w: usize, h: usize, sigma: f32) {
    if sigma <= 0.0 || w == 0 || h == 0 {
        return;
    }
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / total).collect();
    let (wi, hi) = (w as isize, h as isize);
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..hi {
        for x in 0..wi {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = (x + ki as isize - radius).clamp(0, wi - 1);
                acc += k * data[(y * wi + xx) as usize];
            }
            tmp[(y * wi + x) as usize] = acc;
        }
    }
    for y in 0..hi {
        for x in 0..wi {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = (y + ki as isize - radius).clamp(0, hi - 1);
                acc += k * tmp[(yy * wi + x) as usize];
            }
            data[(y * wi + x) as usize] = acc;
        }
    }
}

/// Crops `region` out of `frame` with a random resized crop, resizes to
/// `size × size`, and applies flip / color / grayscale / blur.
pub fn augmented_crop(
    frame: &Image,
    region: [f32; 4],
    size: usize,
    cfg: &AugmentConfig,
    allow_flip: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let [x0, y0, x1, y1] = region;
    let (w, h) = (x1 - x0, y1 - y0);
    let area = w * h;
    let mut sub = region;
    if cfg.crop_scale.0 < 1.0 || cfg.crop_ratio.0 != cfg.crop_ratio.1 {
        for _ in 0..10 {
            let target = area * rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
            let log_ratio = rng.random_range(cfg.crop_ratio.0.ln()..=cfg.crop_ratio.1.ln());
            let ratio = log_ratio.exp();
            let cw = (target * ratio).sqrt();
            let ch = (target / ratio).sqrt();
            if cw <= w && ch <= h {
                let cx = x0 + rng.random_range(0.0..=(w - cw));
                let cy = y0 + rng.random_range(0.0..=(h - ch));
                sub = [cx, cy, cx + cw, cy + ch];
                break;
            }
        }
    }
    let mut img = frame.resample(sub, size, size)?;
    if allow_flip && rng.random::<f32>() < cfg.hflip_p {
        img.flip_horizontal();
    }
    if rng.random::<f32>() < cfg.jitter_p {
        color_jitter(&mut img, cfg, rng);
    }
    if rng.random::<f32>() < cfg.grayscale_p {
        for y in 0..img.height {
            for x in 0..img.width {
                let l = luma(img.pixel(x, y));
                img.put(x, y, [l, l, l]);
            }
        }
    }
    if rng.random::<f32>() < cfg.blur_p {
        let scale = size as f32 / cfg.blur_reference_size;
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1) * scale;
        if sigma > 0.2 {
            gaussian_blur(&mut img, sigma);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn resample_identity_and_constant() {
        let mut img = Image::new(4, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32 / 36.0;
        }
        let same = img.resample([0.0, 0.0, 4.0, 3.0], 4, 3).unwrap();
        for (a, b) in same.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
        let c = Image::filled(10, 10, [0.2, 0.4, 0.6]);
        let r = c.resample([1.0, 2.0, 7.0, 9.0], 5, 3).unwrap();
        assert!(r.data[..15].iter().all(|v| (v - 0.2).abs() < 1e-6));
        assert!(c.resample([1.0, 1.0, 1.0, 2.0], 2, 2).is_err());
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let mut img = Image::new(4, 1);
        for x in 0..4 {
            img.put(x, 0, [x as f32; 3]);
        }
        let r = img.resample([0.0, 0.0, 4.0, 1.0], 2, 1).unwrap();
        assert!((r.get(0, 0, 0) - 0.5).abs() < 1e-6);
        assert!((r.get(0, 1, 0) - 2.5).abs() < 1e-6);
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.1, 0.5, 0.9], [0.9, 0.2, 0.3], [0.4, 0.4, 0.4], [0.0, 1.0, 0.5]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn augmentation_is_seeded_and_bounded() {
        let mut frame = Image::new(32, 32);
        for (i, v) in frame.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f32 / 100.0;
        }
        let cfg = AugmentConfig::default();
        let a = augmented_crop(&frame, [4.0, 4.0, 28.0, 20.0], 16, &cfg, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = augmented_crop(&frame, [4.0, 4.0, 28.0, 20.0], 16, &cfg, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let plain = augmented_crop(&frame, [0.0, 0.0, 32.0, 32.0], 32, &AugmentConfig::identity(), true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(plain, frame);
    }

    #[test]
    fn normalization_estimate() {
        let img = Image::filled(2, 2, [0.5, 0.25, 1.0]);
        let n = Normalization::estimate([&img]);
        assert!((n.mean[1] - 0.25).abs() < 1e-6);
        let t = img.to_tensor(&n);
        assert_eq!(t.shape(), &[3, 2, 2]);
    }
}
