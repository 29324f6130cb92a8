//! Minimal raster plots: line charts and heatmap overlays.

use image::{Rgb, RgbImage};

use handprobe::image_ops::Image;

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

const MARGIN: u32 = 24;

/// Line chart of several series over a shared box. Axes span the data
/// range unless `bounds` (x0, x1, y0, y1) is given.
pub fn line_chart(series: &[Vec<(f64, f64)>], bounds: Option<[f64; 4]>, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let [x0, x1, y0, y1] = bounds.unwrap_or_else(|| data_bounds(series));
    let pw = (width - 2 * MARGIN) as f64;
    let ph = (height - 2 * MARGIN) as f64;
    let to_px = |(x, y): (f64, f64)| -> (i64, i64) {
        let u = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 };
        let v = if y1 > y0 { (y - y0) / (y1 - y0) } else { 0.5 };
        (
            (MARGIN as f64 + u.clamp(0.0, 1.0) * pw).round() as i64,
            (MARGIN as f64 + (1.0 - v.clamp(0.0, 1.0)) * ph).round() as i64,
        )
    };
    let axis = Rgb([60, 60, 60]);
    let (l, b) = (MARGIN as i64, (height - MARGIN) as i64);
    line(&mut img, (l, MARGIN as i64), (l, b), axis);
    line(&mut img, (l, b), ((width - MARGIN) as i64, b), axis);
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        for w in s.windows(2) {
            line(&mut img, to_px(w[0]), to_px(w[1]), color);
        }
        if s.len() == 1 {
            let (x, y) = to_px(s[0]);
            put(&mut img, x, y, color);
        }
    }
    img
}

fn data_bounds(series: &[Vec<(f64, f64)>]) -> [f64; 4] {
    let pts = || series.iter().flatten().filter(|p| p.0.is_finite() && p.1.is_finite());
    let fold = |f: fn(&(f64, f64)) -> f64| {
        pts().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = fold(|p| p.0);
    let (y0, y1) = fold(|p| p.1);
    if x0.is_finite() {
        [x0, x1, y0, y1]
    } else {
        [0.0, 1.0, 0.0, 1.0]
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Scene image with a heatmap blended in red; `heat` is min-max scaled.
pub fn overlay(scene: &Image, heat: &[f32]) -> RgbImage {
    let lo = heat.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = heat.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let base = scene.to_rgb8();
    let mut out = RgbImage::new(base.width(), base.height());
    for (x, y, p) in base.enumerate_pixels() {
        let t = 0.7 * (heat[(y * base.width() + x) as usize] - lo) / span;
        let mix = |c: u8, target: f32| (c as f32 * (1.0 - t) + target * t).round() as u8;
        out.put_pixel(x, y, Rgb([mix(p[0], 255.0), mix(p[1], 0.0), mix(p[2], 0.0)]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_draws_series_pixels() {
        let img = line_chart(&[vec![(0.0, 0.0), (1.0, 1.0)]], None, 100, 80);
        let colored = img.pixels().filter(|p| p.0 == PALETTE[0]).count();
        assert!(colored > 20);
    }

    #[test]
    fn overlay_keeps_size() {
        let scene = Image::filled(5, 4, [0.2, 0.4, 0.6]);
        let heat: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let out = overlay(&scene, &heat);
        assert_eq!(out.dimensions(), (5, 4));
        assert!(out.get_pixel(4, 3)[0] > out.get_pixel(0, 0)[0]);
        assert_eq!(out.get_pixel(0, 0).0, scene.to_rgb8().get_pixel(0, 0).0);
    }
}
