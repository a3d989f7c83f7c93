//! Small raster plots drawn pixel by pixel. No text; axes and data only.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::LandmarkPair;
use crate::metrics::{FrameCurve, Stats};

const W: u32 = 320;
const H: u32 = 240;
const MARGIN: f64 = 20.0;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const ORANGE: Rgb<u8> = Rgb([255, 140, 0]);
pub const BLUE: Rgb<u8> = Rgb([40, 90, 220]);
const PALETTE: [Rgb<u8>; 3] = [Rgb([200, 50, 50]), Rgb([40, 90, 220]), Rgb([30, 150, 60])];

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })?;
    crate::fsutil::write_atomic(path, &bytes)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham line.
pub fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let (mut x, mut y) = (x0.round() as i64, y0.round() as i64);
    let (xe, ye) = (x1.round() as i64, y1.round() as i64);
    let dx = (xe - x).abs();
    let dy = -(ye - y).abs();
    let sx = if x < xe { 1 } else { -1 };
    let sy = if y < ye { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if x == xe && y == ye {
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

fn dot(img: &mut RgbImage, (x, y): (f64, f64), r: i64, c: Rgb<u8>) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

/// Maps data coordinates into the plot area.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let pad = |a: f64, b: f64| if (b - a).abs() < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let u = MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W as f64 - 2.0 * MARGIN);
        let v = H as f64 - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H as f64 - 2.0 * MARGIN);
        (u, v)
    }

    fn canvas(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(W, H, WHITE);
        for i in 1..5 {
            let y = self.y0 + (self.y1 - self.y0) * i as f64 / 5.0;
            line(&mut img, self.px(self.x0, y), self.px(self.x1, y), GRID);
        }
        line(&mut img, self.px(self.x0, self.y0), self.px(self.x1, self.y0), AXIS);
        line(&mut img, self.px(self.x0, self.y0), self.px(self.x0, self.y1), AXIS);
        img
    }
}

/// One box per row: whiskers min..max, box 25%..75%, bar at the median,
/// tick at 90%, dot at the mean.
pub fn stat_boxes(rows: &[Stats]) -> RgbImage {
    let top = rows.iter().map(|s| s.max).fold(0.0, f64::max);
    let f = Frame::new(0.0, rows.len() as f64, 0.0, top * 1.05);
    let mut img = f.canvas();
    for (i, s) in rows.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let (l, m, r) = (i as f64 + 0.3, i as f64 + 0.5, i as f64 + 0.7);
        line(&mut img, f.px(m, s.min), f.px(m, s.p25), c);
        line(&mut img, f.px(m, s.p75), f.px(m, s.max), c);
        for y in [s.p25, s.p75] {
            line(&mut img, f.px(l, y), f.px(r, y), c);
        }
        line(&mut img, f.px(l, s.p25), f.px(l, s.p75), c);
        line(&mut img, f.px(r, s.p25), f.px(r, s.p75), c);
        line(&mut img, f.px(l, s.median), f.px(r, s.median), AXIS);
        line(&mut img, f.px(m - 0.1, s.p90), f.px(m + 0.1, s.p90), c);
        dot(&mut img, f.px(m, s.mean), 2, c);
    }
    img
}

/// Scatter of `(truth, pred)` with the identity line.
pub fn scatter(points: &[(f64, f64)]) -> RgbImage {
    let lo = points.iter().flat_map(|p| [p.0, p.1]).fold(f64::INFINITY, f64::min).min(0.0);
    let hi = points.iter().flat_map(|p| [p.0, p.1]).fold(f64::NEG_INFINITY, f64::max).max(lo + 1.0);
    let f = Frame::new(lo, hi, lo, hi);
    let mut img = f.canvas();
    line(&mut img, f.px(lo, lo), f.px(hi, hi), GRID);
    for &(t, p) in points {
        dot(&mut img, f.px(t, p), 2, BLUE);
    }
    img
}

/// Per-frame error curves, one polyline per sequence.
pub fn curves(curves: &[FrameCurve]) -> RgbImage {
    let kmax = curves.iter().map(|c| c.k()).max().unwrap_or(1).max(2);
    let top = curves.iter().flat_map(|c| c.lde.iter().copied()).fold(0.0, f64::max);
    let f = Frame::new(1.0, kmax as f64, 0.0, top * 1.05);
    let mut img = f.canvas();
    for (i, c) in curves.iter().enumerate() {
        let col = PALETTE[i % PALETTE.len()];
        for (t, w) in c.lde.windows(2).enumerate() {
            line(&mut img, f.px((t + 1) as f64, w[0]), f.px((t + 2) as f64, w[1]), col);
        }
    }
    img
}

/// Grayscale frame upscaled by `scale` with the predicted LVID segment in
/// orange and the reference segment in blue.
pub fn lvid_overlay(
    pixels: &[u8],
    width: usize,
    height: usize,
    scale: u32,
    pred: &LandmarkPair<f64>,
    truth: Option<&LandmarkPair<f64>>,
) -> RgbImage {
    let s = scale.max(1);
    let mut img = RgbImage::from_fn(width as u32 * s, height as u32 * s, |x, y| {
        let v = pixels[(y / s) as usize * width + (x / s) as usize];
        Rgb([v, v, v])
    });
    let map = |p: crate::geometry::Point2<f64>| ((p.x + 0.5) * s as f64 - 0.5, (p.y + 0.5) * s as f64 - 0.5);
    let mut seg = |lp: &LandmarkPair<f64>, c: Rgb<u8>| {
        let (a, b) = (map(lp.inferolateral), map(lp.anteroseptal));
        line(&mut img, a, b, c);
        dot(&mut img, a, 2, c);
        dot(&mut img, b, 2, c);
    };
    if let Some(t) = truth {
        seg(t, BLUE);
    }
    seg(pred, ORANGE);
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;

    #[test]
    fn line_hits_both_ends() {
        let mut img = RgbImage::from_pixel(10, 10, WHITE);
        line(&mut img, (1.0, 2.0), (8.0, 7.0), AXIS);
        assert_eq!(*img.get_pixel(1, 2), AXIS);
        assert_eq!(*img.get_pixel(8, 7), AXIS);
    }

    #[test]
    fn overlay_marks_segments() {
        let px = vec![0u8; 16 * 16];
        let p = LandmarkPair::new(Point2::new(2.0, 2.0), Point2::new(12.0, 2.0));
        let t = LandmarkPair::new(Point2::new(2.0, 10.0), Point2::new(12.0, 10.0));
        let img = lvid_overlay(&px, 16, 16, 2, &p, Some(&t));
        assert_eq!(img.dimensions(), (32, 32));
        assert_eq!(*img.get_pixel(14, 5), ORANGE);
        assert_eq!(*img.get_pixel(14, 21), BLUE);
    }

    #[test]
    fn plots_tolerate_degenerate_input() {
        let z = crate::metrics::stats_table(&[0.0]).unwrap();
        assert_eq!(stat_boxes(&[z, z, z]).dimensions(), (W, H));
        assert_eq!(scatter(&[]).dimensions(), (W, H));
        assert_eq!(curves(&[]).dimensions(), (W, H));
    }
}
