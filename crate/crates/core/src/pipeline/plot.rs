//! Small PNG renderings for visual QC.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::imgproc::Plane;

pub const RED: Rgb<u8> = Rgb([230, 40, 40]);
pub const GREEN: Rgb<u8> = Rgb([40, 200, 60]);
pub const GREY: Rgb<u8> = Rgb([150, 150, 150]);

/// Grey-scale rendering of `plane` windowed to `[lo, hi]`. Rows are stretched
/// by `aspect` (row spacing over column spacing) with nearest-neighbour lookup.
pub fn render_plane(plane: &Plane<f32>, lo: f32, hi: f32, aspect: f64) -> RgbImage {
    let rows = ((plane.height as f64 * aspect).round() as u32).max(1);
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(plane.width as u32, rows, |x, y| {
        let src = ((y as f64 / aspect) as usize).min(plane.height - 1);
        let v = ((plane.get(x as usize, src) - lo) / span).clamp(0.0, 1.0);
        let g = (v * 255.0).round() as u8;
        Rgb([g, g, g])
    })
}

/// Plus-shaped marker centred at pixel (x, y); parts off the image are dropped.
pub fn draw_cross(img: &mut RgbImage, x: f64, y: f64, half: i64, color: Rgb<u8>) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for d in -half..=half {
        for (px, py) in [(cx + d, cy), (cx, cy + d)] {
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Scatter of `(x, y, highlighted)` points with horizontal guide lines.
pub fn scatter(points: &[(f64, f64, bool)], x_range: [f64; 2], y_range: [f64; 2], guides: &[f64]) -> RgbImage {
    let (w, h, m) = (480u32, 320u32, 16.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let to_px = |x: f64, y: f64| {
        let fx = (x - x_range[0]) / (x_range[1] - x_range[0]).max(f64::EPSILON);
        let fy = (y - y_range[0]) / (y_range[1] - y_range[0]).max(f64::EPSILON);
        (m + fx.clamp(0.0, 1.0) * (w as f64 - 2.0 * m), h as f64 - m - fy.clamp(0.0, 1.0) * (h as f64 - 2.0 * m))
    };
    for &g in guides {
        let (_, py) = to_px(x_range[0], g);
        for px in (m as u32)..(w - m as u32) {
            if px % 4 < 2 {
                img.put_pixel(px, py.round() as u32, GREY);
            }
        }
    }
    for &(x, y, hot) in points {
        let (px, py) = to_px(x, y);
        draw_cross(&mut img, px, py, 2, if hot { RED } else { GREEN });
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}
