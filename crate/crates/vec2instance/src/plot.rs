//! Raster figures: loss curves, label maps and prediction overlays.
//!
//! Curves are drawn without text; the CSV written next to every plot holds
//! the values.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use vec2instance_core::data::ImageTile;
use vec2instance_core::inference::LabelMap;

use crate::error::Result;
use crate::io::{rgb_image, save_png, write_bytes};

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// One named curve of `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Wide CSV: `x` followed by one column per series, rows in order of the
/// first series' x values.
pub fn series_csv(x_name: &str, series: &[Series]) -> String {
    let mut s = String::from(x_name);
    for c in series {
        s.push(',');
        s.push_str(&c.name);
    }
    s.push('\n');
    let rows = series.iter().map(|c| c.points.len()).max().unwrap_or(0);
    for r in 0..rows {
        let x = series.iter().find_map(|c| c.points.get(r)).map(|p| p.0).unwrap_or(f64::NAN);
        s.push_str(&x.to_string());
        for c in series {
            s.push(',');
            if let Some(p) = c.points.get(r) {
                s.push_str(&p.1.to_string());
            }
        }
        s.push('\n');
    }
    s
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, Rgb(color));
            }
        }
        if x == x1 && y == y1 {
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

/// Line chart of all series on shared axes with a light ten-step grid.
/// Non-finite points are skipped.
pub fn render_curves(series: &[Series], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let finite = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if !xmin.is_finite() {
        return img;
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let ymin = ymin.min(0.0);
    let margin = 40i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let to_px = |x: f64, y: f64| {
        (
            margin + ((x - xmin) / (xmax - xmin) * w as f64).round() as i64,
            margin + h - ((y - ymin) / (ymax - ymin) * h as f64).round() as i64,
        )
    };
    for i in 0..=10 {
        let gx = margin + w * i / 10;
        let gy = margin + h * i / 10;
        draw_line(&mut img, (gx, margin), (gx, margin + h), [235, 235, 235]);
        draw_line(&mut img, (margin, gy), (margin + w, gy), [235, 235, 235]);
    }
    draw_line(&mut img, (margin, margin + h), (margin + w, margin + h), [0, 0, 0]);
    draw_line(&mut img, (margin, margin), (margin, margin + h), [0, 0, 0]);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| to_px(x, y))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color);
        }
        if let [only] = pts[..] {
            draw_line(&mut img, only, only, color);
        }
    }
    img
}

/// Writes `<stem>.png` and `<stem>.csv`.
pub fn write_curves(stem: &Path, x_name: &str, series: &[Series]) -> Result<()> {
    save_png(&stem.with_extension("png"), &render_curves(series, 800, 500))?;
    write_bytes(&stem.with_extension("csv"), series_csv(x_name, series).as_bytes())
}

/// Instance ids as 16-bit grey levels.
pub fn labelmap_image(map: &LabelMap) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let raw = map.labels.iter().map(|&l| l.min(u16::MAX as u32) as u16).collect();
    ImageBuffer::from_raw(map.width as u32, map.height as u32, raw).expect("label buffer matches dimensions")
}

/// Tile with instances tinted and their boundaries drawn in solid color.
pub fn overlay(tile: &ImageTile, map: &LabelMap) -> RgbImage {
    let mut img = rgb_image(tile.width, tile.height, &tile.pixels);
    let (w, h) = (map.width, map.height);
    let at = |x: usize, y: usize| map.labels[y * w + x];
    for y in 0..h {
        for x in 0..w {
            let l = at(x, y);
            if l == 0 {
                continue;
            }
            let color = PALETTE[(l as usize - 1) % PALETTE.len()];
            let boundary = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || at(x - 1, y) != l
                || at(x + 1, y) != l
                || at(x, y - 1) != l
                || at(x, y + 1) != l;
            let px = img.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                px.0[c] = if boundary {
                    color[c]
                } else {
                    ((px.0[c] as u16 * 7 + color[c] as u16 * 3) / 10) as u8
                };
            }
        }
    }
    img
}
