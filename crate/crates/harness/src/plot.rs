//! Minimal line charts rendered straight to PNG.
//!
//! Tick labels use a built-in 3x5 digit font; axis titles and legends go in
//! the accompanying summary text. Output is byte-for-byte deterministic.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::HarnessError;

const WIDTH: u32 = 560;
const HEIGHT: u32 = 360;
const LEFT: i64 = 48;
const RIGHT: i64 = 16;
const TOP: i64 = 16;
const BOTTOM: i64 = 32;

pub const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [127, 127, 127]];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Optional half-height error bar per point.
    pub spread: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub series: Vec<Series>,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Vertical marker lines (for example an operating point).
    pub markers: Vec<f64>,
}

impl Chart {
    /// Chart spanning every point of every series, padded by 5% vertically.
    pub fn fit(series: Vec<Series>) -> Self {
        let pts = || series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let pad = 0.05 * (y1 - y0);
        Self {
            series,
            x_range: (x0, x1),
            y_range: (y0 - pad, y1 + pad),
            markers: Vec::new(),
        }
    }

    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let (pw, ph) = (WIDTH as i64 - LEFT - RIGHT, HEIGHT as i64 - TOP - BOTTOM);
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let px = |x: f64| LEFT + ((x - x0) / (x1 - x0) * pw as f64).round() as i64;
        let py = |y: f64| TOP + ph - ((y - y0) / (y1 - y0) * ph as f64).round() as i64;
        let grid = Rgb([225, 225, 225]);
        let axis = Rgb([0, 0, 0]);
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            line(&mut img, px(fx), TOP, px(fx), TOP + ph, grid, 1);
            line(&mut img, LEFT, py(fy), LEFT + pw, py(fy), grid, 1);
            text(&mut img, px(fx) - 6, TOP + ph + 8, &tick(fx), axis);
            text(&mut img, 2, py(fy) - 2, &tick(fy), axis);
        }
        line(&mut img, LEFT, TOP + ph, LEFT + pw, TOP + ph, axis, 1);
        line(&mut img, LEFT, TOP, LEFT, TOP + ph, axis, 1);
        for &m in &self.markers {
            let x = px(m);
            let mut y = TOP;
            while y < TOP + ph {
                line(&mut img, x, y, x, (y + 4).min(TOP + ph), Rgb([90, 90, 90]), 1);
                y += 8;
            }
        }
        for (k, s) in self.series.iter().enumerate() {
            let c = Rgb(PALETTE[k % PALETTE.len()]);
            let pts: Vec<(i64, i64)> = s.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| (px(x), py(y))).collect();
            for w in pts.windows(2) {
                line(&mut img, w[0].0, w[0].1, w[1].0, w[1].1, c, 2);
            }
            for &(x, y) in &pts {
                rect(&mut img, x - 2, y - 2, 5, 5, c);
            }
            if let Some(spread) = &s.spread {
                for (&(x, y), &e) in s.points.iter().zip(spread) {
                    if y.is_finite() && e.is_finite() && e > 0.0 {
                        line(&mut img, px(x), py(y - e), px(x), py(y + e), c, 1);
                    }
                }
            }
            // Legend swatch, top right, one row per series.
            rect(&mut img, LEFT + pw - 14, TOP + 4 + 10 * k as i64, 10, 6, c);
        }
        img
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        self.render().save(path).map_err(|e| HarnessError::Plot(format!("{}: {e}", path.display())))
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if (0..img.width() as i64).contains(&x) && (0..img.height() as i64).contains(&y) {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, c: Rgb<u8>) {
    for dy in 0..h {
        for dx in 0..w {
            put(img, x + dx, y + dy, c);
        }
    }
}

/// Bresenham line with a square pen of `thick` pixels.
fn line(img: &mut RgbImage, mut x0: i64, mut y0: i64, x1: i64, y1: i64, c: Rgb<u8>, thick: i64) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        rect(img, x0, y0, thick, thick, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// 3x5 glyphs, one row per u8 (low 3 bits, MSB left).
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        _ => return None,
    })
}

fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, c: Rgb<u8>) {
    for (i, ch) in s.chars().enumerate() {
        if let Some(rows) = glyph(ch) {
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        put(img, x + 4 * i as i64 + col, y + r as i64, c);
                    }
                }
            }
        }
    }
}
