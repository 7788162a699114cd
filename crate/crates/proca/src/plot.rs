//! Minimal raster charts. No text rendering: titles and legends go in report.md.

use image::{Rgb, RgbImage};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 360;
const MARGIN: i64 = 30;

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
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

fn frame() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = (WIDTH as i64, HEIGHT as i64);
    let axis = [90, 90, 90];
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), axis);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis);
    img
}

/// Line chart of each series against its index; series share one y range.
/// Non-finite points break the line.
pub fn line_chart(series: &[Vec<f64>]) -> RgbImage {
    let mut img = frame();
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    if len < 2 || !lo.is_finite() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = ((WIDTH as i64 - 2 * MARGIN) as f64, (HEIGHT as i64 - 2 * MARGIN) as f64);
    let to_px = |i: usize, v: f64| {
        let x = MARGIN + (i as f64 / (len - 1) as f64 * pw).round() as i64;
        let y = HEIGHT as i64 - MARGIN - ((v - lo) / span * ph).round() as i64;
        (x, y)
    };
    for (s, values) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let mut prev = None;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = to_px(i, v);
            if let Some(q) = prev {
                line(&mut img, q, p, color);
            } else {
                put(&mut img, p.0, p.1, color);
            }
            prev = Some(p);
        }
    }
    img
}

/// Grouped bars on a fixed [0, 1] scale: one group per category, one bar per series.
/// Missing values leave a gap.
pub fn bar_chart(series: &[Vec<Option<f64>>]) -> RgbImage {
    let mut img = frame();
    let groups = series.iter().map(Vec::len).max().unwrap_or(0);
    if groups == 0 || series.is_empty() {
        return img;
    }
    let pw = WIDTH as i64 - 2 * MARGIN;
    let ph = (HEIGHT as i64 - 2 * MARGIN) as f64;
    let group_w = pw / groups as i64;
    let bar_w = ((group_w - 8) / series.len() as i64).max(1);
    for g in 0..groups {
        for (s, values) in series.iter().enumerate() {
            let Some(Some(v)) = values.get(g) else { continue };
            let top = HEIGHT as i64 - MARGIN - (v.clamp(0.0, 1.0) * ph).round() as i64;
            let x0 = MARGIN + g as i64 * group_w + 4 + s as i64 * bar_w;
            for x in x0..x0 + bar_w - 1 {
                line(&mut img, (x, HEIGHT as i64 - MARGIN - 1), (x, top), PALETTE[s % PALETTE.len()]);
            }
        }
    }
    img
}
