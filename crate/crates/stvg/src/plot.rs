//! Small raster plots: grouped metric bars, relevance curves and activation overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

pub fn series_color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0.min(img.height())..y1.min(img.height()) {
        for x in x0.min(img.width())..x1.min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

/// Grouped bars: one group per metric, one bar per series; values in `[0, 100]`.
pub fn grouped_bars(series: &[[f64; 4]], path: &Path) -> Result<()> {
    let (w, h, pad) = (640u32, 360u32, 30u32);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let plot_h = (h - 2 * pad) as f64;
    for k in 0..=10 {
        let y = pad + (plot_h * k as f64 / 10.0) as u32;
        fill(&mut img, pad, y, w - pad, y + 1, GRID);
    }
    let groups = 4u32;
    let group_w = (w - 2 * pad) / groups;
    let n = series.len().max(1) as u32;
    let bar_w = (group_w - 16) / n;
    for g in 0..groups {
        for (i, s) in series.iter().enumerate() {
            let v = s[g as usize].clamp(0.0, 100.0);
            let top = pad + (plot_h * (1.0 - v / 100.0)) as u32;
            let x0 = pad + g * group_w + 8 + i as u32 * bar_w;
            fill(&mut img, x0, top, x0 + bar_w.saturating_sub(2), h - pad, Rgb(series_color(i)));
        }
    }
    fill(&mut img, pad, h - pad, w - pad, h - pad + 1, AXIS);
    fill(&mut img, pad, pad, pad + 1, h - pad, AXIS);
    img.save(path)?;
    Ok(())
}

/// Per-frame curves in `[0, 1]` with the groundtruth span shaded and a horizontal threshold.
pub fn frame_curves(curves: &[&[f64]], span: (usize, usize), threshold: Option<f64>, path: &Path) -> Result<()> {
    let (w, h, pad) = (480u32, 240u32, 24u32);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let n = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    if n == 0 {
        img.save(path)?;
        return Ok(());
    }
    let (pw, ph) = ((w - 2 * pad) as f64, (h - 2 * pad) as f64);
    let x_of = |i: f64| pad as f64 + if n > 1 { pw * i / (n - 1) as f64 } else { pw / 2.0 };
    let y_of = |v: f64| pad as f64 + ph * (1.0 - v.clamp(0.0, 1.0));
    let half = if n > 1 { pw / (n - 1) as f64 / 2.0 } else { pw / 2.0 };
    let (sx, ex) = (x_of(span.0 as f64) - half, x_of(span.1 as f64) + half);
    fill(
        &mut img,
        sx.max(pad as f64) as u32,
        pad,
        ex.min((w - pad) as f64) as u32,
        h - pad,
        Rgb([220, 235, 250]),
    );
    if let Some(t) = threshold {
        let y = y_of(t);
        let mut x = pad as f64;
        while x < (w - pad) as f64 {
            line(&mut img, (x, y), ((x + 6.0).min((w - pad) as f64), y), Rgb([150, 150, 150]));
            x += 12.0;
        }
    }
    for (k, c) in curves.iter().enumerate() {
        let col = Rgb(series_color(k));
        for i in 1..c.len() {
            line(
                &mut img,
                (x_of((i - 1) as f64), y_of(c[i - 1])),
                (x_of(i as f64), y_of(c[i])),
                col,
            );
        }
        for (i, &v) in c.iter().enumerate() {
            let (x, y) = (x_of(i as f64) as u32, y_of(v) as u32);
            fill(&mut img, x.saturating_sub(2), y.saturating_sub(2), x + 3, y + 3, col);
        }
    }
    fill(&mut img, pad, h - pad, w - pad, h - pad + 1, AXIS);
    fill(&mut img, pad, pad, pad + 1, h - pad, AXIS);
    img.save(path)?;
    Ok(())
}

/// A frame (`[H, W, 3]` values in `[0, 1]`) blended with a `grid`-shaped map, upscaled by `scale`.
pub fn overlay(frame: &[f64], size: (usize, usize), map: &[f64], grid: (usize, usize), scale: u32, path: &Path) -> Result<()> {
    let (fh, fw) = size;
    let (gh, gw) = grid;
    let peak = map.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut img = RgbImage::new(fw as u32 * scale, fh as u32 * scale);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = ((x / scale) as usize, (y / scale) as usize);
        let m = map[(fy * gh / fh) * gw + fx * gw / fw] / peak;
        let base = &frame[(fy * fw + fx) * 3..(fy * fw + fx) * 3 + 3];
        let heat = [1.0, 0.2 + 0.8 * (1.0 - m), 0.0];
        let a = 0.55 * m;
        *px = Rgb(core::array::from_fn(|c| {
            (255.0 * ((1.0 - a) * base[c] + a * heat[c]).clamp(0.0, 1.0)).round() as u8
        }));
    }
    img.save(path)?;
    Ok(())
}
