//! Static PNG output: line charts of training curves and sample grids.

use std::path::Path;

use favae::DMatrix;
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{CliError, CliResult};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 30;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn save_err(path: &Path, e: image::ImageError) -> CliError {
    CliError::io(path, std::io::Error::other(e.to_string()))
}

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// One polyline per series against its index, all sharing the y range.
/// Non-finite points are skipped.
pub fn line_chart(series: &[Vec<f64>]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x0, y0) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
    let (x1, y1) = ((WIDTH - MARGIN) as f64, MARGIN as f64);
    let black = Rgb([0, 0, 0]);
    draw_segment(&mut img, (x0, y0), (x1, y0), black);
    draw_segment(&mut img, (x0, y0), (x0, y1), black);

    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    let x_of = |i: usize| {
        if len > 1 {
            x0 + (x1 - x0) * i as f64 / (len - 1) as f64
        } else {
            (x0 + x1) / 2.0
        }
    };
    let y_of = |v: f64| y0 - (y0 - y1) * (v - lo) / span;
    for (s, values) in series.iter().enumerate() {
        let color = Rgb(PALETTE[s % PALETTE.len()]);
        let points: Vec<(f64, f64)> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (x_of(i), y_of(v)))
            .collect();
        for w in points.windows(2) {
            draw_segment(&mut img, w[0], w[1], color);
        }
        if let [p] = points[..] {
            draw_segment(&mut img, p, p, color);
        }
    }
    img
}

pub fn save_line_chart(path: &Path, series: &[Vec<f64>]) -> CliResult<()> {
    line_chart(series).save(path).map_err(|e| save_err(path, e))
}

/// Tile shape for a row of `d` pixels: square when possible, else one line.
pub fn tile_shape(d: usize) -> (u32, u32) {
    let side = (d as f64).sqrt().round() as usize;
    if side * side == d {
        (side as u32, side as u32)
    } else {
        (d as u32, 1)
    }
}

/// Every row of `values` as a grayscale tile, laid out on a near-square
/// grid and min-max scaled over the whole matrix.
pub fn sample_grid(values: &DMatrix<f64>, scale: u32) -> GrayImage {
    let (n, d) = values.shape();
    let (tw, th) = tile_shape(d);
    let cols = ((n as f64).sqrt().ceil() as u32).max(1);
    let rows = (n as u32).div_ceil(cols).max(1);
    let gap = 1;
    let cell_w = tw * scale + gap;
    let cell_h = th * scale + gap;
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = GrayImage::from_pixel(cols * cell_w, rows * cell_h, Luma([0]));
    for r in 0..n {
        let (gx, gy) = ((r as u32 % cols) * cell_w, (r as u32 / cols) * cell_h);
        for p in 0..d {
            let v = values[(r, p)];
            let level = if v.is_finite() {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            };
            let (px, py) = (p as u32 % tw, p as u32 / tw);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(gx + px * scale + dx, gy + py * scale + dy, Luma([level]));
                }
            }
        }
    }
    img
}

pub fn save_sample_grid(path: &Path, values: &DMatrix<f64>) -> CliResult<()> {
    sample_grid(values, 4)
        .save(path)
        .map_err(|e| save_err(path, e))
}
