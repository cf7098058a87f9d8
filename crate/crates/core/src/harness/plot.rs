use std::path::Path;

use image::{Rgb, RgbImage};

use super::train::MetricsLine;
use crate::error::{ensure, Error, Result};
use crate::synthdata::{SourceRegion, VideoClip};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 30;
const PALETTE: [[u8; 3]; 6] = [
    [20, 20, 20],
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
];

/// One polyline of `(x, y)` points.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
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

/// Line chart of every series on shared axes with light grid lines at
/// quarter intervals. Colours follow the series order.
pub fn line_chart(series: &[Series], path: &Path) -> Result<()> {
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    ensure!(pts().next().is_some(), InvalidArgument, "nothing to plot");
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts() {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    y_lo = y_lo.min(0.0);
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        (
            (MARGIN as f64 + (x - x_lo) / (x_hi - x_lo) * w).round() as i64,
            (MARGIN as f64 + h - (y - y_lo) / (y_hi - y_lo) * h).round() as i64,
        )
    };
    let grid = Rgb([225, 225, 225]);
    for q in 1..=4 {
        let yy = y_lo + (y_hi - y_lo) * q as f64 / 4.0;
        line(&mut img, to_px(x_lo, yy), to_px(x_hi, yy), grid);
        let xx = x_lo + (x_hi - x_lo) * q as f64 / 4.0;
        line(&mut img, to_px(xx, y_lo), to_px(xx, y_hi), grid);
    }
    let axis = Rgb([0, 0, 0]);
    line(&mut img, to_px(x_lo, y_lo), to_px(x_hi, y_lo), axis);
    line(&mut img, to_px(x_lo, y_lo), to_px(x_lo, y_hi), axis);
    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let finite: Vec<_> = s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        for pair in finite.windows(2) {
            line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), color);
        }
        if finite.len() == 1 {
            let (x, y) = to_px(finite[0].0, finite[0].1);
            for d in -2..=2 {
                line(&mut img, (x + d, y - 2), (x + d, y + 2), color);
            }
        }
    }
    save(&img, path)
}

/// Loss components per step: total, supervised, consistency, mixup,
/// contrastive (in palette order).
pub fn loss_series(metrics: &[MetricsLine]) -> Vec<Series> {
    let mut out: Vec<Series> = ["l_total", "l_s", "l_u", "l_mix", "l_c"]
        .iter()
        .map(|n| Series {
            name: n.to_string(),
            points: Vec::new(),
        })
        .collect();
    for m in metrics {
        if let MetricsLine::Train { step, losses, .. } = m {
            let x = *step as f64;
            for (s, v) in out
                .iter_mut()
                .zip([losses.l_total, losses.l_s, losses.l_u, losses.l_mix, losses.l_c])
            {
                s.points.push((x, v));
            }
        }
    }
    out
}

/// Test accuracy at each evaluation and the pseudo-label pass rate.
pub fn accuracy_series(metrics: &[MetricsLine]) -> Vec<Series> {
    let mut acc = Series {
        name: "test_accuracy".into(),
        points: Vec::new(),
    };
    let mut pass = Series {
        name: "pass_rate".into(),
        points: Vec::new(),
    };
    for m in metrics {
        match m {
            MetricsLine::Eval { step, accuracy, .. } => acc.points.push((*step as f64, *accuracy)),
            MetricsLine::Train { step, losses, .. } => pass.points.push((*step as f64, losses.pass_rate)),
        }
    }
    vec![acc, pass]
}

/// Frames side by side, each upscaled by `scale`, tinted red by token
/// saliency `[T, N]` on the `grid`, with the source box outlined in green.
pub fn saliency_overlay(
    clip: &VideoClip,
    saliency: &[f64],
    grid: (usize, usize),
    region: Option<&SourceRegion>,
    scale: u32,
    path: &Path,
) -> Result<()> {
    let (t, h, w) = (clip.frames, clip.height, clip.width);
    let n = grid.0 * grid.1;
    ensure!(saliency.len() == t * n, Shape, "saliency has {} values for {t}x{n}", saliency.len());
    ensure!(h % grid.0 == 0 && w % grid.1 == 0, Shape, "grid does not tile the frame");
    let (ph, pw) = (h / grid.0, w / grid.1);
    let gap = 2;
    let fw = w as u32 * scale;
    let mut img = RgbImage::from_pixel(t as u32 * (fw + gap) - gap, h as u32 * scale, Rgb([255, 255, 255]));
    for f in 0..t {
        let ox = f as u32 * (fw + gap);
        for y in 0..h {
            for x in 0..w {
                let s = saliency[f * n + (y / ph) * grid.1 + x / pw].clamp(0.0, 1.0);
                let px: Vec<f64> = (0..3)
                    .map(|c| clip.get(f, y, x, c.min(clip.channels - 1)) as f64)
                    .collect();
                let rgb = [
                    (0.5 * px[0] + 0.5 * s) * 255.0,
                    0.5 * px[1] * 255.0,
                    0.5 * px[2] * 255.0,
                ]
                .map(|v| v.round().clamp(0.0, 255.0) as u8);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(ox + x as u32 * scale + dx, y as u32 * scale + dy, Rgb(rgb));
                    }
                }
            }
        }
        if let Some(b) = region.and_then(|r| r.frame_boxes.get(f)) {
            let green = Rgb([0, 220, 0]);
            let (x0, y0) = ((ox + b.x0 * scale) as i64, (b.y0 * scale) as i64);
            let (x1, y1) = ((ox + b.x1 * scale) as i64 - 1, (b.y1 * scale) as i64 - 1);
            line(&mut img, (x0, y0), (x1, y0), green);
            line(&mut img, (x0, y1), (x1, y1), green);
            line(&mut img, (x0, y0), (x0, y1), green);
            line(&mut img, (x1, y0), (x1, y1), green);
        }
    }
    save(&img, path)
}
