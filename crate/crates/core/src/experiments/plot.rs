//! Static PNG figures drawn directly into RGB buffers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::{prepare_slices, Image2D, SamplePlan, SubjectVolumes};
use crate::error::{HinetError, Result};
use crate::model::HiNetParams;
use crate::synthesis::synthesize_slice;
use crate::trainer::LogRow;

const PANEL_W: u32 = 640;
const PANEL_H: u32 = 120;
const MARGIN: u32 = 8;

/// Series drawn by [`loss_curves`], in panel order.
pub const LOSS_SERIES: [&str; 5] = ["l_recon", "l_g_adv", "l_g_l1", "l_g", "l_d"];

const COLORS: [Rgb<u8>; 5] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
];

fn series(rows: &[LogRow], k: usize) -> Vec<f64> {
    rows.iter()
        .map(|r| match k {
            0 => r.l_recon,
            1 => r.l_g_adv,
            2 => r.l_g_l1,
            3 => r.l_g,
            _ => r.l_d,
        })
        .collect()
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| HinetError::io(path, std::io::Error::other(e.to_string())))
}

/// One panel per loss series, each scaled to its own min..max, step on x.
pub fn loss_curves(rows: &[LogRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(HinetError::Data("loss log is empty".into()));
    }
    let n = LOSS_SERIES.len() as u32;
    let mut img = RgbImage::from_pixel(PANEL_W, n * PANEL_H, Rgb([255, 255, 255]));
    for (k, color) in COLORS.iter().enumerate() {
        let ys = series(rows, k);
        let top = k as u32 * PANEL_H;
        let (x_lo, x_hi) = (MARGIN as f64, (PANEL_W - MARGIN) as f64);
        let (y_lo, y_hi) = ((top + MARGIN) as f64, (top + PANEL_H - MARGIN) as f64);
        line(&mut img, (x_lo, y_hi), (x_hi, y_hi), Rgb([160, 160, 160]));
        line(&mut img, (x_lo, y_lo), (x_lo, y_hi), Rgb([160, 160, 160]));
        let finite: Vec<f64> = ys.iter().copied().filter(|v| v.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let px = |i: usize, v: f64| {
            let fx = if ys.len() > 1 { i as f64 / (ys.len() - 1) as f64 } else { 0.0 };
            (x_lo + fx * (x_hi - x_lo), y_hi - (v - lo) / span * (y_hi - y_lo))
        };
        for i in 1..ys.len() {
            if ys[i - 1].is_finite() && ys[i].is_finite() {
                line(&mut img, px(i - 1, ys[i - 1]), px(i, ys[i]), *color);
            }
        }
    }
    save(&img, path)
}

fn gray(v: f32) -> Rgb<u8> {
    let g = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    Rgb([g, g, g])
}

/// Grid with one row per slice and columns `x1, x2, y, y_hat`.
pub fn image_grid(
    params: &HiNetParams,
    subjects: &[SubjectVolumes],
    plan: &SamplePlan,
    max_rows: usize,
    path: &Path,
) -> Result<()> {
    let mut rows: Vec<[Image2D; 4]> = Vec::new();
    'outer: for s in subjects {
        for (_, a, b, t) in prepare_slices(&s.x1, &s.x2, Some(&s.y), plan)? {
            let pred = synthesize_slice(params, &a, &b, plan.patch)?;
            rows.push([a, b, t.expect("target requested"), pred]);
            if rows.len() == max_rows {
                break 'outer;
            }
        }
    }
    let first = rows
        .first()
        .ok_or_else(|| HinetError::Data("no slices for the image grid".into()))?;
    let (h, w) = (first[0].rows() as u32, first[0].cols() as u32);
    let gap = 2;
    let mut img = RgbImage::from_pixel(
        4 * w + 3 * gap,
        rows.len() as u32 * h + (rows.len() as u32 - 1) * gap,
        Rgb([255, 255, 255]),
    );
    for (r, tiles) in rows.iter().enumerate() {
        for (c, tile) in tiles.iter().enumerate() {
            let (ox, oy) = (c as u32 * (w + gap), r as u32 * (h + gap));
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(ox + x, oy + y, gray(tile.get(y as usize, x as usize)));
                }
            }
        }
    }
    save(&img, path)
}
