//! PSNR, NMSE and SSIM, plus stitched test-set evaluation.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{prepare_slices, Image2D, SamplePlan, SubjectVolumes};
use crate::error::{HinetError, Result};
use crate::model::HiNetParams;
use crate::synthesis::synthesize_slice;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(y: &Image2D, g: &Image2D) -> Result<()> {
    if y.shape() != g.shape() {
        return Err(HinetError::Dimension(format!(
            "metric operands differ in shape: {:?} vs {:?}",
            y.shape(),
            g.shape()
        )));
    }
    if !y.data().iter().chain(g.data()).all(|v| v.is_finite()) {
        return Err(HinetError::Numeric("metric operand has non-finite values".into()));
    }
    Ok(())
}

fn sse(y: &[f32], g: &[f32]) -> f64 {
    y.iter()
        .zip(g)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum()
}

/// `10 log10(max^2 / MSE)` with `max` taken over both images; `+inf` when
/// the images are identical.
pub fn psnr(y: &Image2D, g: &Image2D) -> Result<f64> {
    check_pair(y, g)?;
    let m = sse(y.data(), g.data()) / y.data().len() as f64;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = y
        .data()
        .iter()
        .chain(g.data())
        .fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
    Ok(10.0 * (peak * peak / m).log10())
}

/// `||y - g||^2 / ||y||^2`.
pub fn nmse(y: &Image2D, g: &Image2D) -> Result<f64> {
    check_pair(y, g)?;
    let den: f64 = y.data().iter().map(|&v| f64::from(v).powi(2)).sum();
    if den == 0.0 {
        return Err(HinetError::Data("NMSE is undefined for an all-zero reference".into()));
    }
    Ok(sse(y.data(), g.data()) / den)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering of a row-major image.
fn filter(data: &[f64], rows: usize, cols: usize, k: &[f64]) -> Vec<f64> {
    let w = k.len();
    let (or, oc) = (rows - w + 1, cols - w + 1);
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            tmp[r * oc + c] = (0..w).map(|j| k[j] * data[r * cols + c + j]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..w).map(|i| k[i] * tmp[(r + i) * oc + c]).sum();
        }
    }
    out
}

/// Mean local SSIM under an 11x11 Gaussian window (sigma 1.5), for images on
/// a unit dynamic range.
pub fn ssim(y: &Image2D, g: &Image2D) -> Result<f64> {
    check_pair(y, g)?;
    let (rows, cols) = y.shape();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(HinetError::Argument(format!(
            "SSIM window {SSIM_WINDOW} exceeds the {rows}x{cols} image"
        )));
    }
    if y.data() == g.data() {
        return Ok(1.0);
    }
    let k = gaussian_kernel();
    let a: Vec<f64> = y.data().iter().map(|&v| f64::from(v)).collect();
    let b: Vec<f64> = g.data().iter().map(|&v| f64::from(v)).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter(&a, rows, cols, &k);
    let mu_b = filter(&b, rows, cols, &k);
    let aa = filter(&prod(&a, &a), rows, cols, &k);
    let bb = filter(&prod(&b, &b), rows, cols, &k);
    let ab = filter(&prod(&a, &b), rows, cols, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub psnr: f64,
    pub nmse: f64,
    pub ssim: f64,
}

fn to_unit(img: &Image2D) -> Result<Image2D> {
    let data = img.data().iter().map(|&v| (v + 1.0) * 0.5).collect();
    Image2D::new(img.rows(), img.cols(), data, img.modality)
}

/// All three metrics on images given in [-1, 1], computed after rescaling
/// both to [0, 1].
pub fn evaluate_pair(y: &Image2D, g: &Image2D) -> Result<MetricsRecord> {
    let (y, g) = (to_unit(y)?, to_unit(g)?);
    Ok(MetricsRecord {
        psnr: psnr(&y, &g)?,
        nmse: nmse(&y, &g)?,
        ssim: ssim(&y, &g)?,
    })
}

/// One row of the per-slice metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub subject: String,
    pub slice: usize,
    pub psnr: f64,
    pub nmse: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            count: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub task: String,
    pub psnr: Summary,
    pub nmse: Summary,
    pub ssim: Summary,
    /// Evaluated stitched slices.
    pub count: usize,
    /// Slices left out of the PSNR summary because they matched exactly.
    pub infinite_psnr: usize,
    pub skipped_subjects: Vec<String>,
}

impl AggregateReport {
    pub fn from_slices(task: &str, rows: &[SliceMetrics], skipped_subjects: Vec<String>) -> Self {
        let finite: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
        let infinite_psnr = rows.len() - finite.len();
        if infinite_psnr > 0 {
            warn!("{infinite_psnr} slices with infinite PSNR left out of the PSNR mean");
        }
        Self {
            task: task.to_string(),
            psnr: Summary::of(&finite),
            nmse: Summary::of(&rows.iter().map(|r| r.nmse).collect::<Vec<_>>()),
            ssim: Summary::of(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>()),
            count: rows.len(),
            infinite_psnr,
            skipped_subjects,
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>18} {:>18} {:>18}", "Task", "PSNR (dB) ^", "NMSE v", "SSIM ^");
        let _ = writeln!(
            s,
            "{:<24} {:>18} {:>18} {:>18}",
            self.task,
            format!("{:.3}±{:.3}", self.psnr.mean, self.psnr.std),
            format!("{:.4}±{:.4}", self.nmse.mean, self.nmse.std),
            format!("{:.4}±{:.4}", self.ssim.mean, self.ssim.std)
        );
        let _ = writeln!(
            s,
            "slices: {}  (infinite PSNR: {}, skipped subjects: {})",
            self.count,
            self.infinite_psnr,
            self.skipped_subjects.len()
        );
        s
    }
}

/// Synthesizes every slice of `subjects` (patch-wise and stitched when the
/// plan says so) and scores it against the equally prepared target.
pub fn evaluate_subjects(params: &HiNetParams, subjects: &[SubjectVolumes], plan: &SamplePlan) -> Result<Vec<SliceMetrics>> {
    let mut rows = Vec::new();
    for s in subjects {
        for (index, a, b, t) in prepare_slices(&s.x1, &s.x2, Some(&s.y), plan)? {
            let t = t.expect("target requested");
            let pred = synthesize_slice(params, &a, &b, plan.patch)?;
            let m = evaluate_pair(&t, &pred)?;
            rows.push(SliceMetrics {
                subject: s.subject_id.clone(),
                slice: index,
                psnr: m.psnr,
                nmse: m.nmse,
                ssim: m.ssim,
            });
        }
    }
    Ok(rows)
}

pub fn aggregate_evaluate(
    params: &HiNetParams,
    subjects: &[SubjectVolumes],
    plan: &SamplePlan,
    task: &str,
    skipped_subjects: Vec<String>,
) -> Result<(AggregateReport, Vec<SliceMetrics>)> {
    let rows = evaluate_subjects(params, subjects, plan)?;
    Ok((AggregateReport::from_slices(task, &rows, skipped_subjects), rows))
}

pub fn write_slice_metrics(path: &Path, rows: &[SliceMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HinetError::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| HinetError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| HinetError::io(path, e))
}

pub fn read_slice_metrics(path: &Path) -> Result<Vec<SliceMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HinetError::io(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| HinetError::format("slice metrics", e.to_string())))
        .collect()
}
