//! Synthetic three-modality phantoms for desk-scale experiments.
//!
//! Each slice has an elliptical "head" support on a zero background. Inside
//! it, source 1 and source 2 are independent smooth random fields; both
//! brighten inside a shared mask made of random ellipses. The target mixes the
//! sources: their average outside the mask and their maximum inside it, so it
//! cannot be predicted from either source alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_intensity, Modality, Volume};
use crate::error::{HinetError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomRule {
    /// Average outside the mask, maximum inside.
    #[default]
    FusionMix,
    /// Target equals source 1 (sanity task for the synthesis path).
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub n_subjects: usize,
    pub slices: usize,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    #[serde(default)]
    pub rule: PhantomRule,
}

impl PhantomConfig {
    pub fn new(n_subjects: usize, size: (usize, usize), seed: u64) -> Self {
        Self {
            n_subjects,
            slices: 4,
            rows: size.0,
            cols: size.1,
            seed,
            rule: PhantomRule::FusionMix,
        }
    }
}

/// The two sources and the target of one subject, each normalized to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectVolumes {
    pub subject_id: String,
    pub x1: Volume,
    pub x2: Volume,
    pub y: Volume,
}

/// Target value before renormalization.
pub fn phantom_target(x1: f32, x2: f32, inside_mask: bool) -> f32 {
    if inside_mask {
        x1.max(x2)
    } else {
        0.5 * (x1 + x2)
    }
}

struct Ellipse {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
}

impl Ellipse {
    fn contains(&self, y: f32, x: f32) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// Sum of a few low-frequency plane waves, roughly in [0, 1].
struct SmoothField {
    waves: Vec<(f32, f32, f32, f32)>,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                (
                    rng.random_range(-3.0f32..3.0),
                    rng.random_range(-3.0f32..3.0),
                    rng.random_range(0.0f32..std::f32::consts::TAU),
                    rng.random_range(0.3f32..1.0),
                )
            })
            .collect();
        Self { waves }
    }

    fn at(&self, v: f32, u: f32) -> f32 {
        let total: f32 = self.waves.iter().map(|w| w.3).sum();
        let s: f32 = self
            .waves
            .iter()
            .map(|&(fy, fx, ph, amp)| amp * (std::f32::consts::PI * (fy * v + fx * u) + ph).sin())
            .sum();
        0.5 + 0.5 * s / total
    }
}

fn slice_images(rows: usize, cols: usize, rule: PhantomRule, rng: &mut ChaCha8Rng) -> [Vec<f32>; 3] {
    let (h, w) = (rows as f32, cols as f32);
    let head = Ellipse {
        cy: h / 2.0 + rng.random_range(-0.03f32..0.03) * h,
        cx: w / 2.0 + rng.random_range(-0.03f32..0.03) * w,
        ry: rng.random_range(0.40f32..0.47) * h,
        rx: rng.random_range(0.40f32..0.47) * w,
    };
    let n_shapes = rng.random_range(2..=4);
    let shapes: Vec<Ellipse> = (0..n_shapes)
        .map(|_| Ellipse {
            cy: rng.random_range(0.3f32..0.7) * h,
            cx: rng.random_range(0.3f32..0.7) * w,
            ry: rng.random_range(0.06f32..0.16) * h,
            rx: rng.random_range(0.06f32..0.16) * w,
        })
        .collect();
    let f1 = SmoothField::random(rng);
    let f2 = SmoothField::random(rng);
    let (gain1, gain2) = (rng.random_range(0.25f32..0.45), rng.random_range(0.25f32..0.45));
    let mut x1 = vec![0.0f32; rows * cols];
    let mut x2 = vec![0.0f32; rows * cols];
    let mut y = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (fy, fx) = (r as f32 + 0.5, c as f32 + 0.5);
            if !head.contains(fy, fx) {
                continue;
            }
            let inside = shapes.iter().any(|s| s.contains(fy, fx));
            let (v, u) = (fy / h, fx / w);
            let bump = if inside { 1.0 } else { 0.0 };
            let a = 0.1 + 0.5 * f1.at(v, u) + gain1 * bump;
            let b = 0.1 + 0.5 * f2.at(v, u) + gain2 * bump;
            let i = r * cols + c;
            x1[i] = a;
            x2[i] = b;
            y[i] = match rule {
                PhantomRule::FusionMix => phantom_target(a, b, inside),
                PhantomRule::Identity => a,
            };
        }
    }
    [x1, x2, y]
}

/// Generates `n_subjects` phantom triplets; identical configs give
/// bit-identical output.
pub fn make_phantom_dataset(config: &PhantomConfig) -> Result<Vec<SubjectVolumes>> {
    if config.n_subjects == 0 || config.slices == 0 {
        return Err(HinetError::Argument(
            "phantom dataset needs at least one subject and one slice".into(),
        ));
    }
    if config.rows < 16 || config.cols < 16 {
        return Err(HinetError::Argument(format!(
            "phantom size {}x{} is below the 16x16 minimum",
            config.rows, config.cols
        )));
    }
    let mut out = Vec::with_capacity(config.n_subjects);
    for s in 0..config.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(s as u64);
        let plane = config.rows * config.cols;
        let mut vols = [
            Vec::with_capacity(config.slices * plane),
            Vec::with_capacity(config.slices * plane),
            Vec::with_capacity(config.slices * plane),
        ];
        for _ in 0..config.slices {
            let imgs = slice_images(config.rows, config.cols, config.rule, &mut rng);
            for (v, img) in vols.iter_mut().zip(imgs) {
                v.extend(img);
            }
        }
        let id = format!("phantom{s:03}");
        let shape = [config.slices, config.rows, config.cols];
        let [a, b, t] = vols;
        let x1 = normalize_intensity(&Volume::new(&id, Modality::T1, shape, a)?)?;
        let x2 = normalize_intensity(&Volume::new(&id, Modality::T2, shape, b)?)?;
        let y = normalize_intensity(&Volume::new(&id, Modality::Flair, shape, t)?)?;
        out.push(SubjectVolumes {
            subject_id: id,
            x1,
            x2,
            y,
        });
    }
    Ok(out)
}
