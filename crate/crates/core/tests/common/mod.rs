//! Helpers shared by the integration tests, including direct-loop metric
//! oracles that share no code with the library.
#![allow(dead_code)]

use hinet::data::{build_samples, make_phantom_dataset, Image2D, Modality, PhantomConfig, Sample, SamplePlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Image2D {
    let data = (0..rows * cols).map(|_| rng.random_range(0.0f32..1.0)).collect();
    Image2D::new(rows, cols, data, Modality::Flair).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn phantom_samples(subjects: usize, side: usize, seed: u64) -> Vec<Sample> {
    make_phantom_dataset(&PhantomConfig::new(subjects, (side, side), seed))
        .unwrap()
        .iter()
        .flat_map(|s| build_samples(&s.x1, &s.x2, &s.y, &SamplePlan::whole()).unwrap())
        .collect()
}

fn as_f64(img: &Image2D) -> Vec<f64> {
    img.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn oracle_psnr(y: &Image2D, g: &Image2D) -> f64 {
    let (a, b) = (as_f64(y), as_f64(g));
    let mut err = 0.0;
    let mut peak = f64::MIN;
    for i in 0..a.len() {
        err += (a[i] - b[i]) * (a[i] - b[i]);
        peak = peak.max(a[i]).max(b[i]);
    }
    err /= a.len() as f64;
    10.0 * (peak * peak / err).log10()
}

pub fn oracle_nmse(y: &Image2D, g: &Image2D) -> f64 {
    let (a, b) = (as_f64(y), as_f64(g));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..a.len() {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += a[i] * a[i];
    }
    num / den
}

/// SSIM with a full 2-D Gaussian window evaluated at every valid position.
pub fn oracle_ssim(y: &Image2D, g: &Image2D) -> f64 {
    let (rows, cols) = y.shape();
    let (a, b) = (as_f64(y), as_f64(g));
    let win = 11usize;
    let sigma = 1.5f64;
    let mut w = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            w[i * win + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for r in 0..=rows - win {
        for c in 0..=cols - win {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = w[i * win + j];
                    let (p, q) = (a[(r + i) * cols + c + j], b[(r + i) * cols + c + j]);
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}
