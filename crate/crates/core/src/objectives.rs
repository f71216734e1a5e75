//! Reconstruction, generator and discriminator losses.
//!
//! The `*_var` builders record the losses on an autograd [`Graph`] and are
//! what the trainer differentiates. The tensor-level functions evaluate the
//! same graphs on constants.

use hinet_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{HinetError, Result};

/// Clamp applied to discriminator scores before taking logs.
pub const LOG_EPS: f32 = 1e-7;

/// Adversarial term of the generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// `-log D(x1, x2, G(x1, x2))`.
    #[default]
    NonSaturating,
    /// `log(1 - D(x1, x2, G(x1, x2)))`, the minimax form as written.
    Minimax,
}

impl AdversarialForm {
    pub fn from_strict(strict: bool) -> Self {
        if strict {
            AdversarialForm::Minimax
        } else {
            AdversarialForm::NonSaturating
        }
    }
}

/// Graph handles of the generator objective terms.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub adv: Var,
    pub l1: Var,
    pub total: Var,
}

fn check_scores(g: &Graph, scores: Var, what: &str) -> Result<()> {
    if let Some(bad) = g.value(scores).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(HinetError::Numeric(format!("{what} score {bad} lies outside [0, 1]")));
    }
    Ok(())
}

fn mean_abs_diff(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Sum over modalities of the per-voxel mean absolute error. A pair with
/// `C` channels (the stacked early-fusion input) counts as `C` modalities.
pub fn reconstruction_loss_var(g: &mut Graph, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(x, x_hat) in pairs {
        let channels = g.shape(x).get(1).copied().unwrap_or(1) as f32;
        let m = mean_abs_diff(g, x_hat, x)?;
        let m = g.affine(m, channels, 0.0);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| HinetError::Argument("reconstruction loss needs at least one pair".into()))
}

/// `l_g = l_g_adv + lambda1 * mean|y - y_hat|`.
pub fn generator_objective_var(
    g: &mut Graph,
    d_fake: Var,
    y_hat: Var,
    y: Var,
    lambda1: f32,
    form: AdversarialForm,
) -> Result<GeneratorTerms> {
    check_scores(g, d_fake, "fake")?;
    let adv = match form {
        AdversarialForm::NonSaturating => {
            let l = g.log_clamped(d_fake, LOG_EPS);
            let m = g.mean(l);
            g.affine(m, -1.0, 0.0)
        }
        AdversarialForm::Minimax => {
            let one_minus = g.affine(d_fake, -1.0, 1.0);
            let l = g.log_clamped(one_minus, LOG_EPS);
            g.mean(l)
        }
    };
    let l1 = mean_abs_diff(g, y, y_hat)?;
    let weighted = g.affine(l1, lambda1, 0.0);
    let total = g.add(adv, weighted)?;
    Ok(GeneratorTerms { adv, l1, total })
}

/// `L^D = -mean log d_real - mean log(1 - d_fake)`.
pub fn discriminator_objective_var(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    check_scores(g, d_real, "real")?;
    check_scores(g, d_fake, "fake")?;
    let lr = g.log_clamped(d_real, LOG_EPS);
    let lr = g.mean(lr);
    let one_minus = g.affine(d_fake, -1.0, 1.0);
    let lf = g.log_clamped(one_minus, LOG_EPS);
    let lf = g.mean(lf);
    let s = g.add(lr, lf)?;
    Ok(g.affine(s, -1.0, 0.0))
}

fn scalar(g: &Graph, v: Var) -> f64 {
    f64::from(g.value(v).item())
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HinetError::Dimension(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Tensor form of [`reconstruction_loss_var`] on `(x, x_hat)` pairs.
pub fn reconstruction_loss(pairs: &[(&Tensor, &Tensor)]) -> Result<f64> {
    let mut g = Graph::new();
    let mut vars = Vec::with_capacity(pairs.len());
    for (x, x_hat) in pairs {
        same_shape(x, x_hat)?;
        vars.push((g.constant((*x).clone()), g.constant((*x_hat).clone())));
    }
    let l = reconstruction_loss_var(&mut g, &vars)?;
    Ok(scalar(&g, l))
}

/// `(l_g_adv, l_g_l1, l_g)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLoss {
    pub adv: f64,
    pub l1: f64,
    pub total: f64,
}

pub fn generator_objective(
    d_fake: &Tensor,
    y_hat: &Tensor,
    y: &Tensor,
    lambda1: f32,
    form: AdversarialForm,
) -> Result<GeneratorLoss> {
    same_shape(y_hat, y)?;
    if lambda1 < 0.0 {
        return Err(HinetError::Argument(format!("lambda1 must be >= 0, got {lambda1}")));
    }
    let mut g = Graph::new();
    let d = g.constant(d_fake.clone());
    let yh = g.constant(y_hat.clone());
    let yv = g.constant(y.clone());
    let t = generator_objective_var(&mut g, d, yh, yv, lambda1, form)?;
    Ok(GeneratorLoss {
        adv: scalar(&g, t.adv),
        l1: scalar(&g, t.l1),
        total: scalar(&g, t.total),
    })
}

pub fn discriminator_objective(d_real: &Tensor, d_fake: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(d_real.clone());
    let f = g.constant(d_fake.clone());
    let l = discriminator_objective_var(&mut g, r, f)?;
    Ok(scalar(&g, l))
}

/// Losses of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_recon: f64,
    pub l_g_adv: f64,
    pub l_g_l1: f64,
    pub l_g: f64,
    pub l_d: f64,
    /// `l_g + lambda2 * l_recon`, the quantity the generator step minimizes.
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_recon,l_g_adv,l_g_l1,l_g,l_d,total";

    pub fn all_finite(&self) -> bool {
        [self.l_recon, self.l_g_adv, self.l_g_l1, self.l_g, self.l_d, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_recon, self.l_g_adv, self.l_g_l1, self.l_g, self.l_d, self.total
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let (x, x_hat, y) = (t(&[0.0, 1.0]), t(&[1.0, 1.0]), t(&[0.3, -0.2]));
        assert_eq!(reconstruction_loss(&[(&x, &x_hat), (&y, &y)]).unwrap(), 0.5);
        assert_eq!(reconstruction_loss(&[(&y, &y), (&x, &x_hat)]).unwrap(), 0.5);
        assert_eq!(reconstruction_loss(&[(&x, &x), (&y, &y)]).unwrap(), 0.0);
        assert!(matches!(
            reconstruction_loss(&[(&x, &t(&[1.0]))]),
            Err(HinetError::Dimension(_))
        ));
    }

    #[test]
    fn stacked_pair_counts_each_channel() {
        let x = Tensor::new(&[1, 2, 1, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let x_hat = Tensor::new(&[1, 2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(reconstruction_loss(&[(&x, &x_hat)]).unwrap(), 0.5);
    }

    #[test]
    fn generator_examples() {
        let y = t(&[1.0, -1.0]);
        let half = t(&[0.5]);
        let l = generator_objective(&half, &y, &y, 100.0, AdversarialForm::NonSaturating).unwrap();
        assert_eq!(l.l1, 0.0);
        assert!((l.adv - std::f64::consts::LN_2).abs() < 1e-6);
        let l = generator_objective(&half, &t(&[0.0, 0.0]), &y, 100.0, AdversarialForm::NonSaturating).unwrap();
        assert_eq!(l.l1, 1.0);
        assert!((l.total - l.adv - 100.0).abs() < 1e-5);
        let l0 = generator_objective(&half, &t(&[0.0, 0.0]), &y, 0.0, AdversarialForm::Minimax).unwrap();
        assert_eq!(l0.total, l0.adv);
        assert!((l0.adv - 0.5f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn generator_guards_scores() {
        let y = t(&[0.0]);
        let err = generator_objective(&t(&[1.5]), &y, &y, 1.0, AdversarialForm::NonSaturating);
        assert!(matches!(err, Err(HinetError::Numeric(_))));
        let nan = generator_objective(&t(&[f32::NAN]), &y, &y, 1.0, AdversarialForm::NonSaturating);
        assert!(matches!(nan, Err(HinetError::Numeric(_))));
        // a saturated sigmoid can return exactly 1 or 0; the clamp keeps it finite
        for d in [0.0, 1.0] {
            let l = generator_objective(&t(&[d]), &y, &y, 1.0, AdversarialForm::Minimax).unwrap();
            assert!(l.total.is_finite());
        }
    }

    #[test]
    fn discriminator_examples() {
        let l = discriminator_objective(&t(&[0.5]), &t(&[0.5])).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-6);
        assert!(discriminator_objective(&t(&[1.0]), &t(&[0.0])).unwrap().abs() < 1e-6);
        assert!(discriminator_objective(&t(&[0.0]), &t(&[1.0])).unwrap().is_finite());
        let (r, f) = (t(&[0.8, 0.3]), t(&[0.1, 0.6]));
        let swapped = (t(&[0.9, 0.4]), t(&[0.2, 0.7]));
        let a = discriminator_objective(&r, &f).unwrap();
        let b = discriminator_objective(&swapped.0, &swapped.1).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn csv_row_matches_header() {
        let r = LossReport {
            step: 3,
            l_recon: 0.5,
            ..Default::default()
        };
        assert_eq!(r.csv_row().split(',').count(), LossReport::CSV_HEADER.split(',').count());
        assert!(r.csv_row().starts_with("3,0.5,"));
    }
}
