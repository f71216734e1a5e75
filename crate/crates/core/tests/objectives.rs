use hinet::objectives::{
    discriminator_objective, discriminator_objective_var, generator_objective, generator_objective_var,
    reconstruction_loss, AdversarialForm,
};
use hinet::HinetError;
use hinet_tensor::{Graph, Tensor};

fn t2(a: f32, b: f32) -> Tensor {
    Tensor::new(&[1, 1, 1, 2], vec![a, b]).unwrap()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn rel_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * numeric.abs().max(1e-8)
}

/// Central differences of `f` around `x`, evaluated in f64.
fn central(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn l1_term_gradient_matches_finite_differences() {
    let y = [0.3f64, -0.6];
    let y_hat = [-0.2f64, 0.45];
    let oracle = |v: &[f64]| ((y[0] - v[0]).abs() + (y[1] - v[1]).abs()) / 2.0;

    let mut g = Graph::new();
    let yh = g.leaf(t2(y_hat[0] as f32, y_hat[1] as f32), true);
    let yt = g.constant(t2(y[0] as f32, y[1] as f32));
    let d = g.constant(t2(0.5, 0.5));
    let terms = generator_objective_var(&mut g, d, yh, yt, 100.0, AdversarialForm::NonSaturating).unwrap();
    let grads = g.backward(terms.l1).unwrap();
    let analytic = grads.get(yh).unwrap().data().to_vec();
    let numeric = central(oracle, &y_hat, 1e-4);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(rel_close(f64::from(*a), *n), "{a} vs {n}");
    }
    assert!((f64::from(g.value(terms.l1).item()) - oracle(&y_hat)).abs() < 1e-6);
}

#[test]
fn discriminator_loss_gradient_matches_finite_differences() {
    // logits -> sigmoid scores: [real0, real1, fake0, fake1]
    let z = [0.7f64, -0.4, 0.2, -1.1];
    let oracle = |v: &[f64]| {
        let lr = (sigmoid(v[0]).ln() + sigmoid(v[1]).ln()) / 2.0;
        let lf = ((1.0 - sigmoid(v[2])).ln() + (1.0 - sigmoid(v[3])).ln()) / 2.0;
        -lr - lf
    };
    let mut g = Graph::new();
    let zr = g.leaf(t2(z[0] as f32, z[1] as f32), true);
    let zf = g.leaf(t2(z[2] as f32, z[3] as f32), true);
    let dr = g.sigmoid(zr);
    let df = g.sigmoid(zf);
    let loss = discriminator_objective_var(&mut g, dr, df).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<f64> = grads
        .get(zr)
        .unwrap()
        .data()
        .iter()
        .chain(grads.get(zf).unwrap().data())
        .map(|&v| f64::from(v))
        .collect();
    let numeric = central(oracle, &z, 1e-4);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(rel_close(*a, *n), "{a} vs {n}");
    }
    assert!((f64::from(g.value(loss).item()) - oracle(&z)).abs() < 1e-5);
}

#[test]
fn adversarial_forms_match_closed_form() {
    let d = t2(0.8, 0.25);
    let y = t2(0.0, 0.0);
    let ns = generator_objective(&d, &y, &y, 100.0, AdversarialForm::NonSaturating).unwrap();
    let mm = generator_objective(&d, &y, &y, 100.0, AdversarialForm::Minimax).unwrap();
    let want_ns = -(0.8f64.ln() + 0.25f64.ln()) / 2.0;
    let want_mm = (0.2f64.ln() + 0.75f64.ln()) / 2.0;
    assert!((ns.adv - want_ns).abs() < 1e-5);
    assert!((mm.adv - want_mm).abs() < 1e-5);
    assert_eq!(ns.l1, 0.0);
    assert_eq!(ns.total, ns.adv);
}

#[test]
fn saturated_scores_stay_finite() {
    let y = t2(0.0, 1.0);
    let ld = discriminator_objective(&t2(0.0, 1.0), &t2(1.0, 0.0)).unwrap();
    assert!(ld.is_finite() && ld > 0.0);
    for form in [AdversarialForm::NonSaturating, AdversarialForm::Minimax] {
        let l = generator_objective(&t2(0.0, 1.0), &y, &y, 100.0, form).unwrap();
        assert!(l.total.is_finite());
    }
}

#[test]
fn out_of_range_scores_are_numeric_errors() {
    let y = t2(0.0, 0.0);
    let bad = generator_objective(&t2(1.5, 0.5), &y, &y, 1.0, AdversarialForm::NonSaturating);
    assert!(matches!(bad, Err(HinetError::Numeric(_))));
    let nan = discriminator_objective(&t2(f32::NAN, 0.5), &t2(0.5, 0.5));
    assert!(matches!(nan, Err(HinetError::Numeric(_))));
}

#[test]
fn reconstruction_sums_over_modalities() {
    let (a, b) = (t2(0.0, 1.0), t2(0.5, 0.5));
    let one = reconstruction_loss(&[(&a, &b)]).unwrap();
    assert!((one - 0.5).abs() < 1e-7);
    let two = reconstruction_loss(&[(&a, &b), (&b, &b)]).unwrap();
    assert!((two - 0.5).abs() < 1e-7);
    let stacked_x = Tensor::new(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
    let stacked_r = Tensor::new(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
    let s = reconstruction_loss(&[(&stacked_x, &stacked_r)]).unwrap();
    assert!((s - 1.0).abs() < 1e-7);
    assert!(reconstruction_loss(&[]).is_err());
}
