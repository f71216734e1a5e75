//! Central finite-difference checks for every differentiable op.

use hinet_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Builds the graph from `inputs`, reduces to a scalar, and compares the
/// analytic gradient of each input with central differences.
fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f32) {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        f64::from(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let h = 1e-2f32;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = ((eval(&plus) - eval(&minus)) / (2.0 * f64::from(h))) as f32;
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-2);
            assert!(
                (a - numeric).abs() / denom < tol,
                "input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7 % 13) as f32 - 6.0) / 6.0).collect()).unwrap();
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.mean(p)
}

#[test]
fn conv2d_stride1_and_stride2() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for stride in [1, 2] {
        let inputs = vec![
            random(&[2, 2, 5, 6], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
        ];
        check(
            inputs,
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap();
                weighted_sum(g, y)
            },
            2e-2,
        );
    }
}

#[test]
fn batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        random(&[3, 2, 3, 3], &mut rng),
        random(&[2], &mut rng),
        random(&[2], &mut rng),
    ];
    check(
        inputs.clone(),
        |g, v| {
            let y = g.batch_norm_train(v[0], v[1], v[2]).unwrap().output;
            weighted_sum(g, y)
        },
        3e-2,
    );
    check(
        inputs,
        |g, v| {
            let y = g
                .batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0])
                .unwrap();
            weighted_sum(g, y)
        },
        2e-2,
    );
}

#[test]
fn pointwise_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 2, 3, 3], &mut rng);
    check(vec![x.clone()], |g, v| {
        let y = g.leaky_relu(v[0], 0.2);
        weighted_sum(g, y)
    }, 2e-2);
    check(vec![x.clone()], |g, v| {
        let y = g.tanh(v[0]);
        weighted_sum(g, y)
    }, 2e-2);
    check(vec![x.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        weighted_sum(g, y)
    }, 2e-2);
    check(vec![x], |g, v| {
        let y = g.affine(v[0], -1.0, 1.0);
        weighted_sum(g, y)
    }, 2e-2);
}

#[test]
fn pooling_upsampling_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(vec![random(&[2, 2, 4, 6], &mut rng)], |g, v| {
        let y = g.max_pool2(v[0]).unwrap();
        weighted_sum(g, y)
    }, 2e-2);
    check(vec![random(&[1, 2, 3, 2], &mut rng)], |g, v| {
        let y = g.upsample2(v[0]).unwrap();
        weighted_sum(g, y)
    }, 2e-2);
    check(
        vec![random(&[2, 1, 2, 3], &mut rng), random(&[2, 3, 2, 3], &mut rng)],
        |g, v| {
            let y = g.concat_channels(&[v[0], v[1]]).unwrap();
            weighted_sum(g, y)
        },
        2e-2,
    );
}

#[test]
fn binary_ops_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[1, 1, 3, 4], &mut rng);
    let b = random(&[1, 1, 3, 4], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let p = g.mul(v[0], v[1]).unwrap();
        let m = g.maximum(v[0], v[1]).unwrap();
        let d = g.sub(s, p).unwrap();
        let y = g.add(d, m).unwrap();
        weighted_sum(g, y)
    }, 2e-2);
    check(vec![a, b], |g, v| {
        let d = g.sub(v[0], v[1]).unwrap();
        let y = g.abs(d);
        g.mean(y)
    }, 2e-2);
    let probs = Tensor::new(&[4], vec![0.2, 0.5, 0.7, 0.9]).unwrap();
    check(vec![probs], |g, v| {
        let y = g.log_clamped(v[0], 1e-7);
        g.mean(y)
    }, 2e-2);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 0.5), true);
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let l = g.mean(y);
    let grads = g.backward(l).unwrap();
    // d/dx mean(x * const(x)) = const / 4
    for &v in grads.get(x).unwrap().data() {
        assert!((v - 0.125).abs() < 1e-7);
    }
    assert!(grads.get(d).is_none());
}

#[test]
fn maximum_tie_splits_gradient_symmetrically() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::full(&[1, 1, 1, 2], 0.3), true);
    let b = g.leaf(Tensor::full(&[1, 1, 1, 2], 0.3), true);
    let m = g.maximum(a, b).unwrap();
    let l = g.mean(m);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(a).unwrap(), grads.get(b).unwrap());
}
