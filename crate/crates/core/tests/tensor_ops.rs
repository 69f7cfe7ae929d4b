mod common;

use adafuse_core::graph::{Graph, Var};
use adafuse_core::init::{xavier_bound, xavier_uniform};
use adafuse_core::kernels::Axis;
use adafuse_core::optim::{AdamConfig, AdamState};
use adafuse_core::par::Exec;
use adafuse_core::tensor::{Tensor, TensorError};
use common::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

fn run_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
    g.value(y).clone()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_trivial_examples() {
    let y = run_conv(&t(&[1, 1, 1, 1], &[2.0]), &t(&[1, 1, 1, 1], &[3.0]), &t(&[1], &[1.0]), 1, 0);
    assert_eq!(y.data(), &[7.0]);

    let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = run_conv(&ones, &ones, &Tensor::zeros(&[1]), 1, 1);
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data()[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(y.data()[corner], 4.0);
    }
}

#[test]
fn conv_matches_loop_oracle_on_every_kernel_path() {
    let mut r = rng(1);
    // (input, kernel, stride, pad): direct 3×3, pointwise, generic im2col, strided.
    let cases: [([usize; 4], [usize; 4], usize, usize); 5] = [
        ([2, 3, 8, 8], [4, 3, 3, 3], 1, 1),
        ([2, 3, 8, 8], [4, 3, 3, 3], 1, 0),
        ([2, 5, 6, 7], [3, 5, 1, 1], 1, 0),
        ([1, 2, 9, 8], [3, 2, 3, 2], 2, 1),
        ([3, 1, 5, 5], [2, 1, 5, 5], 1, 2),
    ];
    for (xs, ws, stride, pad) in cases {
        let x = uniform(&mut r, &xs, -1.0, 1.0);
        let w = uniform(&mut r, &ws, -1.0, 1.0);
        let b = uniform(&mut r, &[ws[0]], -1.0, 1.0);
        let got = run_conv(&x, &w, &b, stride, pad);
        let want = conv_ref(&x, &w, &b, stride, pad);
        assert!(max_abs_diff(&got, &want) < 1e-12, "{xs:?} {ws:?} s{stride} p{pad}");
    }
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(TensorError::ShapeMismatch { .. })));
    let w = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
    assert!(g.conv2d(x, w, b, 1, 1).is_err());
    let w = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(g.conv2d(x, w, b, 0, 1).is_err());
}

#[test]
fn pooling_examples_and_oracle() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let c = g.constant(Tensor::full(&[1, 2, 4, 6], 0.7));
    let y = g.max_pool2(c).unwrap();
    assert_eq!(g.value(y), &Tensor::full(&[1, 2, 2, 3], 0.7));

    let x = uniform(&mut rng(2), &[1, 2, 6, 6], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = g.max_pool2(xv).unwrap();
    assert_eq!(g.value(y), &pool_ref(&x));
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let dx = grads.get(xv).unwrap();
    // One-hot per window, at the argmax.
    for py in 0..6 {
        for px in 0..6 {
            let plane = &x.data()[..36];
            let (wy, wx) = (py / 2 * 2, px / 2 * 2);
            let m = [0, 1, 6, 7].iter().map(|o| plane[wy * 6 + wx + o]).fold(f64::MIN, f64::max);
            let expect = if plane[py * 6 + px] == m { 1.0 } else { 0.0 };
            assert_eq!(dx.data()[py * 6 + px], expect);
        }
    }
    assert_eq!(dx.sum(), 18.0);

    let mut g = Graph::new();
    let odd = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(g.max_pool2(odd).is_err());
}

#[test]
fn pooling_conserves_gradient_mass() {
    let mut r = rng(3);
    let x = uniform(&mut r, &[2, 3, 4, 6], -1.0, 1.0);
    let cot = uniform(&mut r, &[2, 3, 2, 3], -2.0, 2.0);
    let mut g = Graph::new();
    let xv = g.param(x);
    let y = g.max_pool2(xv).unwrap();
    let c = g.constant(cot.clone());
    let p = g.mul(y, c).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert!((grads.get(xv).unwrap().sum() - cot.sum()).abs() < 1e-12);
}

#[test]
fn upsample_examples_and_oracle() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[1, 1, 3, 2], 0.3));
    let y = g.upsample(c, 7, 5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

    let one = g.constant(t(&[1, 1, 1, 1], &[2.5]));
    let y = g.upsample(one, 4, 3).unwrap();
    assert_eq!(g.value(y), &Tensor::full(&[1, 1, 4, 3], 2.5));

    let x = t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
    let xv = g.constant(x.clone());
    let y = g.upsample(xv, 4, 4).unwrap();
    assert_eq!(g.value(y), &bilinear_ref(&x, 4, 4));
    // First row: sources at x = -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
    assert_eq!(&g.value(y).data()[..4], &[0.0, 0.25, 0.75, 1.0]);

    let x = uniform(&mut rng(4), &[2, 3, 3, 5], -1.0, 1.0);
    let xv = g.constant(x.clone());
    let y = g.upsample(xv, 8, 16).unwrap();
    assert!(max_abs_diff(g.value(y), &bilinear_ref(&x, 8, 16)) < 1e-15);

    assert!(g.upsample(xv, 0, 16).is_err());
    assert!(g.upsample(xv, 2, 16).is_err());
}

#[test]
fn elementwise_and_reduction_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[1], &[0.0]));
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).item(), 0.5);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 0.25);

    let neg = g.constant(t(&[1], &[-3.0]));
    let r = g.relu(neg);
    assert_eq!(g.value(r).item(), 0.0);

    let a = g.constant(Tensor::zeros(&[1, 64, 4, 4]));
    let b = g.constant(Tensor::zeros(&[1, 64, 4, 4]));
    let c = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 128, 4, 4]);
    let wrong = g.constant(Tensor::zeros(&[1, 2, 4, 5]));
    assert!(g.concat_channels(a, wrong).is_err());
    assert!(g.add(a, wrong).is_err());

    let x0 = uniform(&mut rng(5), &[2, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::full(&[2, 3], 1.0));

    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let sq = g.square(x);
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &x0.map(|v| 2.0 * v));

    let mut g = Graph::new();
    let z = g.constant(t(&[2], &[1.0, 0.0]));
    assert!(g.log(z).is_err());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-1.0, 0.0, 1.0]));
    let r = g.relu(x);
    let s = g.sum(r);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn forward_diff_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[1, 1, 3, 3], 4.0));
    let dx = g.forward_diff(c, Axis::X).unwrap();
    assert_eq!(g.value(dx), &Tensor::zeros(&[1, 1, 3, 2]));

    let x = g.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 0.0]));
    let dx = g.forward_diff(x, Axis::X).unwrap();
    assert_eq!(g.value(dx), &t(&[1, 1, 2, 1], &[1.0, 0.0]));
    let dy = g.forward_diff(x, Axis::Y).unwrap();
    assert_eq!(g.value(dy), &t(&[1, 1, 1, 2], &[0.0, -1.0]));

    let thin = g.constant(Tensor::zeros(&[1, 1, 1, 3]));
    assert!(g.forward_diff(thin, Axis::Y).is_err());
    assert!(g.forward_diff(thin, Axis::X).is_ok());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn gradients_accumulate_over_multiple_uses() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.5, -2.0]));
    let a = g.mul(x, x).unwrap();
    let b = g.add(a, x).unwrap();
    let s = g.sum(b);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, -3.0]);
}

/// Checks every input gradient of `build` against central differences of
/// `Σ output ⊙ cotangent` for a random cotangent.
fn check_op(inputs: &[Tensor], seed: u64, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut r = rng(seed);
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let y = build(&mut g, &vars);
        g.value(y).shape().to_vec()
    };
    let cot = uniform(&mut r, &shape, -1.0, 1.0);
    let objective = |xs: &[Tensor], params: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| if params { g.param(x.clone()) } else { g.constant(x.clone()) })
            .collect();
        let y = build(&mut g, &vars);
        let c = g.constant(cot.clone());
        let p = g.mul(y, c).unwrap();
        let s = g.sum(p);
        (g, vars, s)
    };
    let (g, vars, s) = objective(inputs, true);
    let grads = g.backward(s).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let numeric = numeric_grad(&inputs[k], 1e-5, |probe| {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            let (g, _, s) = objective(&xs, false);
            g.value(s).item()
        });
        assert_close(grads.get(*v).unwrap(), &numeric, 1e-6, 1e-8, &format!("input {k}"));
    }
}

#[test]
fn finite_differences_agree_for_every_op() {
    let mut r = rng(6);
    let a = uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
    let pos = uniform(&mut r, &[2, 2, 4, 4], 0.2, 2.0);
    let w = uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let w1 = uniform(&mut r, &[3, 2, 1, 1], -1.0, 1.0);
    let bias = uniform(&mut r, &[3], -1.0, 1.0);
    let map = uniform(&mut r, &[2, 1, 5, 5], -1.0, 1.0);
    let half = uniform(&mut r, &[1, 2, 3, 3], -1.0, 1.0);

    check_op(&[a.clone(), w.clone(), bias.clone()], 10, |g, v| g.conv2d(v[0], v[1], v[2], 1, 1).unwrap());
    check_op(&[a.clone(), w.clone(), bias.clone()], 11, |g, v| g.conv2d(v[0], v[1], v[2], 2, 0).unwrap());
    check_op(&[a.clone(), w1, bias], 12, |g, v| g.conv2d(v[0], v[1], v[2], 1, 0).unwrap());
    check_op(std::slice::from_ref(&a), 13, |g, v| g.max_pool2(v[0]).unwrap());
    check_op(&[half], 14, |g, v| g.upsample(v[0], 7, 8).unwrap());
    check_op(&[a.clone(), b.clone()], 15, |g, v| g.add(v[0], v[1]).unwrap());
    check_op(&[a.clone(), b.clone()], 16, |g, v| g.sub(v[0], v[1]).unwrap());
    check_op(&[a.clone(), b.clone()], 17, |g, v| g.mul(v[0], v[1]).unwrap());
    check_op(&[a.clone(), b.clone()], 18, |g, v| g.concat_channels(v[0], v[1]).unwrap());
    check_op(std::slice::from_ref(&a), 19, |g, v| g.relu(v[0]));
    check_op(std::slice::from_ref(&a), 20, |g, v| g.sigmoid(v[0]));
    check_op(std::slice::from_ref(&a), 21, |g, v| g.square(v[0]));
    check_op(&[pos], 22, |g, v| g.log(v[0]).unwrap());
    check_op(std::slice::from_ref(&a), 23, |g, v| g.sum(v[0]));
    check_op(std::slice::from_ref(&a), 24, |g, v| g.scale(v[0], -1.7));
    check_op(std::slice::from_ref(&a), 25, |g, v| g.add_scalar(v[0], 0.3));
    check_op(std::slice::from_ref(&a), 26, |g, v| g.rsub_scalar(1.0, v[0]));
    check_op(&[a], 27, |g, v| g.clamp(v[0], -0.5, 0.5));
    check_op(std::slice::from_ref(&map), 28, |g, v| g.forward_diff(v[0], Axis::X).unwrap());
    check_op(&[map], 29, |g, v| g.forward_diff(v[0], Axis::Y).unwrap());
}

/// Column sums of the explicit matrix of a linear op, one basis vector at a time.
fn column_sums(input_shape: &[usize], op: &impl Fn(&mut Graph, Var) -> Var) -> Vec<f64> {
    let len: usize = input_shape.iter().product();
    (0..len)
        .map(|j| {
            let mut g = Graph::new();
            let e = Tensor::from_fn(input_shape, |i| if i == j { 1.0 } else { 0.0 });
            let x = g.constant(e);
            let y = op(&mut g, x);
            g.value(y).sum()
        })
        .collect()
}

fn ones_cotangent_gradient(input_shape: &[usize], op: &impl Fn(&mut Graph, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.param(uniform(&mut rng(7), input_shape, -1.0, 1.0));
    let y = op(&mut g, x);
    let s = g.sum(y);
    g.backward(s).unwrap().get(x).unwrap().data().to_vec()
}

#[test]
fn linear_ops_backward_equals_column_sums() {
    fn check(shape: &[usize], op: impl Fn(&mut Graph, Var) -> Var) {
        let a = ones_cotangent_gradient(shape, &op);
        let b = column_sums(shape, &op);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
    check(&[1, 2, 3, 2], |g, x| g.upsample(x, 6, 5).unwrap());
    check(&[1, 1, 2, 3], |g, x| g.upsample(x, 6, 6).unwrap());
    check(&[2, 1, 4, 5], |g, x| g.forward_diff(x, Axis::X).unwrap());
    check(&[2, 1, 6, 3], |g, x| g.forward_diff(x, Axis::Y).unwrap());
    check(&[1, 2, 3, 3], |g, x| g.concat_channels(x, x).unwrap());
    check(&[1, 2, 3, 3], |g, x| g.add(x, x).unwrap());
}

#[test]
fn sequential_and_parallel_graphs_are_bit_identical() {
    let mut r = rng(8);
    let x = uniform(&mut r, &[3, 4, 16, 16], -1.0, 1.0);
    let w = uniform(&mut r, &[5, 4, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[5], -1.0, 1.0);
    let run = |exec: Exec| {
        let mut g = Graph::with_exec(exec);
        let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
        let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
        let p = g.max_pool2(y).unwrap();
        let u = g.upsample(p, 16, 16).unwrap();
        let s = g.sigmoid(u);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        (
            g.value(l).item(),
            grads.get(xv).unwrap().clone(),
            grads.get(wv).unwrap().clone(),
        )
    };
    let a = run(Exec::Sequential);
    let b2 = run(Exec::default());
    assert_eq!(a.0.to_bits(), b2.0.to_bits());
    assert_eq!(a.1, b2.1);
    assert_eq!(a.2, b2.2);
}

#[test]
fn xavier_bound_determinism_and_moments() {
    let shape = [64, 32, 3, 3];
    let bound = (6.0f64 / (32.0 * 9.0 + 64.0 * 9.0)).sqrt();
    assert!((xavier_bound(&shape).unwrap() - bound).abs() < 1e-15);
    let a = xavier_uniform(&shape, &mut rng(9)).unwrap();
    let b = xavier_uniform(&shape, &mut rng(9)).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| v.abs() <= bound));

    // 10⁵ draws: mean within 3σ of 0, variance within 5% of 2/(fan_in + fan_out).
    let shape = [250, 400];
    let x = xavier_uniform(&shape, &mut rng(10)).unwrap();
    let n = x.len() as f64;
    let var_expected = 2.0 / 650.0;
    let mean = x.sum() / n;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 3.0 * (var_expected / n).sqrt(), "mean {mean}");
    assert!((var / var_expected - 1.0).abs() < 0.05, "var {var}");
}

/// Textbook bias-corrected Adam on one scalar.
fn adam_scalar(x0: f64, lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut path = Vec::new();
    for t in 1..=steps {
        let g = grad(x);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        x -= lr * mh / (vh.sqrt() + eps);
        path.push(x);
    }
    path
}

#[test]
fn adam_matches_scalar_oracle_on_quadratic() {
    let oracle = adam_scalar(0.0, 0.1, 100, |x| 2.0 * (x - 3.0));
    let mut x = Tensor::new(&[1], vec![0.0]).unwrap();
    let mut state = AdamState::new(AdamConfig::with_lr(0.1), [&x]);
    for (k, &want) in oracle.iter().enumerate() {
        let g = x.map(|v| 2.0 * (v - 3.0));
        state.step(&mut [("x", &mut x)], &[&g]).unwrap();
        assert!((x.item() - want).abs() < 1e-12, "step {k}");
        assert_eq!(state.step, k as u64 + 1);
    }
    assert!((x.item() - 3.0).abs() < 0.05, "x = {}", x.item());
}

#[test]
fn adam_first_step_and_zero_gradient() {
    for g0 in [0.01, 1.0, 250.0] {
        let mut x = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut s = AdamState::new(AdamConfig::with_lr(0.1), [&x]);
        s.step(&mut [("x", &mut x)], &[&Tensor::new(&[1], vec![g0]).unwrap()]).unwrap();
        assert!((x.item() - 0.9).abs() < 1e-6);
    }
    let mut r = rng(11);
    let mut x = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let x0 = x.clone();
    let mut s = AdamState::new(AdamConfig::default(), [&x]);
    for _ in 0..10 {
        s.step(&mut [("x", &mut x)], &[&Tensor::zeros(&[3, 4])]).unwrap();
    }
    assert_eq!(x, x0);
    assert!(s.v.iter().all(|v| v.data().iter().all(|&e| e >= 0.0)));
}
