use proptest::prelude::*;
use racnn::optim::{sgd_step, ParamSet, SgdConfig};
use racnn::tensor::{Graph, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// Zero-padded cross-correlation, one output at a time.
fn conv_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (k, fh, fw): (usize, usize, usize),
    bias: &[f64],
    pad: usize,
) -> Vec<f64> {
    let oh = h + 2 * pad + 1 - fh;
    let ow = w + 2 * pad + 1 - fw;
    let mut out = vec![0.0; n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[ki];
                    for ci in 0..c {
                        for i in 0..fh {
                            for j in 0..fw {
                                let y = oy as isize + i as isize - pad as isize;
                                let xx = ox as isize + j as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + y as usize) * w + xx as usize];
                                acc += xv * wt[((ki * c + ci) * fh + i) * fw + j];
                            }
                        }
                    }
                    out[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn run_conv(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (x, w, b) = (g.input(x), g.input(w), g.input(b));
    let y = g.conv2d(x, w, b, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_averaging_kernel_matches_nested_loops() {
    let x: Vec<f64> = (1..=9).map(f64::from).collect();
    let w = vec![1.0 / 9.0; 9];
    let y = run_conv(t(&[1, 1, 3, 3], &x), t(&[1, 1, 3, 3], &w), t(&[1], &[0.0]), 1);
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(close(y.data()[4], 5.0, 1e-12));
    let oracle = conv_oracle(&x, (1, 1, 3, 3), &w, (1, 3, 3), &[0.0], 1);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!(close(*a, *b, 1e-12), "{a} vs {b}");
    }
}

#[test]
fn conv_identity_kernel_and_bias_only() {
    let x = Tensor::from_fn(&[2, 1, 4, 5], |i| (i as f64 * 0.37).sin());
    let y = run_conv(x.clone(), t(&[1, 1, 1, 1], &[1.0]), t(&[1], &[0.0]), 0);
    assert_eq!(y, x);

    let w = Tensor::from_fn(&[2, 3, 3, 3], |i| i as f64 - 20.0);
    let y = run_conv(Tensor::zeros(&[1, 3, 5, 5]), w, t(&[2], &[0.5, -1.5]), 1);
    assert!(y.data()[..25].iter().all(|&v| v == 0.5));
    assert!(y.data()[25..].iter().all(|&v| v == -1.5));
}

#[test]
fn conv_shape_errors_name_dimensions() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 3, 5, 5]));
    let w = g.input(Tensor::zeros(&[2, 4, 3, 3]));
    let b = g.input(Tensor::zeros(&[2]));
    let err = g.conv2d(x, w, b, 1).unwrap_err().to_string();
    assert!(err.contains("C=4") && err.contains("C=3"), "{err}");

    let w = g.input(Tensor::zeros(&[2, 3, 3, 3]));
    let b = g.input(Tensor::zeros(&[3]));
    assert!(g.conv2d(x, w, b, 1).is_err());
}

#[test]
fn relu_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let c = g.input(Tensor::full(&[1, 2, 4, 4], 0.25));
    let y = g.maxpool2d(c, 2, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.25));

    assert!(g.maxpool2d(x, 0, 1).is_err());
    assert!(g.maxpool2d(x, 2, 0).is_err());
}

#[test]
fn maxpool_tie_gradient_goes_to_first_index() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 2], &[1.0, 2.0]));
    let w = g.input(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
    let b = g.input(t(&[2], &[0.0, 0.0]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 2.0]);

    let eye = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = g.linear(x, eye, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let z = g.input(Tensor::zeros(&[3, 2]));
    let bias = g.input(t(&[2], &[0.5, -2.0]));
    let y = g.linear(z, w, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);

    let bad = g.input(Tensor::zeros(&[2, 3]));
    assert!(g.linear(x, bad, b).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let z = g.input(Tensor::full(&[2, 4], 0.3));
    let l = g.softmax_cross_entropy(z, &[0, 3]).unwrap();
    assert!(close(g.value(l).item(), 4f64.ln(), 1e-12));

    let z = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let l = g.softmax_cross_entropy(z, &[2]).unwrap();
    let e = |v: f64| v.exp();
    let direct = -(e(3.0) / (e(1.0) + e(2.0) + e(3.0))).ln();
    assert!(close(g.value(l).item(), direct, 1e-12));
    assert!(close(direct, 0.407606, 1e-6));

    let z = g.input(t(&[1, 3], &[0.0, 40.0, 0.0]));
    let l = g.softmax_cross_entropy(z, &[1]).unwrap();
    assert!(g.value(l).item() < 1e-6);

    assert!(g.softmax_cross_entropy(z, &[3]).is_err());
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut g = Graph::new();
    let z = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
    let l = g.softmax_cross_entropy(z, &[2, 0]).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(z).unwrap().data().to_vec();
    let d = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let expect = [
        1f64.exp() / d / 2.0,
        2f64.exp() / d / 2.0,
        (3f64.exp() / d - 1.0) / 2.0,
        (1.0 / 3.0 - 1.0) / 2.0,
        1.0 / 6.0,
        1.0 / 6.0,
    ];
    for (a, b) in grad.iter().zip(expect) {
        assert!(close(*a, b, 1e-12));
    }
}

#[test]
fn mse_examples_and_gradient() {
    let mut g = Graph::new();
    let p = g.param(t(&[2], &[1.0, 1.0]));
    let q = g.input(t(&[2], &[0.0, 0.0]));
    let l = g.mse_loss(p, q).unwrap();
    assert_eq!(g.value(l).item(), 0.5);
    g.backward(l).unwrap();
    assert_eq!(g.grad(p).unwrap().data(), &[0.5, 0.5]);

    let same = g.mse_loss(q, q).unwrap();
    assert_eq!(g.value(same).item(), 0.0);
    let wrong = g.input(Tensor::zeros(&[3]));
    assert!(g.mse_loss(p, wrong).is_err());
}

#[test]
fn mse_gradient_vs_central_differences() {
    let pred: Vec<f64> = vec![0.3, -1.2, 2.5, 0.0, 0.7, 1.1];
    let target: Vec<f64> = vec![1.0, 0.5, -0.5, 0.25, 0.7, 3.0];
    let loss = |p: &[f64]| 0.5 * p.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    let mut g = Graph::new();
    let pv = g.param(t(&[2, 3], &pred));
    let tv = g.input(t(&[2, 3], &target));
    let l = g.mse_loss(pv, tv).unwrap();
    g.backward(l).unwrap();
    let analytic = g.grad(pv).unwrap().data().to_vec();
    let h = 1e-5;
    for i in 0..pred.len() {
        let (mut up, mut dn) = (pred.clone(), pred.clone());
        up[i] += h;
        dn[i] -= h;
        let numeric = (loss(&up) - loss(&dn)) / (2.0 * h);
        assert!(close(analytic[i], numeric, 1e-6), "{i}: {} vs {numeric}", analytic[i]);
        assert!(close(analytic[i], (pred[i] - target[i]) / pred.len() as f64, 1e-15));
    }
}

#[test]
fn add_examples() {
    let mut g = Graph::new();
    let a = g.param(t(&[2], &[1.0, 2.0]));
    let b = g.input(t(&[2], &[3.0, 4.0]));
    let z = g.input(Tensor::zeros(&[2]));
    let y = g.add(a, z).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    let y = g.add(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[4.0, -1.0, 0.5]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    assert!(g.backward(sq).is_err());
}

#[test]
fn diamond_reuse_sums_both_paths() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.5, -2.0]));
    let a = g.relu(x).unwrap();
    let b = g.add(x, x).unwrap();
    let c = g.add(a, b).unwrap();
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 2.0]);
}

fn one_param(value: f64, grad: f64, lr_mult: f64, wd_mult: f64) -> ParamSet<f64> {
    let mut set = ParamSet::new();
    set.add_group("g", vec![("g.w".into(), t(&[1], &[value]))], lr_mult, wd_mult);
    set.params_mut()[0].accumulate_grad(&t(&[1], &[grad])).unwrap();
    set
}

#[test]
fn sgd_hand_calculations() {
    let cfg = SgdConfig {
        base_lr: 0.1,
        base_wd: 0.0,
        momentum: 0.0,
        seed: 0,
    };
    let mut set = one_param(1.0, 0.5, 1.0, 1.0);
    sgd_step(&mut set, &cfg).unwrap();
    assert!(close(set.params()[0].value.data()[0], 0.95, 1e-15));

    let cfg = SgdConfig { base_wd: 0.2, ..cfg };
    let mut set = one_param(2.0, 0.0, 1.0, 0.5);
    sgd_step(&mut set, &cfg).unwrap();
    assert!(close(set.params()[0].value.data()[0], 2.0 - 0.1 * 0.1 * 2.0, 1e-15));
}

#[test]
fn sgd_frozen_group_is_untouched_and_missing_grad_is_state_error() {
    let cfg = SgdConfig::default();
    let mut set = one_param(0.123456789, 7.0, 0.0, 0.0);
    sgd_step(&mut set, &cfg).unwrap();
    assert_eq!(set.params()[0].value.data()[0].to_bits(), 0.123456789f64.to_bits());

    let mut set = ParamSet::<f64>::new();
    set.add_group("g", vec![("g.w".into(), t(&[1], &[1.0]))], 1.0, 1.0);
    assert!(matches!(sgd_step(&mut set, &cfg), Err(racnn::Error::State(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_nested_loop_oracle(
        n in 1usize..3, c in 1usize..4, k in 1usize..4,
        h in 3usize..8, w in 3usize..8, f in prop::sample::select(vec![1usize, 3, 5]),
        seed in any::<u32>(),
    ) {
        prop_assume!(f <= h.min(w));
        let mut s = seed as u64 | 1;
        let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; (s % 2001) as f64 / 1000.0 - 1.0 };
        let x: Vec<f64> = (0..n * c * h * w).map(|_| next()).collect();
        let wt: Vec<f64> = (0..k * c * f * f).map(|_| next()).collect();
        let b: Vec<f64> = (0..k).map(|_| next()).collect();
        let pad = (f - 1) / 2;
        let y = run_conv(t(&[n, c, h, w], &x), t(&[k, c, f, f], &wt), t(&[k], &b), pad);
        prop_assert_eq!(y.shape(), &[n, k, h, w]);
        let oracle = conv_oracle(&x, (n, c, h, w), &wt, (k, f, f), &b, pad);
        for (a, o) in y.data().iter().zip(&oracle) {
            prop_assert!(close(*a, *o, 1e-12));
        }
    }

    #[test]
    fn maxpool_matches_window_scan(vals in prop::collection::vec(-10.0f64..10.0, 16)) {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 4, 4], &vals));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let m = (0..2)
                    .flat_map(|i| (0..2).map(move |j| (i, j)))
                    .map(|(i, j)| vals[(2 * oy + i) * 4 + 2 * ox + j])
                    .fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(g.value(y).data()[oy * 2 + ox], m);
            }
        }
    }

    #[test]
    fn cross_entropy_nonnegative(z in prop::collection::vec(-30.0f64..30.0, 12), y in 0usize..4) {
        let mut g = Graph::new();
        let zv = g.input(t(&[3, 4], &z));
        let l = g.softmax_cross_entropy(zv, &[y, (y + 1) % 4, 0]).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn all_zero_multipliers_are_a_no_op(v in -5.0f64..5.0, gr in -5.0f64..5.0, mu in 0.0f64..0.99) {
        let cfg = SgdConfig { base_lr: 0.5, base_wd: 0.1, momentum: mu, seed: 0 };
        let mut set = one_param(v, gr, 0.0, 0.0);
        for _ in 0..3 {
            sgd_step(&mut set, &cfg).unwrap();
        }
        prop_assert_eq!(set.params()[0].value.data()[0].to_bits(), v.to_bits());
    }
}
