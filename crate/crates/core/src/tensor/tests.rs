use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Independent direct-loop convolution, no im2col and no grouping tricks.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4("naive").unwrap();
    let [f, _, kh, kw] = w.dims4("naive").unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * f * ho * wo];
    for i in 0..n {
        for o in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ch in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((i * c + ch) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ch) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    y[((i * f + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, f, ho, wo], y).unwrap()
}

fn slice_channels(x: &Tensor<f64>, from: usize, count: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4("slice").unwrap();
    let mut out = Vec::new();
    for i in 0..n {
        out.extend_from_slice(&x.data()[(i * c + from) * h * w..(i * c + from + count) * h * w]);
    }
    Tensor::new(&[n, count, h, w], out).unwrap()
}

fn concat_channels(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let [n, _, h, w] = parts[0].dims4("cat").unwrap();
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::new();
    for i in 0..n {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[i * c * h * w..(i + 1) * c * h * w]);
        }
    }
    Tensor::new(&[n, total, h, w], out).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Central-difference check of every input element of `f`, which maps leaf
/// vars to an arbitrary tensor; the checked scalar is a fixed random
/// projection of that tensor.
fn grad_check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |vals: &[Tensor<f64>], weights: &Tensor<f64>| -> (f64, Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.param(v.clone())).collect();
        let out = f(&mut g, &vars);
        let w = g.constant(weights.clone());
        let p = g.mul(out, w).unwrap();
        let loss = g.sum(p);
        (g.value(loss).data()[0], g, vars, loss)
    };
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|v| g.param(v.clone())).collect();
        let o = f(&mut g, &vars);
        g.shape(o).to_vec()
    };
    let weights = random(&out_shape, &mut rng);
    let (_, mut g, vars, loss) = eval(&inputs, &weights);
    g.backward(loss).unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()).unwrap());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let fd = (eval(&plus, &weights).0 - eval(&minus, &weights).0) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
    }
    worst
}

#[test]
fn tensor_rejects_inconsistent_shapes() {
    assert!(matches!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]), Err(TensorError::DataLength { .. })));
    assert!(matches!(Tensor::<f32>::zeros(&[2, 0]), Err(TensorError::ZeroExtent(_))));
    assert!(Tensor::<f32>::zeros(&[2, 3]).unwrap().reshape(&[5]).is_err());
}

#[test]
fn pointwise_unit_filter_sums_channels() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[1, 3, 2, 2], &[1., 2., 3., 4., 10., 20., 30., 40., 0.5, 0.5, 0.5, 0.5]));
    let k = g.constant(t32(&[1, 3, 1, 1], &[1., 1., 1.]));
    let y = g.conv2d(x, k, None, ConvSpec::default()).unwrap();
    assert_eq!(g.value(y).data(), &[11.5, 22.5, 33.5, 44.5]);

    let x1 = g.constant(t32(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let k1 = g.constant(t32(&[1, 1, 1, 1], &[1.]));
    let y1 = g.conv2d(x1, k1, None, ConvSpec::default()).unwrap();
    assert_eq!(g.value(y1).data(), g.value(x1).data());
}

#[test]
fn diagonal_kernel_picks_corners() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let k = g.constant(t32(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
    let y = g.conv2d(x, k, None, ConvSpec::default()).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[5.0]);
}

#[test]
fn conv_configuration_errors_name_dimensions() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 12, 4, 4]).unwrap());
    let k = g.constant(Tensor::zeros(&[6, 3, 3, 3]).unwrap());
    let err = g.conv2d(x, k, None, ConvSpec::new(1, 1, 5)).unwrap_err();
    assert!(err.to_string().contains("divisible by groups 5"), "{err}");
    let k = g.constant(Tensor::zeros(&[8, 4, 3, 3]).unwrap());
    let err = g.conv2d(x, k, None, ConvSpec::new(1, 1, 4)).unwrap_err();
    assert!(err.to_string().contains("input has 3"), "{err}");
    let k = g.constant(Tensor::zeros(&[8, 3, 7, 7]).unwrap());
    assert!(g.conv2d(x, k, None, ConvSpec::new(1, 0, 4)).is_err());
}

#[test]
fn grouped_conv_matches_per_group_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = random(&[2, 12, 7, 6], &mut rng);
        let w = random(&[8, 3, 3, 3], &mut rng);
        let b = random(&[8], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), ConvSpec::new(stride, pad, 4)).unwrap();
        let parts: Vec<Tensor<f64>> = (0..4)
            .map(|gi| {
                let xs = slice_channels(&x, gi * 3, 3);
                let ws = Tensor::new(&[2, 3, 3, 3], w.data()[gi * 54..(gi + 1) * 54].to_vec()).unwrap();
                let bs = Tensor::new(&[2], b.data()[gi * 2..gi * 2 + 2].to_vec()).unwrap();
                naive_conv(&xs, &ws, Some(&bs), stride, pad)
            })
            .collect();
        let oracle = concat_channels(&parts);
        assert_eq!(g.shape(y), oracle.shape());
        for (a, b) in g.value(y).data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn grouped_conv_equals_block_diagonal_dense_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[1, 8, 5, 5], &mut rng);
    let w = random(&[4, 2, 3, 3], &mut rng);
    let mut dense = vec![0.0; 4 * 8 * 9];
    for o in 0..4 {
        let grp = o; // one filter per group
        for ci in 0..2 {
            for k in 0..9 {
                dense[(o * 8 + grp * 2 + ci) * 9 + k] = w.data()[(o * 2 + ci) * 9 + k];
            }
        }
    }
    let dense = Tensor::new(&[4, 8, 3, 3], dense).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (wv, dv) = (g.constant(w), g.constant(dense));
    let a = g.conv2d(xv, wv, None, ConvSpec::new(1, 1, 4)).unwrap();
    let b = g.conv2d(xv, dv, None, ConvSpec::new(1, 1, 1)).unwrap();
    for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert!((p - q).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_training_normalises_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 4, 4], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::full(&[3], 1.0).unwrap());
    let beta = g.constant(Tensor::zeros(&[3]).unwrap());
    let (y, stats) = g.batch_norm(xv, gamma, beta, BatchNormMode::Train, 1e-5).unwrap();
    let y = g.value(y).data();
    for ch in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| y[(n * 3 + ch) * 16..(n * 3 + ch + 1) * 16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
    // Two-pass reference for the reported statistics and the output.
    let stats = stats.unwrap();
    for ch in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| x.data()[(n * 3 + ch) * 16..(n * 3 + ch + 1) * 16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!((stats.mean[ch] - mean).abs() < 1e-12);
        assert!((stats.var[ch] - var * 32.0 / 31.0).abs() < 1e-12);
        for n in 0..2 {
            for j in 0..16 {
                let idx = (n * 3 + ch) * 16 + j;
                let expect = (x.data()[idx] - mean) / (var + 1e-5).sqrt();
                assert!((y[idx] - expect).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn batch_norm_constant_channel_yields_beta() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[2, 1, 2, 2], 3.0).unwrap());
    let gamma = g.constant(Tensor::full(&[1], 1.0).unwrap());
    let beta = g.constant(Tensor::full(&[1], 5.0).unwrap());
    let (y, _) = g.batch_norm(x, gamma, beta, BatchNormMode::Train, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn batch_norm_rejects_single_value_statistics() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 2, 1, 1], 3.0).unwrap());
    let gamma = g.constant(Tensor::full(&[2], 1.0).unwrap());
    let beta = g.constant(Tensor::zeros(&[2]).unwrap());
    let err = g.batch_norm(x, gamma, beta, BatchNormMode::Train, 1e-5).unwrap_err();
    assert_eq!(err, TensorError::SingleElementBatch(1));
    let (mean, var) = ([0.0f32; 2], [1.0f32; 2]);
    assert!(g.batch_norm(x, gamma, beta, BatchNormMode::Eval { mean: &mean, var: &var }, 1e-5).is_ok());
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[3], &[-1., 0., 2.]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0., 0., 2.]);

    let p = g.constant(t32(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let m = g.max_pool2d(p, PoolSpec { kernel: 2, stride: 2, ceil_mode: false }).unwrap();
    assert_eq!(g.value(m).data(), &[4.]);

    let z = g.constant(t32(&[2], &[0., 0.]));
    let s = g.softmax(z, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let pred = g.constant(t32(&[3], &[0., 0.5, 2.]));
    let target = g.constant(t32(&[3], &[0., 0., 0.]));
    let l = g.smooth_l1(pred, target).unwrap();
    assert_eq!(g.value(l).data(), &[0.0, 0.125, 1.5]);
}

#[test]
fn ceil_mode_pooling_covers_odd_extents() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_fn(&[1, 1, 5, 5], |i| i as f32).unwrap());
    let floor = g.max_pool2d(x, PoolSpec { kernel: 2, stride: 2, ceil_mode: false }).unwrap();
    let ceil = g.max_pool2d(x, PoolSpec { kernel: 2, stride: 2, ceil_mode: true }).unwrap();
    assert_eq!(g.shape(floor), &[1, 1, 2, 2]);
    assert_eq!(g.shape(ceil), &[1, 1, 3, 3]);
    assert_eq!(g.value(ceil).data()[8], 24.0);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.constant(random(&[3, 5, 2], &mut rng));
    for axis in 0..3 {
        let s = g.softmax(x, axis).unwrap();
        let y = g.value(s).data();
        let shape = [3, 5, 2];
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..len).map(|j| y[(o * len + j) * inner + i]).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn cross_entropy_examples_and_reference() {
    let mut g = Graph::<f32>::new();
    let l = g.constant(t32(&[2, 2], &[0., 0., 1000., 0.]));
    let ce = g.softmax_cross_entropy(l, &[0, 0]).unwrap();
    let v = g.value(ce).data();
    assert!((v[0] - std::f32::consts::LN_2).abs() < 1e-6);
    assert!(v[1].is_finite() && v[1].abs() < 1e-6);
    assert!(matches!(
        g.softmax_cross_entropy(l, &[0, 2]),
        Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..2)).collect();
    let mut g = Graph::<f32>::new();
    let lv = g.constant(Tensor::new(&[5, 2], logits.iter().map(|&v| v as f32).collect()).unwrap());
    let ce = g.softmax_cross_entropy(lv, &labels).unwrap();
    for r in 0..5 {
        let (a, b) = (logits[2 * r], logits[2 * r + 1]);
        let p = [a, b][labels[r]].exp() / (a.exp() + b.exp());
        assert!((g.value(ce).data()[r] as f64 - (-p.ln())).abs() < 1e-5);
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f32).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f32>::new();
    let x = g.param(t32(&[3], &[1., 2., 3.]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2., 4., 6.]);
    assert!(matches!(g.backward(sq), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tol = 1e-6;
    let check = |name: &str, err: f64| assert!(err < tol, "{name}: relative error {err}");

    let inputs = vec![random(&[2, 4, 5, 5], &mut rng), random(&[6, 2, 3, 3], &mut rng), random(&[6], &mut rng)];
    check("conv2d grouped", grad_check(inputs, |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(2, 1, 2)).unwrap()));
    let inputs = vec![random(&[2, 3, 4, 4], &mut rng), random(&[5, 3, 1, 1], &mut rng)];
    check("conv2d pointwise", grad_check(inputs, |g, v| g.conv2d(v[0], v[1], None, ConvSpec::default()).unwrap()));

    let inputs = vec![random(&[3, 2, 3, 3], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    check(
        "batch_norm train",
        grad_check(inputs.clone(), |g, v| g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5).unwrap().0),
    );
    let (mean, var) = ([0.1, -0.2], [0.5, 2.0]);
    check(
        "batch_norm eval",
        grad_check(inputs, |g, v| {
            g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var }, 1e-5).unwrap().0
        }),
    );

    // Keep inputs away from the relu kink and pooling ties.
    let x = Tensor::from_fn(&[2, 3, 4], |i| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if i % 2 == 0 { v } else { -v }
    })
    .unwrap();
    check("relu", grad_check(vec![x], |g, v| g.relu(v[0])));
    let x = Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64 * 0.37).sin() + i as f64 * 1e-3).unwrap();
    check(
        "max_pool2d",
        grad_check(vec![x], |g, v| g.max_pool2d(v[0], PoolSpec { kernel: 2, stride: 2, ceil_mode: true }).unwrap()),
    );

    check("reshape", grad_check(vec![random(&[2, 6], &mut rng)], |g, v| g.reshape(v[0], &[3, 4]).unwrap()));
    check("permute", grad_check(vec![random(&[2, 3, 4], &mut rng)], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap()));
    check(
        "concat",
        grad_check(vec![random(&[2, 3, 2], &mut rng), random(&[2, 1, 2], &mut rng)], |g, v| {
            g.concat(&[v[0], v[1]], 1).unwrap()
        }),
    );
    check("softmax", grad_check(vec![random(&[3, 4], &mut rng)], |g, v| g.softmax(v[0], 1).unwrap()));
    let x = Tensor::new(&[6], vec![0.3, -0.7, 1.8, -2.5, 0.05, 1.2]).unwrap();
    let t = Tensor::zeros(&[6]).unwrap();
    check("smooth_l1", grad_check(vec![x, t], |g, v| g.smooth_l1(v[0], v[1]).unwrap()));
    check(
        "softmax_cross_entropy",
        grad_check(vec![random(&[5, 3], &mut rng)], |g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 1, 0]).unwrap()),
    );
    check("gather_rows", grad_check(vec![random(&[4, 3], &mut rng)], |g, v| g.gather_rows(v[0], &[3, 0, 3]).unwrap()));
    check(
        "add/mul/scale",
        grad_check(vec![random(&[4], &mut rng), random(&[4], &mut rng)], |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let m = g.mul(a, v[0]).unwrap();
            g.scale(m, 0.3)
        }),
    );
}

#[test]
fn fan_in_consumers_accumulate() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let a = g.scale(x, 2.0);
    let b = g.scale(x, 3.0);
    let s = g.add(a, b).unwrap();
    let l = g.sum(s);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[5.0, 5.0]);
}

#[test]
fn xavier_bounds_statistics_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w: Tensor<f32> = xavier_uniform(&[10, 10], &mut rng).unwrap();
    let bound = (6.0f32 / 20.0).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));

    let big: Tensor<f64> = xavier_uniform(&[1000, 100], &mut rng).unwrap();
    let n = big.len() as f64;
    let b = (6.0 / 1100.0f64).sqrt();
    let sigma = b / 3f64.sqrt();
    let mean = big.sum() / n;
    assert!(mean.abs() < 3.0 * sigma / n.sqrt());

    let conv: Tensor<f32> = xavier_uniform(&[8, 3, 3, 3], &mut rng).unwrap();
    let conv_bound = (6.0f32 / ((3 * 9 + 8 * 9) as f32)).sqrt();
    assert!(conv.data().iter().all(|v| v.abs() <= conv_bound));

    let a: Tensor<f32> = xavier_uniform(&[4, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let b: Tensor<f32> = xavier_uniform(&[4, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert_eq!(a, b);
    assert!(xavier_uniform::<f32, _>(&[5], &mut rng).is_err());
}
