//! Tensor arithmetic and network operations against brute-force oracles.

use fcspn_core::ops::{softmax_values, BatchNormState, BnMode, Conv3dSpec};
use fcspn_core::{Elementwise, Error, Fill, Reduction, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(shape, Fill::Uniform(1.0), rng).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn tensor_fill_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(Tensor::new(&[2, 2], Fill::Zeros, &mut rng).unwrap().data(), &[0.0; 4]);
    assert_eq!(
        Tensor::new(&[3], Fill::Constant(1.0), &mut rng).unwrap().data(),
        &[1.0; 3]
    );
    let u = Tensor::new(&[1000], Fill::Uniform(0.1), &mut rng).unwrap();
    let mean = u.data().iter().sum::<f64>() / 1000.0;
    assert!(mean.abs() < 0.02);
    assert!(u.data().iter().all(|v| v.abs() < 0.1));
    assert!(matches!(
        Tensor::new(&[2, 0], Fill::Zeros, &mut rng),
        Err(Error::ZeroExtent(_))
    ));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(a).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);
    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let y = tape.constant(t(&[2], &[3.0, 4.0]));
    let sum = tape.add(x, y).unwrap();
    assert_eq!(tape.value(sum).data(), &[4.0, 6.0]);
    let bad = tape.constant(t(&[3], &[0.0; 3]));
    assert!(matches!(tape.add(x, bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn reduce_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
    let m = tape.reduce(a, Reduction::Mean, &[0, 1]).unwrap();
    assert_eq!(tape.value(m).item(), 4.0);
    let v = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.reduce(v, Reduction::Sum, &[0]).unwrap();
    assert_eq!(tape.value(s).item(), 6.0);
    let b = tape.constant(t(&[2, 2], &[1.0, 9.0, 2.0, 0.0]));
    let mx = tape.reduce(b, Reduction::Max, &[1]).unwrap();
    assert_eq!(tape.value(mx).data(), &[9.0, 2.0]);
    assert_eq!(tape.value(mx).shape(), &[2]);
    let same = tape.reduce(b, Reduction::Sum, &[]).unwrap();
    assert_eq!(tape.value(same), tape.value(b));
    assert!(matches!(
        tape.reduce(b, Reduction::Sum, &[1, 1]),
        Err(Error::DuplicateAxis(1))
    ));
    assert!(matches!(
        tape.reduce(b, Reduction::Sum, &[2]),
        Err(Error::InvalidAxis { .. })
    ));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let w = tape.param(t(&[2], &[2.0, 3.0]));
    let x = tape.constant(t(&[2], &[1.0, 1.0]));
    let p = tape.mul(w, x).unwrap();
    let loss = tape.sum_all(p).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0]);
    assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));

    let mut tape = Tape::new();
    let z = tape.param(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(z).unwrap().item(), 0.25);

    let mut tape = Tape::new();
    let v = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss(_))));
}

/// Materializes `b` to `out` shape and applies `f` pointwise.
fn materialized(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let out = a.shape();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(a.len());
    for flat in 0..a.len() {
        let mut rem = flat;
        for ax in (0..rank).rev() {
            idx[ax] = rem % out[ax];
            rem /= out[ax];
        }
        let mut boff = 0;
        for (&extent, &i) in b.shape().iter().zip(&idx) {
            boff = boff * extent + if extent == 1 { 0 } else { i };
        }
        res.push(f(a.data()[flat], b.data()[boff]));
    }
    res
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn broadcast_matches_materialization(
        shape in prop::collection::vec(1usize..=3, 1..=4),
        mask in prop::collection::vec(any::<bool>(), 4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bshape: Vec<usize> = shape.iter().zip(&mask).map(|(&e, &m)| if m { 1 } else { e }).collect();
        let a = rand_tensor(&shape, &mut rng);
        let b = rand_tensor(&bshape, &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let add = tape.add(va, vb).unwrap();
        let mul = tape.mul(va, vb).unwrap();
        prop_assert_eq!(tape.value(add).data(), &materialized(&a, &b, |x, y| x + y)[..]);
        prop_assert_eq!(tape.value(mul).data(), &materialized(&a, &b, |x, y| x * y)[..]);
    }
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let w = rand_tensor(&[1, 3, 1], &mut rng);
    let graph_f = |tape: &mut Tape, xv, wv| {
        let m = tape.mul(xv, wv).unwrap();
        let s = tape.sigmoid(m).unwrap();
        tape.sum_all(s).unwrap()
    };
    let graph_g = |tape: &mut Tape, xv| {
        let r = tape.relu(xv).unwrap();
        let q = tape.mul(r, r).unwrap();
        tape.reduce(q, Reduction::Mean, &[0, 1, 2]).unwrap()
    };
    let grads = |which: u8| {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
        let loss = match which {
            0 => graph_f(&mut tape, xv, wv),
            1 => graph_g(&mut tape, xv),
            _ => {
                let f = graph_f(&mut tape, xv, wv);
                let g = graph_g(&mut tape, xv);
                tape.add(f, g).unwrap()
            }
        };
        tape.backward(loss).unwrap();
        tape.grad(xv).unwrap().data().to_vec()
    };
    let (gf, gg, gs) = (grads(0), grads(1), grads(2));
    let summed: Vec<f64> = gf.iter().zip(&gg).map(|(a, b)| a + b).collect();
    assert!(close(&gs, &summed, 1e-14));
}

/// Direct cross-correlation over every output and kernel position.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, spec: &Conv3dSpec) -> Tensor {
    let xs = x.shape();
    let (n, ci, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let [od, oh, ow] = spec.output_dims([d, h, wd]).unwrap();
    let [kd, kh, kw] = spec.kernel;
    let co = spec.out_channels;
    let xi = |b: usize, c: usize, z: isize, y: isize, x_: isize| -> f64 {
        if z < 0 || y < 0 || x_ < 0 || z >= d as isize || y >= h as isize || x_ >= wd as isize {
            return 0.0;
        }
        x.data()[(((b * ci + c) * d + z as usize) * h + y as usize) * wd + x_ as usize]
    };
    let mut out = vec![0.0; n * co * od * oh * ow];
    let mut k = 0;
    for bn in 0..n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for a in 0..kd {
                                for p in 0..kh {
                                    for q in 0..kw {
                                        let zi = (z * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                                        let yi = (y * spec.stride[1] + p) as isize - spec.padding[1] as isize;
                                        let xi_ = (xx * spec.stride[2] + q) as isize - spec.padding[2] as isize;
                                        let wv = w.data()[(((o * ci + c) * kd + a) * kh + p) * kw + q];
                                        acc += wv * xi(bn, c, zi, yi, xi_);
                                    }
                                }
                            }
                        }
                        out[k] = acc;
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, od, oh, ow], out).unwrap()
}

fn run_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &Conv3dSpec) -> Tensor {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv3d(xv, wv, Some(bv), spec).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv3d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let ci = rng.random_range(1..=4);
        let co = rng.random_range(1..=4);
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=7));
        let kernel: [usize; 3] = std::array::from_fn(|i| rng.random_range(1..=dims[i].min(7)));
        let stride: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=3));
        let mut spec = Conv3dSpec::new(ci, co, kernel, stride);
        if rng.random_bool(0.3) {
            spec = spec.with_padding(std::array::from_fn(|i| rng.random_range(0..=kernel[i] / 2)));
        }
        let n = rng.random_range(1..=2);
        let x = rand_tensor(&[n, ci, dims[0], dims[1], dims[2]], &mut rng);
        let w = rand_tensor(&spec.weight_shape(), &mut rng);
        let b = rand_tensor(&[co], &mut rng);
        let got = run_conv(&x, &w, &b, &spec);
        let want = conv_oracle(&x, &w, &b, &spec);
        assert_eq!(got.shape(), want.shape(), "{spec:?}");
        for (g, e) in got.data().iter().zip(want.data()) {
            worst = worst.max((g - e).abs());
        }
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn conv3d_examples() {
    let x = t(&[1, 1, 1, 1, 3], &[4.0, 5.0, 6.0]);
    let w = t(&[1, 1, 1, 1, 3], &[1.0, 2.0, 3.0]);
    let spec = Conv3dSpec::new(1, 1, [1, 1, 3], [1, 1, 1]).with_padding([0, 0, 0]);
    assert_eq!(run_conv(&x, &w, &Tensor::zeros(&[1]), &spec).data(), &[32.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[1, 1, 3, 4, 5], &mut rng);
    let id = Conv3dSpec::new(1, 1, [1, 1, 1], [1, 1, 1]);
    assert_eq!(
        run_conv(&x, &Tensor::full(&[1, 1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), &id),
        x
    );

    let x = rand_tensor(&[1, 2, 6, 6, 6], &mut rng);
    let spec = Conv3dSpec::new(2, 3, [3, 3, 3], [2, 1, 1]);
    let w = rand_tensor(&spec.weight_shape(), &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let got = run_conv(&x, &w, &b, &spec);
    assert_eq!(got.shape(), &[1, 3, 3, 6, 6]);
    assert!(close(got.data(), conv_oracle(&x, &w, &b, &spec).data(), 1e-12));

    let tiny = Conv3dSpec::new(1, 1, [3, 1, 1], [1, 1, 1]).with_padding([0, 0, 0]);
    assert!(matches!(tiny.output_dims([2, 1, 1]), Err(Error::ExtentCollapse { .. })));
}

fn bn(x: &Tensor, gamma: f64, beta: f64, state: &mut BatchNormState, mode: BnMode) -> Tensor {
    let c = x.shape()[1];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(&[c], gamma));
    let b = tape.constant(Tensor::full(&[c], beta));
    let y = tape.batchnorm(xv, g, b, state, mode).unwrap();
    tape.value(y).clone()
}

fn channel_stats(y: &Tensor, c: usize) -> (f64, f64) {
    let s = y.shape();
    let inner: usize = s[2..].iter().product();
    let vals: Vec<f64> = (0..s[0])
        .flat_map(|n| y.data()[(n * s[1] + c) * inner..(n * s[1] + c + 1) * inner].to_vec())
        .collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
    (m, v)
}

#[test]
fn batchnorm_examples_and_moments() {
    let x = t(&[2, 1, 1], &[1.0, 3.0]);
    let y = bn(&x, 1.0, 0.0, &mut BatchNormState::new(1), BnMode::Train);
    assert!(close(y.data(), &[-1.0, 1.0], 1e-5));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[3, 4, 2, 3, 3], &mut rng).map(|v| 3.0 * v + 1.5);
    let y = bn(&x, 1.0, 0.0, &mut BatchNormState::new(4), BnMode::Train);
    for c in 0..4 {
        let (m, v) = channel_stats(&y, c);
        assert!(m.abs() < 1e-10);
        assert!((v - 1.0).abs() < 1e-4, "variance {v}");
    }
    let y = bn(&x, 2.0, 5.0, &mut BatchNormState::new(4), BnMode::Train);
    for c in 0..4 {
        let (m, v) = channel_stats(&y, c);
        assert!((m - 5.0).abs() < 1e-10);
        assert!((v.sqrt() - 2.0).abs() < 1e-4);
    }

    let mut state = BatchNormState::new(4);
    let y = bn(&x, 1.0, 0.0, &mut state, BnMode::Eval);
    let scale = 1.0 / (1.0 + state.epsilon).sqrt();
    assert!(close(y.data(), x.map(|v| v * scale).data(), 1e-15));
}

#[test]
fn batchnorm_updates_running_stats() {
    let x = t(&[1, 2, 2], &[1.0, 3.0, 2.0, 2.0]);
    let mut state = BatchNormState::new(2);
    bn(&x, 1.0, 0.0, &mut state, BnMode::Train);
    assert!(close(&state.running_mean, &[0.2, 0.2], 1e-15));
    assert!(state.running_var.iter().all(|&v| v >= 0.0));
}

fn upsample(x: &Tensor, target: [usize; 3]) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.trilinear_upsample(v, target).unwrap();
    tape.value(y).clone()
}

#[test]
fn trilinear_examples_and_bounds() {
    let x = t(&[1, 1, 1, 1, 2], &[0.0, 2.0]);
    assert!(close(
        upsample(&x, [1, 1, 4]).data(),
        &[0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0],
        1e-15
    ));
    let c = Tensor::full(&[1, 2, 2, 3, 2], 1.25);
    assert!(upsample(&c, [3, 5, 7]).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[2, 3, 2, 3, 4], &mut rng);
    assert_eq!(upsample(&x, [2, 3, 4]), x);
    let y = upsample(&x, [5, 7, 6]);
    let inner = 2 * 3 * 4;
    let out_inner = 5 * 7 * 6;
    for k in 0..6 {
        let src = &x.data()[k * inner..(k + 1) * inner];
        let (lo, hi) = src.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for &v in &y.data()[k * out_inner..(k + 1) * out_inner] {
            assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
        }
    }
}

#[test]
fn avg_pool_examples() {
    let pool = |x: Tensor| {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.adaptive_avg_pool(v).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(pool(t(&[1, 1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0])).data(), &[3.0]);
    assert_eq!(pool(Tensor::full(&[1, 1, 2, 2, 2], 4.5)).data(), &[4.5]);
    let mut data: Vec<f64> = (0..8).map(f64::from).collect();
    data.extend([1.0; 8]);
    let y = pool(t(&[1, 2, 2, 2, 2], &data));
    assert_eq!(y.shape(), &[1, 2, 1, 1, 1]);
    assert_eq!(y.data(), &[3.5, 1.0]);
}

#[test]
fn concat_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&[1, 2, 2, 3, 3], &mut rng);
    let b = rand_tensor(&[1, 3, 2, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
    let c = tape.concat_channels(va, vb).unwrap();
    assert_eq!(tape.shape(c), &[1, 5, 2, 3, 3]);
    let wrong = tape.constant(Tensor::zeros(&[1, 3, 2, 3, 4]));
    assert!(tape.concat_channels(va, wrong).is_err());
    let probe = tape.constant(rand_tensor(&[1, 5, 2, 3, 3], &mut rng));
    let m = tape.mul(c, probe).unwrap();
    let loss = tape.sum_all(m).unwrap();
    let p = tape.value(probe).data().to_vec();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(va).unwrap().data(), &p[..2 * 18]);
    assert_eq!(tape.grad(vb).unwrap().data(), &p[2 * 18..]);
}

#[test]
fn softmax_examples_and_invariants() {
    let y = softmax_values(&t(&[1, 2, 1, 1], &[0.0, 0.0]));
    assert_eq!(y.data(), &[0.5, 0.5]);
    let y = softmax_values(&t(&[1, 3, 1, 1], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    assert!(close(y.data(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[2, 4, 3, 3], &mut rng).map(|v| 30.0 * v);
    let y = softmax_values(&x);
    let shifted = softmax_values(&x.map(|v| v + 123.0));
    assert!(close(y.data(), shifted.data(), 1e-12));
    for n in 0..2 {
        for p in 0..9 {
            let s: f64 = (0..4).map(|k| y.data()[(n * 4 + k) * 9 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    // Gaps beyond ~37 round the top probability to exactly 1 in f64.
    let moderate = softmax_values(&x.map(|v| v / 6.0));
    assert!(moderate.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn nonfinite_values_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1e308, 1e308]));
    assert!(matches!(
        tape.elementwise(Elementwise::Scale(10.0), a, None),
        Err(Error::NonFinite(_))
    ));
}
