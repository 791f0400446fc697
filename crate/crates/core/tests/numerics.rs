use photon_da_core::numerics::{Activation, NumericsError, PoolMode, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn idx4(s: &[usize], c: usize, t: usize, h: usize, w: usize) -> usize {
    ((c * s[1] + t) * s[2] + h) * s[3] + w
}

/// Direct summation cross-correlation with stride and zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: [usize; 3], pad: [usize; 3]) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = [ws[2], ws[3], ws[4]];
    let out: Vec<usize> = (0..3).map(|a| (xs[a + 1] + 2 * pad[a] - k[a]) / stride[a] + 1).collect();
    let shape = [ws[0], out[0], out[1], out[2]];
    let mut y = vec![0.0; shape.iter().product()];
    for co in 0..ws[0] {
        for t in 0..out[0] {
            for h in 0..out[1] {
                for v in 0..out[2] {
                    let mut acc = b[co];
                    for ci in 0..ws[1] {
                        for a in 0..k[0] {
                            for bb in 0..k[1] {
                                for c in 0..k[2] {
                                    let (ti, hi, wi) = (
                                        (t * stride[0] + a) as isize - pad[0] as isize,
                                        (h * stride[1] + bb) as isize - pad[1] as isize,
                                        (v * stride[2] + c) as isize - pad[2] as isize,
                                    );
                                    if ti < 0 || hi < 0 || wi < 0 {
                                        continue;
                                    }
                                    let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                    if ti >= xs[1] || hi >= xs[2] || wi >= xs[3] {
                                        continue;
                                    }
                                    let wv = w.data()[(((co * ws[1] + ci) * k[0] + a) * k[1] + bb) * k[2] + c];
                                    acc += wv * x.data()[idx4(xs, ci, ti, hi, wi)];
                                }
                            }
                        }
                    }
                    y[idx4(&shape, co, t, h, v)] = acc;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), y).unwrap()
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: [usize; 3]) -> Result<Tensor<f64>, NumericsError> {
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv3d(xv, wv, bv, pad)?;
    Ok(t.value(y).clone())
}

fn run_deconv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<f64>, NumericsError> {
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.deconv3d(xv, wv, bv, stride, pad)?;
    Ok(t.value(y).clone())
}

#[test]
fn identity_kernel_reproduces_paper_sized_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f32> = Tensor::from_fn(vec![1, 1024, 32, 32], |_| rng.random::<f32>());
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w = t.constant(Tensor::full(vec![1, 1, 1, 1, 1], 1.0f32));
    let b = t.constant(Tensor::zeros(vec![1]));
    let y = t.conv3d(xv, w, b, [0, 0, 0]).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn all_ones_cube_matches_direct_summation() {
    let x = Tensor::full(vec![1, 4, 4, 4], 1.0);
    let w = Tensor::full(vec![1, 1, 3, 3, 3], 1.0);
    let b = Tensor::zeros(vec![1]);
    let y = run_conv(&x, &w, &b, [1, 1, 1]).unwrap();
    assert_eq!(y.shape(), &[1, 4, 4, 4]);
    assert_eq!(y.data()[idx4(&[1, 4, 4, 4], 0, 1, 1, 1)], 27.0);
    assert_eq!(y.data()[idx4(&[1, 4, 4, 4], 0, 0, 0, 0)], 8.0);
    assert_eq!(y, naive_conv(&x, &w, &[0.0], [1, 1, 1], [1, 1, 1]));
}

#[test]
fn same_padding_preserves_paper_sizes() {
    let x: Tensor<f32> = Tensor::full(vec![4, 1024, 32, 32], 0.5);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let w = t.constant(Tensor::full(vec![1, 4, 7, 3, 3], 0.01f32));
    let b = t.constant(Tensor::zeros(vec![1]));
    let y = t.conv3d(xv, w, b, [3, 1, 1]).unwrap();
    assert_eq!(t.shape(y), &[1, 1024, 32, 32]);
}

#[test]
fn paper_deconvolution_doubles_time() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(vec![48, 8, 32, 32], 0.1));
    let w = t.constant(Tensor::full(vec![48, 40, 6, 3, 3], 0.01));
    let b = t.constant(Tensor::zeros(vec![40]));
    let y = t.deconv3d(x, w, b, [2, 1, 1], [2, 1, 1]).unwrap();
    assert_eq!(t.shape(y), &[40, 16, 32, 32]);
    // (L - 1)·s - 2p + k along time.
    assert_eq!((8 - 1) * 2 - 2 * 2 + 6, 16);
}

#[test]
fn conv_rejects_channel_mismatch_with_dimensions() {
    let x = Tensor::zeros(vec![3, 4, 4, 4]);
    let w = Tensor::zeros(vec![2, 4, 1, 1, 1]);
    let err = run_conv(&x, &w, &Tensor::zeros(vec![2]), [0, 0, 0]).unwrap_err();
    match err {
        NumericsError::ShapeMismatch { op, detail } => {
            assert_eq!(op, "conv3d");
            assert!(detail.contains('3') && detail.contains('4'), "{detail}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn deconv_rejects_negative_extent() {
    let x = Tensor::zeros(vec![1, 1, 1, 1]);
    let w = Tensor::zeros(vec![1, 1, 1, 1, 1]);
    assert!(run_deconv(&x, &w, &Tensor::zeros(vec![1]), [1, 1, 1], [1, 0, 0]).is_err());
}

#[test]
fn pooling_shapes_and_constants() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(vec![4, 1024, 32, 32], 2.5));
    let y = t.pool3d(x, PoolMode::Max, [2, 1, 1]).unwrap();
    assert_eq!(t.shape(y), &[4, 512, 32, 32]);
    let x = t.constant(Tensor::full(vec![48, 8, 32, 32], 2.5));
    let y = t.pool3d(x, PoolMode::Average, [1, 8, 8]).unwrap();
    assert_eq!(t.shape(y), &[48, 8, 4, 4]);
    assert!(t.value(y).data().iter().all(|v| *v == 2.5));
    let odd = t.constant(Tensor::zeros(vec![1, 3, 2, 2]));
    assert!(t.pool3d(odd, PoolMode::Max, [2, 1, 1]).is_err());
}

#[test]
fn max_pool_ties_route_to_first_element() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::full(vec![1, 2, 2, 2], 1.0));
    let y = t.pool3d(x, PoolMode::Max, [2, 2, 2]).unwrap();
    let l = t.sum(y);
    t.backward(l).unwrap();
    let g = t.grad(x).unwrap().data().to_vec();
    assert_eq!(g, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn average_pool_spreads_gradient_uniformly() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64));
    let y = t.pool3d(x, PoolMode::Average, [2, 2, 2]).unwrap();
    let l = t.sum(y);
    t.backward(l).unwrap();
    assert!(t.grad(x).unwrap().data().iter().all(|g| *g == 0.125));
}

/// Two-pass mean and variance per group, then affine.
fn group_norm_oracle(x: &Tensor<f64>, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let c = x.shape()[0];
    let per_c = x.len() / c;
    let per_g = per_c * (c / groups);
    let mut out = vec![0.0; x.len()];
    for g in 0..groups {
        let s = &x.data()[g * per_g..(g + 1) * per_g];
        let mean = s.iter().sum::<f64>() / per_g as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per_g as f64;
        for (k, v) in s.iter().enumerate() {
            let ch = (g * per_g + k) / per_c;
            out[g * per_g + k] = gamma[ch] * (v - mean) / (var + eps).sqrt() + beta[ch];
        }
    }
    out
}

fn run_group_norm(
    x: &Tensor<f64>,
    groups: usize,
    gamma: &Tensor<f64>,
    beta: &Tensor<f64>,
) -> Result<Tensor<f64>, NumericsError> {
    let mut t = Tape::new();
    let (xv, g, b) = (t.constant(x.clone()), t.constant(gamma.clone()), t.constant(beta.clone()));
    let y = t.group_norm(xv, groups, g, b, 1e-5)?;
    Ok(t.value(y).clone())
}

#[test]
fn group_norm_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[8, 4, 4, 4]);
    let gamma = rand_tensor(&mut rng, &[8]);
    let beta = rand_tensor(&mut rng, &[8]);
    let y = run_group_norm(&x, 4, &gamma, &beta).unwrap();
    let oracle = group_norm_oracle(&x, 4, gamma.data(), beta.data(), 1e-5);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn group_norm_standardizes_and_flattens_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(vec![8, 3, 5, 5], |_| rng.random_range(-4.0..9.0));
    let (ones, zeros) = (Tensor::full(vec![8], 1.0), Tensor::zeros(vec![8]));
    let y = run_group_norm(&x, 4, &ones, &zeros).unwrap();
    let per_g = y.len() / 4;
    for g in y.data().chunks(per_g) {
        let mean = g.iter().sum::<f64>() / per_g as f64;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per_g as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
    let y = run_group_norm(&Tensor::full(vec![8, 3, 5, 5], 7.0), 4, &ones, &zeros).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    assert!(run_group_norm(&x, 3, &ones, &zeros).is_err());
}

#[test]
fn activation_definitions() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap());
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 2.0, 0.0]);
    let s = t.sigmoid(x);
    assert_eq!(t.value(s).data()[2], 0.5);
    assert!(t.activation(x, Activation::SoftmaxTemporal).is_err());
    let z = t.constant(Tensor::zeros(vec![1, 4, 1, 1]));
    let p = t.activation(z, Activation::SoftmaxTemporal).unwrap();
    assert_eq!(t.value(p).data(), &[0.25; 4]);
}

#[test]
fn linear_layers() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
    let w = t.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, -3.0, 0.25, 4.0, 5.0]).unwrap());
    let b = t.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
    let y = t.linear(x, w, b).unwrap();
    let expect = [0.5 - 4.0 + 0.1, -1.5 - 0.5 + 0.2, 2.0 - 10.0 + 0.3];
    for (a, e) in t.value(y).data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-12);
    }
    let eye = t.constant(Tensor::from_fn(vec![2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 }));
    let zb = t.constant(Tensor::zeros(vec![2]));
    let y = t.linear(x, eye, zb).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, -2.0]);
    assert!(t.linear(x, w, zb).is_err());

    let mut h = t.constant(Tensor::full(vec![6144], 0.01));
    for (m, n) in [(512, 6144), (128, 512), (1, 128)] {
        let w = t.constant(Tensor::full(vec![m, n], 0.001));
        let b = t.constant(Tensor::zeros(vec![m]));
        h = t.linear(h, w, b).unwrap();
        assert_eq!(t.shape(h), &[m]);
    }
}

#[test]
fn backward_basics() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
    let l = t.sum(x);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    // Repeated backward accumulates.
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    assert!(matches!(t.backward(sq), Err(NumericsError::NonScalarLoss { .. })));

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let c = t.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let l = t.sum(c);
    t.backward(l).unwrap();
    assert!(t.grad(x).is_none_or(|g| g.data().iter().all(|v| *v == 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// ⟨conv_s(x, w), y⟩ = ⟨x, deconv_s(y, w)⟩ with the strided convolution from the oracle.
    #[test]
    fn deconv_is_adjoint_of_strided_conv(
        seed in any::<u64>(),
        c_in in 1usize..3, c_out in 1usize..3,
        kt in 1usize..4, kh in 1usize..4,
        st in 1usize..3,
        t_len in 4usize..8, hw in 3usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = [rng.random_range(0..kt), rng.random_range(0..kh), 0];
        let x = rand_tensor(&mut rng, &[c_in, t_len, hw, hw]);
        let w = rand_tensor(&mut rng, &[c_out, c_in, kt, kh, kh]);
        let fwd = naive_conv(&x, &w, &vec![0.0; c_out], [st, 1, 1], pad);
        // Conv with floor division drops trailing inputs; the adjoint only exists when
        // the deconvolution reproduces the input extent exactly.
        let back_t = (fwd.shape()[1] - 1) * st + kt;
        prop_assume!(back_t >= 2 * pad[0] && back_t - 2 * pad[0] == t_len);
        prop_assume!(fwd.shape()[2] + kh > 2 * pad[1]);
        let y = rand_tensor(&mut rng, fwd.shape());
        // Deconv weight is [C_in_deconv, C_out_deconv, ...] = the conv weight's own layout.
        let back = run_deconv(&y, &w, &Tensor::zeros(vec![c_in]), [st, 1, 1], pad).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let lhs = fwd.dot(&y);
        let rhs = x.dot(&back);
        prop_assert!((lhs - rhs).abs() <= 1e-6 * (lhs.abs() + rhs.abs() + 1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn conv_matches_direct_summation(
        seed in any::<u64>(),
        c_in in 1usize..4, c_out in 1usize..4,
        kt in 1usize..4, kh in 1usize..4,
        t_len in 3usize..6, hw in 3usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = [rng.random_range(0..kt), rng.random_range(0..kh), rng.random_range(0..kh)];
        let x = rand_tensor(&mut rng, &[c_in, t_len, hw, hw]);
        let w = rand_tensor(&mut rng, &[c_out, c_in, kt, kh, kh]);
        let b = rand_tensor(&mut rng, &[c_out]);
        let y = run_conv(&x, &w, &b, pad).unwrap();
        let o = naive_conv(&x, &w, b.data(), [1, 1, 1], pad);
        prop_assert_eq!(y.shape(), o.shape());
        prop_assert_eq!(y.shape()[1], t_len + 2 * pad[0] + 1 - kt);
        for (a, e) in y.data().iter().zip(o.data()) {
            prop_assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_is_a_distribution_for_any_finite_logits(
        logits in proptest::collection::vec(-1e4f64..1e4, 12),
        scale in prop_oneof![Just(1e-3), Just(1.0), Just(1e3)],
    ) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 6, 1, 2], logits.iter().map(|v| v * scale).collect()).unwrap());
        let p = t.activation(x, Activation::SoftmaxTemporal).unwrap();
        let d = t.value(p).data();
        for px in 0..2 {
            let s: f64 = (0..6).map(|k| d[k * 2 + px]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(d.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn forward_ops_are_finite_and_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::<f32>::new();
            let x = t.constant(Tensor::from_fn(vec![4, 8, 3, 3], |_| rng.random_range(-50.0f32..50.0)));
            let w = t.constant(Tensor::from_fn(vec![4, 4, 3, 3, 3], |_| rng.random_range(-1.0f32..1.0)));
            let b = t.constant(Tensor::zeros(vec![4]));
            let y = t.conv3d(x, w, b, [1, 1, 1]).unwrap();
            let g = t.constant(Tensor::full(vec![4], 1.0f32));
            let be = t.constant(Tensor::zeros(vec![4]));
            let y = t.group_norm(y, 4, g, be, 1e-5).unwrap();
            let y = t.relu(y);
            let y = t.pool3d(y, PoolMode::Max, [2, 1, 1]).unwrap();
            let wd = t.constant(Tensor::from_fn(vec![4, 1, 6, 3, 3], |_| rng.random_range(-1.0f32..1.0)));
            let bd = t.constant(Tensor::zeros(vec![1]));
            let y = t.deconv3d(y, wd, bd, [2, 1, 1], [2, 1, 1]).unwrap();
            let y = t.activation(y, Activation::SoftmaxTemporal).unwrap();
            t.value(y).clone()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.is_finite());
        prop_assert_eq!(a.shape(), &[1, 8, 3, 3]);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn average_pool_of_constant_is_constant(c in -1e3f64..1e3, k in 1usize..4) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(vec![2, 2 * k, k, 3 * k], c));
        let y = t.pool3d(x, PoolMode::Average, [k, k, k]).unwrap();
        prop_assert_eq!(t.shape(y), &[2, 2, 1, 3]);
        for v in t.value(y).data() {
            prop_assert!((v - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }
}
