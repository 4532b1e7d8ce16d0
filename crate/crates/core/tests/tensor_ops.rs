use proptest::prelude::*;
use vitae::tensor::{conv2d_forward, ActivationKind, BatchNormMode, ConvSpec};
use vitae::{Error, Graph, Tensor, Var};

mod common;
use common::{max_diff, naive_conv, naive_matmul, random};

/// Central-difference check of `build` with respect to every input, against
/// the graph's analytic gradients. The scalar objective is `Σ out ⊙ R` for a
/// fixed random `R`, so every output element contributes.
fn op_gradcheck(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let objective = |vals: &[Tensor<f64>], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let r = g.constant(random(g.shape(out), 99));
        let prod = g.mul(out, r).unwrap();
        let root = g.sum(prod);
        let value = g.value(root).data()[0];
        if !want_grad {
            return (value, vec![]);
        }
        g.backward(root).unwrap();
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], |x| x.data().to_vec()))
            .collect();
        (value, grads)
    };
    let (_, analytic) = objective(inputs, true);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            numeric.push((objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * eps));
        }
        let scale = analytic[i].iter().chain(&numeric).fold(1e-12f64, |m, v| m.max(v.abs()));
        worst = worst.max(max_diff(&analytic[i], &numeric) / scale);
    }
    worst
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let a = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[11.0]);
    assert!(matches!(g.matmul(a, a), Err(Error::Dimension(_))));
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(&[5, 7], 1);
    let b = random(&[7, 3], 2);
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(va, vb).unwrap();
    assert!(max_diff(g.value(y).data(), &naive_matmul(a.data(), b.data(), 5, 7, 3)) < 1e-12);
}

#[test]
fn matmul_and_linear_gradients() {
    let err = op_gradcheck(&[random(&[3, 4], 3), random(&[4, 2], 4)], |g, v| g.matmul(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "{err}");
    let err = op_gradcheck(&[random(&[2, 3, 4], 5), random(&[4, 5], 6), random(&[5], 7)], |g, v| {
        g.linear(v[0], v[1], Some(v[2])).unwrap()
    });
    assert!(err < 1e-6, "{err}");
    let err = op_gradcheck(&[random(&[2, 3, 4], 8), random(&[2, 5, 4], 9)], |g, v| g.bmm(v[0], v[1], true).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_identity_kernel() {
    let x = random(&[2, 3, 5, 4], 10);
    let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let y = conv2d_forward(&x, &w, None, ConvSpec::square(1)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_stem_output_size() {
    let spec = ConvSpec::square(7).with_stride(4).with_padding(3);
    assert_eq!(spec.output_size(224, 224).unwrap(), (56, 56));
}

#[test]
fn conv_dilated_strided_matches_oracle() {
    let x = random(&[1, 2, 9, 9], 11);
    let w = random(&[3, 2, 3, 3], 12);
    let b = random(&[3], 13);
    let spec = ConvSpec::square(3).with_dilation(3).with_stride(2).with_padding(3);
    let y = conv2d_forward(&x, &w, Some(&b), spec).unwrap();
    assert!(max_diff(y.data(), &naive_conv(&x, &w, Some(&b), spec)) < 1e-10);
}

#[test]
fn conv_gradients() {
    let spec = ConvSpec::square(3).with_stride(2).with_dilation(2).with_padding(2).with_groups(2);
    let err = op_gradcheck(
        &[random(&[2, 4, 7, 6], 14), random(&[6, 2, 3, 3], 15), random(&[6], 16)],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec).unwrap(),
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_errors() {
    let x = random(&[1, 3, 4, 4], 0);
    let w = random(&[4, 3, 3, 3], 0);
    assert!(matches!(
        conv2d_forward(&x, &w, None, ConvSpec::square(3).with_groups(2)),
        Err(Error::Dimension(_))
    ));
    let big = random(&[1, 3, 9, 9], 0);
    assert!(matches!(conv2d_forward(&x, &big, None, ConvSpec::square(9)), Err(Error::Dimension(_)) | Err(Error::Config(_))));
    let w9 = random(&[1, 3, 9, 9], 0);
    assert!(matches!(conv2d_forward(&x, &w9, None, ConvSpec::square(9)), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_oracle_across_geometry(
        stride in 1usize..=3,
        dilation in 1usize..=4,
        groups in 1usize..=2,
        padding in 0usize..=3,
        k in 1usize..=3,
        h in 6usize..=10,
        w in 6usize..=10,
        seed in any::<u64>(),
    ) {
        let spec = ConvSpec::square(k).with_stride(stride).with_dilation(dilation).with_padding(padding).with_groups(groups);
        prop_assume!(spec.output_size(h, w).is_ok());
        let x = random(&[2, 2 * groups, h, w], seed);
        let wt = random(&[2 * groups, 2, k, k], seed.wrapping_add(1));
        let b = random(&[2 * groups], seed.wrapping_add(2));
        let y = conv2d_forward(&x, &wt, Some(&b), spec).unwrap();
        prop_assert!(max_diff(y.data(), &naive_conv(&x, &wt, Some(&b), spec)) < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[rows, cols], seed).reshape(&[rows, cols]).unwrap());
        let scaled = g.scale(x, 30.0);
        let y = g.softmax_lastdim(scaled).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_shift_invariant(shift in -50.0f64..50.0, seed in any::<u64>()) {
        let logits = random(&[3, 5], seed);
        let shifted = Tensor::from_fn(&[3, 5], |i| logits.data()[i] + shift * (1 + i / 5) as f64);
        let labels = [0, 4, 2];
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(logits), g.constant(shifted));
        let la = g.cross_entropy(a, &labels).unwrap();
        let lb = g.cross_entropy(b, &labels).unwrap();
        prop_assert!((g.value(la).data()[0] - g.value(lb).data()[0]).abs() < 1e-9);
    }

    #[test]
    fn img2seq_seq2img_inverse(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let x = random(&[n, c, h, w], seed);
        let mut g = Graph::<f64>::new();
        let v = g.constant(x.clone());
        let t = g.img2seq(v).unwrap();
        prop_assert_eq!(g.shape(t), &[n, h * w, c][..]);
        let back = g.seq2img(t, h, w).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }
}

#[test]
fn softmax_edge_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[3], &[0.0, 0.0, 0.0]).unwrap());
    let y = g.softmax_lastdim(x).unwrap();
    assert!(g.value(y).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    let x = g.constant(Tensor::from_f64(&[2], &[1000.0, 0.0]).unwrap());
    let y = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    let err = op_gradcheck(&[random(&[4, 6], 17)], |g, v| g.softmax_lastdim(v[0]).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layernorm_values_and_gradient() {
    let mut g = Graph::<f64>::new();
    let gamma = g.constant(Tensor::ones(&[3]));
    let beta = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::from_f64(&[1, 3], &[5.0, 5.0, 5.0]).unwrap());
    let y = g.layernorm(x, gamma, beta, 1e-6).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let x = g.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
    let y = g.layernorm(x, gamma, beta, 1e-12).unwrap();
    let r = 1.5f64.sqrt();
    assert!(max_diff(g.value(y).data(), &[-r, 0.0, r]) < 1e-9);

    let err = op_gradcheck(&[random(&[2, 3, 5], 18), random(&[5], 19), random(&[5], 20)], |g, v| {
        g.layernorm(v[0], v[1], v[2], 1e-6).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batchnorm_modes() {
    let mut g = Graph::<f64>::new();
    let gamma = g.constant(Tensor::from_f64(&[2], &[2.0, 3.0]).unwrap());
    let beta = g.constant(Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap());
    let x = g.constant(Tensor::full(&[2, 2, 3, 3], 4.0));
    let (y, stats) = g.batchnorm2d(x, gamma, beta, BatchNormMode::Train, 1e-5).unwrap();
    assert!(stats.is_some());
    for (i, &v) in g.value(y).data().iter().enumerate() {
        assert_eq!(v, if (i / 9) % 2 == 0 { 0.5 } else { -1.0 });
    }

    let ones = g.constant(Tensor::ones(&[2]));
    let zeros = g.constant(Tensor::zeros(&[2]));
    let xr = random(&[2, 2, 3, 3], 21);
    let x = g.constant(xr.clone());
    let (y, stats) = g
        .batchnorm2d(x, ones, zeros, BatchNormMode::Eval { mean: &[0.0, 0.0], var: &[1.0, 1.0] }, 0.0)
        .unwrap();
    assert!(stats.is_none());
    assert_eq!(g.value(y), &xr);
}

#[test]
fn batchnorm_statistics_match_direct_computation() {
    let xr = random(&[3, 2, 4, 5], 22);
    let mut g = Graph::<f64>::new();
    let x = g.constant(xr.clone());
    let ones = g.constant(Tensor::ones(&[2]));
    let zeros = g.constant(Tensor::zeros(&[2]));
    let (_, stats) = g.batchnorm2d(x, ones, zeros, BatchNormMode::Train, 1e-5).unwrap();
    let stats = stats.unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| (0..4).flat_map(move |h| (0..5).map(move |w| (n, h, w))))
            .map(|(n, h, w)| xr.at(&[n, c, h, w]))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!((stats.mean[c] - m).abs() < 1e-12);
        assert!((stats.var[c] - var).abs() < 1e-12);
    }

    let err = op_gradcheck(&[random(&[3, 2, 2, 3], 23), random(&[2], 24), random(&[2], 25)], |g, v| {
        g.batchnorm2d(v[0], v[1], v[2], BatchNormMode::Train, 1e-5).unwrap().0
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn activations() {
    assert_eq!(ActivationKind::Silu.apply(0.0f64), 0.0);
    assert_eq!(ActivationKind::Gelu.apply(0.0f64), 0.0);
    assert_eq!(ActivationKind::Relu.apply(-1.0f64), 0.0);
    assert!((ActivationKind::Silu.apply(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
    for kind in [ActivationKind::Silu, ActivationKind::Gelu, ActivationKind::Relu, ActivationKind::Identity] {
        let mut x = random(&[64], 26);
        // Keep ReLU away from its kink.
        x.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + v.signum() * 0.01);
        let err = op_gradcheck(&[x], |g, v| g.activation(v[0], kind));
        assert!(err < 1e-6, "{kind:?}: {err}");
    }
}

#[test]
fn structural_ops() {
    let mut g = Graph::<f64>::new();
    let a = g.param(random(&[2, 3, 2, 2], 27));
    let b = g.param(random(&[2, 5, 2, 2], 28));
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.shape(c), &[2, 8, 2, 2]);
    assert_eq!(g.value(c).at(&[1, 4, 1, 0]), g.value(b).at(&[1, 1, 1, 0]));
    assert_eq!(g.value(c).at(&[1, 2, 0, 1]), g.value(a).at(&[1, 2, 0, 1]));
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));

    let t = g.constant(random(&[1, 5, 2], 29));
    assert!(matches!(g.seq2img(t, 2, 2), Err(Error::Dimension(_))));
    let sl = g.slice_tokens(t, 1, 3).unwrap();
    assert_eq!(g.value(sl).data(), &g.value(t).data()[2..8]);

    let err = op_gradcheck(&[random(&[2, 3, 4, 2], 30)], |g, v| {
        let s = g.img2seq(v[0]).unwrap();
        let s = g.slice_tokens(s, 2, 5).unwrap();
        let m = g.seq2img(s, 5, 1).unwrap();
        g.mean_spatial(m).unwrap()
    });
    assert!(err < 1e-6, "{err}");
    let err = op_gradcheck(&[random(&[2, 3, 4], 31), random(&[2, 1, 4], 32)], |g, v| g.concat(&[v[1], v[0]], 1).unwrap());
    assert!(err < 1e-6, "{err}");
    let err = op_gradcheck(&[random(&[2, 3, 4], 33), random(&[3, 4], 34)], |g, v| g.add_broadcast(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "{err}");
    let err = op_gradcheck(&[random(&[2, 6, 4], 35)], |g, v| {
        let s = g.split_heads(v[0], 2).unwrap();
        g.merge_heads(s, 2).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0, 12.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());

    assert!(matches!(g.backward(sq), Err(Error::Usage(_))));
}

#[test]
fn two_consumers_accumulate() {
    // y = 3x + x·x at x = 2 → dy/dx = 3 + 2x = 7 per element.
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[2], 2.0));
    let a = g.scale(x, 3.0);
    let b = g.mul(x, x).unwrap();
    let y = g.add(a, b).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[7.0, 7.0]);
}

#[test]
fn cross_entropy_values_and_gradient() {
    let mut g = Graph::<f64>::new();
    let uniform = g.constant(Tensor::zeros(&[2, 10]));
    let l = g.cross_entropy(uniform, &[3, 9]).unwrap();
    assert!((g.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);
    let peaked = g.constant(Tensor::from_fn(&[1, 4], |i| if i == 2 { 1000.0 } else { 0.0 }));
    let l = g.cross_entropy(peaked, &[2]).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-12);
    assert!(matches!(g.cross_entropy(peaked, &[4]), Err(Error::Data(_))));

    let err = op_gradcheck(&[random(&[3, 5], 36)], |g, v| g.cross_entropy(v[0], &[1, 0, 4]).unwrap());
    assert!(err < 1e-6, "{err}");
}
