use dapcal::nnet::{param_count, Activation, Loss, Mlp};
use ndarray::{array, Array2};
use proptest::prelude::*;

fn finite_difference_error(net: &mut Mlp, x: &Array2<f64>, y: &[f64], loss: Loss) -> f64 {
    let (_, grad) = net.grad_loss(x.view(), y, loss).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, &g) in grad.iter().enumerate() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + h;
        let up = net.grad_loss(x.view(), y, loss).unwrap().0;
        net.params_mut()[i] = orig - h;
        let down = net.grad_loss(x.view(), y, loss).unwrap().0;
        net.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

#[test]
fn forward_matches_scalar_evaluation() {
    let params: Vec<f64> = (0..param_count(&[2, 3, 2])).map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0).collect();
    let net = Mlp::from_params(&[2, 3, 2], Activation::Tanh, params.clone()).unwrap();
    let x = [0.3, -1.2];
    let (w1, rest) = params.split_at(6);
    let (b1, rest) = rest.split_at(3);
    let (w2, b2) = rest.split_at(6);
    let h: Vec<f64> = (0..3).map(|j| (w1[2 * j] * x[0] + w1[2 * j + 1] * x[1] + b1[j]).tanh()).collect();
    let expect: Vec<f64> = (0..2).map(|k| (0..3).map(|j| w2[3 * k + j] * h[j]).sum::<f64>() + b2[k]).collect();
    let out = net.forward(array![[x[0], x[1]]].view()).unwrap();
    for k in 0..2 {
        assert!((out[[0, k]] - expect[k]).abs() < 1e-14);
    }
    let feats = net.features(array![[x[0], x[1]]].view()).unwrap();
    for j in 0..3 {
        assert!((feats[[0, j]] - h[j]).abs() < 1e-14);
    }
}

#[test]
fn features_equal_truncated_forward() {
    let net = Mlp::new(&[3, 5, 4, 2], Activation::Relu, 9).unwrap();
    let cut = param_count(&[3, 5, 4]);
    let trunk = Mlp::from_params(&[3, 5, 4], Activation::Relu, net.params()[..cut].to_vec()).unwrap();
    let x = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - 2.0) * 0.4 + j as f64 * 0.3);
    // The trunk's last layer is affine, so apply the activation by hand.
    let expect = trunk.forward(x.view()).unwrap().mapv(|v| v.max(0.0));
    assert_eq!(net.features(x.view()).unwrap(), expect);
}

#[test]
fn zero_weights_give_zero_tanh_features() {
    let net = Mlp::zeros(&[2, 4, 3], Activation::Tanh).unwrap();
    let f = net.features(array![[1.0, -2.0], [3.0, 0.5]].view()).unwrap();
    assert!(f.iter().all(|&v| v == 0.0));
}

#[test]
fn initialization_is_bounded_by_glorot_limit() {
    let net = Mlp::new(&[4, 10, 3], Activation::Tanh, 5).unwrap();
    let l0 = (6.0f64 / 14.0).sqrt();
    let w0 = &net.params()[net.layer_range(0)][..40];
    assert!(w0.iter().all(|v| v.abs() <= l0));
    assert!(w0.iter().any(|&v| v != 0.0));
}

#[test]
fn non_finite_loss_reports_row() {
    let net = Mlp::from_params(&[1, 1], Activation::Tanh, vec![1.0, 0.0]).unwrap();
    let err = net.grad_loss(array![[1e300], [1.0]].view(), &[0.0, 0.0], Loss::Mse).unwrap_err();
    assert!(matches!(err, dapcal::Error::Numerical { index: 0, .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gradients_match_finite_differences(
        hidden in prop::collection::vec(1usize..6, 1..3),
        dim in 1usize..4,
        loss_kind in 0usize..3,
        seed in any::<u64>(),
    ) {
        let out = if loss_kind == 0 { 3 } else { 1 };
        let mut sizes = vec![dim];
        sizes.extend(&hidden);
        sizes.push(out);
        let mut net = Mlp::new(&sizes, Activation::Tanh, seed).unwrap();
        let x = Array2::from_shape_fn((5, dim), |(i, j)| ((i * 3 + j * 5 + seed as usize % 7) % 9) as f64 / 4.0 - 1.0);
        let y: Vec<f64> = (0..5).map(|i| if loss_kind == 0 { (i % 3) as f64 } else { i as f64 * 0.3 - 0.5 }).collect();
        let loss = match loss_kind {
            0 => Loss::CrossEntropy,
            1 => Loss::GaussianNll { std: 0.7 },
            _ => Loss::Mse,
        };
        prop_assert!(finite_difference_error(&mut net, &x, &y, loss) < 1e-4);
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let net = Mlp::new(&[3, 6, 2], Activation::Relu, seed).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| scale * (i as f64 - j as f64));
        let a = net.forward(x.view()).unwrap();
        let b = net.forward(x.view()).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
