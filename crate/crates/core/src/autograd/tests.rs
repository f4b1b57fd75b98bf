use super::*;
use crate::gradcheck::grad_check;
use crate::verify::random;

fn constant_tensor(shape: &[usize], v: f64) -> Tensor<f64> {
    Tensor::full(shape, v).unwrap()
}

#[test]
fn conv2d_identity_kernel() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(random(&[2, 1, 4, 5], 1));
    let w = t.constant(constant_tensor(&[1, 1, 1, 1], 1.0));
    let b = t.constant(constant_tensor(&[1], 0.0));
    let y = t.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(t.value(y), t.value(x));
}

#[test]
fn conv2d_all_ones_counts_valid_taps() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(constant_tensor(&[1, 1, 3, 3], 1.0));
    let w = t.constant(constant_tensor(&[1, 1, 3, 3], 1.0));
    let y = t.conv2d(x, w, None, 1, 1).unwrap();
    let v = t.value(y).data();
    assert_eq!(v[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(v[corner], 4.0);
    }
    assert_eq!(v[1], 6.0);
}

#[test]
fn conv2d_channel_mismatch_names_axis() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(random(&[1, 2, 4, 4], 1));
    let w = t.constant(random(&[3, 3, 3, 3], 2));
    let err = t.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("axis 1"), "{err}");
    let w_even = t.constant(random(&[3, 2, 2, 2], 2));
    assert!(t.conv2d(x, w_even, None, 1, 0).is_err());
}

#[test]
fn conv3d_identity_and_linearity() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(random(&[1, 1, 3, 4, 4], 3));
    let w = t.constant(constant_tensor(&[1, 1, 1, 1, 1], 1.0));
    let y = t.conv3d(x, w, None, [1; 3], [0; 3]).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let c = t.constant(constant_tensor(&[1, 1, 2, 3, 3], 1.5));
    let w = t.constant(constant_tensor(&[1, 1, 1, 1, 1], -2.0));
    let y = t.conv3d(c, w, None, [1; 3], [0; 3]).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == -3.0));
}

#[test]
fn conv2d_equals_conv3d_with_unit_depth_kernel() {
    let x = random::<f32>(&[2, 3, 6, 7], 4);
    let w = random::<f32>(&[4, 3, 3, 3], 5);
    let b = random::<f32>(&[4], 6);
    let mut t = Tape::new();
    let x2 = t.constant(x.clone());
    let w2 = t.constant(w.clone());
    let b2 = t.constant(b.clone());
    let y2 = t.conv2d(x2, w2, Some(b2), 2, 1).unwrap();
    let x3 = t.constant(x.reshape(&[2, 3, 1, 6, 7]).unwrap());
    let w3 = t.constant(w.reshape(&[4, 3, 1, 3, 3]).unwrap());
    let y3 = t.conv3d(x3, w3, Some(b2), [1, 2, 2], [0, 1, 1]).unwrap();
    assert_eq!(t.value(y3).data(), t.value(y2).data());
    assert_eq!(t.shape(y3), &[2, 4, 1, 3, 4]);
}

#[test]
fn conv_transpose_z_identity_and_replication() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(random(&[1, 2, 3, 2, 2], 7));
    let mut eye = vec![0.0; 4];
    eye[0] = 1.0;
    eye[3] = 1.0;
    let w = t.constant(Tensor::new(&[2, 2, 1, 1, 1], eye).unwrap());
    let y = t.conv_transpose_z(x, w, 1).unwrap();
    assert_eq!(t.value(y), t.value(x));

    // slices [a, b] with taps [1, 1] -> [a, a, b, b]
    let a = 1.5;
    let b = -0.5;
    let x = t.constant(Tensor::new(&[1, 1, 2, 1, 2], vec![a, a, b, b]).unwrap());
    let w = t.constant(constant_tensor(&[1, 1, 2, 1, 1], 1.0));
    let y = t.conv_transpose_z(x, w, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 4, 1, 2]);
    assert_eq!(t.value(y).data(), &[a, a, a, a, b, b, b, b]);

    let w_bad = t.constant(constant_tensor(&[1, 1, 3, 1, 1], 1.0));
    assert!(matches!(t.conv_transpose_z(x, w_bad, 2), Err(SspError::Config(_))));
}

#[test]
fn batch_norm_constant_channel_yields_shift() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(constant_tensor(&[2, 1, 3, 3], 4.0));
    let scale = t.constant(constant_tensor(&[1], 2.0));
    let shift = t.constant(constant_tensor(&[1], 0.25));
    let (y, stats) = t.batch_norm(x, scale, shift, BatchNormMode::Train).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.25));
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![4.0]);
    assert_eq!(stats.var, vec![0.0]);
}

#[test]
fn batch_norm_fixed_point() {
    // one channel holding +-1: zero mean, unit population variance
    let data: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[2, 1, 8], data).unwrap());
    let scale = t.constant(constant_tensor(&[1], 1.0));
    let shift = t.constant(constant_tensor(&[1], 0.0));
    let (y, _) = t.batch_norm(x, scale, shift, BatchNormMode::Train).unwrap();
    assert!(t.value(y).max_abs_diff(t.value(x)).unwrap() < 1e-5);
}

#[test]
fn batch_norm_eval_uses_initial_stats() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(random(&[1, 2, 3], 8));
    let scale = t.constant(constant_tensor(&[2], 1.0));
    let shift = t.constant(constant_tensor(&[2], 0.0));
    let (y, stats) = t.batch_norm(x, scale, shift, BatchNormMode::Eval { mean: &[0.0, 0.0], var: &[1.0, 1.0] }).unwrap();
    assert!(stats.is_none());
    let k = 1.0 / (1.0f64 + BN_EPS).sqrt();
    for (a, b) in t.value(y).data().iter().zip(t.value(x).data()) {
        assert!((a - b * k).abs() < 1e-15);
    }
}

#[test]
fn relu_values_and_mask() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let neg = t.constant(Tensor::full(&[4], -0.5).unwrap());
    let y = t.relu(neg);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mse_examples() {
    let mut t = Tape::<f64>::new();
    let p = t.constant(Tensor::new(&[2], vec![0.0, 2.0]).unwrap());
    let q = t.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
    let l = t.mse_loss(p, q).unwrap();
    assert_eq!(t.value(l).data(), &[1.0]);
    let l = t.mse_loss(p, p).unwrap();
    assert_eq!(t.value(l).data(), &[0.0]);
    let r = t.constant(Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap());
    assert!(matches!(t.mse_loss(p, r), Err(SspError::Contract { .. })));
}

#[test]
fn injected_backward_fault_is_detected() {
    // y = 3x with the analytic gradient scaled by 1.1 through an extra branch
    // that contributes to the gradient but not to the value.
    let x = random::<f64>(&[6], 700);
    let r = grad_check(
        |t, v| {
            let y = t.scale(v[0], 3.0);
            let s = t.sum(y);
            let ghost = t.scale(v[0], 0.3);
            let ghost_sum = t.sum(ghost);
            let cancel = t.constant(Tensor::scalar(-t.value(ghost_sum).data()[0]));
            let zero = t.add(ghost_sum, cancel)?;
            t.add(s, zero)
        },
        &[x],
        1e-4,
    )
    .unwrap();
    assert!(r.max_relative_error > 0.05, "{r:?}");
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(random(&[3], 1));
    assert!(t.backward(x).is_err());
}
