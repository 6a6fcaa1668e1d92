mod common;

use std::sync::Arc;

use ccnet::attention::{backward_once, backward_recurrent, forward_once, forward_recurrent};
use ccnet::cca2d::{cca_backward, cca_forward, rcca_backward, rcca_forward, Grid2D};
use ccnet::cca3d::{rcca3d_backward, rcca3d_forward};
use ccnet::losses::{cross_entropy_seg, LabelMap};
use ccnet::oracles::{gradient_fd, gradient_fd4, jacobian_fd, max_relative_error, FD4_STEP, FD_STEP};
use ccnet::{CCAttentionParams, ProjectionWeights, Tensor};
use common::{params, randn, unflatten};

/// Analytic and numeric gradients of `loss(forward(x; p))` over `[x, wq, wk, wv]`.
fn input_and_weight_gradients(
    x: &Tensor,
    p: &CCAttentionParams,
    forward: impl Fn(&Tensor, &CCAttentionParams) -> Tensor + Sync,
    analytic: impl Fn(&Tensor, &CCAttentionParams) -> (Tensor, CCAttentionParams),
    loss: impl Fn(&Tensor) -> f64 + Sync,
    fourth_order: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (dx, dp) = analytic(x, p);
    let mut a = dx.into_data();
    a.extend(dp.flat());
    let mut flat = x.data().to_vec();
    flat.extend(p.flat());
    let xl = x.len();
    let f = |v: &[f64]| {
        let xv = Tensor::new(x.shape().to_vec(), v[..xl].to_vec()).unwrap();
        loss(&forward(&xv, &unflatten(p, &v[xl..])))
    };
    let n = if fourth_order {
        gradient_fd4(f, &flat, FD4_STEP)
    } else {
        gradient_fd(f, &flat, FD_STEP)
    };
    (a, n)
}

fn sum_of_squares(y: &Tensor) -> f64 {
    y.data().iter().map(|v| v * v).sum()
}

#[test]
fn cca_sum_of_squares_matches_two_point_differences() {
    for seed in 0..3 {
        let p = params(4, 2, seed);
        let x = randn(&[4, 3, 4], 100 + seed);
        let (a, n) = input_and_weight_gradients(
            &x,
            &p,
            |x, p| cca_forward(x, p).unwrap().0,
            |x, p| {
                let (y, cache) = cca_forward(x, p).unwrap();
                cca_backward(&cache, &y.scale(2.0)).unwrap()
            },
            sum_of_squares,
            false,
        );
        let (err, at) = max_relative_error(&a, &n);
        assert!(err < 1e-5, "seed {seed}: {err:e} at {at}");
    }
}

#[test]
fn recurrent_gradients_match_finite_differences() {
    for loops in [2, 3] {
        for seed in 0..3 {
            let p = params(4, 2, seed);
            let x = randn(&[4, 3, 3], 200 + seed);
            let (a, n) = input_and_weight_gradients(
                &x,
                &p,
                |x, p| rcca_forward(x, p, loops).unwrap().0,
                |x, p| {
                    let (y, cache) = rcca_forward(x, p, loops).unwrap();
                    rcca_backward(&cache, &y.scale(2.0)).unwrap()
                },
                sum_of_squares,
                true,
            );
            let (err, at) = max_relative_error(&a, &n);
            assert!(err < 1e-5, "R={loops} seed {seed}: {err:e} at {at}");
        }
    }
}

#[test]
fn one_loop_recurrent_backward_is_the_plain_backward() {
    let p = params(4, 2, 7);
    let x = randn(&[4, 3, 4], 8);
    let g = randn(&[4, 3, 4], 9);
    let (_, cache) = rcca_forward(&x, &p, 1).unwrap();
    let (dx1, dp1) = cca_backward(&cache, &g).unwrap();
    let (dx2, dp2) = rcca_backward(&cache, &g).unwrap();
    assert_eq!(dx1, dx2);
    assert_eq!(dp1, dp2);
}

#[test]
fn zero_value_projection_still_has_dense_query_key_gradients() {
    let mut p = params(4, 2, 11);
    p.wv = ProjectionWeights::zeros(4, 4).unwrap();
    let x = randn(&[4, 3, 3], 12);
    let g = randn(&[4, 3, 3], 13);
    let (a, n) = input_and_weight_gradients(
        &x,
        &p,
        |x, p| rcca_forward(x, p, 2).unwrap().0,
        |x, p| {
            let (_, cache) = rcca_forward(x, p, 2).unwrap();
            rcca_backward(&cache, &g).unwrap()
        },
        |y| y.dot(&g).unwrap(),
        true,
    );
    let (err, at) = max_relative_error(&a, &n);
    assert!(err < 1e-5, "{err:e} at {at}");
    // output is exactly x, so dL/dx is g; the value weights still receive gradient
    let (_, cache) = rcca_forward(&x, &p, 2).unwrap();
    let (dx, dp) = rcca_backward(&cache, &g).unwrap();
    assert!(dx.max_abs_diff(&g).unwrap() < 1e-15);
    assert!(dp.wv.weight().iter().any(|&v| v != 0.0));
}

#[test]
fn volume_gradients_match_finite_differences() {
    for loops in [1, 2] {
        for seed in 0..3 {
            let p = params(3, 2, seed);
            let x = randn(&[3, 2, 2, 3], 300 + seed);
            let g = randn(&[3, 2, 2, 3], 400 + seed);
            let (a, n) = input_and_weight_gradients(
                &x,
                &p,
                |x, p| rcca3d_forward(x, p, loops).unwrap().0,
                |x, p| {
                    let (_, cache) = rcca3d_forward(x, p, loops).unwrap();
                    rcca3d_backward(&cache, &g).unwrap()
                },
                |y| y.dot(&g).unwrap(),
                true,
            );
            let (err, at) = max_relative_error(&a, &n);
            assert!(err < 1e-5, "R={loops} seed {seed}: {err:e} at {at}");
        }
    }
}

/// Runs two loops with independent copies of the parameters and checks
/// that the shared gradient is the sum of the per-copy gradients.
#[test]
fn shared_weight_gradient_is_sum_over_unshared_clones() {
    for seed in 0..3 {
        let p = params(5, 2, seed);
        let (p1, p2) = (p.clone(), p.clone());
        let x = randn(&[5, 3, 4], 500 + seed);
        let g = randn(&[5, 3, 4], 600 + seed);
        let table = Grid2D::new(3, 4).unwrap().table();

        let (h1, c1) = forward_once(&x, &p1, &table).unwrap();
        let (y, c2) = forward_once(&h1, &p2, &table).unwrap();
        let (dh1, dp2) = backward_once(&c2, &p2, &g).unwrap();
        let (dx_unshared, dp1) = backward_once(&c1, &p1, &dh1).unwrap();

        let (y_shared, cache) = forward_recurrent(&x, &p, 2, &table).unwrap();
        assert_eq!(y, y_shared);
        let (dx, dp) = backward_recurrent(&cache, &g).unwrap();
        let mut summed = dp1.clone();
        summed.accumulate(&dp2);
        let diff = dp
            .flat()
            .iter()
            .zip(summed.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-10, "seed {seed}: {diff:e}");
        assert!(dx.max_abs_diff(&dx_unshared).unwrap() <= 1e-10);
    }
}

#[test]
fn backward_jacobian_matches_finite_difference_jacobian() {
    let p = params(3, 2, 21);
    let x = randn(&[3, 2, 3], 22);
    let numeric = jacobian_fd(|t| cca_forward(t, &p).unwrap().0, &x, FD_STEP);
    let (y, cache) = cca_forward(&x, &p).unwrap();
    let mut analytic = vec![0.0; numeric.rows * numeric.cols];
    for row in 0..y.len() {
        let mut e = Tensor::zeros(y.shape()).unwrap();
        e.data_mut()[row] = 1.0;
        let (dx, _) = cca_backward(&cache, &e).unwrap();
        analytic[row * numeric.cols..(row + 1) * numeric.cols].copy_from_slice(dx.data());
    }
    let (err, at) = max_relative_error(&analytic, &numeric.data);
    assert!(err < 1e-5, "{err:e} at {at}");
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let logits = randn(&[4, 3, 3], 700 + seed);
        let ids: Vec<u8> = (0..9).map(|i| [0, 1, 2, 3, 255][(i + seed as usize) % 5]).collect();
        let labels = LabelMap::new(3, 3, ids).unwrap();
        let (_, g) = cross_entropy_seg(&logits, &labels).unwrap();
        let n = gradient_fd4(
            |v| {
                let t = Tensor::new(vec![4, 3, 3], v.to_vec()).unwrap();
                cross_entropy_seg(&t, &labels).unwrap().0
            },
            logits.data(),
            FD4_STEP,
        );
        let (err, at) = max_relative_error(g.data(), &n);
        assert!(err < 1e-6, "seed {seed}: {err:e} at {at}");
    }
}

#[test]
fn shared_table_is_reused_across_loops() {
    let p = params(3, 1, 31);
    let x = randn(&[3, 2, 2], 32);
    let table = Grid2D::new(2, 2).unwrap().table();
    let (_, cache) = forward_recurrent(&x, &p, 3, &table).unwrap();
    assert_eq!(Arc::strong_count(&table), 4);
    assert_eq!(cache.loops.len(), 3);
}
