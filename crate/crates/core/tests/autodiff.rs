mod common;

use common::*;
use paca_core::tape::{kernels, Tape};
use paca_core::{Error, Tensor};
use proptest::prelude::*;

const OP_TOL: f64 = 1e-6;

fn assert_grad(name: &str, err: f64) {
    assert!(err < OP_TOL, "{name}: relative gradient error {err:e}");
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64).unwrap());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn square_gradient_is_twice_input() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn non_scalar_and_detached_losses_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2]).unwrap());
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(c), Err(Error::DetachedLoss)));
}

#[test]
fn shared_input_accumulates() {
    // y = x + 3x (via two paths) -> dy/dx = 4
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
    let a = tape.scale(x, 3.0).unwrap();
    let y = tape.add(x, a).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn elementwise_and_linear_ops() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let a = uniform(&[3, 4], 1.0, &mut r);
        let b = uniform(&[3, 4], 1.0, &mut r);
        assert_grad(
            "add",
            grad_check(&[a.clone(), b.clone()], seed, |t, v| {
                t.add(v[0], v[1]).unwrap()
            }),
        );
        assert_grad(
            "mul",
            grad_check(&[a.clone(), b.clone()], seed, |t, v| {
                t.mul(v[0], v[1]).unwrap()
            }),
        );
        assert_grad(
            "scale",
            grad_check(std::slice::from_ref(&a), seed, |t, v| {
                t.scale(v[0], -1.7).unwrap()
            }),
        );
        let bias = uniform(&[4], 1.0, &mut r);
        assert_grad(
            "add_bias",
            grad_check(&[a.clone(), bias.clone()], seed, |t, v| {
                t.add_bias(v[0], v[1]).unwrap()
            }),
        );
        let w = uniform(&[4, 5], 1.0, &mut r);
        let wb = uniform(&[5], 1.0, &mut r);
        assert_grad(
            "matmul",
            grad_check(&[a.clone(), w.clone()], seed, |t, v| {
                t.matmul(v[0], v[1]).unwrap()
            }),
        );
        assert_grad(
            "linear",
            grad_check(&[a.clone(), w, wb], seed, |t, v| {
                t.linear(v[0], v[1], v[2]).unwrap()
            }),
        );
        assert_grad(
            "transpose",
            grad_check(std::slice::from_ref(&a), seed, |t, v| {
                t.transpose(v[0]).unwrap()
            }),
        );
        assert_grad(
            "reshape",
            grad_check(std::slice::from_ref(&a), seed, |t, v| {
                t.reshape(v[0], &[2, 6]).unwrap()
            }),
        );
        assert_grad(
            "sum",
            grad_check(std::slice::from_ref(&a), seed, |t, v| t.sum(v[0]).unwrap()),
        );
        assert_grad(
            "mean_rows",
            grad_check(std::slice::from_ref(&a), seed, |t, v| {
                t.mean_rows(v[0]).unwrap()
            }),
        );
        assert_grad(
            "concat_rows",
            grad_check(&[a, b], seed, |t, v| {
                t.concat_rows(&[v[0], v[1], v[0]]).unwrap()
            }),
        );
    }
}

#[test]
fn attention_shaped_ops() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let x = uniform(&[5, 6], 1.0, &mut r);
        assert_grad(
            "split_heads",
            grad_check(std::slice::from_ref(&x), seed, |t, v| {
                t.split_heads(v[0], 3).unwrap()
            }),
        );
        let h = uniform(&[2, 5, 3], 1.0, &mut r);
        assert_grad(
            "merge_heads",
            grad_check(std::slice::from_ref(&h), seed, |t, v| {
                t.merge_heads(v[0]).unwrap()
            }),
        );
        let k = uniform(&[2, 4, 3], 1.0, &mut r);
        assert_grad(
            "batch_matmul_nt",
            grad_check(&[h.clone(), k], seed, |t, v| {
                t.batch_matmul(v[0], v[1], true).unwrap()
            }),
        );
        let m = uniform(&[2, 3, 4], 1.0, &mut r);
        assert_grad(
            "batch_matmul_nn",
            grad_check(&[h, m], seed, |t, v| {
                t.batch_matmul(v[0], v[1], false).unwrap()
            }),
        );
    }
}

#[test]
fn nonlinear_ops() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let x = uniform(&[2, 3, 4], 2.0, &mut r);
        for axis in 0..3 {
            assert_grad(
                "softmax",
                grad_check(std::slice::from_ref(&x), seed, |t, v| {
                    t.softmax(v[0], axis).unwrap()
                }),
            );
        }
        assert_grad(
            "gelu",
            grad_check(std::slice::from_ref(&x), seed, |t, v| t.gelu(v[0]).unwrap()),
        );
        let y = uniform(&[4, 6], 2.0, &mut r);
        let g = uniform(&[6], 1.0, &mut r);
        let b = uniform(&[6], 1.0, &mut r);
        assert_grad(
            "layer_norm",
            grad_check(&[y, g, b], seed, |t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()
            }),
        );
        let logits = uniform(&[3, 5], 3.0, &mut r);
        assert_grad(
            "cross_entropy",
            grad_check(&[logits], seed, |t, v| {
                t.cross_entropy(v[0], &[4, 0, 2]).unwrap()
            }),
        );
    }
}

#[test]
fn convolution_gradients() {
    // (h, w, cin, cout, k, stride, pad, groups)
    let cases = [
        (5, 4, 2, 3, 3, 1, 1, 1),
        (6, 6, 3, 4, 3, 2, 1, 1),
        (5, 5, 4, 4, 3, 1, 1, 4),
        (4, 4, 2, 2, 2, 2, 0, 1),
        (7, 5, 4, 6, 3, 2, 2, 2),
    ];
    for (seed, &(h, w, cin, cout, k, stride, pad, groups)) in cases.iter().enumerate() {
        let mut r = rng(300 + seed as u64);
        let x = uniform(&[h, w, cin], 1.0, &mut r);
        let wt = uniform(&[k, k, cin / groups, cout], 1.0, &mut r);
        let b = uniform(&[cout], 1.0, &mut r);
        let err = grad_check(&[x, wt, b], seed as u64, |t, v| {
            t.conv2d(v[0], v[1], v[2], stride, pad, groups).unwrap()
        });
        assert_grad("conv2d", err);
    }
}

#[test]
fn conv_matches_naive_loops() {
    let cases = [
        (6, 5, 3, 4, 3, 2, 1, 1),
        (5, 5, 4, 4, 3, 1, 1, 4),
        (8, 8, 2, 6, 4, 4, 0, 2),
    ];
    for (seed, &(h, w, cin, cout, k, stride, pad, groups)) in cases.iter().enumerate() {
        let mut r = rng(400 + seed as u64);
        let x = uniform(&[h, w, cin], 1.0, &mut r);
        let wt = uniform(&[k, k, cin / groups, cout], 1.0, &mut r);
        let b = uniform(&[cout], 1.0, &mut r);
        let got = kernels::conv2d(&x, &wt, &b, stride, pad, groups).unwrap();
        let (want, hw) = conv2d(
            x.data(),
            (h, w),
            cin,
            wt.data(),
            k,
            cout,
            b.data(),
            stride,
            pad,
            groups,
        );
        assert_eq!(got.dims(), &[hw.0, hw.1, cout]);
        for (a, e) in got.data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_matches_naive_loops() {
    let mut r = rng(7);
    let a = uniform(&[5, 7], 1.0, &mut r);
    let b = uniform(&[7, 3], 1.0, &mut r);
    let got = kernels::matmul(&a, &b).unwrap();
    let want = from_mat(&matmul(&to_mat(&a), &to_mat(&b)));
    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn kernels_are_bitwise_deterministic() {
    let mut r = rng(9);
    let x = uniform(&[9, 9, 8], 10.0, &mut r).cast::<f32>();
    let w = uniform(&[3, 3, 8, 16], 1.0, &mut r).cast::<f32>();
    let b = uniform(&[16], 1.0, &mut r).cast::<f32>();
    let first = kernels::conv2d(&x, &w, &b, 2, 1, 1).unwrap();
    let a = uniform(&[33, 65], 10.0, &mut r).cast::<f32>();
    let m = uniform(&[65, 17], 10.0, &mut r).cast::<f32>();
    let mm = kernels::matmul(&a, &m).unwrap();
    for _ in 0..3 {
        assert_eq!(kernels::conv2d(&x, &w, &b, 2, 1, 1).unwrap(), first);
        assert_eq!(kernels::matmul(&a, &m).unwrap(), mm);
    }
}

#[test]
fn layer_norm_statistics() {
    let mut r = rng(11);
    let x = uniform(&[6, 16], 50.0, &mut r);
    let g = Tensor::ones(&[16]).unwrap();
    let b = Tensor::zeros(&[16]).unwrap();
    let y = kernels::layer_norm(&x, &g, &b, 1e-6).unwrap();
    for row in y.data().chunks(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gelu_reference_values() {
    let x = Tensor::<f64>::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
    let y = kernels::gelu_tensor(&x);
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
    assert!((y.data()[2] + 0.158_655_253_931_457_05).abs() < 1e-12);
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::<f64>::new();
    let uniform_logits = tape.constant(Tensor::zeros(&[2, 4]).unwrap());
    let l = tape.cross_entropy(uniform_logits, &[1, 3]).unwrap();
    assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
    let mut peaked = Tensor::zeros(&[1, 4]).unwrap();
    peaked.data_mut()[2] = 1e4;
    let p = tape.constant(peaked);
    let l = tape.cross_entropy(p, &[2]).unwrap();
    assert!(tape.value(l).data()[0].abs() < 1e-12);
    assert!(matches!(
        tape.cross_entropy(p, &[4]),
        Err(Error::LabelOutOfRange {
            label: 4,
            classes: 4
        })
    ));
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
    assert!(matches!(
        tape.matmul(a, b),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(tape.softmax(a, 2).is_err());
    assert!(tape.split_heads(a, 2).is_err());
    let x = tape.constant(Tensor::zeros(&[2, 2, 1]).unwrap());
    let w = tape.constant(Tensor::zeros(&[3, 3, 1, 1]).unwrap());
    let bias = tape.constant(Tensor::zeros(&[1]).unwrap());
    assert!(tape.conv2d(x, w, bias, 1, 0, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(
        dims in prop::collection::vec(1usize..6, 1..4),
        axis_pick in 0usize..3,
        scale in prop_oneof![Just(1.0f64), Just(100.0), Just(1e4)],
        seed in any::<u64>(),
    ) {
        let axis = axis_pick % dims.len();
        let mut r = rng(seed);
        let x = uniform(&dims, scale, &mut r).cast::<f32>();
        let y = kernels::softmax(&x, axis).unwrap();
        let outer: usize = dims[..axis].iter().product();
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f32 = (0..len).map(|l| y.data()[(o * len + l) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6, "slice sums to {}", s);
            }
        }
    }

    #[test]
    fn matmul_is_linear_in_left_argument(seed in any::<u64>(), s in -3.0f64..3.0) {
        let mut r = rng(seed);
        let a = uniform(&[3, 4], 1.0, &mut r);
        let b = uniform(&[4, 2], 1.0, &mut r);
        let scaled = Tensor::from_fn(&[3, 4], |i| a.data()[i] * s).unwrap();
        let lhs = kernels::matmul(&scaled, &b).unwrap();
        let rhs = kernels::matmul(&a, &b).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - s * y).abs() < 1e-12);
        }
    }
}
