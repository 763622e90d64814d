use super::*;
use crate::gradcheck::{self, default_step, default_tolerance, random_tensor, weighted_sum};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn grad_ok<T: Real>(
    inputs: &[Tensor<T>],
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> f64 {
    let err = gradcheck::max_relative_error(inputs, default_step::<T>(), f).unwrap();
    assert!(
        err < default_tolerance::<T>(),
        "relative error {err:e} above {:e}",
        default_tolerance::<T>()
    );
    err
}

/// Direct nested-loop convolution used as a forward oracle.
fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for c in 0..ci {
                    for a in 0..kh {
                        for b in 0..kw {
                            let iy = (y * stride + a) as isize - pad as isize;
                            let ix = (xx * stride + b) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += x.at(&[c, iy as usize, ix as usize]) * w.at(&[o, c, a, b]);
                            }
                        }
                    }
                }
                out.data_mut()[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    out
}

#[test]
fn matmul_identity_cases() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = tape.constant(Tensor::eye(2));
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);

    let b = tape.constant(t(&[2, 1], &[5., 7.]));
    let y = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 1]);
    assert_eq!(tape.value(y).data(), &[5., 7.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("dimension"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let inputs = [
        random_tensor::<f32>(&[3, 4], -1.0, 1.0, 1),
        random_tensor::<f32>(&[4, 2], -1.0, 1.0, 2),
    ];
    grad_ok(&inputs, |tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        tp.sum(y)
    });
    let inputs: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    grad_ok(&inputs, |tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        weighted_sum(tp, y, 3)
    });
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([3]));
    let y = tape.softmax(x, 0).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-6);
    }
    let x = tape.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6);
    assert!(tape.softmax(x, 1).is_err());
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    grad_ok(&[random_tensor::<f32>(&[5], -2.0, 2.0, 7)], |tp, v| {
        let y = tp.softmax(v[0], 0)?;
        weighted_sum(tp, y, 8)
    });
    grad_ok(&[random_tensor::<f64>(&[3, 4, 2], -2.0, 2.0, 9)], |tp, v| {
        let y = tp.softmax(v[0], 1)?;
        weighted_sum(tp, y, 10)
    });
}

#[test]
fn conv2d_examples() {
    let x = random_tensor::<f64>(&[1, 5, 6], -1.0, 1.0, 11);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let one = tape.constant(Tensor::ones([1, 1, 1, 1]));
    let y = tape.conv2d(xv, one, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);

    let zero = tape.constant(Tensor::zeros([3, 1, 3, 3]));
    let y = tape.conv2d(xv, zero, 1, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 5, 6]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let big = tape.constant(Tensor::zeros([1, 1, 7, 7]));
    assert!(matches!(tape.conv2d(xv, big, 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn conv2d_matches_naive_loops() {
    let x = random_tensor::<f64>(&[2, 7, 6], -1.0, 1.0, 12);
    let w = random_tensor::<f64>(&[3, 2, 3, 2], -1.0, 1.0, 13);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        let expect = naive_conv2d(&x, &w, stride, pad);
        assert_eq!(tape.value(y).shape(), expect.shape());
        for (a, b) in tape.value(y).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_gradient_stride_two() {
    let inputs = [
        random_tensor::<f32>(&[2, 8, 8], -1.0, 1.0, 14),
        random_tensor::<f32>(&[3, 2, 3, 3], -1.0, 1.0, 15),
    ];
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(inputs[0].clone()), tape.constant(inputs[1].clone()));
    let y = tape.conv2d(a, b, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[3, 4, 4]);
    grad_ok(&inputs, |tp, v| {
        let y = tp.conv2d(v[0], v[1], 2, 1)?;
        weighted_sum(tp, y, 16)
    });
    let inputs: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    grad_ok(&inputs, |tp, v| {
        let y = tp.conv2d(v[0], v[1], 2, 1)?;
        weighted_sum(tp, y, 16)
    });
}

#[test]
fn conv_transpose3d_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full([1, 1, 1, 1], 2.5));
    let w = tape.constant(Tensor::ones([1, 1, 2, 2, 2]));
    let y = tape.conv_transpose3d(x, w, [2, 2, 2]).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 2.5));

    let z = tape.constant(Tensor::zeros([2, 3, 3, 3]));
    let w = tape.constant(random_tensor(&[2, 4, 2, 2, 2], -1.0, 1.0, 17));
    let y = tape.conv_transpose3d(z, w, [2, 2, 2]).unwrap();
    assert_eq!(tape.shape(y), &[4, 6, 6, 6]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let bad = tape.constant(Tensor::zeros([3, 4, 2, 2, 2]));
    assert!(tape.conv_transpose3d(z, bad, [2, 2, 2]).is_err());
}

#[test]
fn conv_transpose3d_gradient() {
    let inputs = [
        random_tensor::<f32>(&[2, 4, 4, 4], -1.0, 1.0, 18),
        random_tensor::<f32>(&[2, 3, 2, 2, 2], -1.0, 1.0, 19),
    ];
    grad_ok(&inputs, |tp, v| {
        let y = tp.conv_transpose3d(v[0], v[1], [2, 2, 2])?;
        weighted_sum(tp, y, 20)
    });
    let inputs: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    grad_ok(&inputs, |tp, v| {
        let y = tp.conv_transpose3d(v[0], v[1], [1, 2, 2])?;
        weighted_sum(tp, y, 21)
    });
}

#[test]
fn conv3d_gradient() {
    let inputs = [
        random_tensor::<f64>(&[2, 4, 3, 3], -1.0, 1.0, 22),
        random_tensor::<f64>(&[3, 2, 4, 1, 1], -1.0, 1.0, 23),
    ];
    grad_ok(&inputs, |tp, v| {
        let y = tp.conv3d(v[0], v[1], [1, 1, 1])?;
        weighted_sum(tp, y, 24)
    });
}

#[test]
fn conv_transpose3d_is_adjoint_of_conv3d() {
    for seed in 0..10u64 {
        let stride = [1 + (seed % 2) as usize, 2, 1 + ((seed / 2) % 2) as usize];
        let x = random_tensor::<f64>(&[2, 3, 3, 2], -1.0, 1.0, 100 + seed);
        let w = random_tensor::<f64>(&[2, 3, 2, 2, 3], -1.0, 1.0, 200 + seed);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let big = tape.conv_transpose3d(xv, wv, stride).unwrap();
        let y = random_tensor::<f64>(tape.shape(big), -1.0, 1.0, 300 + seed);
        let yv = tape.constant(y.clone());
        // conv3d with the same kernel bank read as [C_out=C_in(x), C_in=C_out(y), ...]
        let small = tape.conv3d(yv, wv, stride).unwrap();
        assert_eq!(tape.shape(small), x.shape());
        let lhs: f64 = tape.value(big).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = tape.value(small).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_output_shapes_follow_closed_forms() {
    for k in 1..=3 {
        for s in 1..=2 {
            for n in [k, 4, 7, 8] {
                let mut tape = Tape::<f32>::new();
                let x = tape.constant(Tensor::zeros([1, n, n]));
                let w = tape.constant(Tensor::zeros([1, 1, k, k]));
                for p in 0..2 {
                    let y = tape.conv2d(x, w, s, p).unwrap();
                    let expect = (n + 2 * p - k) / s + 1;
                    assert_eq!(tape.shape(y), &[1, expect, expect]);
                }
                let x = tape.constant(Tensor::zeros([1, n, n, n]));
                let w = tape.constant(Tensor::zeros([1, 1, k, k, k]));
                let y = tape.conv_transpose3d(x, w, [s; 3]).unwrap();
                let expect = (n - 1) * s + k;
                assert_eq!(tape.shape(y), &[1, expect, expect, expect]);
            }
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);
    let c = tape.constant(Tensor::full([5], 3.0));
    let n = tape.layer_norm(c, 0, 1e-5).unwrap();
    assert!(tape.value(n).data().iter().all(|&v| v == 0.0));
}

#[test]
fn elementwise_gradients() {
    let a = random_tensor::<f64>(&[2, 3, 4], -1.0, 1.0, 30);
    let b = random_tensor::<f64>(&[3, 1], -1.0, 1.0, 31);
    grad_ok(&[a.clone(), b.clone()], |tp, v| {
        let s = tp.add(v[0], v[1])?;
        let m = tp.mul(s, v[1])?;
        let d = tp.sub(m, v[0])?;
        let one = tp.constant(Tensor::full([4], 2.0));
        let d = tp.div(d, one)?;
        let q = tp.add_scalar(v[1], 2.0)?;
        let d = tp.div(d, q)?;
        let r = tp.sigmoid(d)?;
        weighted_sum(tp, r, 32)
    });
    grad_ok(std::slice::from_ref(&a), |tp, v| {
        let n = tp.layer_norm(v[0], 1, 1e-5)?;
        weighted_sum(tp, n, 33)
    });
    grad_ok(std::slice::from_ref(&a), |tp, v| {
        let p = tp.permute(v[0], &[2, 0, 1])?;
        let r = tp.reshape(p, &[4, 6])?;
        let n = tp.narrow(r, 1, 1, 3)?;
        let c = tp.concat(&[n, r], 1)?;
        let q = tp.scale(c, 0.5)?;
        let q = tp.add_scalar(q, 2.0)?;
        let l = tp.ln(q)?;
        weighted_sum(tp, l, 34)
    });
    grad_ok(std::slice::from_ref(&a), |tp, v| {
        let c = tp.clamp(v[0], -0.5, 0.5)?;
        let m = tp.mean(c)?;
        let s = tp.sum(v[0])?;
        let t = tp.mul(m, s)?;
        tp.add(t, m)
    });
    // relu away from the kink
    let x = a.map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    grad_ok(&[x], |tp, v| {
        let r = tp.relu(v[0])?;
        weighted_sum(tp, r, 35)
    });
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(random_tensor::<f32>(&[2, 3, 2], -1.0, 1.0, 40).with_grad());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    // a second call accumulates
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 2.0));

    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(random_tensor::<f32>(&[4], -1.0, 1.0, 41).with_grad());
    let y = tape.sigmoid(x).unwrap();
    let y = tape.sum(y).unwrap();
    let z = tape.scale(y, 0.0).unwrap();
    tape.backward(z).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));

    let v = tape.leaf(Tensor::zeros([2]).with_grad());
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn composite_gradient() {
    let inputs = [
        random_tensor::<f32>(&[3, 4], -1.0, 1.0, 50),
        random_tensor::<f32>(&[4, 5], -1.0, 1.0, 51),
    ];
    grad_ok(&inputs, |tp, v| {
        let m = tp.matmul(v[0], v[1])?;
        let s = tp.sigmoid(m)?;
        weighted_sum(tp, s, 52)
    });
}

#[test]
fn tape_replay_is_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(random_tensor(&[2, 6, 6], -1.0, 1.0, 60).with_grad());
        let w = tape.leaf(random_tensor(&[3, 2, 3, 3], -1.0, 1.0, 61).with_grad());
        let y = tape.conv2d(a, w, 1, 1).unwrap();
        let y = tape.softmax(y, 0).unwrap();
        let l = weighted_sum(&mut tape, y, 62).unwrap();
        tape.backward(l).unwrap();
        (
            tape.value(l).item().to_bits(),
            tape.grad(a).unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>(),
            tape.grad(w).unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_values_are_reported() {
    let mut tape = Tape::<f32>::new();
    tape.set_check_finite(true);
    let x = tape.constant(Tensor::new([2], vec![0.0, 1.0]).unwrap());
    assert!(matches!(tape.ln(x), Err(Error::NonFinite { op: "ln" })));
}

#[test]
fn shared_parameter_accumulates_from_every_use() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::full([2], 3.0)).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, id);
    let b = tape.param(&store, id);
    assert_eq!(a, b);
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    store.zero_grads();
    store.accumulate_grads(&tape);
    assert_eq!(store.get(id).grad.as_deref(), Some(&[6.0, 6.0][..]));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(data in proptest::collection::vec(-1e4f32..1e4, 1..24), seed in 0u64..1000) {
            let n = data.len();
            let _ = seed;
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::new([n], data).unwrap());
            let y = tape.softmax(x, 0).unwrap();
            let total: f64 = tape.value(y).data().iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));
        }
    }
}
