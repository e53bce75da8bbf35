//! Tensor operations: hand-computed values, round trips, and central
//! difference checks of every differentiable op at three random shapes in
//! both precisions.

use asf_core::tensor::{
    grad_check, grad_check_reference, Conv2dParams, GradCheckReport, NormStats, Scalar, Tape, Tensor, Tolerance, Var,
};
use asf_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform draws representable in `f32`, so both precisions see equal values.
fn randn<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0f32..1.0) as f64))
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, so every output coordinate
/// contributes with a distinct sign and scale.
fn project<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.constant(randn(&shape, &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn report(name: &str, dtype: &str, x_shape: &[usize], r: &GradCheckReport) {
    assert!(
        r.passed(),
        "{name} [{dtype}] shape {x_shape:?}: max rel err {:.3e} at {} (analytic {}, numeric {})",
        r.max_rel_error,
        r.worst,
        r.analytic[r.worst],
        r.numeric[r.worst]
    );
}

type Case<T> = (Tensor<T>, Box<dyn Fn(&mut Tape<T>, Var) -> Result<Var>>);

/// Each case builds its input and function for either precision from the same
/// draws. `f64` is checked natively; `f32` gradients are checked against
/// differences of the `f64` build at the same point.
fn three_shapes(name: &str, case32: impl Fn(&mut ChaCha8Rng) -> Case<f32>, case64: impl Fn(&mut ChaCha8Rng) -> Case<f64>) {
    for seed in 0..3 {
        let rng = || ChaCha8Rng::seed_from_u64(seed);
        let (x, f) = case64(&mut rng());
        let r = grad_check(|t, v| f(t, v).and_then(|y| project(t, y)), &x, Tolerance::F64).unwrap();
        report(name, "f64", x.shape(), &r);

        let (x, f) = case32(&mut rng());
        let (_, reference) = case64(&mut rng());
        let r = grad_check_reference(
            |t, v| f(t, v).and_then(|y| project(t, y)),
            |t, v| reference(t, v).and_then(|y| project(t, y)),
            &x,
            Tolerance::F32,
        )
        .unwrap();
        report(name, "f32", x.shape(), &r);
    }
}

macro_rules! op_case {
    ($name:ident, |$rng:ident| $body:expr) => {
        #[test]
        fn $name() {
            fn case<T: Scalar>($rng: &mut ChaCha8Rng) -> Case<T> {
                $body
            }
            three_shapes(stringify!($name), case::<f32>, case::<f64>);
        }
    };
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

op_case!(grad_matmul_lhs, |rng| {
    let d = dims(rng, 4, 1, 4);
    let b = randn::<T>(&[d[0], d[2], d[3]], rng);
    (randn(&[d[0], d[1], d[2]], rng), Box::new(move |t, x| {
        let b = t.constant(b.clone());
        t.matmul(x, b)
    }))
});

op_case!(grad_matmul_rhs_shared, |rng| {
    let d = dims(rng, 4, 1, 4);
    let a = randn::<T>(&[d[0], d[1], d[2]], rng);
    (randn(&[d[2], d[3]], rng), Box::new(move |t, x| {
        let a = t.constant(a.clone());
        t.matmul(a, x)
    }))
});

op_case!(grad_conv2d_input, |rng| {
    let d = dims(rng, 3, 1, 3);
    let (cin, cout) = (2 * d[0], 2 * d[1]);
    let k = [1, 3, 3][rng.random_range(0..3)];
    let w = randn::<T>(&[cout, cin / 2, k, k], rng);
    let stride = 1 + d[2] % 2;
    (randn(&[2, cin, 5, 4], rng), Box::new(move |t, x| {
        let w = t.constant(w.clone());
        t.conv2d(x, w, None, Conv2dParams { stride, padding: k / 2, groups: 2 })
    }))
});

op_case!(grad_conv2d_weight_and_bias, |rng| {
    let d = dims(rng, 2, 1, 3);
    let x = randn::<T>(&[2, d[0], 4, 5], rng);
    let bias = randn::<T>(&[d[1]], rng);
    (randn(&[d[1], d[0], 3, 3], rng), Box::new(move |t, w| {
        let x = t.constant(x.clone());
        let b = t.leaf(bias.clone(), true);
        t.conv2d(x, w, Some(b), Conv2dParams { stride: 1, padding: 1, groups: 1 })
    }))
});

op_case!(grad_conv2d_depthwise, |rng| {
    let c = rng.random_range(1..=4);
    let w = randn::<T>(&[c, 1, 3, 3], rng);
    (randn(&[2, c, 4, 3], rng), Box::new(move |t, x| {
        let w = t.constant(w.clone());
        t.conv2d(x, w, None, Conv2dParams { stride: 1, padding: 1, groups: c })
    }))
});

op_case!(grad_conv2d_depthwise_weight, |rng| {
    let c = rng.random_range(1..=4);
    let x = randn::<T>(&[2, c, 4, 4], rng);
    (randn(&[c, 1, 3, 3], rng), Box::new(move |t, w| {
        let x = t.constant(x.clone());
        t.conv2d(x, w, None, Conv2dParams { stride: 1, padding: 1, groups: c })
    }))
});

op_case!(grad_unfold, |rng| {
    let d = dims(rng, 3, 1, 3);
    let (k, s) = (d[0] + 1, d[1].min(d[0] + 1));
    (randn(&[1, d[2], 6, 5], rng), Box::new(move |t, x| t.unfold(x, k, s, 1)))
});

op_case!(grad_add_broadcast, |rng| {
    let d = dims(rng, 3, 1, 4);
    let a = randn::<T>(&[d[0], d[1], d[2]], rng);
    (randn(&[d[1], d[2]], rng), Box::new(move |t, x| {
        let a = t.leaf(a.clone(), true);
        t.add(a, x)
    }))
});

op_case!(grad_mul, |rng| {
    let d = dims(rng, 2, 1, 5);
    let b = randn::<T>(&d, rng);
    (randn(&d, rng), Box::new(move |t, x| {
        let b = t.constant(b.clone());
        t.mul(x, b)
    }))
});

op_case!(grad_affine, |rng| {
    let d = dims(rng, 2, 1, 5);
    (randn(&d, rng), Box::new(|t, x| t.affine(x, T::of(-1.7), T::of(0.3))))
});

op_case!(grad_scale_rows, |rng| {
    let d = dims(rng, 3, 1, 4);
    let x = randn::<T>(&d, rng);
    (randn(&[d[0]], rng), Box::new(move |t, s| {
        let x = t.leaf(x.clone(), true);
        t.scale_rows(x, s)
    }))
});

op_case!(grad_gelu, |rng| {
    let d = dims(rng, 2, 1, 6);
    (randn(&d, rng), Box::new(|t, x| t.gelu(x)))
});

op_case!(grad_sigmoid, |rng| {
    let d = dims(rng, 2, 1, 6);
    (randn(&d, rng), Box::new(|t, x| t.sigmoid(x)))
});

op_case!(grad_softmax_any_axis, |rng| {
    let d = dims(rng, 3, 1, 4);
    let axis = rng.random_range(0..3);
    (randn(&d, rng), Box::new(move |t, x| t.softmax(x, axis)))
});

op_case!(grad_mean_axis, |rng| {
    let d = dims(rng, 3, 1, 4);
    let axis = rng.random_range(0..3);
    (randn(&d, rng), Box::new(move |t, x| t.mean(x, axis)))
});

op_case!(grad_layernorm, |rng| {
    let d = dims(rng, 2, 2, 5);
    let g = randn::<T>(&[d[1]], rng);
    let b = randn::<T>(&[d[1]], rng);
    (randn(&d, rng), Box::new(move |t, x| {
        let g = t.leaf(g.clone(), true);
        let b = t.leaf(b.clone(), true);
        t.layernorm(x, g, b, 1e-5)
    }))
});

op_case!(grad_batchnorm_train, |rng| {
    let d = dims(rng, 3, 2, 3);
    let g = randn::<T>(&[d[1]], rng);
    (randn(&[d[0], d[1], d[2]], rng), Box::new(move |t, x| {
        let g = t.leaf(g.clone(), true);
        let b = t.constant(Tensor::zeros(&[g_len(t, g)]));
        let (mut m, mut v) = (vec![T::zero(); g_len(t, g)], vec![T::one(); g_len(t, g)]);
        t.batchnorm(x, g, b, NormStats::Train { running_mean: &mut m, running_var: &mut v, momentum: 0.1 }, 1e-5)
    }))
});

op_case!(grad_batchnorm_eval, |rng| {
    let d = dims(rng, 3, 1, 3);
    let c = d[1];
    let m: Vec<T> = (0..c).map(|_| T::of(rng.random_range(-0.5..0.5))).collect();
    let v: Vec<T> = (0..c).map(|_| T::of(rng.random_range(0.5..2.0))).collect();
    (randn(&[d[0], c, d[2]], rng), Box::new(move |t, x| {
        let g = t.constant(Tensor::full(&[c], T::of(1.3)));
        let b = t.constant(Tensor::zeros(&[c]));
        t.batchnorm(x, g, b, NormStats::Eval { running_mean: &m, running_var: &v }, 1e-5)
    }))
});

fn g_len<T: Scalar>(t: &Tape<T>, g: Var) -> usize {
    t.shape(g)[0]
}

op_case!(grad_shape_ops, |rng| {
    let d = dims(rng, 3, 2, 4);
    (randn(&d, rng), Box::new(move |t, x| {
        let p = t.permute(x, &[2, 0, 1])?;
        let r = t.reshape(p, &[d[2] * d[0], d[1]])?;
        let tr = t.transpose(r, 0, 1)?;
        let parts = t.split(tr, 1, &[1, d[2] * d[0] - 1])?;
        let n = t.narrow(parts[1], 0, 1, d[1] - 1)?;
        let flat = t.reshape(n, &[(d[1] - 1) * (d[2] * d[0] - 1)])?;
        let head = t.reshape(parts[0], &[d[1]])?;
        t.concat(&[flat, head], 0)
    }))
});

#[test]
fn grad_cross_entropy() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c) = (rng.random_range(1..=4), rng.random_range(2..=5));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let x = randn::<f64>(&[b, c], &mut rng);
        let r = grad_check(|t, v| t.cross_entropy(v, &labels), &x, Tolerance::F64).unwrap();
        report("cross_entropy", "f64", x.shape(), &r);
        let r = grad_check_reference(
            |t, v| t.cross_entropy(v, &labels),
            |t, v| t.cross_entropy(v, &labels),
            &x.cast(),
            Tolerance::F32,
        )
        .unwrap();
        report("cross_entropy", "f32", x.shape(), &r);
    }
}

#[test]
fn matmul_by_hand() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let b = t.constant(Tensor::from_f64(&[2, 1], &[5., 6.]).unwrap());
    let y = t.matmul(a, b).unwrap();
    assert_eq!(t.value(y).data(), &[17., 39.]);
    let i = t.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
    let y = t.matmul(i, a).unwrap();
    assert_eq!(t.value(y), t.value(a));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 2]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn grad_of_sum_of_product_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = randn::<f64>(&[3, 4], &mut rng);
    let b = randn::<f64>(&[4, 2], &mut rng);
    let mut t = Tape::new();
    let av = t.leaf(a, true);
    let bv = t.constant(b.clone());
    let y = t.matmul(av, bv).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    let expected: Vec<f64> = (0..12).map(|i| b.data()[(i % 4) * 2] + b.data()[(i % 4) * 2 + 1]).collect();
    assert_eq!(g.get(av).unwrap().data(), expected.as_slice());
}

#[test]
fn conv_examples() {
    let mut t = Tape::<f64>::new();
    let ones = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let k = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(ones, k, None, Conv2dParams::default()).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).item(), 9.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xv = randn::<f64>(&[2, 3, 4, 5], &mut rng);
    let x = t.constant(xv.clone());
    // 1x1 conv with a permutation matrix permutes channels; identity keeps them.
    let eye = t.constant(Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
    let y = t.conv2d(x, eye, None, Conv2dParams::default()).unwrap();
    assert_eq!(t.value(y), &xv);
    let delta = t.constant(Tensor::from_fn(&[3, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }));
    let y = t.conv2d(x, delta, None, Conv2dParams { stride: 1, padding: 1, groups: 3 }).unwrap();
    assert_eq!(t.value(y), &xv);

    let big = t.constant(Tensor::ones(&[1, 1, 5, 5]));
    assert!(t.conv2d(ones, big, None, Conv2dParams::default()).is_err());
    let w = t.constant(Tensor::ones(&[2, 1, 1, 1]));
    assert!(t.conv2d(x, w, None, Conv2dParams { groups: 2, ..Default::default() }).is_err());
}

#[test]
fn conv_output_extent() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::ones(&[1, 2, 9, 7]));
    let w = t.constant(Tensor::ones(&[4, 2, 3, 2]));
    let y = t.conv2d(x, w, None, Conv2dParams { stride: 2, padding: 1, groups: 1 }).unwrap();
    assert_eq!(t.shape(y), &[1, 4, (9 + 2 - 3) / 2 + 1, (7 + 2 - 2) / 2 + 1]);
}

#[test]
fn unfold_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
    let y = t.unfold(x, 2, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 4]);
    assert_eq!(t.value(y).data(), &[1., 2., 3., 4.]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = randn::<f64>(&[1, 3, 4, 5], &mut rng);
    let x = t.constant(img.clone());
    let y = t.unfold(x, 1, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 20, 3]);
    for p in 0..20 {
        for c in 0..3 {
            assert_eq!(t.value(y).data()[p * 3 + c], img.data()[c * 20 + p]);
        }
    }
}

/// Sum of unfolded entries equals Σ x · (number of windows covering x),
/// with the multiplicity counted by brute force.
#[test]
fn unfold_sum_matches_window_multiplicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
        let k = rng.random_range(1..4);
        let s = rng.random_range(1..=k);
        let p = rng.random_range(0..2);
        let img = randn::<f64>(&[1, 2, h, w], &mut rng);
        let mut t = Tape::new();
        let x = t.constant(img.clone());
        let y = t.unfold(x, k, s, p).unwrap();
        let mut expected = 0.0;
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let mut mult = 0;
                    let mut top = 0;
                    while top + k <= h + 2 * p {
                        let mut left = 0;
                        while left + k <= w + 2 * p {
                            if (top..top + k).contains(&(i + p)) && (left..left + k).contains(&(j + p)) {
                                mult += 1;
                            }
                            left += s;
                        }
                        top += s;
                    }
                    expected += img.data()[(c * h + i) * w + j] * mult as f64;
                }
            }
        }
        assert!((t.value(y).sum() - expected).abs() < 1e-9);
    }
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::<f32>::new();
    let z = t.constant(Tensor::zeros(&[3]));
    let s = t.sigmoid(z).unwrap();
    assert_eq!(t.value(s).data(), &[0.5; 3]);
    let c = t.constant(Tensor::full(&[1, 4], 2.5));
    let sm = t.softmax(c, 1).unwrap();
    assert_eq!(t.value(sm).data(), &[0.25; 4]);
    assert!(t.softmax(c, 2).is_err());
    assert!(t.split(c, 1, &[2, 0, 2]).is_err());
    assert!(t.split(c, 1, &[2, 1]).is_err());
}

#[test]
fn grad_of_sum_sigmoid_at_zero_is_quarter() {
    let x = Tensor::<f64>::zeros(&[5]);
    let r = grad_check(
        |t, v| {
            let s = t.sigmoid(v)?;
            t.sum(s)
        },
        &x,
        Tolerance::F64,
    )
    .unwrap();
    assert!(r.analytic.iter().all(|&g| g == 0.25));
    assert!(r.passed());
}

#[test]
fn grad_of_sum_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn::<f32>(&[4, 3], &mut rng);
    let r = grad_check(|t, v| t.sum(v), &x, Tolerance::F32).unwrap();
    assert!(r.analytic.iter().all(|&g| g == 1.0));
    assert!(r.max_rel_error < 1e-2, "{}", r.max_rel_error);
}

#[test]
fn grad_check_rejects_bad_input() {
    let x = Tensor::<f64>::from_f64(&[2], &[1.0, f64::NAN]).unwrap();
    assert!(grad_check(|t, v| t.sum(v), &x, Tolerance::F64).is_err());
    let x = Tensor::<f64>::ones(&[2]);
    assert!(grad_check(|t, v| t.scale(v, 2.0), &x, Tolerance::F64).is_err());
}

#[test]
fn wrong_backward_rule_is_caught() {
    let x = Tensor::<f64>::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap();
    let r = grad_check(
        |t, v| {
            let value = t.value(v).map(|a| a * a);
            // claims d(x²)/dx = x instead of 2x
            let y = t.custom(&[v], value, Box::new(|a| vec![Some(a.grad.zip_map(a.inputs[0], |g, x| g * x))]), "bad_square")?;
            t.sum(y)
        },
        &x,
        Tolerance::F64,
    )
    .unwrap();
    assert!(!r.passed());
}

#[test]
fn non_finite_output_is_an_error() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(&[2], f32::MAX));
    assert!(t.affine(x, 4.0, 0.0).is_err());
}
