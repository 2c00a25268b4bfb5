#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Norm-wise relative error between the tape gradient and central finite
/// differences (step 1e-5) for every input.
fn grad_check(inputs: &[Array<f64>], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|a| a.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    let eval = |ins: &[Array<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|a| g.leaf(a.clone(), true)).collect();
        let l = build(&mut g, &vars).unwrap();
        g.value(l).data()[0]
    };
    let h = 1e-5;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (i, inp) in inputs.iter().enumerate() {
        for j in 0..inp.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ana = analytic[i][j];
            diff += (num - ana).powi(2);
            norm += num.abs().max(ana.abs()).powi(2);
        }
    }
    if norm == 0.0 {
        diff.sqrt()
    } else {
        diff.sqrt() / norm.sqrt()
    }
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n: usize = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
    let w = rand_array(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TOL: f64 = 1e-4;

fn check_op(
    name: &str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Clone + 'static,
) {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Array<f64>> = shapes.iter().map(|s| rand_array(&mut rng, s)).collect();
        let f = f.clone();
        let err = grad_check(&inputs, &move |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, seed)
        });
        assert!(err < TOL, "{name} seed {seed}: rel err {err:e}");
    }
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(Array::from_f64(vec![2, 2], &[1., 0., 0., 1.]).unwrap());
    let m = g.constant(Array::from_f64(vec![2, 2], &[1., 2., 3., 4.]).unwrap());
    let y = g.matmul(i2, m, false).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);

    let a = g.constant(Array::from_f64(vec![1, 2], &[1., 2.]).unwrap());
    let b = g.constant(Array::from_f64(vec![2, 1], &[3., 4.]).unwrap());
    let y = g.matmul(a, b, false).unwrap();
    assert_eq!(g.value(y).data(), &[11.]);
}

#[test]
fn matmul_sum_gradient_matches_hand_value() {
    // d sum(A·B) / dA = 1·Bᵀ: each row is the row sums of B.
    let mut g = Graph::<f64>::new();
    let a = g.leaf(
        Array::from_f64(vec![2, 2], &[1., 0., 0., 1.]).unwrap(),
        true,
    );
    let b = g.constant(Array::from_f64(vec![2, 2], &[2., 3., 4., 5.]).unwrap());
    let y = g.matmul(a, b, false).unwrap();
    let l = g.sum_all(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[5., 9., 5., 9.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Array::zeros(vec![2, 3]));
    let b = g.constant(Array::zeros(vec![2, 3]));
    let err = g.matmul(a, b, false).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn conv2d_hand_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Array::zeros(vec![1, 2, 5, 5]));
    let w = g.constant(Array::full(vec![3, 2, 3, 3], 0.7));
    let b = g.constant(Array::zeros(vec![3]));
    let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 5, 5]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Array::full(vec![1, 1, 3, 3], 1.0));
    let w = g.constant(Array::full(vec![1, 1, 3, 3], 1.0));
    let b = g.constant(Array::zeros(vec![1]));
    let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
    let v = g.value(y);
    assert_eq!(v.get(&[0, 0, 1, 1]), 9.0);
    for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(v.get(&[0, 0, r, c]), 4.0);
    }
    assert_eq!(v.get(&[0, 0, 0, 1]), 6.0);
}

#[test]
fn conv2d_channel_mismatch_is_dimension_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Array::zeros(vec![1, 2, 4, 4]));
    let w = g.constant(Array::zeros(vec![1, 3, 3, 3]));
    assert!(matches!(
        g.conv2d(x, w, None, 1, 1),
        Err(crate::Error::Dimension { .. })
    ));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Array::zeros(vec![3]));
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Array::from_f64(vec![2], &[1000.0, 0.0]).unwrap());
    let y = g.softmax(x).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(y).data()[1].abs() < 1e-12);

    let x = g.constant(Array::from_f64(vec![3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap());
    let y = g.softmax(x).unwrap();
    for (v, want) in g.value(y).data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
        assert!((v - want).abs() < 1e-15);
    }

    let x = g.constant(Array::from_f64(vec![2], &[f64::NAN, 0.0]).unwrap());
    assert!(matches!(g.softmax(x), Err(crate::Error::Numeric(_))));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Array::full(vec![3], 1.0));
    let zeros = g.constant(Array::zeros(vec![3]));
    let x = g.constant(Array::full(vec![3], 5.0));
    let y = g.layer_norm(x, ones, zeros, NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let one2 = g.constant(Array::full(vec![2], 1.0));
    let zero2 = g.constant(Array::zeros(vec![2]));
    let x = g.constant(Array::from_f64(vec![2], &[1.0, 3.0]).unwrap());
    let y = g.layer_norm(x, one2, zero2, 1e-12).unwrap();
    assert!((g.value(y).data()[0] + 1.0).abs() < 1e-9);
    assert!((g.value(y).data()[1] - 1.0).abs() < 1e-9);

    let gamma0 = g.constant(Array::zeros(vec![3]));
    let beta7 = g.constant(Array::full(vec![3], 7.0));
    let x = g.constant(Array::from_f64(vec![3], &[0.3, -2.0, 9.0]).unwrap());
    let y = g.layer_norm(x, gamma0, beta7, NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 7.0));
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::<f64>::new();
    let one = g.constant(Array::full(vec![1], 1.0));
    let zero = g.constant(Array::zeros(vec![1]));

    let x = g.constant(Array::full(vec![2, 1, 2, 2], 4.0));
    let (y, stats) = g.batch_norm(x, one, zero, BnMode::Train, NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(stats.unwrap().0, vec![4.0]);

    let x = g.constant(Array::from_f64(vec![2, 1, 1, 1], &[1.0, 3.0]).unwrap());
    let (y, stats) = g.batch_norm(x, one, zero, BnMode::Train, NORM_EPS).unwrap();
    let want = 1.0 / (1.0 + NORM_EPS).sqrt();
    assert!((g.value(y).data()[0] + want).abs() < 1e-15);
    assert!((g.value(y).data()[1] - want).abs() < 1e-15);
    let (m, v) = stats.unwrap();
    assert_eq!((m[0], v[0]), (2.0, 1.0));

    let x = g.constant(Array::from_f64(vec![1, 1, 1, 3], &[-1.0, 0.5, 2.0]).unwrap());
    let (y, stats) = g
        .batch_norm(
            x,
            one,
            zero,
            BnMode::Eval {
                mean: &[0.0],
                var: &[1.0],
            },
            0.0,
        )
        .unwrap();
    assert!(stats.is_none());
    assert_eq!(g.value(y).data(), &[-1.0, 0.5, 2.0]);

    let x = g.constant(Array::zeros(vec![1, 1, 1, 1]));
    assert!(g.batch_norm(x, one, zero, BnMode::Train, NORM_EPS).is_err());
}

#[test]
fn bilinear_examples() {
    let x = Array::<f64>::from_f64(vec![1, 1, 2, 2], &[0., 1., 2., 3.]).unwrap();
    assert_eq!(bilinear_resize(&x, 2, 2).unwrap(), x);
    let y = bilinear_resize(&x, 3, 3).unwrap();
    assert!((y.get(&[0, 0, 1, 1]) - 1.5).abs() < 1e-15);
    assert_eq!(y.get(&[0, 0, 0, 0]), 0.0);
    assert_eq!(y.get(&[0, 0, 2, 2]), 3.0);
    let c = Array::<f64>::full(vec![2, 3, 4], 2.5);
    for (h, w) in [(1, 1), (7, 2), (9, 13)] {
        let r = bilinear_resize(&c, h, w).unwrap();
        assert!(r.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(
        rand_array(&mut ChaCha8Rng::seed_from_u64(9), &[2, 3, 4]),
        true,
    );
    let l = g.sum_all(x);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Array::from_f64(vec![2], &[1.0, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let l = g.sum_all(sq);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    let err = g.backward(sq).unwrap_err();
    assert!(matches!(err, crate::Error::Contract(_)));
    let mut empty = Graph::<f64>::new();
    let v = Var::clone(&l);
    assert!(empty.backward(v).is_err());
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(rand_array(&mut rng, &[3, 2, 6, 6]).cast(), true);
        let w = g.leaf(rand_array(&mut rng, &[4, 2, 3, 3]).cast(), true);
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.tanh(y);
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        (g.grad(x).unwrap().clone(), g.grad(w).unwrap().clone())
    };
    let (a, b) = run();
    let (c, d) = run();
    assert!(a
        .data()
        .iter()
        .zip(c.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(b
        .data()
        .iter()
        .zip(d.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn grad_elementwise_ops() {
    check_op("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check_op("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check_op("add_bcast", &[&[2, 3, 4], &[3, 4]], |g, v| {
        g.add_bcast(v[0], v[1])
    });
    check_op("affine", &[&[5]], |g, v| Ok(g.affine(v[0], 1.7, -0.3)));
    check_op("mul_scalar", &[&[2, 5], &[1]], |g, v| {
        g.mul_scalar(v[0], v[1])
    });
    check_op("tanh", &[&[7]], |g, v| Ok(g.tanh(v[0])));
    check_op("relu", &[&[9]], |g, v| Ok(g.relu(v[0])));
    check_op("gelu", &[&[9]], |g, v| Ok(g.gelu(v[0])));
}

#[test]
fn grad_log_and_pow() {
    // shift inputs into (0.5, 1.5) so the clamp and pow stay smooth
    check_op("ln_clamped", &[&[6]], |g, v| {
        let x = g.affine(v[0], 0.5, 1.0);
        Ok(g.ln_clamped(x, 1e-12))
    });
    check_op("powf", &[&[6]], |g, v| {
        let x = g.affine(v[0], 0.5, 1.0);
        Ok(g.powf(x, 2.0))
    });
}

#[test]
fn grad_matmul_variants() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |g, v| {
        g.matmul(v[0], v[1], false)
    });
    check_op("matmul_tb", &[&[3, 4], &[2, 4]], |g, v| {
        g.matmul(v[0], v[1], true)
    });
    check_op("matmul_shared_b", &[&[2, 3, 4], &[4, 5]], |g, v| {
        g.matmul(v[0], v[1], false)
    });
    check_op("matmul_batched", &[&[2, 3, 4], &[2, 4, 5]], |g, v| {
        g.matmul(v[0], v[1], false)
    });
    check_op(
        "matmul_batched_tb",
        &[&[2, 2, 3, 4], &[2, 2, 5, 4]],
        |g, v| g.matmul(v[0], v[1], true),
    );
    check_op("linear", &[&[2, 3, 4], &[5, 4], &[5]], |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
}

#[test]
fn grad_shape_ops() {
    check_op("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check_op("reshape", &[&[2, 3, 4]], |g, v| g.reshape(v[0], &[6, 4]));
    check_op("concat", &[&[2, 3, 2], &[2, 1, 2]], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    check_op("slice", &[&[2, 5, 3]], |g, v| g.slice(v[0], 1, 1, 3));
    check_op("expand_leading", &[&[3, 2]], |g, v| {
        Ok(g.expand_leading(v[0], 4))
    });
    check_op("mean_axis", &[&[2, 3, 4]], |g, v| g.mean_axis(v[0], 1));
    check_op("mean_all", &[&[2, 3]], |g, v| {
        let m = g.mean_all(v[0]);
        g.reshape(m, &[1])
    });
    check_op("gather_rows", &[&[3, 4]], |g, v| {
        g.gather_rows(v[0], &[1, 3, 0])
    });
    check_op("bilinear_resize", &[&[1, 2, 3, 4]], |g, v| {
        g.bilinear_resize(v[0], 5, 7)
    });
}

#[test]
fn grad_normalizations() {
    check_op("softmax", &[&[3, 5]], |g, v| g.softmax(v[0]));
    check_op("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| {
        g.layer_norm(v[0], v[1], v[2], NORM_EPS)
    });
    check_op("batch_norm_train", &[&[3, 2, 2, 3], &[2], &[2]], |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train, NORM_EPS)?.0)
    });
    check_op("batch_norm_eval", &[&[2, 2, 2, 2], &[2], &[2]], |g, v| {
        let mode = BnMode::Eval {
            mean: &[0.1, -0.2],
            var: &[0.5, 2.0],
        };
        Ok(g.batch_norm(v[0], v[1], v[2], mode, NORM_EPS)?.0)
    });
}

#[test]
fn grad_conv2d() {
    check_op(
        "conv2d_3x3",
        &[&[1, 2, 4, 4], &[3, 2, 3, 3], &[3]],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    );
    check_op(
        "conv2d_stride2",
        &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    );
    check_op("conv2d_1x1", &[&[2, 3, 3, 3], &[2, 3, 1, 1]], |g, v| {
        g.conv2d(v[0], v[1], None, 1, 0)
    });
}

#[test]
fn grad_dropout_with_fixed_mask() {
    check_op("dropout", &[&[20]], |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Ok(g.dropout(v[0], 0.3, &mut rng))
    });
}

#[test]
fn shared_input_gradients_accumulate() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Array::from_f64(vec![2], &[1.5, -2.0]).unwrap(), true);
    let a = g.scale(x, 3.0);
    let b = g.add(a, x).unwrap();
    let l = g.sum_all(b);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 4.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1e4f64..1e4, 1..40)) {
            let mut g = Graph::<f64>::new();
            let n = v.len();
            let x = g.constant(Array::new(vec![n], v).unwrap());
            let y = g.softmax(x).unwrap();
            let s: f64 = g.value(y).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(g.value(y).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn resize_to_same_size_is_exact(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_array(&mut rng, &[2, h, w]);
            prop_assert_eq!(bilinear_resize(&x, h, w).unwrap(), x);
        }

        #[test]
        fn conv_3x3_pad1_preserves_spatial(h in 1usize..9, w in 1usize..9, cin in 1usize..3, cout in 1usize..3) {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Array::zeros(vec![1, cin, h, w]));
            let k = g.constant(Array::zeros(vec![cout, cin, 3, 3]));
            let y = g.conv2d(x, k, None, 1, 1).unwrap();
            prop_assert_eq!(g.shape(y), &[1, cout, h, w][..]);
        }

        #[test]
        fn fft_parseval(v in proptest::collection::vec((-10f64..10.0, -10f64..10.0), 1..64)) {
            let x: Vec<num_complex::Complex<f64>> = v.iter().map(|&(r, i)| num_complex::Complex::new(r, i)).collect();
            let p = fft_power(&x);
            let energy: f64 = x.iter().map(|c| c.norm_sqr()).sum();
            let n = x.len() as f64;
            prop_assert!((p.sum() - n * energy).abs() <= 1e-9 * (1.0 + n * energy));
        }
    }
}
