//! Finite-difference and identity checks for every differentiable op.

use mba_core::tensor::{grad_check, BnMode, Graph, NodeId, Tensor};
use mba_core::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const SEEDS: u64 = 20;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    // Keep values away from the ReLU/PReLU kink so central differences are valid.
    Tensor::from_fn(dims, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Random projection to a scalar so every output element gets a distinct weight.
fn project(g: &mut Graph, y: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let n = g.value(y).numel();
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.weighted_sum(y, w)
}

/// Runs `grad_check` over 20 seeds; `build` gets the graph, the input node
/// and a seeded generator for any extra operands.
fn check_op(dims: &[usize], tol: f64, build: impl Fn(&mut Graph, NodeId, &mut ChaCha8Rng) -> Result<NodeId>) -> f64 {
    let mut worst = 0.0_f64;
    for seed in 0..SEEDS {
        let x = random(dims, &mut ChaCha8Rng::seed_from_u64(seed));
        let err = grad_check(
            |g, n| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let y = build(g, n, &mut rng)?;
                project(g, y, &mut rng)
            },
            &x,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < tol, "max relative error {worst:e} >= {tol:e}");
    worst
}

fn operand(g: &mut Graph, dims: &[usize], rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let t = random(dims, rng);
    g.constant(t)
}

#[test]
fn elementwise_ops() {
    check_op(&[2, 3, 4], 1e-6, |g, x, r| {
        let y = operand(g, &[2, 3, 4], r)?;
        g.add(x, y)
    });
    check_op(&[2, 3, 4], 1e-6, |g, x, r| {
        let y = operand(g, &[2, 3, 4], r)?;
        g.sub(y, x)
    });
    check_op(&[5], 1e-6, |g, x, _| g.scale(x, -2.5));
    check_op(&[3, 4], 1e-6, |g, x, _| g.relu(x));
    check_op(&[3, 4], 1e-6, |g, x, _| {
        let a = g.constant(Tensor::filled(&[1], 0.25))?;
        g.prelu(x, a)
    });
    check_op(&[1], 1e-6, |g, a, r| {
        let x = operand(g, &[3, 4], r)?;
        g.prelu(x, a)
    });
    // linear, so the only error is rounding amplified by 1/eps
    check_op(&[3, 4], 1e-8, |g, x, _| g.sum(x));
}

#[test]
fn softmax_gradient() {
    for axis in 0..3 {
        check_op(&[2, 3, 4], 1e-6, |g, x, _| g.softmax(x, axis));
    }
}

#[test]
fn conv2d_gradients() {
    // Linear in each operand: differences are rounding only, which is
    // relatively large where an entry's gradient nearly cancels.
    // input
    check_op(&[2, 3, 4, 4], 1e-5, |g, x, r| {
        let k = operand(g, &[2, 3, 3, 3], r)?;
        let b = operand(g, &[2], r)?;
        g.conv2d(x, k, Some(b))
    });
    // kernel
    check_op(&[2, 3, 3, 3], 1e-5, |g, k, r| {
        let x = operand(g, &[2, 3, 4, 4], r)?;
        g.conv2d(x, k, None)
    });
    // bias
    check_op(&[2], 1e-6, |g, b, r| {
        let x = operand(g, &[2, 3, 4, 4], r)?;
        let k = operand(g, &[2, 3, 1, 1], r)?;
        g.conv2d(x, k, Some(b))
    });
    // non-square maps and 5x5 kernels
    check_op(&[1, 2, 3, 7], 1e-5, |g, x, r| {
        let k = operand(g, &[3, 2, 5, 5], r)?;
        g.conv2d(x, k, None)
    });
}

#[test]
fn batchnorm_gradients() {
    check_op(&[4, 2, 3, 3], 1e-5, |g, x, r| {
        let gamma = operand(g, &[2], r)?;
        let beta = operand(g, &[2], r)?;
        g.batchnorm(x, gamma, beta, BnMode::Train, None, 1e-5)
    });
    check_op(&[2], 1e-5, |g, gamma, r| {
        let x = operand(g, &[4, 2, 3, 3], r)?;
        let beta = operand(g, &[2], r)?;
        g.batchnorm(x, gamma, beta, BnMode::Train, None, 1e-5)
    });
    check_op(&[2], 1e-5, |g, beta, r| {
        let x = operand(g, &[4, 2, 3, 3], r)?;
        let gamma = operand(g, &[2], r)?;
        g.batchnorm(x, gamma, beta, BnMode::Train, None, 1e-5)
    });
    check_op(&[4, 2, 3, 3], 1e-5, |g, x, r| {
        let gamma = operand(g, &[2], r)?;
        let beta = operand(g, &[2], r)?;
        let mean = [0.3, -0.2];
        let var = [1.5, 0.7];
        g.batchnorm(x, gamma, beta, BnMode::Eval, Some((&mean, &var)), 1e-5)
    });
}

#[test]
fn axial_attention_gradients() {
    check_op(&[2, 3, 2, 4], 1e-6, |g, q, r| {
        let k = operand(g, &[2, 3, 2, 4], r)?;
        g.axial_scores(q, k, 0.7)
    });
    check_op(&[2, 3, 2, 4], 1e-6, |g, k, r| {
        let q = operand(g, &[2, 3, 2, 4], r)?;
        g.axial_scores(q, k, 0.7)
    });
    check_op(&[2, 2, 4, 4], 1e-6, |g, w, r| {
        let v = operand(g, &[2, 3, 2, 4], r)?;
        g.axial_apply(w, v)
    });
    check_op(&[2, 3, 2, 4], 1e-6, |g, v, r| {
        let w = operand(g, &[2, 2, 4, 4], r)?;
        g.axial_apply(w, v)
    });
}

#[test]
fn half_mse_gradient() {
    check_op(&[3, 2, 2], 1e-6, |g, x, r| {
        let t = operand(g, &[3, 2, 2], r)?;
        let l = g.half_mse(x, t)?;
        g.scale(l, 1.0)
    });
}

#[test]
fn composed_stack_gradient() {
    check_op(&[3, 2, 3, 4], 1e-4, |g, x, r| {
        let k = operand(g, &[3, 2, 3, 3], r)?;
        let h = g.conv2d(x, k, None)?;
        let gamma = operand(g, &[3], r)?;
        let beta = operand(g, &[3], r)?;
        let h = g.batchnorm(h, gamma, beta, BnMode::Train, None, 1e-5)?;
        let a = g.constant(Tensor::filled(&[1], 0.25))?;
        let h = g.prelu(h, a)?;
        g.softmax(h, 3)
    });
}

#[test]
fn linear_computation_is_exact() {
    let x = random(&[4, 5], &mut ChaCha8Rng::seed_from_u64(3));
    let err = grad_check(|g, n| g.sum(n), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn grad_check_preconditions() {
    let empty = Tensor::new(&[0], vec![]).unwrap();
    assert!(matches!(
        grad_check(|g, n| g.sum(n), &empty, 1e-6),
        Err(Error::Precondition(_))
    ));
    let x = Tensor::filled(&[2], 1.0);
    assert!(grad_check(|g, n| g.sum(n), &x, 1e-3).is_err());
    assert!(grad_check(|g, n| g.sum(n), &x, 1e-9).is_err());
}

#[test]
fn non_finite_intermediate_names_op() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[2], 1e200)).unwrap();
    let y = g.constant(Tensor::filled(&[2], -1e200)).unwrap();
    let err = g.half_mse(x, y).unwrap_err();
    assert!(matches!(&err, Error::NonFinite { op } if op == "half_mse"), "{err}");
}

#[test]
fn conv_identity_and_zero_kernels() {
    let x = random(&[2, 1, 3, 5], &mut ChaCha8Rng::seed_from_u64(4));
    let mut g = Graph::new();
    let xn = g.constant(x.clone()).unwrap();
    let one = g.constant(Tensor::filled(&[1, 1, 1, 1], 1.0)).unwrap();
    let zero_b = g.constant(Tensor::zeros(&[1])).unwrap();
    let y = g.conv2d(xn, one, Some(zero_b)).unwrap();
    assert_eq!(g.value(y), &x);

    // A 3x3 kernel with a single centred 1 is also the identity.
    let mut centred = Tensor::zeros(&[1, 1, 3, 3]);
    centred.data_mut()[4] = 1.0;
    let c = g.constant(centred).unwrap();
    let y = g.conv2d(xn, c, None).unwrap();
    assert_eq!(g.value(y), &x);

    let zk = g.constant(Tensor::zeros(&[2, 1, 3, 3])).unwrap();
    let zb = g.constant(Tensor::zeros(&[2])).unwrap();
    let y = g.conv2d(xn, zk, Some(zb)).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let bad = g.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(xn, bad, None), Err(Error::Dimension(_))));
}

/// Straightforward six-loop convolution.
fn naive_conv(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let (n, ci, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (co, s) = (k.dims()[0], k.dims()[2]);
    let p = (s / 2) as isize;
    let mut out = vec![0.0; n * co * h * w];
    for b in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..s {
                            for kx in 0..s {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += k.data()[((o * ci + c) * s + ky) * s + kx]
                                        * x.data()[((b * ci + c) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[((b * co + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loops_across_chunk_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for dims in [[1, 2, 4, 16], [70, 3, 4, 16], [9, 2, 5, 7]] {
        let x = random(&dims, &mut rng);
        let k = random(&[4, dims[1], 3, 3], &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x.clone()).unwrap();
        let kn = g.constant(k.clone()).unwrap();
        let y = g.conv2d(xn, kn, None).unwrap();
        let oracle = naive_conv(&x, &k);
        let diff = g
            .value(y)
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn batchnorm_train_normalizes_and_zero_gamma_zeroes() {
    let x = random(&[4, 2, 3, 3], &mut ChaCha8Rng::seed_from_u64(6));
    let mut g = Graph::new();
    let xn = g.constant(x).unwrap();
    let one = g.constant(Tensor::filled(&[2], 1.0)).unwrap();
    let zero = g.constant(Tensor::zeros(&[2])).unwrap();
    let y = g.batchnorm(xn, one, zero, BnMode::Train, None, 1e-5).unwrap();
    let v = g.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| v[(b * 2 + c) * 9..(b * 2 + c + 1) * 9].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / 36.0;
        let var = vals.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 36.0;
        assert!(mean.abs() < 1e-10);
        // epsilon shrinks the variance slightly below 1
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
    let y = g.batchnorm(xn, zero, zero, BnMode::Train, None, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|a| *a == 0.0));
    // constant channel: epsilon keeps it finite
    let c = g.constant(Tensor::filled(&[2, 2, 1, 1], 3.0)).unwrap();
    let y = g.batchnorm(c, one, zero, BnMode::Train, None, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|a| *a == 0.0));
    let tiny = g.constant(Tensor::filled(&[1, 2, 1, 1], 3.0)).unwrap();
    assert!(g.batchnorm(tiny, one, zero, BnMode::Train, None, 1e-5).is_err());
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap()).unwrap();
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), [0.0, 2.0]);
    let a = g.constant(Tensor::filled(&[1], 0.25)).unwrap();
    let p = g.prelu(x, a).unwrap();
    assert_eq!(g.value(p).data(), [-0.25, 2.0]);
    let eq = g.constant(Tensor::filled(&[1, 5], 0.7)).unwrap();
    let s = g.softmax(eq, 1).unwrap();
    assert!(g.value(s).data().iter().all(|v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[3, 2, 4, 4], &mut rng);
        let k = random(&[2, 2, 3, 3], &mut rng);
        let mut g = Graph::new();
        let mut leaf = x;
        leaf.set_requires_grad(true);
        let xn = g.input(leaf).unwrap();
        let kn = g.constant(k).unwrap();
        let y = g.conv2d(xn, kn, None).unwrap();
        let y = g.softmax(y, 3).unwrap();
        let l = project(&mut g, y, &mut rng).unwrap();
        g.backward(l).unwrap();
        (g.value(y).clone(), g.grad(xn).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 12), axis in 0usize..2) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], values).unwrap()).unwrap();
        let s = g.softmax(x, axis).unwrap();
        let v = g.value(s).data();
        prop_assert!(v.iter().all(|p| *p >= 0.0));
        let (outer, len, inner) = if axis == 0 { (1, 3, 4) } else { (3, 4, 1) };
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..len).map(|j| v[(o * len + j) * inner + i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity(values in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 6), c in 1usize..3) {
        let x = Tensor::new(&[1, 2, 3, 6], values).unwrap();
        let mut kernel = Tensor::zeros(&[2, 2, 3, 3]);
        for ch in 0..2 {
            kernel.data_mut()[(ch * 2 + ch) * 9 + 4] = 1.0;
        }
        let mut g = Graph::new();
        let xn = g.constant(x.clone()).unwrap();
        let kn = g.constant(kernel).unwrap();
        let mut y = xn;
        for _ in 0..c {
            y = g.conv2d(y, kn, None).unwrap();
        }
        prop_assert_eq!(g.value(y), &x);
    }
}
