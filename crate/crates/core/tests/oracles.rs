use panelf_core::ops::{self, attention, conv2d, matmul};
use panelf_core::verify::run_suite;
use panelf_core::{grad_check, Real, Result, Rng, ScalarFn, Tensor};
use proptest::prelude::*;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    (cin, h, wd): (usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = 0.0;
                for c in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x[(c * h + iy as usize) * wd + ix as usize]
                                    * w[((o * cin + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = acc;
            }
        }
    }
    (out, ho, wo)
}

fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal_f64()).collect()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(11);
    let a = randn(&mut rng, 12);
    let b = randn(&mut rng, 8);
    let expected = naive_matmul(&a, &b, 3, 4, 2);
    let ta = Tensor::<f32>::from_f64(vec![3, 4], &a).unwrap();
    let tb = Tensor::<f32>::from_f64(vec![4, 2], &b).unwrap();
    let got = matmul(&ta, &tb).unwrap().to_f64_vec();
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-5, "{g} vs {e}");
    }
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = Rng::new(12);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (1, 2)] {
        let x = randn(&mut rng, 3 * 7 * 7);
        let w = randn(&mut rng, 2 * 3 * 3 * 3);
        let (expected, ho, wo) = naive_conv(&x, &w, (3, 7, 7), (2, 3, 3), stride, pad);
        let tx = Tensor::<f32>::from_f64(vec![3, 7, 7], &x).unwrap();
        let tw = Tensor::<f32>::from_f64(vec![2, 3, 3, 3], &w).unwrap();
        let y = conv2d(&tx, &tw, stride, pad).unwrap();
        assert_eq!(y.shape(), &[2, ho, wo]);
        // f32 compute against an f64 reference; inputs are exactly representable
        // up to f32 rounding, so compare with a relative allowance per term.
        for (g, e) in y.to_f64_vec().iter().zip(&expected) {
            assert!((g - e).abs() <= 1e-6 * (1.0 + e.abs()) * 27.0, "{g} vs {e}");
        }
    }
}

#[test]
fn conv_matches_nested_loops_in_f64() {
    let mut rng = Rng::new(13);
    let x = randn(&mut rng, 2 * 6 * 6);
    let w = randn(&mut rng, 4 * 2 * 3 * 3);
    let (expected, _, _) = naive_conv(&x, &w, (2, 6, 6), (4, 3, 3), 1, 1);
    let tx = Tensor::<f64>::from_f64(vec![2, 6, 6], &x).unwrap();
    let tw = Tensor::<f64>::from_f64(vec![4, 2, 3, 3], &w).unwrap();
    for (g, e) in conv2d(&tx, &tw, 1, 1).unwrap().to_vec().iter().zip(&expected) {
        assert!((g - e).abs() <= 1e-6);
    }
}

#[test]
fn attention_matches_f64_reference() {
    let mut rng = Rng::new(14);
    let (n, m, d, h) = (2, 3, 4, 5);
    let q = randn(&mut rng, n * d);
    let k = randn(&mut rng, m * d);
    let v = randn(&mut rng, m * h);
    let mut expected = vec![0.0; n * h];
    for i in 0..n {
        let logits: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|p| q[i * d + p] * k[j * d + p]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for j in 0..m {
            let wgt = (logits[j] - max).exp() / z;
            for c in 0..h {
                expected[i * h + c] += wgt * v[j * h + c];
            }
        }
    }
    let out = attention(
        &Tensor::<f32>::from_f64(vec![n, d], &q).unwrap(),
        &Tensor::<f32>::from_f64(vec![m, d], &k).unwrap(),
        &Tensor::<f32>::from_f64(vec![m, h], &v).unwrap(),
    )
    .unwrap();
    for (g, e) in out.to_f64_vec().iter().zip(&expected) {
        assert!((g - e).abs() < 1e-5, "{g} vs {e}");
    }
}

struct ConvMse {
    w: Vec<f64>,
    target: Vec<f64>,
}

impl ScalarFn for ConvMse {
    fn eval<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = Tensor::<T>::from_f64(vec![2, 2, 3, 3], &self.w)?;
        let y = conv2d(x, &w, 1, 1)?;
        let target = Tensor::<T>::from_f64(y.shape().to_vec(), &self.target)?;
        ops::mse(&y, &target)
    }
}

#[test]
fn grad_check_conv_mse() {
    let mut rng = Rng::new(15);
    let f = ConvMse {
        w: randn(&mut rng, 36),
        target: randn(&mut rng, 2 * 5 * 5),
    };
    let x = Tensor::<f64>::from_f64(vec![2, 5, 5], &randn(&mut rng, 50)).unwrap();
    let r = grad_check(&f, &x, 1e-4).unwrap();
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
}

struct SumSquares;

impl ScalarFn for SumSquares {
    fn eval<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.square()?.sum()
    }
}

#[test]
fn grad_check_sum_of_squares() {
    let mut rng = Rng::new(16);
    let x = Tensor::<f64>::from_f64(vec![4, 4], &randn(&mut rng, 16)).unwrap();
    assert!(grad_check(&SumSquares, &x, 1e-3).unwrap().max_rel_err <= 1e-4);
}

#[test]
fn every_primitive_passes_ten_seeds() {
    let outcomes = run_suite(&(0..10).collect::<Vec<_>>()).unwrap();
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::new(17);
        let x = rng.normal_tensor(&[3, 8, 8]).unwrap();
        let w = rng.normal_tensor(&[4, 3, 3, 3]).unwrap();
        let g = Tensor::full(vec![4], 1.0f32);
        let b = Tensor::zeros(vec![4]);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        ops::group_norm(&y, 2, &g, &b).unwrap().silu().unwrap().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn two_graph_copies_double_the_gradient() {
    let mut rng = Rng::new(18);
    let w = Tensor::<f64>::param(vec![3, 3], randn(&mut rng, 9)).unwrap();
    let x = Tensor::<f64>::from_f64(vec![2, 3], &randn(&mut rng, 6)).unwrap();
    let graph = || ops::linear(&x, &w, None).unwrap().silu().unwrap().sum().unwrap();

    graph().backward().unwrap();
    let single = w.grad().unwrap();
    w.zero_grad();
    graph().add(&graph()).unwrap().backward().unwrap();
    let double = w.grad().unwrap();
    for (s, d) in single.iter().zip(&double) {
        assert!((2.0 * s - d).abs() < 1e-12);
    }
}

#[test]
fn backward_twice_accumulates() {
    let x = Tensor::<f64>::param(vec![2], vec![1.0, -2.0]).unwrap();
    x.square().unwrap().sum().unwrap().backward().unwrap();
    x.square().unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, -8.0]);
}

proptest! {
    #[test]
    fn matmul_agrees_with_naive(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let a = randn(&mut rng, m * k);
        let b = randn(&mut rng, k * n);
        let expected = naive_matmul(&a, &b, m, k, n);
        let got = matmul(
            &Tensor::<f64>::from_f64(vec![m, k], &a).unwrap(),
            &Tensor::<f64>::from_f64(vec![k, n], &b).unwrap(),
        ).unwrap().to_vec();
        for (g, e) in got.iter().zip(&expected) {
            prop_assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f32>::from_f64(vec![rows, cols], &randn(&mut rng, rows * cols)).unwrap();
        let y = x.softmax(1).unwrap().to_vec();
        for r in y.chunks(cols) {
            prop_assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            prop_assert!(r.iter().all(|&p| p > 0.0));
        }
    }
}
