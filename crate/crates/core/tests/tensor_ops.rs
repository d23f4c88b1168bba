mod common;

use common::primitives::{cases, SEEDS, TOL};
use common::{randn, rng};
use kdsrl::{Graph, Precision, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_finite_differences() {
    for case in cases() {
        let (err, seed) = case.worst();
        assert!(err < TOL, "{}: seed {seed} relative error {err:e}", case.name);
    }
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn naive_conv1d(x: &Tensor, w: &Tensor, stride: usize) -> Vec<f64> {
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let t_out = (t - k) / stride + 1;
    let mut out = vec![0.0; cout * t_out];
    for o in 0..cout {
        for i in 0..t_out {
            let mut s = 0.0;
            for c in 0..cin {
                for j in 0..k {
                    s += w.at(&[o, c, j]) * x.at(&[c, i * stride + j]);
                }
            }
            out[o * t_out + i] = s;
        }
    }
    out
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-300))
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (a, b) = (randn(&mut r, &[7, 5]), randn(&mut r, &[5, 3]));
        let mut g = Graph::new(Precision::F64);
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb).unwrap();
        assert_eq!(g.shape(y), &[7, 3]);
        assert!(rel_close(g.value(y).data(), &naive_matmul(&a, &b), 1e-12));
    }
}

#[test]
fn matmul_identity_and_zeros() {
    let mut r = rng(3);
    let b = randn(&mut r, &[3, 6]);
    let mut g = Graph::new(Precision::F64);
    let i3 = g.constant(Tensor::identity(3));
    let vb = g.constant(b.clone());
    let y = g.matmul(i3, vb).unwrap();
    assert!(g.value(y).bit_eq(&b));

    let z = g.constant(Tensor::zeros(vec![2, 4]));
    let any = g.constant(randn(&mut r, &[4, 5]));
    let y = g.matmul(z, any).unwrap();
    assert!(g.value(y).bit_eq(&Tensor::zeros(vec![2, 5])));
}

#[test]
fn conv1d_matches_nested_loops() {
    for seed in 0..SEEDS {
        let mut r = rng(100 + seed);
        let stride = 1 + (seed as usize % 3);
        let x = randn(&mut r, &[3, 23]);
        let w = randn(&mut r, &[4, 3, 5]);
        let mut g = Graph::new(Precision::F64);
        let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv1d(vx, vw, stride).unwrap();
        assert_eq!(g.shape(y), &[4, (23 - 5) / stride + 1]);
        assert!(rel_close(g.value(y).data(), &naive_conv1d(&x, &w, stride), 1e-12));
    }
}

#[test]
fn f32_mode_stores_rounded_values() {
    let mut g = Graph::new(Precision::F32);
    let x = g.constant(Tensor::vector(vec![0.1, 0.2]).unwrap());
    let y = g.scale(x, 1.0 / 3.0).unwrap();
    for &v in g.value(y).data() {
        assert_eq!(v, v as f32 as f64);
    }
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut r = rng(9);
        let mut g = Graph::new(Precision::F32);
        let x = g.constant(randn(&mut r, &[6, 8]));
        let w = g.constant(randn(&mut r, &[8, 8]));
        let gain = g.constant(Tensor::full(vec![8], 1.0));
        let bias = g.constant(Tensor::zeros(vec![8]));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.layer_norm(h, gain, bias).unwrap();
        let h = g.softmax(h).unwrap();
        g.value(h).clone()
    };
    assert!(run().bit_eq(&run()));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..9, spread in 0.1f64..30.0) {
        let mut r = rng(seed);
        let x = randn(&mut r, &[rows, cols]).map(|v| v * spread).unwrap();
        let mut g = Graph::new(Precision::F64);
        let vx = g.constant(x);
        let y = g.softmax(vx).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(seed in 0u64..1000, rows in 1usize..5, cols in 2usize..17, offset in -50.0f64..50.0) {
        let mut r = rng(seed);
        let x = randn(&mut r, &[rows, cols]).map(|v| 3.0 * v + offset).unwrap();
        let mut g = Graph::new(Precision::F64);
        let vx = g.constant(x.clone());
        let gain = g.constant(Tensor::full(vec![cols], 1.0));
        let bias = g.constant(Tensor::zeros(vec![cols]));
        let y = g.layer_norm(vx, gain, bias).unwrap();
        for (row, input) in g.value(y).data().chunks(cols).zip(x.data().chunks(cols)) {
            let in_mu = input.iter().sum::<f64>() / cols as f64;
            let in_var = input.iter().map(|v| (v - in_mu).powi(2)).sum::<f64>() / cols as f64;
            // ε = 1e-5 pulls the variance of near-constant rows below one.
            if in_var < 0.1 {
                continue;
            }
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mu.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
