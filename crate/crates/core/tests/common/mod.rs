#![allow(dead_code)]

pub mod eer;
pub mod pipelines;
pub mod primitives;

use kdsrl::data::ExperimentConfig;
use kdsrl::{Graph, Precision, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Standard normal values pushed at least `gap` away from zero, for ops with
/// a kink at the origin.
pub fn randn_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let t = randn(rng, shape);
    t.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
        .unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_scaled(a, b, 1e-6)
}

/// Relative error whose denominator never drops below `floor`.
pub fn rel_err_scaled(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst per-coordinate relative error between reverse-mode gradients and
/// central finite differences (step 1e-5, f64) of `f` at `inputs`.
///
/// `f` must return a scalar.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    const STEP: f64 = 1e-5;
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new(Precision::F64);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };

    let mut g = Graph::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars).unwrap();
    g.backward(root).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap();
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i] = bump(&inputs[i], j, STEP);
            minus[i] = bump(&inputs[i], j, -STEP);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

fn bump(t: &Tensor, j: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[j] += delta;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// `sum(out ∘ weights)` with fixed pseudo-random weights, so every output
/// coordinate contributes a distinct amount to the scalar root.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(out).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = g.constant(randn(&mut r, &shape));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Experiment small enough to fine-tune in milliseconds, in f64.
pub fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("precision", "f64"),
        ("data.keywords", "3"),
        ("data.speakers", "3"),
        ("data.train_per_pair", "2"),
        ("data.test_per_pair", "1"),
        ("data.sample_length", "64"),
        ("model.conv_layers", "4:4:2,4:3:2"),
        ("model.dim", "8"),
        ("model.heads", "2"),
        ("model.ffn_dim", "16"),
        ("model.pos_conv_kernel", "4"),
        ("model.pos_conv_groups", "2"),
        ("teacher.layers", "2"),
        ("student.layers", "2"),
        ("distill.teacher_layers", "1,2"),
        ("kws.classes", "3"),
        ("train.batch_size", "4"),
        ("train.lr", "1e-3"),
        ("train.iterations", "12"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}
