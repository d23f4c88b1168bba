//! Finite-difference checks through whole loss pipelines on a tiny encoder.

use kdsrl::distill::{distillation_loss, DistillPlan};
use kdsrl::heads::{task_loss, Task, TaskHead};
use kdsrl::model::{ConvLayer, EncoderModel, Mode, ModelConfig};
use kdsrl::params::{BoundParams, ParamStore};
use kdsrl::{Graph, Precision, Tensor, Var};

use super::{randn, rel_err_scaled, rng};

const STEP: f64 = 1e-5;
const WAVE_LEN: usize = 40;

pub fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        conv_layers: vec![ConvLayer::new(4, 4, 2), ConvLayer::new(4, 3, 2)],
        model_dim: 8,
        num_transformer_layers: layers,
        num_heads: 2,
        ffn_dim: 16,
        pos_conv_kernel: 4,
        pos_conv_groups: 2,
        dropout: 0.0,
    }
}

fn bumped(store: &ParamStore, name: &str, j: usize, delta: f64) -> ParamStore {
    store
        .iter()
        .map(|(n, t)| {
            let mut t = t.clone();
            if n == name {
                let mut data = t.data().to_vec();
                data[j] += delta;
                t = Tensor::new(t.shape().to_vec(), data).unwrap();
            }
            (n.to_string(), t)
        })
        .collect()
}

/// Worst relative error over every coordinate of every store.
fn check_stores(stores: &[ParamStore], f: &dyn Fn(&mut Graph, &[BoundParams]) -> Var) -> f64 {
    let eval = |stores: &[ParamStore]| {
        let mut g = Graph::new(Precision::F64);
        let bound: Vec<BoundParams> = stores.iter().map(|s| BoundParams::bind(&mut g, s, false)).collect();
        let out = f(&mut g, &bound);
        g.value(out).item()
    };
    let mut g = Graph::new(Precision::F64);
    let bound: Vec<BoundParams> = stores.iter().map(|s| BoundParams::bind(&mut g, s, true)).collect();
    let root = f(&mut g, &bound);
    g.backward(root).unwrap();
    // Central differences carry roundoff of a few ulp of the largest
    // intermediate over STEP. Coordinates whose true gradient is zero (attention
    // key biases) are compared on that scale instead of their own.
    let floor = 1e-5 * g.value(root).item().abs().max(1.0);

    let mut worst: f64 = 0.0;
    for (k, store) in stores.iter().enumerate() {
        for (name, analytic) in bound[k].grads(&g) {
            for j in 0..analytic.numel() {
                let mut plus = stores.to_vec();
                let mut minus = stores.to_vec();
                plus[k] = bumped(store, &name, j, STEP);
                minus[k] = bumped(store, &name, j, -STEP);
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
                worst = worst.max(rel_err_scaled(analytic.data()[j], numeric, floor));
            }
        }
    }
    worst
}

fn wave(seed: u64) -> Tensor {
    randn(&mut rng(seed ^ 0xa11ce), &[WAVE_LEN])
}

/// Distillation loss through the student encoder and its prediction heads,
/// against features of a three-layer teacher at layers 2 and 3.
pub fn distill_pipeline_error(seed: u64) -> f64 {
    let teacher = EncoderModel::build(tiny_config(3), seed + 1, Precision::F64).unwrap();
    let student = EncoderModel::build(tiny_config(2), seed + 2, Precision::F64).unwrap();
    let plan = DistillPlan::new(vec![2, 3], 3, 8, 8, seed + 3, Precision::F64).unwrap();
    let w = wave(seed);
    let targets = teacher.forward_hidden(&w, 3, Precision::F64).unwrap();
    let f = |g: &mut Graph, b: &[BoundParams]| {
        let x = g.constant(w.clone());
        let hs = student.forward(g, &b[0], x, 2, Mode::Eval).unwrap();
        let mut losses = Vec::new();
        for &p in plan.teacher_layers() {
            let pred = plan.predict(g, &b[1], p, hs[2]).unwrap();
            let t = g.constant(targets[p].clone());
            losses.push(distillation_loss(g, t, pred).unwrap());
        }
        g.average(&losses).unwrap()
    };
    check_stores(&[student.params().clone(), plan.heads().clone()], &f)
}

/// Task loss through the encoder and the task head.
pub fn task_pipeline_error(task: Task, seed: u64) -> f64 {
    let model = EncoderModel::build(tiny_config(2), seed + 5, Precision::F64).unwrap();
    let head = match task {
        Task::Kws => TaskHead::kws(8, 4, seed + 6, Precision::F64).unwrap(),
        Task::Sv => TaskHead::sv(8, 3, 0.2, 30.0, seed + 6, Precision::F64).unwrap(),
    };
    let label = (seed % head.out_dim() as u64) as usize;
    let w = wave(seed);
    let f = |g: &mut Graph, b: &[BoundParams]| {
        let x = g.constant(w.clone());
        let hs = model.forward(g, &b[0], x, 2, Mode::Eval).unwrap();
        task_loss(g, hs[2], label, &head, &b[1]).unwrap()
    };
    check_stores(&[model.params().clone(), head.params().clone()], &f)
}
