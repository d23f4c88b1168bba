//! Layer-wise feature distillation from a teacher encoder into a shallower
//! student.
//!
//! For each distilled teacher layer `p`, a linear prediction head on the
//! student's final hidden state regresses the teacher features. The per-layer
//! loss is
//!
//! ```text
//! L_p = Σ_i [ (1/K)·‖f_i − f̄_i‖₁ − log σ(cos(f_i, f̄_i)) ]
//! ```
//!
//! summed over the `T` frames, averaged over the batch, and the training
//! objective is the mean of `L_p` over the distilled layers.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{layer_prefix, EncoderModel, Mode, ModelConfig, ModelError};
use crate::params::{BoundParams, Init, ParamStore};
use crate::rng;
use crate::tensor::{Graph, Precision, Tensor, TensorError, Var};
use crate::trainer::{clip_global_norm, AdamConfig, AdamState, EpochSampler, OptimError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistillError {
    #[error("invalid distillation plan: {0}")]
    InvalidPlan(String),
    #[error("teacher and student configs are incompatible: {0}")]
    ConfigMismatch(String),
    #[error("distillation diverged at step {step}")]
    Diverged { step: usize },
    #[error("no distillation data")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Teacher layers to distill, with one prediction head per layer.
///
/// Head parameters are named `{p}.weight` `[student_dim × teacher_dim]` and
/// `{p}.bias` `[teacher_dim]`, with `p` the 1-based teacher layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillPlan {
    teacher_layers: Vec<usize>,
    heads: ParamStore,
}

impl DistillPlan {
    /// Plan with freshly drawn heads.
    pub fn new(
        teacher_layers: Vec<usize>,
        teacher_depth: usize,
        student_dim: usize,
        teacher_dim: usize,
        seed: u64,
        precision: Precision,
    ) -> Result<Self, DistillError> {
        Self::validate_layers(&teacher_layers, teacher_depth)?;
        let mut heads = ParamStore::new();
        let std = 1.0 / (student_dim as f64).sqrt();
        for &p in &teacher_layers {
            heads.init(
                format!("{p}.weight"),
                vec![student_dim, teacher_dim],
                Init::Normal(std),
                rng::derive_seed(seed, "distill.heads"),
                precision,
            );
            heads.init(format!("{p}.bias"), vec![teacher_dim], Init::Zeros, seed, precision);
        }
        Ok(DistillPlan {
            teacher_layers,
            heads,
        })
    }

    /// Plan whose heads are identity maps (requires equal widths).
    pub fn identity(teacher_layers: Vec<usize>, teacher_depth: usize, dim: usize) -> Result<Self, DistillError> {
        Self::validate_layers(&teacher_layers, teacher_depth)?;
        let mut heads = ParamStore::new();
        for &p in &teacher_layers {
            heads.insert(format!("{p}.weight"), Tensor::identity(dim));
            heads.insert(format!("{p}.bias"), Tensor::zeros(vec![dim]));
        }
        Ok(DistillPlan {
            teacher_layers,
            heads,
        })
    }

    /// Rebuilds a plan from stored heads.
    pub fn from_params(
        teacher_layers: Vec<usize>,
        teacher_depth: usize,
        heads: ParamStore,
    ) -> Result<Self, DistillError> {
        Self::validate_layers(&teacher_layers, teacher_depth)?;
        for &p in &teacher_layers {
            for part in ["weight", "bias"] {
                if !heads.contains(&format!("{p}.{part}")) {
                    return Err(DistillError::InvalidPlan(format!("missing head {p}.{part}")));
                }
            }
        }
        if heads.len() != 2 * teacher_layers.len() {
            return Err(DistillError::InvalidPlan("unexpected head parameters".into()));
        }
        Ok(DistillPlan {
            teacher_layers,
            heads,
        })
    }

    fn validate_layers(layers: &[usize], depth: usize) -> Result<(), DistillError> {
        if layers.is_empty() {
            return Err(DistillError::InvalidPlan("no teacher layers".into()));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DistillError::InvalidPlan(format!(
                "teacher layers {layers:?} are not strictly increasing"
            )));
        }
        if layers[0] == 0 || *layers.last().unwrap() > depth {
            return Err(DistillError::InvalidPlan(format!(
                "teacher layers {layers:?} must lie in 1..={depth}"
            )));
        }
        Ok(())
    }

    pub fn teacher_layers(&self) -> &[usize] {
        &self.teacher_layers
    }

    pub fn heads(&self) -> &ParamStore {
        &self.heads
    }

    pub(crate) fn heads_mut(&mut self) -> &mut ParamStore {
        &mut self.heads
    }

    pub fn count_parameters(&self) -> usize {
        self.heads.numel()
    }

    /// Applies the head for teacher layer `p` to `x[T×student_dim]`.
    pub fn predict(&self, g: &mut Graph, p: &BoundParams, layer: usize, x: Var) -> Result<Var, TensorError> {
        let y = g.matmul(x, p.var(&format!("{layer}.weight")))?;
        g.add(y, p.var(&format!("{layer}.bias")))
    }
}

/// The two summed terms of the loss, kept apart for inspection.
#[derive(Debug, Clone, Copy)]
pub struct DistillTerms {
    /// `Σ_i (1/K)·‖f_i − f̄_i‖₁`
    pub l1: Var,
    /// `Σ_i −log σ(cos(f_i, f̄_i))`
    pub cos: Var,
}

pub fn distillation_terms(g: &mut Graph, teacher: Var, student: Var) -> Result<DistillTerms, TensorError> {
    let (ts, ss) = (g.shape(teacher).to_vec(), g.shape(student).to_vec());
    if ts != ss || ts.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "distillation_loss",
            lhs: ts,
            rhs: ss,
        });
    }
    let k = ts[1] as f64;
    let diff = g.sub(student, teacher)?;
    let abs = g.abs(diff)?;
    let l1 = g.sum(abs)?;
    let l1 = g.scale(l1, 1.0 / k)?;
    let cos = g.cosine_similarity(student, teacher)?;
    let sig = g.sigmoid(cos)?;
    let log = g.log(sig)?;
    let sum = g.sum(log)?;
    let cos = g.neg(sum)?;
    Ok(DistillTerms { l1, cos })
}

/// Loss between teacher features `[T×K]` and student predictions `[T×K]`.
pub fn distillation_loss(g: &mut Graph, teacher: Var, student: Var) -> Result<Var, TensorError> {
    let t = distillation_terms(g, teacher, student)?;
    g.add(t.l1, t.cos)
}

/// Plain-value evaluation of [`distillation_loss`] in double precision.
pub fn distillation_loss_value(teacher: &Tensor, student: &Tensor) -> Result<f64, TensorError> {
    let mut g = Graph::new(Precision::F64);
    let t = g.constant(teacher.clone());
    let s = g.constant(student.clone());
    let l = distillation_loss(&mut g, t, s)?;
    Ok(g.value(l).item())
}

/// Loss of one batch: per distilled layer and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatchLoss {
    pub per_layer: Vec<(usize, f64)>,
    pub total: f64,
}

/// Copies the teacher front-end and its first `student_cfg` transformer
/// layers into a new student.
pub fn init_student_from_teacher(
    teacher: &EncoderModel,
    student_cfg: &ModelConfig,
) -> Result<EncoderModel, DistillError> {
    let t = teacher.config();
    if t.conv_layers != student_cfg.conv_layers {
        return Err(DistillError::ConfigMismatch("conv front-ends differ".into()));
    }
    if t.model_dim != student_cfg.model_dim
        || t.num_heads != student_cfg.num_heads
        || t.ffn_dim != student_cfg.ffn_dim
        || t.pos_conv_kernel != student_cfg.pos_conv_kernel
        || t.pos_conv_groups != student_cfg.pos_conv_groups
    {
        return Err(DistillError::ConfigMismatch(format!(
            "teacher dim {}/{} heads, student dim {}/{} heads",
            t.model_dim, t.num_heads, student_cfg.model_dim, student_cfg.num_heads
        )));
    }
    if student_cfg.num_transformer_layers > t.num_transformer_layers {
        return Err(DistillError::ConfigMismatch(format!(
            "student depth {} exceeds teacher depth {}",
            student_cfg.num_transformer_layers, t.num_transformer_layers
        )));
    }
    let keep: Vec<String> = (student_cfg.num_transformer_layers..t.num_transformer_layers)
        .map(layer_prefix)
        .collect();
    let params: ParamStore = teacher
        .params()
        .iter()
        .filter(|(n, _)| !keep.iter().any(|pre| n.starts_with(pre.as_str())))
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    Ok(EncoderModel::from_params(student_cfg.clone(), params)?)
}

/// Settings of a distillation run.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
}

/// One row of the distillation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillStep {
    pub step: usize,
    pub loss: DistillBatchLoss,
}

pub fn trace_csv(plan: &DistillPlan, trace: &[DistillStep]) -> String {
    let mut out = String::from("step");
    for p in plan.teacher_layers() {
        let _ = write!(out, ",layer_{p}");
    }
    out.push_str(",total\n");
    for row in trace {
        let _ = write!(out, "{}", row.step);
        for (_, v) in &row.loss.per_layer {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", row.loss.total);
    }
    out
}

/// Distils `teacher` into `student` on unlabeled waveforms.
///
/// The teacher is read-only. Its hidden states are computed once per
/// utterance and reused across epochs. Step `s` draws the `s`-th batch of a
/// per-epoch shuffled stream.
pub fn run_distillation(
    teacher: &EncoderModel,
    student: &mut EncoderModel,
    plan: &mut DistillPlan,
    data: &[Tensor],
    settings: &DistillSettings,
) -> Result<Vec<DistillStep>, DistillError> {
    if settings.steps == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() || settings.batch_size == 0 {
        return Err(DistillError::EmptyData);
    }
    settings.adam.validate()?;
    let top = *plan.teacher_layers().last().unwrap();
    if top > teacher.depth() {
        return Err(DistillError::InvalidPlan(format!(
            "layer {top} exceeds teacher depth {}",
            teacher.depth()
        )));
    }
    let mut sampler = EpochSampler::new(data.len(), settings.seed, "distill");
    let mut cache: HashMap<usize, Vec<Tensor>> = HashMap::new();
    let mut adam = AdamState::new(settings.adam);
    let mut trace = Vec::with_capacity(settings.steps);
    let prec = settings.precision;

    for step in 0..settings.steps {
        let batch = sampler.batch(step * settings.batch_size, settings.batch_size);
        let mut g = Graph::new(prec);
        let sp = student.bind(&mut g);
        let hp = BoundParams::bind(&mut g, plan.heads(), true);
        let mut dropout = rng::stream(settings.seed, &format!("distill/dropout{step}"));
        let n_layers = plan.teacher_layers().len();
        let mut per_layer: Vec<Vec<Var>> = vec![Vec::new(); n_layers];

        let result: Result<Var, DistillError> = (|| {
            for &idx in &batch {
                if !cache.contains_key(&idx) {
                    let hidden = teacher.forward_hidden(&data[idx], top, prec)?;
                    let feats = plan
                        .teacher_layers()
                        .iter()
                        .map(|&p| hidden[p].clone())
                        .collect();
                    cache.insert(idx, feats);
                }
                let wave = g.constant(data[idx].clone());
                let depth = student.depth();
                let hs = student.forward(&mut g, &sp, wave, depth, Mode::Train(&mut dropout))?;
                let last = hs[depth];
                for (j, &p) in plan.teacher_layers().iter().enumerate() {
                    let pred = plan.predict(&mut g, &hp, p, last)?;
                    let target = g.constant(cache[&idx][j].clone());
                    per_layer[j].push(distillation_loss(&mut g, target, pred)?);
                }
            }
            let layer_means = per_layer
                .iter()
                .map(|ls| g.average(ls))
                .collect::<Result<Vec<_>, _>>()?;
            let total = g.average(&layer_means)?;
            g.backward(total)?;
            Ok(total)
        })();

        let total = match result {
            Ok(t) => t,
            Err(
                DistillError::Tensor(TensorError::NonFinite { .. })
                | DistillError::Model(ModelError::Tensor(TensorError::NonFinite { .. })),
            ) => return Err(DistillError::Diverged { step }),
            Err(e) => return Err(e),
        };
        let total_value = g.value(total).item();
        if !total_value.is_finite() {
            return Err(DistillError::Diverged { step });
        }
        let per_layer_values = plan
            .teacher_layers()
            .iter()
            .zip(&per_layer)
            .map(|(&p, ls)| {
                let mean = ls.iter().map(|&l| g.value(l).item()).sum::<f64>() / ls.len() as f64;
                (p, mean)
            })
            .collect();

        let mut sg = sp.grads(&g);
        let mut hg = hp.grads(&g);
        if let Some(max) = settings.clip_norm {
            clip_global_norm(&mut [&mut sg, &mut hg], max);
        }
        let applied = adam
            .step_group("srl.", student.params_mut(), &sg, prec)
            .and_then(|_| adam.step_group("pred.", plan.heads_mut(), &hg, prec));
        match applied {
            Err(OptimError::NonFiniteGrad(_)) => return Err(DistillError::Diverged { step }),
            other => other?,
        }
        trace.push(DistillStep {
            step,
            loss: DistillBatchLoss {
                per_layer: per_layer_values,
                total: total_value,
            },
        });
    }
    Ok(trace)
}
