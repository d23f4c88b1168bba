//! End-to-end pipeline steps shared by the command-line driver and the
//! integration tests: teacher training, distillation, fine-tuning,
//! evaluation, and checkpoint bundles.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::data::{Checkpoint, ConfigError, DataError, ExperimentConfig, Split, Utterance};
use crate::distill::{init_student_from_teacher, run_distillation, DistillError, DistillPlan, DistillSettings, DistillStep};
use crate::heads::{extract_embedding, HeadError, SvEmbedding, Task, TaskHead};
use crate::metrics::{accuracy, build_trials, compute_eer, MetricError, MetricReport, TrialSet};
use crate::model::{EncoderModel, ModelError};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Graph, Tensor, TensorError};
use crate::trainer::{
    AdamConfig, AdamState, FinetuneState, Finetuner, LabeledSet, Moments, Optimizers, TraceRow, TrainError,
    TrainSchedule,
};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    /// True for non-finite losses or gradients during training.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::Train(TrainError::Diverged { .. }) | Error::Distill(DistillError::Diverged { .. })
        )
    }

    /// True when a required input file is absent.
    pub fn is_missing_input(&self) -> bool {
        matches!(self, Error::Data(DataError::MissingFile(_)))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

fn wave(u: &Utterance) -> Tensor {
    Tensor::from_parts(vec![u.samples.len()], u.samples.iter().map(|&s| s as f64).collect())
}

/// Labeled sets for both tasks over one split. The same waveforms serve
/// both tasks, labeled by keyword and by speaker.
pub fn task_data(utterances: &[Utterance], split: Split) -> BTreeMap<Task, LabeledSet> {
    let chosen: Vec<&Utterance> = utterances.iter().filter(|u| u.split == split).collect();
    let ids: Vec<String> = chosen.iter().map(|u| u.id.clone()).collect();
    let waves: Vec<Tensor> = chosen.iter().map(|u| wave(u)).collect();
    let kws = LabeledSet {
        ids: ids.clone(),
        waves: waves.clone(),
        labels: chosen.iter().map(|u| u.keyword).collect(),
    };
    let sv = LabeledSet {
        ids,
        waves,
        labels: chosen.iter().map(|u| u.speaker).collect(),
    };
    BTreeMap::from([(Task::Kws, kws), (Task::Sv, sv)])
}

/// Number of speaker classes seen in `data`.
pub fn speaker_count(data: &BTreeMap<Task, LabeledSet>) -> usize {
    data.get(&Task::Sv)
        .and_then(|s| s.labels.iter().max())
        .map_or(0, |m| m + 1)
}

/// Fresh KWS and SV heads for fine-tuning.
pub fn new_heads(cfg: &ExperimentConfig, speakers: usize, label: &str) -> Result<BTreeMap<Task, TaskHead>> {
    heads_with_margin(cfg, speakers, cfg.sv_margin, label)
}

fn heads_with_margin(
    cfg: &ExperimentConfig,
    speakers: usize,
    margin: f64,
    label: &str,
) -> Result<BTreeMap<Task, TaskHead>> {
    let seed = rng::derive_seed(cfg.seed, label);
    let kws = TaskHead::kws(cfg.model_dim, cfg.kws_classes, seed, cfg.precision)?;
    let sv = TaskHead::sv(cfg.model_dim, speakers, margin, cfg.sv_scale, seed, cfg.precision)?;
    Ok(BTreeMap::from([(Task::Kws, kws), (Task::Sv, sv)]))
}

/// A model with its heads and, optionally, the state of an unfinished run.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub srl: EncoderModel,
    pub heads: BTreeMap<Task, TaskHead>,
    pub plan: Option<DistillPlan>,
    pub optimizers: Option<Optimizers>,
    pub iteration: usize,
}

impl Bundle {
    pub fn new(srl: EncoderModel, heads: BTreeMap<Task, TaskHead>) -> Self {
        Bundle {
            srl,
            heads,
            plan: None,
            optimizers: None,
            iteration: 0,
        }
    }

    pub fn from_state(state: FinetuneState) -> Self {
        Bundle {
            srl: state.srl,
            heads: state.heads,
            plan: None,
            optimizers: Some(state.optimizers),
            iteration: state.iteration,
        }
    }

    /// Fine-tuning state to continue from. Bundles without optimizer state
    /// start a fresh optimizer for `sched`.
    pub fn into_state(self, sched: &TrainSchedule) -> FinetuneState {
        FinetuneState {
            srl: self.srl,
            heads: self.heads,
            optimizers: self.optimizers.unwrap_or_else(|| Optimizers::fresh(sched)),
            iteration: self.iteration,
        }
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let mut t = ParamStore::new();
        let mut put = |prefix: &str, store: &ParamStore| {
            for (n, v) in store.iter() {
                t.insert(format!("{prefix}{n}"), v.clone());
            }
        };
        put("srl.", self.srl.params());
        for (task, head) in &self.heads {
            put(&format!("head.{task}."), head.params());
        }
        if let Some(plan) = &self.plan {
            put("pred.", plan.heads());
        }
        if let Some(opt) = &self.optimizers {
            let groups: Vec<(String, &AdamState)> = match opt {
                Optimizers::Shared(s) => vec![("shared".into(), s)],
                Optimizers::PerTask(m) => m.iter().map(|(k, s)| (k.to_string(), s)).collect(),
            };
            for (group, st) in groups {
                t.insert(format!("adam.{group}.lr"), Tensor::scalar(st.config().lr));
                for (key, m) in st.iter() {
                    t.insert(format!("adam.{group}.m.{key}"), m.m.clone());
                    t.insert(format!("adam.{group}.v.{key}"), m.v.clone());
                    t.insert(format!("adam.{group}.t.{key}"), Tensor::scalar(m.t as f64));
                }
            }
            t.insert("state.iteration", Tensor::scalar(self.iteration as f64));
        }
        Checkpoint::new(cfg.to_text(), t)
    }

    pub fn save(&self, cfg: &ExperimentConfig, path: &Path) -> Result<String> {
        Ok(self.to_checkpoint(cfg).save(path)?)
    }

    /// Rebuilds a bundle. The encoder depth and distilled layers are read
    /// from the tensor names; everything else comes from the embedded config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ExperimentConfig, Bundle)> {
        let cfg = ExperimentConfig::parse(&ck.config_text)?;
        ck.check_names(&["srl.", "head.kws.", "head.sv.", "pred.", "adam.", "state.iteration"])?;

        let srl_params = ck.group("srl.");
        let depth = srl_params
            .names()
            .filter_map(|n| n.strip_prefix("encoder.layers."))
            .filter_map(|rest| rest.split('.').next()?.parse::<usize>().ok())
            .max()
            .map_or(0, |l| l + 1);
        let srl = EncoderModel::from_params(cfg.config_with_depth(depth), srl_params)?;

        let mut heads = BTreeMap::new();
        for task in [Task::Kws, Task::Sv] {
            let p = ck.group(&format!("head.{task}."));
            if !p.is_empty() {
                heads.insert(task, TaskHead::from_params(task, p, cfg.sv_margin, cfg.sv_scale)?);
            }
        }

        let pred = ck.group("pred.");
        let plan = if pred.is_empty() {
            None
        } else {
            let layers: Vec<usize> = pred
                .names()
                .filter_map(|n| n.strip_suffix(".weight")?.parse().ok())
                .collect();
            Some(DistillPlan::from_params(layers, cfg.teacher_layers, pred)?)
        };

        let adam = ck.group("adam.");
        let optimizers = if adam.is_empty() {
            None
        } else {
            let mut groups: BTreeMap<String, AdamState> = BTreeMap::new();
            for (name, lr) in adam.iter().filter(|(n, _)| n.ends_with(".lr")) {
                let group = name.trim_end_matches(".lr").to_string();
                groups.insert(group, AdamState::new(AdamConfig::with_lr(lr.item())));
            }
            for (group, st) in groups.iter_mut() {
                let m_prefix = format!("{group}.m.");
                for (name, m) in adam.iter() {
                    let Some(key) = name.strip_prefix(&m_prefix) else { continue };
                    let v = adam.get(&format!("{group}.v.{key}"));
                    let t = adam.get(&format!("{group}.t.{key}"));
                    let (Some(v), Some(t)) = (v, t) else {
                        return Err(Error::Checkpoint(format!("incomplete optimizer slot {key}")));
                    };
                    st.insert(
                        key,
                        Moments {
                            m: m.clone(),
                            v: v.clone(),
                            t: t.item() as u64,
                        },
                    );
                }
            }
            Some(if let Some(shared) = groups.remove("shared") {
                Optimizers::Shared(shared)
            } else {
                let mut per = BTreeMap::new();
                for (g, st) in groups {
                    let task: Task = g.parse().map_err(Error::Head)?;
                    per.insert(task, st);
                }
                Optimizers::PerTask(per)
            })
        };
        let iteration = ck
            .tensors
            .get("state.iteration")
            .map_or(0, |t| t.item() as usize);
        Ok((
            cfg,
            Bundle {
                srl,
                heads,
                plan,
                optimizers,
                iteration,
            },
        ))
    }

    pub fn load(path: &Path) -> Result<(ExperimentConfig, Bundle)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Generates the synthetic corpus described by `cfg`.
pub fn synthesize(cfg: &ExperimentConfig) -> Result<Vec<Utterance>> {
    Ok(cfg.synth_spec().generate(cfg.teacher_config().receptive_field())?)
}

/// Trains a teacher from scratch on both tasks.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    train: &BTreeMap<Task, LabeledSet>,
) -> Result<(Bundle, Vec<TraceRow>)> {
    let seed = rng::derive_seed(cfg.seed, "teacher.init");
    let teacher = EncoderModel::build(cfg.teacher_config(), seed, cfg.precision)?;
    let heads = heads_with_margin(cfg, speaker_count(train), cfg.teacher_sv_margin, "teacher.heads")?;
    let mut ft = Finetuner::new(teacher, heads, train, cfg.teacher_schedule())?;
    ft.run()?;
    let (state, trace) = ft.into_parts();
    Ok((Bundle::new(state.srl, state.heads), trace))
}

/// Initializes a student from the teacher and distils into it.
pub fn distill_student(
    cfg: &ExperimentConfig,
    teacher: &EncoderModel,
    waves: &[Tensor],
) -> Result<(Bundle, Vec<DistillStep>)> {
    let mut student = init_student_from_teacher(teacher, &cfg.student_config())?;
    let mut plan = DistillPlan::new(
        cfg.distill_teacher_layers.clone(),
        teacher.depth(),
        cfg.model_dim,
        teacher.config().model_dim,
        rng::derive_seed(cfg.seed, "distill.init"),
        cfg.precision,
    )?;
    let settings = DistillSettings {
        steps: cfg.distill_steps,
        batch_size: cfg.distill_batch_size,
        adam: AdamConfig::with_lr(cfg.distill_lr),
        clip_norm: cfg.train_clip_norm,
        seed: rng::derive_seed(cfg.seed, "distill"),
        precision: cfg.precision,
    };
    let trace = run_distillation(teacher, &mut student, &mut plan, waves, &settings)?;
    let mut bundle = Bundle::new(student, BTreeMap::new());
    bundle.plan = Some(plan);
    Ok((bundle, trace))
}

/// Fine-tunes `srl` with fresh heads on `tasks`.
pub fn finetune(
    cfg: &ExperimentConfig,
    srl: EncoderModel,
    train: &BTreeMap<Task, LabeledSet>,
    sched: TrainSchedule,
) -> Result<(Bundle, Vec<TraceRow>)> {
    let heads = new_heads(cfg, speaker_count(train), "finetune.heads")?;
    let mut ft = Finetuner::new(srl, heads, train, sched)?;
    ft.run()?;
    let (mut state, trace) = ft.into_parts();
    state.srl.set_frozen(false);
    Ok((Bundle::new(state.srl, state.heads), trace))
}

/// Metrics on a held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<MetricReport>,
    pub trials: Option<TrialSet>,
    pub embeddings: Vec<SvEmbedding>,
}

impl Evaluation {
    pub fn value(&self, task: Task) -> Option<f64> {
        self.reports.iter().find(|r| r.task == task).map(|r| r.value)
    }
}

/// KWS accuracy (when a KWS head is present) and SV EER over all
/// same-speaker pairs of the split plus as many random cross-speaker pairs.
pub fn evaluate(
    cfg: &ExperimentConfig,
    srl: &EncoderModel,
    heads: &BTreeMap<Task, TaskHead>,
    test: &BTreeMap<Task, LabeledSet>,
) -> Result<Evaluation> {
    let kws = &test[&Task::Kws];
    let speakers = &test[&Task::Sv].labels;
    let depth = srl.depth();
    let mut predictions = Vec::with_capacity(kws.len());
    let mut embeddings = Vec::with_capacity(kws.len());
    for (i, w) in kws.waves.iter().enumerate() {
        let h = srl.forward_hidden(w, depth, cfg.precision)?.pop().expect("final layer");
        if let Some(head) = heads.get(&Task::Kws) {
            let mut g = Graph::new(cfg.precision);
            let p = head.bind(&mut g);
            let hv = g.constant(h.clone());
            let z = head.logits(&mut g, &p, hv)?;
            let logits = g.value(z).data();
            let best = (0..logits.len())
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                .unwrap();
            predictions.push(best);
        }
        embeddings.push(extract_embedding(kws.ids[i].clone(), &h)?);
    }
    let mut reports = Vec::new();
    if heads.contains_key(&Task::Kws) {
        reports.push(MetricReport::accuracy(accuracy(&predictions, &kws.labels)?, kws.len()));
    }
    let mut trials = build_trials(&kws.ids, speakers, rng::derive_seed(cfg.seed, "eval"));
    let index: BTreeMap<&str, usize> = kws.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let scores = trials
        .trials
        .iter()
        .map(|t| embeddings[index[t.a.as_str()]].score(&embeddings[index[t.b.as_str()]]))
        .collect();
    trials.scores = Some(scores);
    reports.push(MetricReport::eer(compute_eer(&trials)?, trials.trials.len()));
    Ok(Evaluation {
        reports,
        trials: Some(trials),
        embeddings,
    })
}

/// Speaker classes of the SV head in the reference-scale count.
pub const REFERENCE_SPEAKERS: usize = 1211;
/// Keyword classes of the KWS head in the reference-scale count.
pub const REFERENCE_KEYWORDS: usize = 12;
/// Teacher layers distilled at reference scale.
pub const REFERENCE_DISTILL_LAYERS: [usize; 3] = [4, 8, 12];

/// Parameter totals of the reference-scale teacher and student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceCounts {
    pub teacher: usize,
    pub student_encoder: usize,
    pub prediction_heads: usize,
    pub task_heads: usize,
}

impl ReferenceCounts {
    /// Student encoder plus prediction and downstream heads.
    pub fn student(&self) -> usize {
        self.student_encoder + self.prediction_heads + self.task_heads
    }

    pub fn ratio(&self) -> f64 {
        self.student() as f64 / self.teacher as f64
    }
}

/// Counts the BASE teacher and the two-layer student with its three
/// prediction heads and both task heads.
pub fn reference_counts() -> Result<ReferenceCounts> {
    use crate::model::ModelConfig;
    use crate::tensor::Precision;

    let teacher = ModelConfig::base_reference();
    let student = ModelConfig::student_reference();
    let d = teacher.model_dim;
    let plan = DistillPlan::new(
        REFERENCE_DISTILL_LAYERS.to_vec(),
        teacher.num_transformer_layers,
        student.model_dim,
        d,
        0,
        Precision::F32,
    )?;
    let kws = TaskHead::kws(student.model_dim, REFERENCE_KEYWORDS, 0, Precision::F32)?;
    let sv = TaskHead::sv(student.model_dim, REFERENCE_SPEAKERS, 0.2, 30.0, 0, Precision::F32)?;
    Ok(ReferenceCounts {
        teacher: teacher.parameter_count(),
        student_encoder: student.parameter_count(),
        prediction_heads: plan.count_parameters(),
        task_heads: kws.count_parameters() + sv.count_parameters(),
    })
}
