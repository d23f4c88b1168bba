//! Supervised and alternating multi-task fine-tuning.
//!
//! Iteration `i` trains `tasks[i mod |tasks|]` on the next batch of that
//! task's own shuffled stream. A frozen encoder is run in evaluation mode
//! and contributes no parameters to the optimizer; its outputs are computed
//! once per utterance and reused.

mod adam;
mod sampler;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState, Moments, OptimError};
pub use sampler::EpochSampler;

use crate::heads::{task_loss, HeadError, Task, TaskHead};
use crate::model::{EncoderModel, Mode, ModelError};
use crate::rng;
use crate::tensor::{Graph, Precision, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration} ({task})")]
    Diverged { iteration: usize, task: Task },
    #[error("no training data for {0}")]
    EmptyDataset(Task),
    #[error("no head for {0}")]
    MissingHead(Task),
    #[error("{0} labels and waveforms differ in length")]
    RaggedDataset(Task),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Waveforms with one class label each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub waves: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub tasks: Vec<Task>,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub freeze_srl: bool,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// One optimizer state for all tasks, or one per task.
    pub shared_optimizer: bool,
    pub precision: Precision,
}

impl TrainSchedule {
    pub fn new(tasks: Vec<Task>, max_iterations: usize, seed: u64) -> Self {
        TrainSchedule {
            tasks,
            max_iterations,
            batch_size: 16,
            freeze_srl: false,
            seed,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            shared_optimizer: true,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.tasks.is_empty() {
            return Err(TrainError::InvalidSchedule("no tasks".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidSchedule("batch size is zero".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(TrainError::InvalidSchedule(format!("clip norm {c}")));
            }
        }
        self.adam.validate()?;
        Ok(())
    }

    pub fn task_at(&self, iteration: usize) -> Task {
        self.tasks[iteration % self.tasks.len()]
    }

    /// Examples of `task` consumed before `iteration`.
    pub fn consumed(&self, task: Task, iteration: usize) -> usize {
        let n = self.tasks.len();
        let per_cycle = self.tasks.iter().filter(|&&t| t == task).count();
        let partial = self.tasks[..iteration % n].iter().filter(|&&t| t == task).count();
        ((iteration / n) * per_cycle + partial) * self.batch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub task: Task,
    pub loss: f64,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,task,loss\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{}", r.iteration, r.task, r.loss);
    }
    out
}

/// Optimizer state, shared or per task.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizers {
    Shared(AdamState),
    PerTask(BTreeMap<Task, AdamState>),
}

impl Optimizers {
    pub fn fresh(sched: &TrainSchedule) -> Self {
        if sched.shared_optimizer {
            Optimizers::Shared(AdamState::new(sched.adam))
        } else {
            Optimizers::PerTask(
                sched
                    .tasks
                    .iter()
                    .map(|&t| (t, AdamState::new(sched.adam)))
                    .collect(),
            )
        }
    }

    fn for_task(&mut self, task: Task, adam: AdamConfig) -> &mut AdamState {
        match self {
            Optimizers::Shared(s) => s,
            Optimizers::PerTask(m) => m.entry(task).or_insert_with(|| AdamState::new(adam)),
        }
    }
}

/// Everything needed to continue a fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneState {
    pub srl: EncoderModel,
    pub heads: BTreeMap<Task, TaskHead>,
    pub optimizers: Optimizers,
    pub iteration: usize,
}

/// A fine-tuning run that can be advanced, inspected and resumed.
pub struct Finetuner<'a> {
    state: FinetuneState,
    data: &'a BTreeMap<Task, LabeledSet>,
    sched: TrainSchedule,
    samplers: BTreeMap<Task, EpochSampler>,
    frozen_cache: HashMap<(Task, usize), Tensor>,
    trace: Vec<TraceRow>,
}

impl<'a> Finetuner<'a> {
    /// Starts a run with a fresh optimizer.
    pub fn new(
        srl: EncoderModel,
        heads: BTreeMap<Task, TaskHead>,
        data: &'a BTreeMap<Task, LabeledSet>,
        sched: TrainSchedule,
    ) -> Result<Self, TrainError> {
        let optimizers = Optimizers::fresh(&sched);
        Self::resume(
            FinetuneState {
                srl,
                heads,
                optimizers,
                iteration: 0,
            },
            data,
            sched,
        )
    }

    /// Continues from a saved state.
    pub fn resume(
        mut state: FinetuneState,
        data: &'a BTreeMap<Task, LabeledSet>,
        sched: TrainSchedule,
    ) -> Result<Self, TrainError> {
        sched.validate()?;
        let mut samplers = BTreeMap::new();
        for &task in &sched.tasks {
            let set = data.get(&task).ok_or(TrainError::EmptyDataset(task))?;
            if set.is_empty() {
                return Err(TrainError::EmptyDataset(task));
            }
            if set.labels.len() != set.waves.len() {
                return Err(TrainError::RaggedDataset(task));
            }
            if !state.heads.contains_key(&task) {
                return Err(TrainError::MissingHead(task));
            }
            samplers.insert(
                task,
                EpochSampler::new(set.len(), sched.seed, &format!("finetune/{task}")),
            );
        }
        state.srl.set_frozen(sched.freeze_srl);
        Ok(Finetuner {
            state,
            data,
            sched,
            samplers,
            frozen_cache: HashMap::new(),
            trace: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.sched.max_iterations
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.sched
    }

    pub fn state(&self) -> &FinetuneState {
        &self.state
    }

    /// Trace rows produced by this instance (not including rows from before
    /// a resume).
    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn into_parts(self) -> (FinetuneState, Vec<TraceRow>) {
        (self.state, self.trace)
    }

    /// Runs to `max_iterations`, calling `on_step` after every iteration.
    pub fn run_with(
        &mut self,
        mut on_step: impl FnMut(&Finetuner<'a>) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while !self.is_done() {
            self.step()?;
            on_step(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        self.run_with(|_| Ok(()))
    }

    /// Performs one iteration and returns its trace row.
    pub fn step(&mut self) -> Result<TraceRow, TrainError> {
        let it = self.state.iteration;
        let task = self.sched.task_at(it);
        let start = self.sched.consumed(task, it);
        let batch = self
            .samplers
            .get_mut(&task)
            .expect("sampler per task")
            .batch(start, self.sched.batch_size);
        let prec = self.sched.precision;
        let frozen = self.sched.freeze_srl;
        let set = &self.data[&task];

        let mut g = Graph::new(prec);
        let sp = (!frozen).then(|| self.state.srl.bind(&mut g));
        let head = &self.state.heads[&task];
        let hp = head.bind(&mut g);
        let mut dropout = rng::stream(self.sched.seed, &format!("finetune/dropout{it}"));

        let result: Result<Var, TrainError> = (|| {
            let depth = self.state.srl.depth();
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in &batch {
                let hidden = match &sp {
                    Some(sp) => {
                        let wave = g.constant(set.waves[idx].clone());
                        let hs = self.state.srl.forward(&mut g, sp, wave, depth, Mode::Train(&mut dropout))?;
                        hs[depth]
                    }
                    None => {
                        let key = (task, idx);
                        if !self.frozen_cache.contains_key(&key) {
                            let hs = self.state.srl.forward_hidden(&set.waves[idx], depth, prec)?;
                            self.frozen_cache.insert(key, hs[depth].clone());
                        }
                        g.constant(self.frozen_cache[&key].clone())
                    }
                };
                losses.push(task_loss(&mut g, hidden, set.labels[idx], head, &hp)?);
            }
            let loss = g.average(&losses)?;
            g.backward(loss)?;
            Ok(loss)
        })();

        let loss = match result {
            Ok(l) => g.value(l).item(),
            Err(
                TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })),
            ) => return Err(TrainError::Diverged { iteration: it, task }),
            Err(e) => return Err(e),
        };

        let mut srl_grads = sp.as_ref().map(|sp| sp.grads(&g)).unwrap_or_default();
        let mut head_grads = hp.grads(&g);
        if let Some(max) = self.sched.clip_norm {
            clip_global_norm(&mut [&mut srl_grads, &mut head_grads], max);
        }
        let opt = self.state.optimizers.for_task(task, self.sched.adam);
        let head = self.state.heads.get_mut(&task).expect("head per task");
        let applied = opt
            .step_group("srl.", self.state.srl.params_mut(), &srl_grads, prec)
            .and_then(|_| opt.step_group(&format!("head.{task}."), head.params_mut(), &head_grads, prec));
        match applied {
            Err(OptimError::NonFiniteGrad(_)) => return Err(TrainError::Diverged { iteration: it, task }),
            other => other?,
        }

        self.state.iteration += 1;
        let row = TraceRow {
            iteration: it,
            task,
            loss,
        };
        self.trace.push(row.clone());
        Ok(row)
    }
}

/// Alternating fine-tuning over `sched.tasks` from a fresh optimizer.
pub fn multitask_finetune(
    srl: EncoderModel,
    heads: BTreeMap<Task, TaskHead>,
    data: &BTreeMap<Task, LabeledSet>,
    sched: TrainSchedule,
) -> Result<(EncoderModel, BTreeMap<Task, TaskHead>, Vec<TraceRow>), TrainError> {
    let mut ft = Finetuner::new(srl, heads, data, sched)?;
    ft.run()?;
    let (state, trace) = ft.into_parts();
    Ok((state.srl, state.heads, trace))
}

/// [`multitask_finetune`] restricted to one task.
pub fn singletask_finetune(
    srl: EncoderModel,
    heads: BTreeMap<Task, TaskHead>,
    data: &BTreeMap<Task, LabeledSet>,
    task: Task,
    mut sched: TrainSchedule,
) -> Result<(EncoderModel, BTreeMap<Task, TaskHead>, Vec<TraceRow>), TrainError> {
    sched.tasks = vec![task];
    multitask_finetune(srl, heads, data, sched)
}
