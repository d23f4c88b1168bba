//! Downstream linear heads on mean-pooled encoder output.
//!
//! Keyword spotting uses a biased linear classifier with cross-entropy.
//! Speaker verification uses an unbiased linear layer whose columns and the
//! pooled embedding are L2-normalized, giving cosine logits that are trained
//! with an additive-margin angular softmax: `z_c = s·(cos θ_c − m·[c = y])`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::params::{BoundParams, Init, ParamStore};
use crate::tensor::{Graph, Precision, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Kws,
    Sv,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Kws => "kws",
            Task::Sv => "sv",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kws" => Ok(Task::Kws),
            "sv" => Ok(Task::Sv),
            other => Err(HeadError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeadError {
    #[error("{task} label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        task: Task,
        label: usize,
        classes: usize,
    },
    #[error("head needs at least 2 outputs, got {0}")]
    TooFewOutputs(usize),
    #[error("invalid {what}: {value}")]
    InvalidHyperparameter { what: &'static str, value: f64 },
    #[error("expected a {expected} head, got {got}")]
    WrongTask { expected: Task, got: Task },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Linear head for one downstream task.
///
/// Parameters: `weight[model_dim × out_dim]`, plus `bias[out_dim]` for KWS.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    task: Task,
    out_dim: usize,
    margin: f64,
    scale: f64,
    params: ParamStore,
}

impl TaskHead {
    pub fn kws(
        model_dim: usize,
        classes: usize,
        seed: u64,
        precision: Precision,
    ) -> Result<Self, HeadError> {
        if classes < 2 {
            return Err(HeadError::TooFewOutputs(classes));
        }
        let mut params = ParamStore::new();
        params.init(
            "weight",
            vec![model_dim, classes],
            Init::Normal(1.0 / (model_dim as f64).sqrt()),
            crate::rng::derive_seed(seed, "head.kws"),
            precision,
        );
        params.init("bias", vec![classes], Init::Zeros, seed, precision);
        Ok(TaskHead {
            task: Task::Kws,
            out_dim: classes,
            margin: 0.0,
            scale: 1.0,
            params,
        })
    }

    pub fn sv(
        model_dim: usize,
        speakers: usize,
        margin: f64,
        scale: f64,
        seed: u64,
        precision: Precision,
    ) -> Result<Self, HeadError> {
        if speakers < 2 {
            return Err(HeadError::TooFewOutputs(speakers));
        }
        check_margin_scale(margin, scale)?;
        let mut params = ParamStore::new();
        params.init(
            "weight",
            vec![model_dim, speakers],
            Init::Normal(1.0 / (model_dim as f64).sqrt()),
            crate::rng::derive_seed(seed, "head.sv"),
            precision,
        );
        Ok(TaskHead {
            task: Task::Sv,
            out_dim: speakers,
            margin,
            scale,
            params,
        })
    }

    /// Rebuilds a head from stored parameters.
    pub fn from_params(
        task: Task,
        params: ParamStore,
        margin: f64,
        scale: f64,
    ) -> Result<Self, HeadError> {
        let weight = params.get("weight").ok_or(TensorError::InvalidArgument {
            op: "head",
            msg: "missing weight".into(),
        })?;
        if weight.rank() != 2 {
            return Err(TensorError::Rank {
                op: "head",
                expected: 2,
                shape: weight.shape().to_vec(),
            }
            .into());
        }
        let out_dim = weight.shape()[1];
        if out_dim < 2 {
            return Err(HeadError::TooFewOutputs(out_dim));
        }
        let expected = if task == Task::Kws { 2 } else { 1 };
        let bias_ok = match task {
            Task::Kws => params.get("bias").is_some_and(|b| b.shape() == [out_dim]),
            Task::Sv => true,
        };
        if params.len() != expected || !bias_ok {
            return Err(TensorError::InvalidArgument {
                op: "head",
                msg: format!("unexpected parameter set for {task} head"),
            }
            .into());
        }
        if task == Task::Sv {
            check_margin_scale(margin, scale)?;
        }
        Ok(TaskHead {
            task,
            out_dim,
            margin: if task == Task::Sv { margin } else { 0.0 },
            scale: if task == Task::Sv { scale } else { 1.0 },
            params,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.params.get("weight").map_or(0, |w| w.shape()[0])
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams::bind(g, &self.params, true)
    }

    fn check_label(&self, label: usize) -> Result<(), HeadError> {
        if label >= self.out_dim {
            return Err(HeadError::LabelOutOfRange {
                task: self.task,
                label,
                classes: self.out_dim,
            });
        }
        Ok(())
    }

    fn expect_task(&self, expected: Task) -> Result<(), HeadError> {
        if self.task != expected {
            return Err(HeadError::WrongTask {
                expected,
                got: self.task,
            });
        }
        Ok(())
    }

    /// Class logits `[1×out_dim]` for a `T'×D` hidden sequence.
    ///
    /// KWS: `pool(h)·W + b`. SV: cosine between the normalized pooled
    /// embedding and each normalized weight column (no margin, no scale).
    pub fn logits(&self, g: &mut Graph, p: &BoundParams, hidden: Var) -> Result<Var, HeadError> {
        let pooled = g.mean_pool_time(hidden)?;
        let d = g.shape(pooled)[0];
        let row = g.reshape(pooled, vec![1, d])?;
        match self.task {
            Task::Kws => {
                let z = g.matmul(row, p.var("weight"))?;
                Ok(g.add(z, p.var("bias"))?)
            }
            Task::Sv => {
                let e = g.l2_normalize(row)?;
                let wt = g.transpose(p.var("weight"))?;
                let wt = g.l2_normalize(wt)?;
                let w = g.transpose(wt)?;
                Ok(g.matmul(e, w)?)
            }
        }
    }
}

fn check_margin_scale(margin: f64, scale: f64) -> Result<(), HeadError> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(HeadError::InvalidHyperparameter {
            what: "sv.margin",
            value: margin,
        });
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(HeadError::InvalidHyperparameter {
            what: "sv.scale",
            value: scale,
        });
    }
    Ok(())
}

/// `−log softmax(z)[label]` for logits `z[1×C]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Result<Var, TensorError> {
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, label)?;
    g.neg(picked)
}

/// Keyword-spotting cross-entropy on mean-pooled hidden states.
pub fn kws_loss(
    g: &mut Graph,
    hidden: Var,
    label: usize,
    head: &TaskHead,
    p: &BoundParams,
) -> Result<Var, HeadError> {
    head.expect_task(Task::Kws)?;
    head.check_label(label)?;
    let z = head.logits(g, p, hidden)?;
    Ok(cross_entropy(g, z, label)?)
}

/// Additive-margin angular softmax loss for the speaker head.
pub fn angular_softmax_loss(
    g: &mut Graph,
    hidden: Var,
    speaker: usize,
    head: &TaskHead,
    p: &BoundParams,
) -> Result<Var, HeadError> {
    head.expect_task(Task::Sv)?;
    head.check_label(speaker)?;
    let cos = head.logits(g, p, hidden)?;
    let mut margin = vec![0.0; head.out_dim];
    margin[speaker] = head.margin;
    let m = g.constant(Tensor::from_parts(vec![head.out_dim], margin));
    let shifted = g.sub(cos, m)?;
    let z = g.scale(shifted, head.scale)?;
    Ok(cross_entropy(g, z, speaker)?)
}

/// Loss for whichever task `head` serves.
pub fn task_loss(
    g: &mut Graph,
    hidden: Var,
    label: usize,
    head: &TaskHead,
    p: &BoundParams,
) -> Result<Var, HeadError> {
    match head.task {
        Task::Kws => kws_loss(g, hidden, label, head, p),
        Task::Sv => angular_softmax_loss(g, hidden, label, head, p),
    }
}

/// Utterance-level speaker embedding: the time-mean of the hidden states,
/// stored unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SvEmbedding {
    pub id: String,
    pub vector: Vec<f64>,
}

impl SvEmbedding {
    /// Cosine similarity between two embeddings, 0 if either is degenerate.
    pub fn score(&self, other: &SvEmbedding) -> f64 {
        cosine(&self.vector, &other.vector)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < crate::tensor::NORM_EPS || nb < crate::tensor::NORM_EPS {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Mean over time of a `T'×D` hidden-state tensor.
pub fn extract_embedding(id: impl Into<String>, hidden: &Tensor) -> Result<SvEmbedding, TensorError> {
    if hidden.rank() != 2 {
        return Err(TensorError::Rank {
            op: "extract_embedding",
            expected: 2,
            shape: hidden.shape().to_vec(),
        });
    }
    let (t, d) = (hidden.shape()[0], hidden.shape()[1]);
    let mut v = vec![0.0; d];
    for i in 0..t {
        for (acc, &x) in v.iter_mut().zip(hidden.row(i)) {
            *acc += x;
        }
    }
    for x in &mut v {
        *x /= t as f64;
    }
    Ok(SvEmbedding {
        id: id.into(),
        vector: v,
    })
}
