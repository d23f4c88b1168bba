//! Keyword-spotting accuracy and speaker-verification equal error rate.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng as _;
use thiserror::Error;

use crate::heads::Task;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no samples")]
    Empty,
    #[error("trial set has no {0} trials")]
    MissingClass(&'static str),
    #[error("trial set has no scores")]
    MissingScores,
    #[error("trial {index} has non-finite score")]
    NonFiniteScore { index: usize },
    #[error("trial file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Percentage of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub a: String,
    pub b: String,
    pub same_speaker: bool,
}

/// Verification trials with optional parallel scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub scores: Option<Vec<f64>>,
}

impl TrialSet {
    pub fn targets(&self) -> usize {
        self.trials.iter().filter(|t| t.same_speaker).count()
    }

    pub fn impostors(&self) -> usize {
        self.trials.len() - self.targets()
    }

    /// Trial list in `idA\tidB\t{0|1}` form, with a fourth score column when
    /// scores are present.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.trials.iter().enumerate() {
            let _ = write!(out, "{}\t{}\t{}", t.a, t.b, u8::from(t.same_speaker));
            if let Some(s) = &self.scores {
                let _ = write!(out, "\t{}", s[i]);
            }
            out.push('\n');
        }
        out
    }

    /// Parses a trial list; a score column must be present on every line or
    /// on none.
    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let mut trials = Vec::new();
        let mut scores = Vec::new();
        let mut scored = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| MetricError::Parse {
                line: line_no,
                msg: msg.to_string(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(err("expected 3 or 4 tab-separated columns"));
            }
            let same = match cols[2] {
                "0" => false,
                "1" => true,
                _ => return Err(err("label must be 0 or 1")),
            };
            let has_score = cols.len() == 4;
            if *scored.get_or_insert(has_score) != has_score {
                return Err(err("score column present on some lines only"));
            }
            if has_score {
                let s: f64 = cols[3].parse().map_err(|_| err("bad score"))?;
                if !s.is_finite() {
                    return Err(err("non-finite score"));
                }
                scores.push(s);
            }
            trials.push(Trial {
                a: cols[0].to_string(),
                b: cols[1].to_string(),
                same_speaker: same,
            });
        }
        Ok(TrialSet {
            trials,
            scores: scored.unwrap_or(false).then_some(scores),
        })
    }
}

/// All same-speaker pairs as targets plus an equally sized, seeded random
/// sample of distinct cross-speaker pairs as impostors.
pub fn build_trials(ids: &[String], speakers: &[usize], seed: u64) -> TrialSet {
    assert_eq!(ids.len(), speakers.len());
    let n = ids.len();
    let mut trials = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if speakers[i] == speakers[j] {
                trials.push(Trial {
                    a: ids[i].clone(),
                    b: ids[j].clone(),
                    same_speaker: true,
                });
            }
        }
    }
    let cross_total = (0..n)
        .map(|i| (i + 1..n).filter(|&j| speakers[i] != speakers[j]).count())
        .sum::<usize>();
    let wanted = trials.len().min(cross_total);
    let mut r = rng::stream(seed, "trials");
    let mut seen = HashSet::new();
    while seen.len() < wanted {
        let i = r.random_range(0..n);
        let j = r.random_range(0..n);
        let (i, j) = (i.min(j), i.max(j));
        if speakers[i] != speakers[j] && seen.insert((i, j)) {
            trials.push(Trial {
                a: ids[i].clone(),
                b: ids[j].clone(),
                same_speaker: false,
            });
        }
    }
    TrialSet {
        trials,
        scores: None,
    }
}

/// Equal error rate in percent.
///
/// Thresholds are the distinct scores plus `+∞`; a trial is accepted when
/// its score is `≥ θ`. `FAR(θ)` is the accepted fraction of impostors and
/// `FRR(θ)` the rejected fraction of targets. The EER is read at the first
/// operating point where `FAR − FRR ≤ 0`, interpolating linearly from the
/// previous point when the crossing falls between them.
pub fn compute_eer(t: &TrialSet) -> Result<f64, MetricError> {
    let scores = t.scores.as_ref().ok_or(MetricError::MissingScores)?;
    if scores.len() != t.trials.len() {
        return Err(MetricError::LengthMismatch {
            predictions: scores.len(),
            labels: t.trials.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore { index });
    }
    let labels: Vec<bool> = t.trials.iter().map(|x| x.same_speaker).collect();
    eer_from_scores(scores, &labels)
}

/// [`compute_eer`] on parallel score and target-flag slices.
pub fn eer_from_scores(scores: &[f64], is_target: &[bool]) -> Result<f64, MetricError> {
    let n_tar = is_target.iter().filter(|&&t| t).count();
    let n_imp = is_target.len() - n_tar;
    if n_tar == 0 {
        return Err(MetricError::MissingClass("target"));
    }
    if n_imp == 0 {
        return Err(MetricError::MissingClass("impostor"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk thresholds upwards; everything below the current threshold is
    // rejected.
    let (mut tar_below, mut imp_below) = (0usize, 0usize);
    let mut prev: Option<(f64, f64)> = None;
    let mut k = 0;
    loop {
        let far = (n_imp - imp_below) as f64 / n_imp as f64;
        let frr = tar_below as f64 / n_tar as f64;
        if far - frr <= 0.0 {
            let eer = match prev {
                Some((pfar, pfrr)) if far - frr < 0.0 => {
                    let (d0, d1) = (pfar - pfrr, far - frr);
                    let lambda = d0 / (d0 - d1);
                    pfar + lambda * (far - pfar)
                }
                _ => far,
            };
            return Ok(100.0 * eer);
        }
        if k == order.len() {
            unreachable!("FAR − FRR is −1 at θ = +∞");
        }
        prev = Some((far, frr));
        // Move past every trial tied at the current score.
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if is_target[order[k]] {
                tar_below += 1;
            } else {
                imp_below += 1;
            }
            k += 1;
        }
    }
}

/// One reported number.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: Task,
    pub metric: &'static str,
    pub value: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn accuracy(value: f64, n: usize) -> Self {
        MetricReport {
            task: Task::Kws,
            metric: "accuracy",
            value,
            n,
        }
    }

    pub fn eer(value: f64, n: usize) -> Self {
        MetricReport {
            task: Task::Sv,
            metric: "eer",
            value,
            n,
        }
    }
}

/// `task,metric,value,n` with a header line.
pub fn report_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("task,metric,value,n\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{:.6},{}", r.task, r.metric, r.value, r.n);
    }
    out
}
