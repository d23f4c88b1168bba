//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Built without the libtest harness so the lines are
//! printed as they complete.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::eer::{eer_oracle, random_set};
use common::pipelines::{distill_pipeline_error, task_pipeline_error};
use common::{primitives, randn, rng, tiny_experiment};
use kdsrl::data::{Checkpoint, ExperimentConfig, Split};
use kdsrl::distill::distillation_loss_value;
use kdsrl::experiment::{
    distill_student, evaluate, finetune, new_heads, reference_counts, speaker_count, synthesize, task_data,
    train_teacher, Bundle,
};
use kdsrl::heads::{angular_softmax_loss, cross_entropy, kws_loss};
use kdsrl::metrics::eer_from_scores;
use kdsrl::params::ParamStore;
use kdsrl::trainer::{Finetuner, TraceRow};
use kdsrl::{EncoderModel, Graph, Precision, Task, TaskHead, Tensor};
use rand::Rng;

const DESK_CONFIG: &str = include_str!("../../../configs/desk.cfg");

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(checks: &[(bool, String)]) -> Self {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.0).map(|c| c.1.as_str()).collect();
        let detail = if failed.is_empty() {
            checks.iter().map(|c| c.1.as_str()).collect::<Vec<_>>().join("; ")
        } else {
            format!("failed: {}", failed.join("; "))
        };
        Outcome {
            pass: failed.is_empty(),
            detail,
        }
    }
}

fn gradients() -> Outcome {
    let mut checks = Vec::new();
    let mut worst = (0.0, "");
    for case in primitives::cases() {
        let (err, seed) = case.worst();
        if err >= primitives::TOL {
            checks.push((false, format!("{} seed {seed} rel err {err:.2e}", case.name)));
        }
        if err > worst.0 {
            worst = (err, case.name);
        }
    }
    checks.push((true, format!("primitives worst {:.2e} ({})", worst.0, worst.1)));
    let pipelines: [(&str, fn(u64) -> f64); 3] = [
        ("distill", distill_pipeline_error),
        ("kws", |s| task_pipeline_error(Task::Kws, s)),
        ("sv", |s| task_pipeline_error(Task::Sv, s)),
    ];
    for (name, f) in pipelines {
        let err = (0..primitives::SEEDS).map(f).fold(0.0, f64::max);
        checks.push((err < primitives::TOL, format!("{name} pipeline worst {err:.2e}")));
    }
    Outcome::new(&checks)
}

fn analytic_losses() -> Outcome {
    let mut r = rng(42);
    let t = 5;
    let f = randn(&mut r, &[t, 8]);
    let d = distillation_loss_value(&f, &f).unwrap();
    let want = t as f64 * (1.0 + (-1f64).exp()).ln();

    let mut p = ParamStore::new();
    p.insert("weight", Tensor::zeros(vec![8, 12]));
    p.insert("bias", Tensor::zeros(vec![12]));
    let kws = TaskHead::from_params(Task::Kws, p, 0.0, 1.0).unwrap();
    let h = randn(&mut r, &[6, 8]);
    let mut g = Graph::new(Precision::F64);
    let bound = kws.bind(&mut g);
    let hv = g.constant(h.clone());
    let l = kws_loss(&mut g, hv, 3, &kws, &bound).unwrap();
    let k = g.value(l).item();

    let mut worst_sv: f64 = 0.0;
    for seed in 0..10 {
        let sv = TaskHead::sv(8, 6, 0.0, 30.0, seed, Precision::F64).unwrap();
        let h = randn(&mut r, &[4, 8]);
        let y = r.random_range(0..6);
        let mut g = Graph::new(Precision::F64);
        let bound = sv.bind(&mut g);
        let hv = g.constant(h);
        let angular = angular_softmax_loss(&mut g, hv, y, &sv, &bound).unwrap();
        let cos = sv.logits(&mut g, &bound, hv).unwrap();
        let z = g.scale(cos, 30.0).unwrap();
        let plain = cross_entropy(&mut g, z, y).unwrap();
        worst_sv = worst_sv.max((g.value(angular).item() - g.value(plain).item()).abs());
    }
    Outcome::new(&[
        ((d - want).abs() < 1e-6, format!("distill {d:.7} vs T*log(1+e^-1) {want:.7}")),
        (
            (k - 12f64.ln()).abs() < 1e-6 && (k - 2.4849).abs() < 1e-4,
            format!("kws zero logits {k:.7}"),
        ),
        (worst_sv < 1e-9, format!("angular m=0 vs cosine CE {worst_sv:.1e}")),
    ])
}

fn parameter_counts() -> Outcome {
    let c = reference_counts().unwrap();
    let (t, s) = (c.teacher as f64, c.student() as f64);
    Outcome::new(&[
        ((t - 95e6).abs() <= 9.5e6, format!("teacher {:.2}M", t / 1e6)),
        ((s - 27e6).abs() <= 2.7e6, format!("student {:.2}M", s / 1e6)),
        ((c.ratio() - 0.28).abs() <= 0.03, format!("ratio {:.3}", c.ratio())),
    ])
}

fn eer_equivalence() -> Outcome {
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    let mut invariance: f64 = 0.0;
    for _ in 0..1000 {
        let (scores, target) = random_set(&mut r);
        let base = eer_from_scores(&scores, &target).unwrap();
        worst = worst.max((base - eer_oracle(&scores, &target)).abs());
        let transforms: [fn(f64) -> f64; 3] = [|s| 2.0 * s + 1.0, |s| (3.0 * s).tanh(), |s| s.exp()];
        for f in transforms {
            let moved: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            invariance = invariance.max((eer_from_scores(&moved, &target).unwrap() - base).abs());
        }
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let swapped: Vec<bool> = target.iter().map(|t| !t).collect();
        invariance = invariance.max((eer_from_scores(&negated, &swapped).unwrap() - base).abs());
    }
    Outcome::new(&[
        (worst < 1e-9, format!("oracle max diff {worst:.1e} over 1000 sets")),
        (invariance < 1e-9, format!("monotone/swap invariance {invariance:.1e}")),
    ])
}

fn desk_pipeline() -> Outcome {
    let cfg = ExperimentConfig::parse(DESK_CONFIG).unwrap();
    cfg.validate().unwrap();
    let utts = synthesize(&cfg).unwrap();
    let train = task_data(&utts, Split::Train);
    let test = task_data(&utts, Split::Test);
    let score = |b: &Bundle| {
        let ev = evaluate(&cfg, &b.srl, &b.heads, &test).unwrap();
        (ev.value(Task::Kws).unwrap(), ev.value(Task::Sv).unwrap())
    };

    let (teacher, _) = train_teacher(&cfg, &train).unwrap();
    let (teacher_kws, _) = score(&teacher);
    let (student, _) = distill_student(&cfg, &teacher.srl, &train[&Task::Kws].waves).unwrap();
    let run = |tasks: Vec<Task>, freeze: bool| {
        let sched = cfg.schedule(tasks, freeze);
        let (b, _) = finetune(&cfg, student.srl.clone(), &train, sched).unwrap();
        score(&b)
    };
    let (full_kws, full_eer) = run(vec![Task::Kws, Task::Sv], false);
    let (frozen_kws, frozen_eer) = run(vec![Task::Kws, Task::Sv], true);
    let (single_kws, _) = run(vec![Task::Kws], false);
    let (_, single_eer) = run(vec![Task::Sv], false);

    Outcome::new(&[
        (teacher_kws >= 95.0, format!("(a) teacher KWS {teacher_kws:.2}%")),
        (
            (full_kws - teacher_kws).abs() <= 2.0,
            format!("(b) student KWS {full_kws:.2}%"),
        ),
        (
            full_kws - frozen_kws >= 3.0 && full_eer < frozen_eer,
            format!("(c) frozen KWS {frozen_kws:.2}% EER {frozen_eer:.2} vs full EER {full_eer:.2}"),
        ),
        (
            (full_kws - single_kws).abs() <= 2.0 && (full_eer - single_eer).abs() <= 2.0,
            format!("(d) single-task KWS {single_kws:.2}% EER {single_eer:.2}"),
        ),
    ])
}

fn loss_bits(trace: &[TraceRow]) -> Vec<(usize, Task, u64)> {
    trace.iter().map(|r| (r.iteration, r.task, r.loss.to_bits())).collect()
}

fn determinism() -> Outcome {
    let mut cfg = tiny_experiment();
    cfg.set("teacher.iterations", "20").unwrap();
    cfg.set("distill.steps", "10").unwrap();
    cfg.set("model.dropout", "0.1").unwrap();
    let utts = synthesize(&cfg).unwrap();
    let train = task_data(&utts, Split::Train);

    let teacher_traces: Vec<_> = (0..2).map(|_| train_teacher(&cfg, &train).unwrap()).collect();
    let teacher_same = loss_bits(&teacher_traces[0].1) == loss_bits(&teacher_traces[1].1);
    let teacher = &teacher_traces[0].0;
    let distill_bits = |_| {
        let (_, trace) = distill_student(&cfg, &teacher.srl, &train[&Task::Kws].waves).unwrap();
        trace.iter().map(|r| r.loss.total.to_bits()).collect::<Vec<_>>()
    };
    let distill_same = distill_bits(0) == distill_bits(1);

    let mut round_trip = true;
    for precision in ["f32", "f64"] {
        let mut c = cfg.clone();
        c.set("precision", precision).unwrap();
        let srl = EncoderModel::build(c.student_config(), 1, c.precision).unwrap();
        let bundle = Bundle::new(srl, new_heads(&c, speaker_count(&train), "heads").unwrap());
        let bytes = bundle.to_checkpoint(&c).to_bytes();
        let (back_cfg, back) = Bundle::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        round_trip &= back_cfg == c
            && back.srl.params().bit_eq(bundle.srl.params())
            && back.heads.iter().all(|(t, h)| h.params().bit_eq(bundle.heads[t].params()))
            && back.to_checkpoint(&back_cfg).to_bytes() == bytes;
    }

    let srl = EncoderModel::build(cfg.student_config(), 3, cfg.precision).unwrap();
    let heads = new_heads(&cfg, speaker_count(&train), "heads").unwrap();
    let sched = cfg.schedule(vec![Task::Kws, Task::Sv], false);
    let mut whole = Finetuner::new(srl.clone(), heads.clone(), &train, sched.clone()).unwrap();
    whole.run().unwrap();
    let (whole_state, whole_trace) = whole.into_parts();
    let mut first = Finetuner::new(srl, heads, &train, sched.clone()).unwrap();
    for _ in 0..5 {
        first.step().unwrap();
    }
    let (state, mut trace) = first.into_parts();
    let bytes = Bundle::from_state(state).to_checkpoint(&cfg).to_bytes();
    let (_, bundle) = Bundle::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let mut second = Finetuner::resume(bundle.into_state(&sched), &train, sched).unwrap();
    second.run().unwrap();
    let (state, rest) = second.into_parts();
    trace.extend(rest);
    let resumed = loss_bits(&trace) == loss_bits(&whole_trace)
        && state.srl.params().bit_eq(whole_state.srl.params())
        && state.optimizers == whole_state.optimizers;

    Outcome::new(&[
        (teacher_same && distill_same, "loss traces bit-identical across reruns".into()),
        (round_trip, "checkpoint round trip bit-exact (f32, f64)".into()),
        (resumed, "resumed fine-tuning matches uninterrupted run".into()),
    ])
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, u64); 6] = [
        ("gradient verification", gradients, 120),
        ("analytic loss oracles", analytic_losses, 60),
        ("parameter-count reproduction", parameter_counts, 5),
        ("EER oracle equivalence", eer_equivalence, 30),
        ("desk-scale pipeline", desk_pipeline, 900),
        ("determinism and persistence", determinism, 120),
    ];
    let mut results = BTreeMap::new();
    for (i, (name, check, budget)) in criteria.into_iter().enumerate() {
        let t0 = Instant::now();
        let out = check();
        let elapsed = t0.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let pass = out.pass && in_time;
        println!(
            "criterion {} {}: {name}: {} [{:.1}s, budget {budget}s{}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
        results.insert(i + 1, pass);
    }
    if results.values().all(|&p| p) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
