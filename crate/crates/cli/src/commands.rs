use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kdsrl::data::{load_corpus, write_corpus, Split, Utterance, MANIFEST_FILE};
use kdsrl::experiment::{
    distill_student, evaluate, new_heads, reference_counts, speaker_count, synthesize, task_data, train_teacher,
    Bundle,
};
use kdsrl::metrics::report_csv;
use kdsrl::trainer::{trace_csv, Finetuner, LabeledSet};
use kdsrl::{distill, ConfigError, ExperimentConfig, Task};

use crate::error::{CliError, Result};
use crate::record::{digest_file, RunRecord};
use crate::{Command, Common, Tasks};

const BASE_REFERENCE: &str = "base-reference";
const DATA_CONFIG: &str = "config.txt";

pub fn run(common: &Common, command: &Command) -> Result<()> {
    let mut record = RunRecord::new(command.name());
    match command {
        Command::GenData => gen_data(common, &mut record)?,
        Command::TrainTeacher => train(common, &mut record)?,
        Command::Distill { teacher } => distill(common, teacher.as_deref(), &mut record)?,
        Command::Finetune {
            tasks,
            freeze,
            init,
            resume,
            stop_after,
        } => finetune(
            common,
            FinetuneArgs {
                tasks: *tasks,
                freeze: *freeze,
                init: init.as_deref(),
                resume: *resume,
                stop_after: *stop_after,
            },
            &mut record,
        )?,
        Command::Evaluate { model } => evaluate_cmd(common, model.as_deref(), &mut record)?,
        Command::CountParams => count_params(common, &mut record)?,
    }
    record.finish(&common.out)?;
    Ok(())
}

/// Config file if given, else the config embedded in the input artifact,
/// else defaults; then `--seed` and `--set` on top.
fn resolve(common: &Common, inherited: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) if path == BASE_REFERENCE => {
            return Err(CliError::Usage(format!("--config {BASE_REFERENCE} is only valid for count-params")))
        }
        Some(path) => ExperimentConfig::load(Path::new(path))?,
        None => inherited.unwrap_or_default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Domain {
            key: kv.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })
}

fn require(path: PathBuf, what: &'static str, hint: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact { what, path, hint })
    }
}

fn load_bundle(path: &Path, record: &mut RunRecord) -> Result<(ExperimentConfig, Bundle)> {
    let loaded = Bundle::load(path)?;
    record.input(path)?;
    Ok(loaded)
}

fn load_data(common: &Common, record: &mut RunRecord) -> Result<Vec<Utterance>> {
    let manifest = match &common.data {
        Some(p) => p.clone(),
        None => common.out.join("data").join(MANIFEST_FILE),
    };
    let manifest = require(manifest, "corpus manifest", "run gen-data first")?;
    let (_, utts) = load_corpus(&manifest)?;
    record.input(&manifest)?;
    record.input_digest("corpus samples", corpus_digest(&utts));
    Ok(utts)
}

fn corpus_digest(utts: &[Utterance]) -> String {
    let bytes: Vec<u8> = utts.iter().flat_map(|u| u.samples.iter().flat_map(|s| s.to_le_bytes())).collect();
    kdsrl::data::sha256_hex(&bytes)
}

fn save(bundle: &Bundle, cfg: &ExperimentConfig, path: &Path, record: &mut RunRecord) -> Result<()> {
    let digest = bundle.save(cfg, path)?;
    record.output_digest(path, digest_file(path)?);
    println!("wrote {} (checkpoint digest {digest})", path.display());
    Ok(())
}

fn gen_data(common: &Common, record: &mut RunRecord) -> Result<()> {
    let cfg = resolve(common, None)?;
    record.config(&cfg);
    create_out(&common.out)?;
    let dir = common.out.join("data");
    let utts = synthesize(&cfg)?;
    write_corpus(&dir, cfg.data_rate, &utts)?;
    let manifest = dir.join(MANIFEST_FILE);
    record.output_digest(&manifest, digest_file(&manifest)?);
    record.write(&dir.join(DATA_CONFIG), cfg.to_text())?;
    record.output_digest(&dir, corpus_digest(&utts));
    println!("wrote {} utterances under {}", utts.len(), dir.display());
    Ok(())
}

/// The config the corpus was generated with, if it sits next to the manifest.
fn data_config(common: &Common) -> Result<Option<ExperimentConfig>> {
    let path = match &common.data {
        Some(m) => m.with_file_name(DATA_CONFIG),
        None => common.out.join("data").join(DATA_CONFIG),
    };
    if path.exists() {
        Ok(Some(ExperimentConfig::load(&path)?))
    } else {
        Ok(None)
    }
}

fn train(common: &Common, record: &mut RunRecord) -> Result<()> {
    let cfg = resolve(common, data_config(common)?)?;
    record.config(&cfg);
    let utts = load_data(common, record)?;
    create_out(&common.out)?;
    let data = task_data(&utts, Split::Train);
    let (teacher, trace) = train_teacher(&cfg, &data)?;
    record.write(&common.out.join("teacher_trace.csv"), trace_csv(&trace))?;
    save(&teacher, &cfg, &common.out.join("teacher.ckpt"), record)
}

fn distill(common: &Common, teacher: Option<&Path>, record: &mut RunRecord) -> Result<()> {
    let path = teacher.map_or_else(|| common.out.join("teacher.ckpt"), Path::to_path_buf);
    let path = require(path, "teacher checkpoint", "run train-teacher first")?;
    let (inherited, teacher) = load_bundle(&path, record)?;
    let cfg = resolve(common, Some(inherited))?;
    record.config(&cfg);
    let utts = load_data(common, record)?;
    create_out(&common.out)?;
    let data = task_data(&utts, Split::Train);
    let (student, trace) = distill_student(&cfg, &teacher.srl, &data[&Task::Kws].waves)?;
    let plan = student.plan.as_ref().expect("distilled bundle carries its plan");
    record.write(&common.out.join("distill_trace.csv"), distill::trace_csv(plan, &trace))?;
    save(&student, &cfg, &common.out.join("student.ckpt"), record)
}

struct FinetuneArgs<'a> {
    tasks: Tasks,
    freeze: bool,
    init: Option<&'a Path>,
    resume: bool,
    stop_after: Option<usize>,
}

impl Tasks {
    fn list(self) -> Vec<Task> {
        match self {
            Tasks::Kws => vec![Task::Kws],
            Tasks::Sv => vec![Task::Sv],
            Tasks::Multi => vec![Task::Kws, Task::Sv],
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Tasks::Kws => "kws",
            Tasks::Sv => "sv",
            Tasks::Multi => "multi",
        }
    }
}

/// Trace rows written before `iteration`, without the header.
fn earlier_rows(path: &Path, iteration: usize) -> Result<String> {
    let path = require(path.to_path_buf(), "fine-tuning trace", "cannot resume without it")?;
    let text = fs::read_to_string(&path).map_err(|source| CliError::Io { path, source })?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i < iteration))
        .map(|l| format!("{l}\n"))
        .collect())
}

fn finetune(common: &Common, args: FinetuneArgs, record: &mut RunRecord) -> Result<()> {
    let run = format!("finetune_{}{}", args.tasks.tag(), if args.freeze { "_frozen" } else { "" });
    let final_path = common.out.join(format!("{run}.ckpt"));
    let resume_path = common.out.join(format!("{run}.resume.ckpt"));
    let trace_path = common.out.join(format!("{run}_trace.csv"));

    let init = args.init.map_or_else(|| common.out.join("student.ckpt"), Path::to_path_buf);
    let init = require(init, "distilled student checkpoint", "run distill first")?;
    let (inherited, student) = load_bundle(&init, record)?;
    let resumed = if args.resume {
        let path = require(resume_path.clone(), "resume checkpoint", "run finetune with --stop-after or train.checkpoint_every")?;
        Some(load_bundle(&path, record)?)
    } else {
        None
    };
    let inherited = resumed.as_ref().map_or(inherited, |(c, _)| c.clone());
    let cfg = resolve(common, Some(inherited))?;
    record.config(&cfg);
    let utts = load_data(common, record)?;
    create_out(&common.out)?;
    let data: BTreeMap<Task, LabeledSet> = task_data(&utts, Split::Train);
    let sched = cfg.schedule(args.tasks.list(), args.freeze);

    let (mut ft, mut rows) = match resumed {
        Some((_, bundle)) => {
            let earlier = earlier_rows(&trace_path, bundle.iteration)?;
            (Finetuner::resume(bundle.into_state(&sched), &data, sched)?, earlier)
        }
        None => {
            let heads = new_heads(&cfg, speaker_count(&data), "finetune.heads")?;
            (Finetuner::new(student.srl, heads, &data, sched)?, String::new())
        }
    };

    let every = cfg.train_checkpoint_every;
    let mut written = 0;
    let snapshot = |ft: &Finetuner, rows: &mut String, written: &mut usize, record: &mut RunRecord| -> Result<()> {
        let new = trace_csv(&ft.trace()[*written..]);
        rows.push_str(new.split_once('\n').map_or("", |(_, body)| body));
        *written = ft.trace().len();
        record.write(&trace_path, format!("iteration,task,loss\n{rows}"))?;
        save(&Bundle::from_state(ft.state().clone()), &cfg, &resume_path, record)
    };
    while !ft.is_done() {
        ft.step()?;
        let it = ft.iteration();
        if args.stop_after == Some(it) {
            snapshot(&ft, &mut rows, &mut written, record)?;
            println!("stopped after iteration {it}; continue with --resume");
            return Ok(());
        }
        if every > 0 && it % every == 0 && !ft.is_done() {
            snapshot(&ft, &mut rows, &mut written, record)?;
        }
    }
    let new = trace_csv(&ft.trace()[written..]);
    rows.push_str(new.split_once('\n').map_or("", |(_, body)| body));
    record.write(&trace_path, format!("iteration,task,loss\n{rows}"))?;
    let (mut state, _) = ft.into_parts();
    state.srl.set_frozen(false);
    save(&Bundle::new(state.srl, state.heads), &cfg, &final_path, record)?;
    if resume_path.exists() {
        fs::remove_file(&resume_path).map_err(|source| CliError::Io {
            path: resume_path.clone(),
            source,
        })?;
        record.forget_output(&resume_path);
    }
    Ok(())
}

fn evaluate_cmd(common: &Common, model: Option<&Path>, record: &mut RunRecord) -> Result<()> {
    let path = model.map_or_else(|| common.out.join("finetune_multi.ckpt"), Path::to_path_buf);
    let path = require(path, "model checkpoint", "run finetune first or pass --model")?;
    let (inherited, bundle) = load_bundle(&path, record)?;
    let cfg = resolve(common, Some(inherited))?;
    record.config(&cfg);
    let utts = load_data(common, record)?;
    create_out(&common.out)?;
    let test = task_data(&utts, Split::Test);
    let ev = evaluate(&cfg, &bundle.srl, &bundle.heads, &test)?;
    let stem = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let report = report_csv(&ev.reports);
    record.write(&common.out.join(format!("{stem}_metrics.csv")), &report)?;
    if let Some(trials) = &ev.trials {
        record.write(&common.out.join(format!("{stem}_trials.tsv")), trials.to_text())?;
    }
    print!("{report}");
    Ok(())
}

fn count_params(common: &Common, record: &mut RunRecord) -> Result<()> {
    create_out(&common.out)?;
    if common.config.as_deref() == Some(BASE_REFERENCE) {
        let c = reference_counts()?;
        println!("teacher-reference {}", c.teacher);
        println!(
            "student-reference {} (encoder {}, prediction heads {}, task heads {})",
            c.student(),
            c.student_encoder,
            c.prediction_heads,
            c.task_heads
        );
        println!("ratio {:.4}", c.ratio());
        return Ok(());
    }
    let cfg = resolve(common, None)?;
    record.config(&cfg);
    println!("teacher {}", cfg.teacher_config().parameter_count());
    println!("student {}", cfg.student_config().parameter_count());
    Ok(())
}
