mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use common::tiny_experiment;
use kdsrl::data::{
    keyword_tones, load_corpus, tone_table, write_corpus, Checkpoint, Manifest, Split, SynthSpec, Utterance,
    MANIFEST_FILE,
};
use kdsrl::experiment::{distill_student, finetune, synthesize, task_data, train_teacher};
use kdsrl::heads::Task;
use kdsrl::{Bundle, ConfigError, DataError, EncoderModel, ExperimentConfig, ModelConfig, ParamStore, Precision};
use sha2::{Digest, Sha256};

fn spec(noise: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        noise,
        seed,
        ..SynthSpec::default()
    }
}

fn generate(s: &SynthSpec) -> Vec<Utterance> {
    s.generate(ModelConfig::toy_teacher().receptive_field()).unwrap()
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Magnitude of the DFT of `x` at `freq` Hz.
fn tone_power(x: &[f32], freq: f64, rate: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        let w = 2.0 * PI * freq * n as f64 / rate;
        re += v as f64 * w.cos();
        im -= v as f64 * w.sin();
    }
    re.hypot(im)
}

fn loudest_tone(x: &[f32], tones: &[f64], rate: f64) -> usize {
    (0..tones.len())
        .max_by(|&a, &b| tone_power(x, tones[a], rate).total_cmp(&tone_power(x, tones[b], rate)))
        .unwrap()
}

#[test]
fn same_spec_gives_byte_identical_corpus() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(a.path(), 16_000, &generate(&spec(0.3, 5))).unwrap();
    write_corpus(b.path(), 16_000, &generate(&spec(0.3, 5))).unwrap();
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa.len(), 12 * 8 * 6 + 1);
    assert_eq!(fa, fb);
    assert_ne!(generate(&spec(0.3, 5)), generate(&spec(0.3, 6)));
}

#[test]
fn noiseless_repetitions_are_identical() {
    let utts = generate(&spec(0.0, 1));
    let mut by_pair: BTreeMap<(usize, usize), &Utterance> = BTreeMap::new();
    for u in &utts {
        let first = by_pair.entry((u.keyword, u.speaker)).or_insert(u);
        assert_eq!(first.samples, u.samples, "{}", u.id);
    }
    assert_eq!(by_pair.len(), 12 * 8);
}

#[test]
fn spectral_peaks_recover_every_keyword_without_noise() {
    let s = spec(0.0, 2);
    let tones = tone_table(s.num_keywords);
    let lookup: BTreeMap<(usize, usize), usize> =
        (0..s.num_keywords).map(|k| (keyword_tones(k, s.num_keywords), k)).collect();
    assert_eq!(lookup.len(), s.num_keywords);
    let rate = s.rate as f64;
    for u in generate(&s) {
        let (first, second) = u.samples.split_at(u.samples.len() / 2);
        let pair = (loudest_tone(first, &tones, rate), loudest_tone(second, &tones, rate));
        assert_eq!(lookup.get(&pair), Some(&u.keyword), "{}", u.id);
    }
}

#[test]
fn manifest_references_exactly_the_written_files() {
    let dir = tempfile::tempdir().unwrap();
    let utts = generate(&spec(0.3, 3));
    let manifest = write_corpus(dir.path(), 16_000, &utts).unwrap();
    let files = files_under(dir.path());
    let referenced: BTreeSet<&str> = manifest.entries.iter().map(|e| e.path.as_str()).collect();
    let on_disk: BTreeSet<&str> = files.keys().map(String::as_str).filter(|p| *p != MANIFEST_FILE).collect();
    assert_eq!(referenced, on_disk);

    let (loaded, back) = load_corpus(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, manifest);
    assert_eq!(back, utts);
    assert!(files[MANIFEST_FILE].starts_with(b"#srl-manifest v1 rate=16000\n"));
}

#[test]
fn manifest_errors_name_the_line() {
    assert!(matches!(Manifest::parse("bogus\n"), Err(DataError::Manifest { line: 1, .. })));
    let ok_train = "a.f32\t0\t0\ttrain\n";
    let ok_test = "b.f32\t0\t0\ttest\n";
    let text = format!("#srl-manifest v1 rate=8000\n{ok_train}{ok_test}a.f32\t1\t1\ttest\n");
    assert!(matches!(Manifest::parse(&text), Err(DataError::Manifest { line: 4, .. })));
    let text = format!("#srl-manifest v1 rate=8000\n{ok_train}c.f32\t1\t1\tdev\n");
    assert!(matches!(Manifest::parse(&text), Err(DataError::Manifest { line: 3, .. })));
    let text = format!("#srl-manifest v1 rate=8000\n{ok_train}");
    assert!(Manifest::parse(&text).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    assert!(matches!(load_corpus(&path), Err(DataError::MissingFile(_))));
    fs::write(&path, format!("#srl-manifest v1 rate=8000\n{ok_train}{ok_test}")).unwrap();
    assert!(matches!(load_corpus(&path), Err(DataError::MissingFile(_))));
}

fn bundle(precision: Precision) -> (ExperimentConfig, Bundle) {
    let mut cfg = ExperimentConfig::default();
    cfg.set("precision", precision.name()).unwrap();
    let srl = EncoderModel::build(cfg.student_config(), 4, precision).unwrap();
    let heads = kdsrl::experiment::new_heads(&cfg, 8, "heads").unwrap();
    (cfg, Bundle::new(srl, heads))
}

fn assert_bit_equal(a: &ParamStore, b: &ParamStore) {
    assert_eq!(a.names().collect::<Vec<_>>(), b.names().collect::<Vec<_>>());
    assert!(a.bit_eq(b));
}

#[test]
fn checkpoint_round_trip_is_bit_exact_in_both_precisions() {
    for precision in [Precision::F32, Precision::F64] {
        let (cfg, b) = bundle(precision);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let digest = b.save(&cfg, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SRLD");
        let want: String = Sha256::digest(&bytes[..bytes.len() - 32]).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(digest, want);

        let (cfg2, b2) = Bundle::load(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_bit_equal(b2.srl.params(), b.srl.params());
        for task in [Task::Kws, Task::Sv] {
            assert_bit_equal(b2.heads[&task].params(), b.heads[&task].params());
        }
        assert_eq!(b2, b);
    }
}

#[test]
fn f64_values_survive_without_rounding() {
    let mut t = ParamStore::new();
    t.insert("x", kdsrl::Tensor::new(vec![3], vec![0.1, 1.0 / 3.0, 1e-300]).unwrap());
    t.insert("y", kdsrl::Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
    let ck = Checkpoint::new("seed = 1\n", t.clone());
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_bit_equal(&back.tensors, &t);
    assert_eq!(back.config_text, "seed = 1\n");
}

#[test]
fn damaged_files_are_rejected_whole() {
    let (cfg, b) = bundle(Precision::F32);
    let bytes = b.to_checkpoint(&cfg).to_bytes();
    for cut in [0, 3, 100, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(DataError::Digest)), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(DataError::Digest)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.ckpt");
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(
        Bundle::load(&path),
        Err(kdsrl::Error::Data(DataError::Digest))
    ));
    assert!(Bundle::load(&dir.path().join("absent.ckpt")).unwrap_err().is_missing_input());
}

/// Rewrites the body and recomputes the trailing digest.
fn resealed(bytes: &[u8], edit: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut body = bytes[..bytes.len() - 32].to_vec();
    edit(&mut body);
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    body
}

#[test]
fn version_magic_and_names_are_checked() {
    let (cfg, b) = bundle(Precision::F32);
    let bytes = b.to_checkpoint(&cfg).to_bytes();
    let v2 = resealed(&bytes, |body| body[4..8].copy_from_slice(&2u32.to_le_bytes()));
    assert!(matches!(
        Checkpoint::from_bytes(&v2),
        Err(DataError::Version { found: 2, expected: 1 })
    ));
    let magic = resealed(&bytes, |body| body[0] = b'X');
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(DataError::BadMagic)));

    let mut ck = b.to_checkpoint(&cfg);
    ck.tensors.insert("mystery.weight", kdsrl::Tensor::zeros(vec![2]));
    assert!(matches!(
        Bundle::from_checkpoint(&ck),
        Err(kdsrl::Error::Data(DataError::UnknownTensor(n))) if n == "mystery.weight"
    ));
}

#[test]
fn empty_config_gives_defaults() {
    assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    assert_eq!(ExperimentConfig::parse("# only a comment\n\n").unwrap(), ExperimentConfig::default());
}

#[test]
fn config_errors_name_key_or_line() {
    match ExperimentConfig::parse("sv.margin = -1\n") {
        Err(ConfigError::Domain { key, .. }) => assert_eq!(key, "sv.margin"),
        other => panic!("{other:?}"),
    }
    let msg = ExperimentConfig::parse("sv.margin = -1\n").unwrap_err().to_string();
    assert!(msg.contains("sv.margin"), "{msg}");
    assert!(matches!(
        ExperimentConfig::parse("seed = 1\nsv.marign = 0.3\n"),
        Err(ConfigError::UnknownKey { line: 2, .. })
    ));
    assert!(matches!(
        ExperimentConfig::parse("seed = 1\n\nnot a pair\n"),
        Err(ConfigError::Parse { line: 3, .. })
    ));
    match ExperimentConfig::parse("model.heads = 5\n") {
        Err(ConfigError::Domain { key, .. }) => assert_eq!(key, "model.heads"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        ExperimentConfig::load(Path::new("/nonexistent/run.cfg")),
        Err(ConfigError::Missing { .. })
    ));
}

#[test]
fn full_config_echoes_into_checkpoint_header() {
    let mut cfg = tiny_experiment();
    cfg.set("sv.margin", "0.35").unwrap();
    cfg.set("train.clip_norm", "off").unwrap();
    let text = cfg.to_text();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    fs::write(&cfg_path, &text).unwrap();
    let loaded = ExperimentConfig::load(&cfg_path).unwrap();
    assert_eq!(loaded, cfg);

    let srl = EncoderModel::build(loaded.student_config(), 0, loaded.precision).unwrap();
    let ck_path = dir.path().join("m.ckpt");
    Bundle::new(srl, BTreeMap::new()).save(&loaded, &ck_path).unwrap();
    assert_eq!(Checkpoint::load(&ck_path).unwrap().config_text, text);
}

#[test]
fn distilled_checkpoint_fine_tunes_like_the_in_memory_student() {
    let mut cfg = tiny_experiment();
    for (k, v) in [("teacher.iterations", "4"), ("distill.steps", "6"), ("distill.batch_size", "2")] {
        cfg.set(k, v).unwrap();
    }
    let train = task_data(&synthesize(&cfg).unwrap(), Split::Train);
    let (teacher, _) = train_teacher(&cfg, &train).unwrap();
    let (student, _) = distill_student(&cfg, &teacher.srl, &train[&Task::Kws].waves).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.ckpt");
    student.save(&cfg, &path).unwrap();
    let (cfg2, loaded) = Bundle::load(&path).unwrap();
    assert_eq!(loaded, student);

    let sched = cfg.schedule(vec![Task::Kws, Task::Sv], false);
    let (_, direct) = finetune(&cfg, student.srl.clone(), &train, sched.clone()).unwrap();
    let (_, resumed) = finetune(&cfg2, loaded.srl, &train, sched).unwrap();
    let bits = |t: &[kdsrl::trainer::TraceRow]| t.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&direct), bits(&resumed));
}
