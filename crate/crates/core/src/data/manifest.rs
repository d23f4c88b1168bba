//! Dataset manifests and raw sample files.
//!
//! A manifest starts with `#srl-manifest v1 rate=<int>` and lists one
//! utterance per line as `path<TAB>keyword<TAB>speaker<TAB>split`. Paths are
//! relative to the manifest's directory; each file holds the samples as
//! little-endian `f32`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::synth::{Split, Utterance};
use super::DataError;

pub const MANIFEST_HEADER: &str = "#srl-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub keyword: usize,
    pub speaker: usize,
    pub split: Split,
}

impl ManifestEntry {
    /// File stem, used as the utterance id.
    pub fn id(&self) -> String {
        Path::new(&self.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub rate: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER} rate={}\n", self.rate);
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", e.path, e.keyword, e.speaker, e.split.name());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let err = |line: usize, msg: String| DataError::Manifest { line, msg };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
        let rate = header
            .strip_prefix(MANIFEST_HEADER)
            .and_then(|rest| rest.trim().strip_prefix("rate="))
            .and_then(|r| r.parse::<u32>().ok())
            .filter(|&r| r > 0)
            .ok_or_else(|| err(1, format!("expected `{MANIFEST_HEADER} rate=<int>`")))?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(err(line_no, "expected 4 tab-separated columns".into()));
            }
            let num = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| err(line_no, format!("bad {what} label {s:?}")))
            };
            let split = match cols[3] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(err(line_no, format!("unknown split {other:?}"))),
            };
            if !seen.insert(cols[0].to_string()) {
                return Err(err(line_no, format!("duplicate path {}", cols[0])));
            }
            entries.push(ManifestEntry {
                path: cols[0].to_string(),
                keyword: num(cols[1], "keyword")?,
                speaker: num(cols[2], "speaker")?,
                split,
            });
        }
        for split in [Split::Train, Split::Test] {
            if !entries.iter().any(|e| e.split == split) {
                return Err(err(0, format!("no {} entries", split.name())));
            }
        }
        Ok(Manifest { rate, entries })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn samples_to_bytes(samples: &[f32]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.to_le_bytes()).collect()
}

pub fn samples_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<f32>, DataError> {
    if bytes.len() % 4 != 0 || bytes.is_empty() {
        return Err(DataError::Malformed(format!(
            "{}: {} bytes is not a whole number of f32 samples",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes one sample file per utterance plus `manifest.tsv` under `dir`.
pub fn write_corpus(dir: &Path, rate: u32, utterances: &[Utterance]) -> Result<Manifest, DataError> {
    let mut entries = Vec::with_capacity(utterances.len());
    for u in utterances {
        let rel = format!("{}/{}.f32", u.split.name(), u.id);
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, samples_to_bytes(&u.samples)).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            path: rel,
            keyword: u.keyword,
            speaker: u.speaker,
            split: u.split,
        });
    }
    let manifest = Manifest { rate, entries };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads a manifest and every file it references.
pub fn load_corpus(manifest_path: &Path) -> Result<(Manifest, Vec<Utterance>), DataError> {
    if !manifest_path.exists() {
        return Err(DataError::MissingFile(manifest_path.to_path_buf()));
    }
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest = Manifest::parse(&text)?;
    let base: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut utterances = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let path = base.join(&e.path);
        if !path.exists() {
            return Err(DataError::MissingFile(path));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        utterances.push(Utterance {
            id: e.id(),
            keyword: e.keyword,
            speaker: e.speaker,
            split: e.split,
            samples: samples_from_bytes(&bytes, &path)?,
        });
    }
    Ok((manifest, utterances))
}
