//! Stage-wise batch pipeline over a run directory.
//!
//! ```text
//! run_dir/
//!   manifest.validated.json     ingest
//!   stage.transcribe.json       transcribe   (cache/asr/<key>.txt)
//!   stage.embed.json            embed        (cache/emb/<key>.emb.txt)
//!   stage.featurize.json        featurize    (cache/acoustic/<key>.feat.txt)
//!   features.csv
//!   head.ckpt.json history.csv  train-regressor
//!   clf.ckpt.json               train-classifier
//!   predictions.csv             predict      (+ class_predictions.csv)
//!   report.json report.md       evaluate
//!   gradcheck.json              gradcheck
//! ```
//!
//! Per-file stages run on a bounded pool and keep going past failures; the
//! successes stay cached, the failures are listed in
//! `stage.<name>.failures.json` and the stage then returns an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};


use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::asr::{self, ExternalTranscriber, MockTranscriber, TranscriberBackend};
use crate::audio;
use crate::cache::{write_atomic, FileCache};
use crate::classifier::{self, ClassifierCheckpoint};
use crate::config::{BackendKind, RunConfig};
use crate::encoder::{self, EncoderBackend, ExternalEncoder, MockEncoder};
use crate::error::{Error, Result};
use crate::evalreport::{self, ClassPrediction, EvaluationReport, RegressionPrediction};
use crate::features::{self, StandardizationParams, READABILITY_DIM};
use crate::hash::{hex_key, Fnv1a64};
use crate::manifest::{self, ClassLabel, SubjectRecord, TaskKind};
use crate::regressor::{self, GradCheckReport, HeadCheckpoint, TrainingExample};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_PROBES: usize = 20;
pub const GRADCHECK_STEP: f64 = 1e-5;

const BUILTIN_ACOUSTIC: &str = "builtin-26";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedSubject {
    pub subject_id: String,
    pub class_label: ClassLabel,
    pub mmse: Option<i64>,
    pub split: Split,
    /// Resolved against the manifest's directory.
    pub recordings: BTreeMap<TaskKind, PathBuf>,
}

impl ValidatedSubject {
    fn record(&self) -> SubjectRecord {
        SubjectRecord {
            subject_id: self.subject_id.clone(),
            class_label: self.class_label,
            mmse: self.mmse,
            recordings: self.recordings.clone(),
        }
    }

    /// Subjects scored by `predict`: the dev split plus anyone without a score.
    fn is_prediction_target(&self) -> bool {
        self.split == Split::Dev || self.mmse.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedManifest {
    pub version: u32,
    pub manifest_path: PathBuf,
    pub seed: u64,
    pub dev_fraction: f64,
    pub n_subjects: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub class_counts: BTreeMap<ClassLabel, usize>,
    pub missing_mmse: usize,
    /// Subject counts for MMSE 0..=30.
    pub mmse_histogram: Vec<usize>,
    pub subjects: Vec<ValidatedSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub subject_id: String,
    pub task: TaskKind,
    pub cache_key: String,
    /// `mock`, `external` or `cache`.
    pub source: String,
    /// Key of the underlying recording.
    pub audio_key: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageIndex {
    pub stage: String,
    pub backend: String,
    pub backend_invocations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_names: Vec<String>,
    pub entries: Vec<StageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub subject_id: String,
    pub task: TaskKind,
    pub path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressorSummary {
    pub selected_epoch: usize,
    pub train_mse: f64,
    pub dev_mse: Option<f64>,
    pub n_train_examples: usize,
    pub n_dev_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierSummary {
    pub n_train_subjects: usize,
    pub train_accuracy_svm: f64,
    pub train_accuracy_text: f64,
}

pub fn validated_path(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join("manifest.validated.json")
}

fn stage_path(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.run_dir.join(format!("stage.{stage}.json"))
}

fn failures_path(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.run_dir.join(format!("stage.{stage}.failures.json"))
}

fn asr_cache(cfg: &RunConfig) -> FileCache {
    FileCache::new(cfg.run_dir.join("cache").join("asr"), ".txt")
}

fn emb_cache(cfg: &RunConfig) -> FileCache {
    encoder::embedding_cache(cfg.run_dir.join("cache").join("emb"))
}

fn acoustic_cache(cfg: &RunConfig) -> FileCache {
    FileCache::new(cfg.run_dir.join("cache").join("acoustic"), ".feat.txt")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_stage_output<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingStageOutput(path.into()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<ValidatedManifest> {
    cfg.validate()?;
    let manifest_path = cfg
        .manifest_path
        .as_deref()
        .ok_or_else(|| Error::Config("no manifest given (set manifest_path)".into()))?;
    let manifest_path = std::path::absolute(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let records = manifest::load_manifest(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let (train, dev) = manifest::split_dataset(&records, cfg.dev_fraction, cfg.seed)?;
    let dev_ids: std::collections::HashSet<&str> = dev.iter().map(|r| r.subject_id.as_str()).collect();

    let mut class_counts = BTreeMap::new();
    let mut histogram = vec![0; (manifest::MMSE_MAX + 1) as usize];
    let mut missing_mmse = 0;
    let subjects: Vec<ValidatedSubject> = records
        .iter()
        .map(|r| {
            *class_counts.entry(r.class_label).or_insert(0) += 1;
            match r.mmse {
                Some(m) => histogram[m as usize] += 1,
                None => missing_mmse += 1,
            }
            ValidatedSubject {
                subject_id: r.subject_id.clone(),
                class_label: r.class_label,
                mmse: r.mmse,
                split: if dev_ids.contains(r.subject_id.as_str()) { Split::Dev } else { Split::Train },
                recordings: r.recordings.iter().map(|(&t, p)| (t, base.join(p))).collect(),
            }
        })
        .collect();
    let validated = ValidatedManifest {
        version: 1,
        manifest_path,
        seed: cfg.seed,
        dev_fraction: cfg.dev_fraction,
        n_subjects: records.len(),
        n_train: train.len(),
        n_dev: dev.len(),
        class_counts,
        missing_mmse,
        mmse_histogram: histogram,
        subjects,
    };
    write_json(&validated_path(cfg), &validated)?;
    Ok(validated)
}

fn load_validated(cfg: &RunConfig) -> Result<ValidatedManifest> {
    read_stage_output(&validated_path(cfg))
}

fn transcriber(cfg: &RunConfig) -> Box<dyn TranscriberBackend> {
    match (cfg.asr_backend, &cfg.asr_command) {
        (BackendKind::External, Some(cmd)) => Box::new(ExternalTranscriber::new(cmd.clone(), cfg.timeout())),
        _ => Box::new(MockTranscriber),
    }
}

fn text_encoder(cfg: &RunConfig) -> Box<dyn EncoderBackend> {
    match (cfg.encoder_backend, &cfg.encoder_command) {
        (BackendKind::External, Some(cmd)) => Box::new(ExternalEncoder::new(cmd.clone(), cfg.timeout())),
        _ => Box::new(MockEncoder),
    }
}

struct WorkItem<'a> {
    subject: &'a ValidatedSubject,
    task: TaskKind,
    path: &'a Path,
}

/// Result of a stage's cheap per-item preparation: the content key the
/// backend output is cached under, and whatever the later steps need.
struct Prepared<P> {
    key: String,
    payload: P,
}

/// Per-file stage driver.
///
/// 1. `prepare` every item on the pool (reads inputs, derives the cache key).
/// 2. `produce` each distinct key that `cached` does not already hold, once,
///    on the pool; this is what counts as a backend invocation.
/// 3. Assemble entries in manifest order. The first item of a freshly produced
///    key reports `source`; every other item reports `cache`.
///
/// Successes go to `stage.<name>.json`. Failures, if any, are listed in
/// `stage.<name>.failures.json` and the stage returns an error afterwards.
struct Stage<'c> {
    cfg: &'c RunConfig,
    name: &'static str,
    backend: String,
    source: String,
    feature_names: Vec<String>,
}

impl Stage<'_> {
    fn run<P, Prep, Cached, Produce, Entry>(
        &self,
        items: &[WorkItem<'_>],
        prepare: Prep,
        cached: Cached,
        produce: Produce,
        entry: Entry,
    ) -> Result<StageRun<P>>
    where
        P: Send + Sync,
        Prep: Fn(&WorkItem<'_>) -> Result<Prepared<P>> + Sync,
        Cached: Fn(&str) -> bool + Sync,
        Produce: Fn(&WorkItem<'_>, &Prepared<P>) -> Result<()> + Sync,
        Entry: Fn(&WorkItem<'_>, &Prepared<P>, String) -> StageEntry,
    {
        self.cfg.validate()?;
        let pool = pool(self.cfg)?;
        let prepared: Vec<Result<Prepared<P>>> = pool.install(|| items.par_iter().map(&prepare).collect());

        let mut first_of_key: BTreeMap<String, usize> = BTreeMap::new();
        let mut to_produce = Vec::new();
        for (i, p) in prepared.iter().enumerate() {
            if let Ok(p) = p {
                if !first_of_key.contains_key(&p.key) {
                    first_of_key.insert(p.key.clone(), i);
                    to_produce.push(i);
                }
            }
        }
        let to_produce: Vec<usize> = pool.install(|| {
            to_produce
                .into_par_iter()
                .filter(|&i| !cached(&prepared[i].as_ref().expect("prepared").key))
                .collect()
        });
        let produced: BTreeMap<usize, Result<()>> = pool.install(|| {
            to_produce
                .par_iter()
                .map(|&i| (i, produce(&items[i], prepared[i].as_ref().expect("prepared"))))
                .collect::<Vec<_>>()
                .into_iter()
                .collect()
        });

        let mut entries = Vec::new();
        let mut failures = Vec::new();
        let mut kept = Vec::with_capacity(items.len());
        for (i, (item, p)) in items.iter().zip(prepared).enumerate() {
            let outcome = p.and_then(|p| {
                let first = first_of_key[&p.key];
                match produced.get(&first) {
                    Some(Err(e)) => Err(Error::Backend {
                        backend: self.backend.clone(),
                        message: e.to_string(),
                    }),
                    Some(Ok(())) if first == i => Ok((p, self.source.clone())),
                    _ => Ok((p, "cache".to_string())),
                }
            });
            match outcome {
                Ok((p, source)) => {
                    entries.push(entry(item, &p, source));
                    kept.push(Some(p));
                }
                Err(e) => {
                    failures.push(StageFailure {
                        subject_id: item.subject.subject_id.clone(),
                        task: item.task,
                        path: item.path.to_path_buf(),
                        error: e.to_string(),
                    });
                    kept.push(None);
                }
            }
        }
        let index = StageIndex {
            stage: self.name.to_string(),
            backend: self.backend.clone(),
            backend_invocations: produced.len(),
            feature_names: self.feature_names.clone(),
            entries,
        };
        write_json(&stage_path(self.cfg, self.name), &index)?;
        let fail_path = failures_path(self.cfg, self.name);
        let failure = if failures.is_empty() {
            let _ = std::fs::remove_file(&fail_path);
            None
        } else {
            write_json(&fail_path, &failures)?;
            Some(Error::StageFailures {
                stage: self.name.to_string(),
                failed: failures.len(),
                total: items.len(),
                manifest: fail_path,
            })
        };
        Ok(StageRun { index, kept, failure })
    }
}

struct StageRun<P> {
    index: StageIndex,
    /// Per item, in input order; `None` where the item failed.
    kept: Vec<Option<Prepared<P>>>,
    failure: Option<Error>,
}

impl<P> StageRun<P> {
    fn finish(self) -> Result<StageIndex> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(self.index),
        }
    }
}

/// Runs `f` and, on failure, records its message as the key's `.err` entry.
fn noting_errors(cache: &FileCache, key: &str, f: impl FnOnce() -> Result<()>) -> Result<()> {
    match f() {
        Ok(()) => {
            cache.clear_error(key);
            Ok(())
        }
        Err(e) => {
            let _ = cache.store_error(key, &e.to_string());
            Err(e)
        }
    }
}

fn recording_items(validated: &ValidatedManifest) -> Vec<WorkItem<'_>> {
    validated
        .subjects
        .iter()
        .flat_map(|s| {
            s.recordings.iter().map(move |(&task, path)| WorkItem {
                subject: s,
                task,
                path,
            })
        })
        .collect()
}

pub fn cmd_transcribe(cfg: &RunConfig) -> Result<StageIndex> {
    let validated = load_validated(cfg)?;
    let backend = transcriber(cfg);
    let cache = asr_cache(cfg);
    let items = recording_items(&validated);
    let stage = Stage {
        cfg,
        name: "transcribe",
        backend: backend.name().to_string(),
        source: backend.source().to_string(),
        feature_names: Vec::new(),
    };
    stage
        .run(
        &items,
        |item| {
            let bytes = std::fs::read(item.path).map_err(|e| Error::io(item.path, e))?;
            let key = asr::audio_cache_key(&bytes);
            let mut duration_s = 0.0;
            noting_errors(&cache, &key, || {
                duration_s = audio::read_wav(item.path)?.duration_s();
                Ok(())
            })?;
            Ok(Prepared {
                key,
                payload: duration_s,
            })
        },
        |key| cache.lookup(key).is_some(),
        |item, p| {
            noting_errors(&cache, &p.key, || {
                let buf = audio::resample_to_16k(&audio::read_wav(item.path)?);
                let text = asr::transcribe(backend.as_ref(), &buf, item.path)?;
                cache.store(&p.key, &text)
            })
        },
        |item, p, source| StageEntry {
            subject_id: item.subject.subject_id.clone(),
            task: item.task,
            cache_key: p.key.clone(),
            source,
            audio_key: p.key.clone(),
            duration_s: p.payload,
        },
    )?
    .finish()
}

fn stage_items<'a>(validated: &'a ValidatedManifest, index: &'a StageIndex) -> Vec<(WorkItem<'a>, &'a StageEntry)> {
    let by_id: BTreeMap<&str, &ValidatedSubject> =
        validated.subjects.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    index
        .entries
        .iter()
        .filter_map(|e| {
            let subject = by_id.get(e.subject_id.as_str())?;
            let path = subject.recordings.get(&e.task)?;
            Some((
                WorkItem {
                    subject,
                    task: e.task,
                    path,
                },
                e,
            ))
        })
        .collect()
}

fn cached_transcript(cache: &FileCache, entry: &StageEntry) -> Result<String> {
    cache
        .lookup(&entry.cache_key)
        .ok_or_else(|| Error::MissingStageOutput(cache.path_for(&entry.cache_key)))
}

/// Items of a stage that consumes transcripts, each paired with its
/// transcription entry.
fn transcript_items<'a>(
    validated: &'a ValidatedManifest,
    transcripts: &'a StageIndex,
) -> (Vec<WorkItem<'a>>, BTreeMap<(String, TaskKind), &'a StageEntry>) {
    let pairs = stage_items(validated, transcripts);
    let entries = pairs.iter().map(|(_, e)| ((e.subject_id.clone(), e.task), *e)).collect();
    (pairs.into_iter().map(|(w, _)| w).collect(), entries)
}

pub fn cmd_embed(cfg: &RunConfig) -> Result<StageIndex> {
    let validated = load_validated(cfg)?;
    let transcripts: StageIndex = read_stage_output(&stage_path(cfg, "transcribe"))?;
    let backend = text_encoder(cfg);
    let asr = asr_cache(cfg);
    let cache = emb_cache(cfg);
    let (items, sources) = transcript_items(&validated, &transcripts);
    let stage = Stage {
        cfg,
        name: "embed",
        backend: backend.name().to_string(),
        source: match cfg.encoder_backend {
            BackendKind::Mock => "mock",
            BackendKind::External => "external",
        }
        .to_string(),
        feature_names: Vec::new(),
    };
    stage
        .run(
        &items,
        |item| {
            let from = sources[&(item.subject.subject_id.clone(), item.task)];
            let text = cached_transcript(&asr, from)?;
            Ok(Prepared {
                key: encoder::embedding_cache_key(backend.name(), &text),
                payload: (from, text),
            })
        },
        |key| encoder::embedding_cache_lookup(&cache, key).is_some(),
        |_, p| {
            noting_errors(&cache, &p.key, || {
                let e = encoder::encode(backend.as_ref(), &p.payload.1)?;
                encoder::embedding_cache_store(&cache, &p.key, &e)
            })
        },
        |_, p, source| StageEntry {
            cache_key: p.key.clone(),
            source,
            ..p.payload.0.clone()
        },
    )?
    .finish()
}

fn acoustic_extractor_name(cfg: &RunConfig) -> String {
    cfg.acoustic_command
        .as_ref()
        .map_or_else(|| BUILTIN_ACOUSTIC.to_string(), |c| format!("external:{c}"))
}

fn format_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn cached_floats(cache: &FileCache, key: &str) -> Option<Vec<f64>> {
    cache.lookup(key).and_then(|t| crate::external::parse_floats(t.as_bytes()).ok())
}

pub fn cmd_featurize(cfg: &RunConfig) -> Result<StageIndex> {
    let validated = load_validated(cfg)?;
    let transcripts: StageIndex = read_stage_output(&stage_path(cfg, "transcribe"))?;
    let asr = asr_cache(cfg);
    let cache = acoustic_cache(cfg);
    let extractor = acoustic_extractor_name(cfg);
    let (items, sources) = transcript_items(&validated, &transcripts);
    let stage = Stage {
        cfg,
        name: "featurize",
        backend: extractor.clone(),
        source: if cfg.acoustic_command.is_some() { "external" } else { "builtin" }.to_string(),
        feature_names: match cfg.acoustic_command {
            None => features::ACOUSTIC_FEATURE_NAMES
                .iter()
                .chain(features::READABILITY_FEATURE_NAMES.iter())
                .map(|s| s.to_string())
                .collect(),
            Some(_) => Vec::new(),
        },
    };
    let run = stage.run(
        &items,
        |item| {
            let from = sources[&(item.subject.subject_id.clone(), item.task)];
            let text = cached_transcript(&asr, from)?;
            let key = hex_key(
                Fnv1a64::new()
                    .update(from.audio_key.as_bytes())
                    .update(&[0])
                    .update(extractor.as_bytes())
                    .finish(),
            );
            Ok(Prepared {
                key,
                payload: (from, text),
            })
        },
        |key| cached_floats(&cache, key).is_some(),
        |item, p| {
            noting_errors(&cache, &p.key, || {
                let v = match &cfg.acoustic_command {
                    Some(cmd) => features::extract_acoustic_external(cmd, item.path, cfg.timeout())?,
                    None => features::extract_acoustic(&audio::resample_to_16k(&audio::read_wav(item.path)?))?.0,
                };
                cache.store(&p.key, &format_floats(&v))
            })
        },
        |_, p, source| StageEntry {
            cache_key: p.key.clone(),
            source,
            ..p.payload.0.clone()
        },
    )?;

    // features.csv holds whatever succeeded, in manifest order.
    let mut rows = Vec::new();
    for (item, p) in items.iter().zip(&run.kept) {
        let Some(p) = p else { continue };
        let mut row = cached_floats(&cache, &p.key).ok_or_else(|| Error::MissingStageOutput(cache.path_for(&p.key)))?;
        row.extend(features::extract_readability(&p.payload.1, p.payload.0.duration_s).0);
        rows.push(((item.subject.subject_id.clone(), item.task), row));
    }
    write_features_csv(&cfg.run_dir.join("features.csv"), &rows)?;
    run.finish()
}

fn write_features_csv(path: &Path, rows: &[((String, TaskKind), Vec<f64>)]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.1.len());
    let mut out = String::from("subject_id,task");
    for i in 1..=dim {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for ((subject_id, task), row) in rows {
        let _ = write!(out, "{subject_id},{task}");
        for v in row {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn read_features_csv(path: &Path) -> Result<BTreeMap<(String, TaskKind), Vec<f64>>> {
    if !path.is_file() {
        return Err(Error::MissingStageOutput(path.into()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let mut fields = line.split(',');
        let bad = || Error::Parse(format!("{}: malformed line {}", path.display(), n + 1));
        let subject = fields.next().ok_or_else(bad)?.to_string();
        let task: TaskKind = fields.next().ok_or_else(bad)?.parse()?;
        let values = fields.map(|f| f.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        rows.insert((subject, task), values);
    }
    Ok(rows)
}

fn load_embeddings(cfg: &RunConfig) -> Result<BTreeMap<(String, TaskKind), Vec<f64>>> {
    let index: StageIndex = read_stage_output(&stage_path(cfg, "embed"))?;
    let cache = emb_cache(cfg);
    index
        .entries
        .iter()
        .map(|e| {
            let emb = encoder::embedding_cache_lookup(&cache, &e.cache_key)
                .ok_or_else(|| Error::MissingStageOutput(cache.path_for(&e.cache_key)))?;
            Ok(((e.subject_id.clone(), e.task), emb.into_values()))
        })
        .collect()
}

/// Leading acoustic block of a feature row (everything before readability).
fn acoustic_part(row: &[f64]) -> &[f64] {
    &row[..row.len().saturating_sub(READABILITY_DIM)]
}

/// Per-task regression inputs: the embedding, optionally followed by the
/// standardized acoustic block.
struct RegressionInputs {
    embeddings: BTreeMap<(String, TaskKind), Vec<f64>>,
    acoustic: Option<(BTreeMap<(String, TaskKind), Vec<f64>>, StandardizationParams)>,
}

impl RegressionInputs {
    fn input(&self, subject: &str, task: TaskKind) -> Result<Option<Vec<f64>>> {
        let key = (subject.to_string(), task);
        let Some(emb) = self.embeddings.get(&key) else {
            return Ok(None);
        };
        match &self.acoustic {
            None => Ok(Some(emb.clone())),
            Some((rows, std)) => {
                let Some(row) = rows.get(&key) else { return Ok(None) };
                let mut v = emb.clone();
                v.extend(std.apply(acoustic_part(row))?);
                Ok(Some(v))
            }
        }
    }

    fn subject_inputs(&self, s: &ValidatedSubject) -> Result<BTreeMap<TaskKind, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for &task in s.recordings.keys() {
            if let Some(v) = self.input(&s.subject_id, task)? {
                out.insert(task, v);
            }
        }
        Ok(out)
    }
}

pub fn cmd_train_regressor(cfg: &RunConfig) -> Result<RegressorSummary> {
    cfg.validate()?;
    let validated = load_validated(cfg)?;
    let embeddings = load_embeddings(cfg)?;
    let train_subjects: Vec<&ValidatedSubject> = validated
        .subjects
        .iter()
        .filter(|s| s.split == Split::Train && s.mmse.is_some())
        .collect();
    let norm = manifest::fit_normalizer(&train_subjects.iter().map(|s| s.record()).collect::<Vec<_>>())?;

    let acoustic = if cfg.concat_acoustic {
        let rows = read_features_csv(&cfg.run_dir.join("features.csv"))?;
        let train_rows: Vec<Vec<f64>> = train_subjects
            .iter()
            .flat_map(|s| s.recordings.keys().filter_map(|&t| rows.get(&(s.subject_id.clone(), t))))
            .map(|r| acoustic_part(r).to_vec())
            .collect();
        let std = features::fit_standardizer(&train_rows)?;
        Some((rows, std))
    } else {
        None
    };
    let inputs = RegressionInputs { embeddings, acoustic };

    let examples = |split: Split| -> Result<Vec<TrainingExample>> {
        let mut out = Vec::new();
        for s in validated.subjects.iter().filter(|s| s.split == split) {
            let Some(mmse) = s.mmse else { continue };
            for (task, input) in inputs.subject_inputs(s)? {
                out.push(TrainingExample {
                    input,
                    target: manifest::normalize_score(mmse as f64, &norm),
                    subject_id: s.subject_id.clone(),
                    task,
                });
            }
        }
        Ok(out)
    };
    let train_examples = examples(Split::Train)?;
    let dev_examples = examples(Split::Dev)?;
    let input_dim = train_examples
        .first()
        .map(|e| e.input.len())
        .ok_or_else(|| Error::arg("no training examples with embeddings"))?;

    let head = regressor::init_head_with_dim(cfg.train.seed, input_dim);
    let outcome = regressor::train(&head, &train_examples, &dev_examples, &cfg.train)?;

    let mut ckpt = HeadCheckpoint::new(&outcome.head, norm, &cfg.train, cfg.aggregation);
    ckpt.acoustic_standardizer = inputs.acoustic.map(|(_, s)| s);
    ckpt.save(&cfg.run_dir.join("head.ckpt.json"))?;

    let mut history = String::from("epoch,train_mse,dev_mse\n");
    for h in &outcome.history {
        let dev = h.dev_mse.map_or(String::new(), |d| format!("{d:?}"));
        let _ = writeln!(history, "{},{:?},{dev}", h.epoch, h.train_mse);
    }
    write_atomic(&cfg.run_dir.join("history.csv"), history.as_bytes())?;

    let selected = &outcome.history[outcome.selected_epoch - 1];
    Ok(RegressorSummary {
        selected_epoch: outcome.selected_epoch,
        train_mse: selected.train_mse,
        dev_mse: selected.dev_mse,
        n_train_examples: train_examples.len(),
        n_dev_examples: dev_examples.len(),
    })
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> Option<Vec<f64>> {
    let mut sum: Option<Vec<f64>> = None;
    let mut n = 0.0;
    for r in rows {
        n += 1.0;
        match &mut sum {
            None => sum = Some(r.clone()),
            Some(s) => s.iter_mut().zip(r).for_each(|(a, b)| *a += b),
        }
    }
    sum.map(|mut s| {
        s.iter_mut().for_each(|v| *v /= n);
        s
    })
}

/// Subject-level classifier inputs: task-averaged feature row and embedding.
fn subject_vectors(
    s: &ValidatedSubject,
    features_rows: &BTreeMap<(String, TaskKind), Vec<f64>>,
    embeddings: &BTreeMap<(String, TaskKind), Vec<f64>>,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let keys: Vec<(String, TaskKind)> = s.recordings.keys().map(|&t| (s.subject_id.clone(), t)).collect();
    let f = mean_rows(keys.iter().filter_map(|k| features_rows.get(k)))?;
    let e = mean_rows(keys.iter().filter_map(|k| embeddings.get(k)))?;
    Some((f, e))
}

pub fn cmd_train_classifier(cfg: &RunConfig) -> Result<ClassifierSummary> {
    cfg.validate()?;
    let validated = load_validated(cfg)?;
    let rows = read_features_csv(&cfg.run_dir.join("features.csv"))?;
    let embeddings = load_embeddings(cfg)?;
    let order = classifier::class_order(cfg.binary_mode);
    let mut feats = Vec::new();
    let mut embs = Vec::new();
    let mut labels = Vec::new();
    for s in validated.subjects.iter().filter(|s| s.split == Split::Train) {
        if s.class_label == ClassLabel::Unknown {
            continue;
        }
        if let Some((f, e)) = subject_vectors(s, &rows, &embeddings) {
            feats.push(f);
            embs.push(e);
            labels.push(classifier::label_index(s.class_label, &order)?);
        }
    }
    let standardizer = features::fit_standardizer(&feats)?;
    let z: Vec<Vec<f64>> = feats.iter().map(|f| standardizer.apply(f)).collect::<Result<_>>()?;
    let svm = classifier::train_svm(&z, &labels, order.len(), &cfg.svm)?;
    let embed_clf = classifier::train_embed_clf(&embs, &labels, order.len(), &cfg.embed_clf)?;
    let accuracy = |pred: &dyn Fn(usize) -> Result<usize>| -> Result<f64> {
        let mut hits = 0;
        for (i, &l) in labels.iter().enumerate() {
            hits += usize::from(pred(i)? == l);
        }
        Ok(hits as f64 / labels.len() as f64)
    };
    let train_accuracy_svm = accuracy(&|i| svm.predict(&z[i]))?;
    let train_accuracy_text = accuracy(&|i| Ok(classifier::argmax(&classifier::embed_probs(&embed_clf, &embs[i])?)))?;
    ClassifierCheckpoint {
        version: 1,
        svm,
        embed_clf,
        standardizer,
        ensemble: cfg.ensemble,
        class_order: order,
    }
    .save(&cfg.run_dir.join("clf.ckpt.json"))?;
    Ok(ClassifierSummary {
        n_train_subjects: labels.len(),
        train_accuracy_svm,
        train_accuracy_text,
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `predictions.csv` and, when a classifier checkpoint exists,
/// `class_predictions.csv`. Returns the number of regression predictions.
pub fn cmd_predict(cfg: &RunConfig) -> Result<usize> {
    let validated = load_validated(cfg)?;
    let ckpt_path = cfg.run_dir.join("head.ckpt.json");
    if !ckpt_path.is_file() {
        return Err(Error::MissingStageOutput(ckpt_path));
    }
    let ckpt = HeadCheckpoint::load(&ckpt_path)?;
    let head = ckpt.head()?;
    let embeddings = load_embeddings(cfg)?;
    let feature_rows = match (&ckpt.acoustic_standardizer, cfg.run_dir.join("features.csv")) {
        (Some(_), p) => Some(read_features_csv(&p)?),
        (None, p) if p.is_file() => Some(read_features_csv(&p)?),
        _ => None,
    };
    let inputs = RegressionInputs {
        embeddings,
        acoustic: match (&ckpt.acoustic_standardizer, &feature_rows) {
            (Some(std), Some(rows)) => Some((rows.clone(), std.clone())),
            _ => None,
        },
    };
    let targets: Vec<&ValidatedSubject> = validated.subjects.iter().filter(|s| s.is_prediction_target()).collect();

    let mut out = String::from("subject_id,y_true,y_pred\n");
    let mut n = 0;
    for s in &targets {
        let task_inputs = inputs.subject_inputs(s)?;
        if task_inputs.is_empty() {
            continue;
        }
        let y = regressor::predict_subject(&head, &task_inputs, &ckpt.norm, ckpt.aggregation)?;
        let truth = s.mmse.map_or(String::new(), |m| m.to_string());
        let _ = writeln!(out, "{},{truth},{}", s.subject_id, fmt_f64(y));
        n += 1;
    }
    write_atomic(&cfg.run_dir.join("predictions.csv"), out.as_bytes())?;

    let clf_path = cfg.run_dir.join("clf.ckpt.json");
    if clf_path.is_file() {
        let clf = ClassifierCheckpoint::load(&clf_path)?;
        let rows = feature_rows.ok_or_else(|| Error::MissingStageOutput(cfg.run_dir.join("features.csv")))?;
        let names: Vec<&str> = clf.class_order.iter().map(|c| c.as_str()).collect();
        let mut out = String::from("subject_id,y_true,svm,text,ensemble");
        for prefix in ["svm", "text", "ensemble"] {
            for n in &names {
                let _ = write!(out, ",{prefix}_p_{n}");
            }
        }
        out.push('\n');
        for s in &targets {
            let Some((f, e)) = subject_vectors(s, &rows, &inputs.embeddings) else { continue };
            let p_svm = classifier::svm_probs(&clf.svm, &clf.standardizer.apply(&f)?)?;
            let p_text = classifier::embed_probs(&clf.embed_clf, &e)?;
            let (c, p_ens) = classifier::ensemble_predict(&p_svm, &p_text, &clf.ensemble)?;
            let truth = classifier::label_index(s.class_label, &clf.class_order)
                .map(|i| names[i])
                .unwrap_or("?");
            let _ = write!(
                out,
                "{},{truth},{},{},{}",
                s.subject_id,
                names[classifier::argmax(&p_svm)],
                names[classifier::argmax(&p_text)],
                names[c]
            );
            for v in p_svm.iter().chain(&p_text).chain(&p_ens) {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            out.push('\n');
        }
        write_atomic(&cfg.run_dir.join("class_predictions.csv"), out.as_bytes())?;
    }
    Ok(n)
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    if !path.is_file() {
        return Err(Error::MissingStageOutput(path.into()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn parse_field<T: std::str::FromStr>(path: &Path, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad value '{field}'", path.display())))
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<EvaluationReport>> {
    let pred_path = cfg.run_dir.join("predictions.csv");
    let mut regression = Vec::new();
    for row in read_csv(&pred_path)? {
        if row.len() != 3 {
            return Err(Error::Parse(format!("{}: expected 3 columns", pred_path.display())));
        }
        if row[1].is_empty() {
            continue;
        }
        regression.push(RegressionPrediction {
            subject_id: row[0].clone(),
            y_true: parse_field(&pred_path, &row[1])?,
            y_pred: parse_field(&pred_path, &row[2])?,
        });
    }
    let mut reports = Vec::new();
    if !regression.is_empty() {
        reports.push(EvaluationReport::regression("Regression head (this run)", regression)?);
    }

    let clf_path = cfg.run_dir.join("class_predictions.csv");
    if clf_path.is_file() {
        let clf = ClassifierCheckpoint::load(&cfg.run_dir.join("clf.ckpt.json"))?;
        let k = clf.class_order.len();
        let rows: Vec<Vec<String>> = read_csv(&clf_path)?
            .into_iter()
            .filter(|r| r.get(1).is_some_and(|t| t != "?"))
            .collect();
        let models = [("SVM (this run)", 2), ("Text classifier (this run)", 3), ("Ensemble (this run)", 4)];
        for (m, (name, col)) in models.into_iter().enumerate() {
            let mut preds = Vec::new();
            for r in &rows {
                if r.len() != 5 + 3 * k {
                    return Err(Error::Parse(format!("{}: expected {} columns", clf_path.display(), 5 + 3 * k)));
                }
                let probabilities = r[5 + m * k..5 + (m + 1) * k]
                    .iter()
                    .map(|v| parse_field(&clf_path, v))
                    .collect::<Result<Vec<f64>>>()?;
                preds.push(ClassPrediction {
                    subject_id: r[0].clone(),
                    y_true: parse_field(&clf_path, &r[1])?,
                    y_pred: parse_field(&clf_path, &r[col])?,
                    probabilities,
                });
            }
            if !preds.is_empty() {
                reports.push(EvaluationReport::classification(name, preds, &clf.class_order)?);
            }
        }
    }
    evalreport::emit_report(&reports, &cfg.run_dir)?;
    Ok(reports)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    let report = regressor::gradient_check(cfg.seed, GRADCHECK_PROBES, GRADCHECK_STEP)?;
    write_json(&cfg.run_dir.join("gradcheck.json"), &report)?;
    if report.max_relative_error > GRADCHECK_TOLERANCE {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_relative_error
        )));
    }
    Ok(report)
}

/// Every stage in order: ingest through evaluate.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<EvaluationReport>> {
    cmd_ingest(cfg)?;
    cmd_transcribe(cfg)?;
    cmd_embed(cfg)?;
    cmd_featurize(cfg)?;
    cmd_train_regressor(cfg)?;
    cmd_train_classifier(cfg)?;
    cmd_predict(cfg)?;
    cmd_evaluate(cfg)
}

/// Regression path only: ingest, transcribe, embed, train, predict, evaluate.
pub fn run_regression(cfg: &RunConfig) -> Result<Vec<EvaluationReport>> {
    cmd_ingest(cfg)?;
    cmd_transcribe(cfg)?;
    cmd_embed(cfg)?;
    cmd_train_regressor(cfg)?;
    cmd_predict(cfg)?;
    cmd_evaluate(cfg)
}
