//! Synthetic datasets with a planted signal, for end-to-end runs without the
//! private recordings.
//!
//! Each subject gets one random transcript (written as a sidecar next to all
//! three of its recordings, so the mock recognizer returns it). The MMSE score
//! is a fixed linear function of the transcript's mock embedding, min-max
//! mapped onto [0, 30] and rounded. The diagnostic class follows from the
//! score (split near its terciles rather than at clinical cutoffs, so every
//! group is well populated), and the audio carries class-dependent pitch and
//! pausing so the acoustic track has something to find too.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::audio::{write_wav, AudioBuffer};
use crate::encoder::{mock_encode, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::manifest::{ClassLabel, TaskKind};
use crate::rng;

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub n_subjects: usize,
    pub seed: u64,
    /// Length of every recording.
    pub duration_s: f64,
    pub sample_rate: u32,
    /// A small vocabulary keeps the embeddings in a low-dimensional subspace,
    /// so 160 training subjects pin down the planted linear map.
    pub vocabulary: usize,
    pub words_per_transcript: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            seed: 7,
            duration_s: 1.0,
            sample_rate: 16_000,
            vocabulary: 20,
            words_per_transcript: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSubject {
    pub subject_id: String,
    pub class_label: ClassLabel,
    pub mmse: i64,
    pub transcript: String,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub manifest_path: PathBuf,
    pub subjects: Vec<FixtureSubject>,
}

pub fn class_for_mmse(mmse: i64) -> ClassLabel {
    match mmse {
        18.. => ClassLabel::Hc,
        13..=17 => ClassLabel::Mci,
        _ => ClassLabel::Dementia,
    }
}

/// A voiced tone at `f0` with a silent gap of `pause_s` in the middle.
pub fn tone_with_pause(f0: f64, duration_s: f64, pause_s: f64, rate: u32, amplitude: f64) -> AudioBuffer {
    let n = (duration_s * rate as f64).round() as usize;
    let pause = (pause_s * rate as f64).round() as usize;
    let start = n.saturating_sub(pause) / 2;
    let samples = (0..n)
        .map(|i| {
            if i >= start && i < start + pause {
                0.0
            } else {
                amplitude * (2.0 * PI * f0 * i as f64 / rate as f64).sin()
            }
        })
        .collect();
    AudioBuffer::new(samples, rate)
}

/// Draws the subjects without touching the filesystem.
pub fn planted_subjects(spec: &FixtureSpec) -> Vec<FixtureSubject> {
    let mut rng = rng::seeded(spec.seed);
    let w_star: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng::normal(&mut rng)).collect();
    let vocab: Vec<String> = (0..spec.vocabulary).map(|i| format!("word{i}")).collect();
    let drafts: Vec<(String, f64)> = (0..spec.n_subjects)
        .map(|_| {
            let words: Vec<&str> = (0..spec.words_per_transcript)
                .map(|_| vocab[rng::index_below(&mut rng, vocab.len())].as_str())
                .collect();
            let text = words.join(" ");
            let h = mock_encode(&text);
            let s: f64 = h.values().iter().zip(&w_star).map(|(a, b)| a * b).sum();
            (text, s)
        })
        .collect();
    let lo = drafts.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
    let hi = drafts.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    drafts
        .into_iter()
        .enumerate()
        .map(|(i, (transcript, s))| {
            let mmse = (30.0 * (s - lo) / span).round() as i64;
            FixtureSubject {
                subject_id: format!("S{i:03}"),
                class_label: class_for_mmse(mmse),
                mmse,
                transcript,
            }
        })
        .collect()
}

/// Recordings differ across subjects and tasks even at equal scores, so no two
/// share a content key.
fn audio_for(subject_index: usize, subject: &FixtureSubject, task_index: usize, spec: &FixtureSpec) -> AudioBuffer {
    let (f0, pause) = match subject.class_label {
        ClassLabel::Hc => (210.0, 0.05),
        ClassLabel::Mci => (170.0, 0.25),
        _ => (130.0, 0.45),
    };
    let jitter = (subject.mmse as f64 - 15.0) * 0.5 + task_index as f64 * 3.0 + subject_index as f64 * 0.05;
    tone_with_pause(f0 + jitter, spec.duration_s, pause * spec.duration_s, spec.sample_rate, 0.4)
}

/// Writes recordings, sidecar transcripts and `manifest.csv` into `dir`.
/// Recording paths in the manifest are relative to it.
pub fn write_planted_dataset(dir: &Path, spec: &FixtureSpec) -> Result<Fixture> {
    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let subjects = planted_subjects(spec);
    let mut manifest = String::from("subject_id,class,mmse,ctd_path,pft_path,sft_path\n");
    for (i, s) in subjects.iter().enumerate() {
        let mut paths = Vec::new();
        for (t, task) in TaskKind::ALL.iter().enumerate() {
            let rel = format!("audio/{}_{}.wav", s.subject_id, task.as_str().to_lowercase());
            let path = dir.join(&rel);
            write_wav(&path, &audio_for(i, s, t, spec))?;
            let sidecar = crate::asr::sidecar_path(&path);
            std::fs::write(&sidecar, &s.transcript).map_err(|e| Error::io(&sidecar, e))?;
            paths.push(rel);
        }
        let _ = writeln!(
            manifest,
            "{},{},{},{}",
            s.subject_id,
            s.class_label.as_str(),
            s.mmse,
            paths.join(",")
        );
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(Fixture {
        manifest_path,
        subjects,
    })
}
