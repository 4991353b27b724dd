//! Speech-to-text through pluggable transcriber backends.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioBuffer};
use crate::error::{Error, Result};
use crate::hash::{fnv1a64, hex_key, Fnv1a64};
use crate::manifest::TaskKind;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptSource {
    Mock,
    External,
    Cache,
}

impl fmt::Display for TranscriptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TranscriptSource::Mock => "mock",
            TranscriptSource::External => "external",
            TranscriptSource::Cache => "cache",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub subject_id: String,
    pub task: TaskKind,
    pub text: String,
    pub source: TranscriptSource,
}

pub trait TranscriberBackend: Send + Sync {
    fn name(&self) -> &str;

    fn source(&self) -> TranscriptSource;

    /// Raw transcription of a 16 kHz buffer read from `audio_path`.
    fn transcribe_raw(&self, buf: &AudioBuffer, audio_path: &Path) -> Result<String>;
}

/// Deterministic stand-in for a speech recognizer.
///
/// If `<audio_path>.txt` exists its contents are returned verbatim. Otherwise
/// the buffer yields `ceil(duration_s)` pseudo-tokens derived from a hash of
/// its samples, so equal audio always gives equal text.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockTranscriber;

impl TranscriberBackend for MockTranscriber {
    fn name(&self) -> &str {
        "mock"
    }

    fn source(&self) -> TranscriptSource {
        TranscriptSource::Mock
    }

    fn transcribe_raw(&self, buf: &AudioBuffer, audio_path: &Path) -> Result<String> {
        mock_transcribe(buf, audio_path)
    }
}

pub fn sidecar_path(audio_path: &Path) -> PathBuf {
    let mut os = audio_path.as_os_str().to_owned();
    os.push(".txt");
    PathBuf::from(os)
}

/// Hash of the buffer's samples as little-endian `f64` bytes.
pub fn sample_content_hash(buf: &AudioBuffer) -> u64 {
    let mut h = Fnv1a64::new();
    for s in &buf.samples {
        h.update(&s.to_le_bytes());
    }
    h.finish()
}

pub fn mock_transcribe(buf: &AudioBuffer, audio_path: &Path) -> Result<String> {
    let sidecar = sidecar_path(audio_path);
    if sidecar.is_file() {
        return std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e));
    }
    let rate = buf.sample_rate as usize;
    let n_tokens = buf.len().div_ceil(rate);
    let content = sample_content_hash(buf).to_le_bytes();
    let tokens: Vec<String> = (0..n_tokens as u32)
        .map(|i| {
            let h = Fnv1a64::new().update(&content).update(&i.to_le_bytes()).finish();
            format!("tok{}", hex_key(h))
        })
        .collect();
    Ok(tokens.join(" "))
}

/// Out-of-process recognizer.
///
/// Each 30 s segment is written to a temporary 16 kHz PCM16 WAV and the
/// command runs as `<command> <segment_wav> <segment_index>`; the transcript
/// is read from stdout. All segments of one file share the timeout.
#[derive(Debug, Clone)]
pub struct ExternalTranscriber {
    command: String,
    timeout: Duration,
}

impl ExternalTranscriber {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        Self {
            command: command.into(),
            timeout,
        }
    }
}

impl TranscriberBackend for ExternalTranscriber {
    fn name(&self) -> &str {
        &self.command
    }

    fn source(&self) -> TranscriptSource {
        TranscriptSource::External
    }

    fn transcribe_raw(&self, buf: &AudioBuffer, _audio_path: &Path) -> Result<String> {
        let deadline = Instant::now() + self.timeout;
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let mut parts = Vec::new();
        for (i, segment) in audio::segment_30s(buf)?.iter().enumerate() {
            let seg_path = scratch.path().join(format!("segment{i}.wav"));
            audio::write_wav(&seg_path, segment)?;
            let remaining = deadline.saturating_duration_since(Instant::now());
            let out = crate::external::run(
                &self.command,
                &[&seg_path.to_string_lossy(), &i.to_string()],
                None,
                remaining,
            )
            .map_err(|e| match e {
                Error::Timeout { backend, .. } => Error::Timeout {
                    backend,
                    seconds: self.timeout.as_secs(),
                },
                other => other,
            })?;
            let text = String::from_utf8(out).map_err(|e| Error::Backend {
                backend: self.command.clone(),
                message: format!("segment {i}: transcript is not UTF-8: {e}"),
            })?;
            let text = text.trim();
            if !text.is_empty() {
                parts.push(text.to_string());
            }
        }
        Ok(parts.join(" "))
    }
}

/// Transcribes a preprocessed (16 kHz) buffer and normalizes whitespace at the
/// joins: segment texts are trimmed and joined by single spaces. Empty audio
/// always gives empty text.
pub fn transcribe(backend: &dyn TranscriberBackend, buf: &AudioBuffer, audio_path: &Path) -> Result<String> {
    if buf.sample_rate != audio::TARGET_RATE {
        return Err(Error::Precondition(format!(
            "transcription needs {} Hz audio, got {} Hz",
            audio::TARGET_RATE,
            buf.sample_rate
        )));
    }
    if buf.is_empty() {
        return Ok(String::new());
    }
    let raw = backend.transcribe_raw(buf, audio_path)?;
    if raw.contains('\0') {
        return Err(Error::Backend {
            backend: backend.name().to_string(),
            message: "transcript contains NUL bytes".into(),
        });
    }
    Ok(raw.trim().to_string())
}

/// Cache key for a recording: FNV-1a-64 of the raw WAV bytes, lowercase hex.
pub fn audio_cache_key(wav_bytes: &[u8]) -> String {
    hex_key(fnv1a64(wav_bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::FileCache;

    fn silence(seconds: f64) -> AudioBuffer {
        AudioBuffer::new(vec![0.0; (seconds * 16000.0) as usize], 16000)
    }

    #[test]
    fn sidecar_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        std::fs::write(dir.path().join("a.wav.txt"), "the boy steals cookies").unwrap();
        let text = transcribe(&MockTranscriber, &silence(1.0), &wav).unwrap();
        assert_eq!(text, "the boy steals cookies");
        assert_eq!(MockTranscriber.source(), TranscriptSource::Mock);
    }

    #[test]
    fn token_count_is_ceil_of_duration() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("none.wav");
        let text = transcribe(&MockTranscriber, &silence(2.4), &wav).unwrap();
        assert_eq!(text.split(' ').count(), 3);
        assert_eq!(text, transcribe(&MockTranscriber, &silence(2.4), &wav).unwrap());
    }

    #[test]
    fn empty_audio_gives_empty_text() {
        let p = Path::new("/nonexistent/x.wav");
        assert_eq!(mock_transcribe(&AudioBuffer::new(vec![], 16000), p).unwrap(), "");
        assert_eq!(transcribe(&MockTranscriber, &AudioBuffer::new(vec![], 16000), p).unwrap(), "");
    }

    #[test]
    fn one_second_silence_golden_token() {
        // FNV-1a-64 chain computed with an independent reference implementation:
        // content hash of 16000 zero f64s = 0xb7b725b914373325
        let buf = silence(1.0);
        assert_eq!(sample_content_hash(&buf), 0xb7b725b914373325);
        let text = mock_transcribe(&buf, Path::new("/nonexistent/x.wav")).unwrap();
        assert_eq!(text, "tok53335f73b5955ada");
    }

    #[test]
    fn external_backend_concatenates_segments() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("asr.sh");
        std::fs::write(&script, "#!/bin/sh\nprintf '  seg%s \\n' \"$2\"\n").unwrap();
        let backend = ExternalTranscriber::new(format!("sh {}", script.display()), Duration::from_secs(30));
        let buf = AudioBuffer::new(vec![0.01; 16000 * 65], 16000);
        let text = transcribe(&backend, &buf, Path::new("x.wav")).unwrap();
        assert_eq!(text, "seg0 seg1 seg2");
    }

    #[test]
    fn external_segments_are_16k_wavs() {
        let dir = tempfile::tempdir().unwrap();
        let backend = ExternalTranscriber::new(
            "sh -c 'wc -c < \"$0\"'",
            Duration::from_secs(30),
        );
        let buf = AudioBuffer::new(vec![0.0; 100], 16000);
        let text = transcribe(&backend, &buf, &dir.path().join("x.wav")).unwrap();
        // 44-byte header + 480000 samples * 2 bytes
        assert_eq!(text.trim(), "960044");
    }

    #[test]
    fn external_failure_and_timeout() {
        let buf = silence(0.5);
        let failing = ExternalTranscriber::new("echo decoder exploded >&2; exit 2", Duration::from_secs(30));
        let err = transcribe(&failing, &buf, Path::new("x.wav")).unwrap_err();
        assert!(err.to_string().contains("decoder exploded"));
        let slow = ExternalTranscriber::new("sleep 5; true", Duration::from_millis(300));
        assert!(matches!(transcribe(&slow, &buf, Path::new("x.wav")), Err(Error::Timeout { .. })));
    }

    #[test]
    fn cache_keys_follow_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FileCache::new(dir.path(), ".txt");
        let key = audio_cache_key(b"RIFF....");
        assert_eq!(key, hex_key(fnv1a64(b"RIFF....")));
        assert_eq!(cache.lookup(&key), None);
        cache.store(&key, "hi").unwrap();
        assert_eq!(cache.lookup(&key).as_deref(), Some("hi"));
        assert_ne!(key, audio_cache_key(b"RIFF...."[..7].as_ref()));
    }
}
