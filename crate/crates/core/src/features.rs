//! Classification-track inputs: a 26-dimensional acoustic functional vector in
//! the spirit of eGeMAPS, transcript readability features, and z-score
//! standardization.
//!
//! Acoustic layout (fixed; see [`ACOUSTIC_FEATURE_NAMES`]):
//! `{logE, ZCR, centroid, rolloff85, F0} x {mean, std, p20, p80}` followed by
//! jitter, shimmer, voiced ratio, pauses per minute, mean pause length and
//! phonation ratio. Frames are 25 ms with a 10 ms hop at 16 kHz.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, TARGET_RATE};
use crate::error::{Error, Result};

pub const ACOUSTIC_DIM: usize = 26;
pub const READABILITY_DIM: usize = 7;

pub const ACOUSTIC_FEATURE_NAMES: [&str; ACOUSTIC_DIM] = [
    "logE_mean",
    "logE_std",
    "logE_p20",
    "logE_p80",
    "zcr_mean",
    "zcr_std",
    "zcr_p20",
    "zcr_p80",
    "centroid_mean",
    "centroid_std",
    "centroid_p20",
    "centroid_p80",
    "rolloff85_mean",
    "rolloff85_std",
    "rolloff85_p20",
    "rolloff85_p80",
    "f0_mean",
    "f0_std",
    "f0_p20",
    "f0_p80",
    "jitter_local",
    "shimmer_local",
    "voiced_ratio",
    "pause_count_per_min",
    "mean_pause_s",
    "phonation_ratio",
];

pub const READABILITY_FEATURE_NAMES: [&str; READABILITY_DIM] = [
    "word_count",
    "type_token_ratio",
    "mean_word_len_chars",
    "mean_sentence_len_words",
    "flesch_reading_ease",
    "filler_rate",
    "words_per_minute",
];

pub mod index {
    pub const LOGE_MEAN: usize = 0;
    pub const ZCR_MEAN: usize = 4;
    pub const CENTROID_MEAN: usize = 8;
    pub const ROLLOFF_MEAN: usize = 12;
    pub const F0_MEAN: usize = 16;
    pub const F0_STD: usize = 17;
    pub const F0_P20: usize = 18;
    pub const F0_P80: usize = 19;
    pub const JITTER: usize = 20;
    pub const SHIMMER: usize = 21;
    pub const VOICED_RATIO: usize = 22;
    pub const PAUSES_PER_MIN: usize = 23;
    pub const MEAN_PAUSE_S: usize = 24;
    pub const PHONATION_RATIO: usize = 25;
}

const FILLERS: [&str; 6] = ["um", "uh", "er", "ah", "hmm", "like"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// Minimum normalized autocorrelation peak for a voiced frame.
    pub voicing_threshold: f64,
    /// Pause frames sit this many dB below the loudest frame.
    pub pause_db: f64,
    pub min_pause_s: f64,
    /// Mean-square level treated as digital silence (also the logE floor).
    pub silence_floor: f64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            frame_len: 400,
            hop: 160,
            f0_min_hz: 50.0,
            f0_max_hz: 400.0,
            voicing_threshold: 0.45,
            pause_db: 25.0,
            min_pause_s: 0.2,
            silence_floor: 1e-10,
        }
    }
}

impl AcousticConfig {
    /// Pause threshold on the natural-log energy scale (25 dB -> 5.756).
    pub fn pause_drop_ln(&self) -> f64 {
        self.pause_db * std::f64::consts::LN_10 / 10.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticFeatures(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadabilityFeatures(pub Vec<f64>);

struct FrameAnalysis {
    log_energy: f64,
    mean_square: f64,
    zcr: f64,
    centroid: f64,
    rolloff: f64,
    /// Period in seconds for voiced frames.
    period: Option<f64>,
}

struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    size: usize,
}

impl Spectrum {
    fn new(frame_len: usize) -> Self {
        let size = frame_len.next_power_of_two();
        let window = (0..frame_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (frame_len - 1) as f64).cos())
            .collect();
        Self {
            fft: FftPlanner::new().plan_fft_forward(size),
            window,
            size,
        }
    }

    /// Returns (centroid Hz, 85% rolloff Hz); zeros for a silent frame.
    fn centroid_rolloff(&self, frame: &[f64], rate: f64) -> (f64, f64) {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .collect();
        buf.resize(self.size, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        let bins = self.size / 2 + 1;
        let bin_hz = rate / self.size as f64;
        let mags: Vec<f64> = buf[..bins].iter().map(|c| c.norm()).collect();
        let mag_total: f64 = mags.iter().sum();
        if mag_total <= 0.0 {
            return (0.0, 0.0);
        }
        let centroid = mags.iter().enumerate().map(|(k, m)| k as f64 * bin_hz * m).sum::<f64>() / mag_total;
        let power_total: f64 = mags.iter().map(|m| m * m).sum();
        let mut cumulative = 0.0;
        let mut rolloff = (bins - 1) as f64 * bin_hz;
        for (k, m) in mags.iter().enumerate() {
            cumulative += m * m;
            if cumulative >= 0.85 * power_total {
                rolloff = k as f64 * bin_hz;
                break;
            }
        }
        (centroid, rolloff)
    }
}

/// Period estimate by normalized cross-correlation over the admissible lag
/// range. The smallest-lag local peak within 90% of the best one is chosen to
/// avoid octave errors; parabolic interpolation refines it.
fn estimate_period(frame: &[f64], cfg: &AcousticConfig, rate: f64) -> Option<(f64, f64)> {
    let n = frame.len();
    let min_lag = (rate / cfg.f0_max_hz).floor() as usize;
    let max_lag = ((rate / cfg.f0_min_hz).ceil() as usize).min(n.saturating_sub(2));
    if min_lag < 2 || max_lag <= min_lag {
        return None;
    }
    let mut prefix = vec![0.0; n + 1];
    for (i, x) in frame.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x * x;
    }
    let corr = |lag: usize| -> f64 {
        let m = n - lag;
        let e1 = prefix[m];
        let e2 = prefix[n] - prefix[lag];
        let denom = (e1 * e2).sqrt();
        if denom <= 0.0 {
            return 0.0;
        }
        frame[..m].iter().zip(&frame[lag..]).map(|(a, b)| a * b).sum::<f64>() / denom
    };
    let r: Vec<f64> = (min_lag - 1..=max_lag + 1).map(corr).collect();
    let at = |lag: usize| r[lag + 1 - min_lag];
    let peaks: Vec<usize> = (min_lag..=max_lag)
        .filter(|&l| at(l) > at(l - 1) && at(l) >= at(l + 1))
        .collect();
    let best = peaks.iter().map(|&l| at(l)).fold(f64::NEG_INFINITY, f64::max);
    let &lag = peaks.iter().find(|&&l| at(l) >= 0.9 * best)?;
    let peak = at(lag);
    if peak < cfg.voicing_threshold {
        return None;
    }
    let (left, right) = (at(lag - 1), at(lag + 1));
    let curvature = left - 2.0 * peak + right;
    let shift = if curvature < 0.0 {
        (0.5 * (left - right) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let f0 = (rate / (lag as f64 + shift)).clamp(cfg.f0_min_hz, cfg.f0_max_hz);
    Some((1.0 / f0, peak))
}

fn analyse_frame(frame: &[f64], spectrum: &Spectrum, cfg: &AcousticConfig, rate: f64) -> FrameAnalysis {
    let mean_square = frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64;
    let crossings = frame.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    let (centroid, rolloff) = spectrum.centroid_rolloff(frame, rate);
    let period = if mean_square > cfg.silence_floor {
        estimate_period(frame, cfg, rate).map(|(t, _)| t)
    } else {
        None
    };
    FrameAnalysis {
        log_energy: mean_square.max(cfg.silence_floor).ln(),
        mean_square,
        zcr: crossings as f64 / (frame.len() - 1) as f64,
        centroid,
        rolloff,
        period,
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Percentile with linear interpolation between closest ranks; `q` in [0, 1].
pub fn percentile(x: &[f64], q: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn functionals(x: &[f64]) -> [f64; 4] {
    [mean(x), std_dev(x), percentile(x, 0.2), percentile(x, 0.8)]
}

/// Mean absolute change between consecutive voiced frames over the mean value.
fn local_perturbation(values: &[Option<f64>]) -> f64 {
    let diffs: Vec<f64> = values
        .windows(2)
        .filter_map(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => Some((a - b).abs()),
            _ => None,
        })
        .collect();
    let voiced: Vec<f64> = values.iter().flatten().copied().collect();
    let m = mean(&voiced);
    if diffs.is_empty() || m <= 0.0 {
        0.0
    } else {
        mean(&diffs) / m
    }
}

pub fn extract_acoustic(buf: &AudioBuffer) -> Result<AcousticFeatures> {
    extract_acoustic_with(buf, &AcousticConfig::default())
}

pub fn extract_acoustic_with(buf: &AudioBuffer, cfg: &AcousticConfig) -> Result<AcousticFeatures> {
    if buf.sample_rate != TARGET_RATE {
        return Err(Error::Precondition(format!(
            "acoustic features need {TARGET_RATE} Hz audio, got {} Hz",
            buf.sample_rate
        )));
    }
    if buf.len() < cfg.frame_len {
        return Ok(AcousticFeatures(vec![0.0; ACOUSTIC_DIM]));
    }
    let rate = f64::from(buf.sample_rate);
    let spectrum = Spectrum::new(cfg.frame_len);
    let n_frames = 1 + (buf.len() - cfg.frame_len) / cfg.hop;
    let frames: Vec<FrameAnalysis> = (0..n_frames)
        .map(|i| {
            let start = i * cfg.hop;
            analyse_frame(&buf.samples[start..start + cfg.frame_len], &spectrum, cfg, rate)
        })
        .collect();

    let column = |f: fn(&FrameAnalysis) -> f64| frames.iter().map(f).collect::<Vec<_>>();
    let periods: Vec<Option<f64>> = frames.iter().map(|f| f.period).collect();
    let amplitudes: Vec<Option<f64>> = frames
        .iter()
        .map(|f| f.period.map(|_| f.mean_square.sqrt()))
        .collect();
    let f0: Vec<f64> = periods.iter().flatten().map(|t| 1.0 / t).collect();

    let mut out = Vec::with_capacity(ACOUSTIC_DIM);
    out.extend(functionals(&column(|f| f.log_energy)));
    out.extend(functionals(&column(|f| f.zcr)));
    out.extend(functionals(&column(|f| f.centroid)));
    out.extend(functionals(&column(|f| f.rolloff)));
    out.extend(functionals(&f0));
    out.push(local_perturbation(&periods));
    out.push(local_perturbation(&amplitudes));
    out.push(f0.len() as f64 / n_frames as f64);

    let max_log = frames.iter().map(|f| f.log_energy).fold(f64::NEG_INFINITY, f64::max);
    let threshold = max_log - cfg.pause_drop_ln();
    let is_pause: Vec<bool> = frames
        .iter()
        .map(|f| f.mean_square <= cfg.silence_floor || f.log_energy < threshold)
        .collect();
    let hop_s = cfg.hop as f64 / rate;
    let min_run = (cfg.min_pause_s / hop_s - 1e-9).ceil() as usize;
    let mut runs = Vec::new();
    let mut current = 0usize;
    for &p in is_pause.iter().chain(std::iter::once(&false)) {
        if p {
            current += 1;
        } else {
            if current >= min_run {
                runs.push(current);
            }
            current = 0;
        }
    }
    let paused_frames: usize = runs.iter().sum();
    let duration_min = buf.duration_s() / 60.0;
    out.push(runs.len() as f64 / duration_min);
    out.push(if runs.is_empty() {
        0.0
    } else {
        paused_frames as f64 * hop_s / runs.len() as f64
    });
    out.push(1.0 - paused_frames as f64 / n_frames as f64);
    debug_assert_eq!(out.len(), ACOUSTIC_DIM);
    Ok(AcousticFeatures(out))
}

/// Delegates acoustic extraction to `<command> <wav_path>`, which prints
/// whitespace-separated floats (any fixed length).
pub fn extract_acoustic_external(command: &str, wav_path: &Path, timeout: Duration) -> Result<Vec<f64>> {
    let out = crate::external::run(command, &[&wav_path.to_string_lossy()], None, timeout)?;
    crate::external::parse_floats(&out)
}

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn syllables(word: &str) -> usize {
    let mut groups = 0;
    let mut in_group = false;
    for c in word.chars() {
        let vowel = matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
        if vowel && !in_group {
            groups += 1;
        }
        in_group = vowel;
    }
    groups.max(1)
}

pub fn extract_readability(text: &str, duration_s: f64) -> ReadabilityFeatures {
    let raw: Vec<&str> = text.split_whitespace().collect();
    if raw.is_empty() {
        return ReadabilityFeatures(vec![0.0; READABILITY_DIM]);
    }
    let words: Vec<String> = raw.iter().map(|w| normalize_word(w)).collect();
    let n = words.len() as f64;
    let types: HashSet<&str> = words.iter().map(String::as_str).collect();
    let chars: usize = words.iter().map(|w| w.chars().count()).sum();
    let sentences = text
        .split(['.', '!', '?'])
        .filter(|s| !s.trim().is_empty())
        .count()
        .max(1) as f64;
    let syllable_total: usize = words.iter().map(|w| syllables(w)).sum();
    let flesch = 206.835 - 1.015 * (n / sentences) - 84.6 * (syllable_total as f64 / n);
    let mut fillers = words.iter().filter(|w| FILLERS.contains(&w.as_str())).count();
    fillers += words.windows(2).filter(|p| p[0] == "you" && p[1] == "know").count();
    let wpm = if duration_s > 0.0 { 60.0 * n / duration_s } else { 0.0 };
    ReadabilityFeatures(vec![
        n,
        types.len() as f64 / n,
        chars as f64 / n,
        n / sentences,
        flesch,
        fillers as f64 / n,
        wpm,
    ])
}

/// Per-dimension z-scoring fitted on training vectors. Dimensions with zero
/// training variance get mean 0 and std 1 so they pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl StandardizationParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::arg(format!(
                "standardizer expects {} dimensions, got {}",
                self.dim(),
                v.len()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        Ok(v.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| (x - m) / s).collect())
    }

    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok(z.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| x * s + m).collect())
    }
}

pub fn fit_standardizer(train: &[Vec<f64>]) -> Result<StandardizationParams> {
    if train.len() < 2 {
        return Err(Error::arg("standardizer needs at least two training vectors"));
    }
    let dim = train[0].len();
    if let Some(bad) = train.iter().find(|v| v.len() != dim) {
        return Err(Error::arg(format!("mixed dimensions {dim} and {}", bad.len())));
    }
    let mut params = StandardizationParams {
        mean: Vec::with_capacity(dim),
        std: Vec::with_capacity(dim),
        degenerate: Vec::with_capacity(dim),
    };
    for d in 0..dim {
        let col: Vec<f64> = train.iter().map(|v| v[d]).collect();
        let s = std_dev(&col);
        if s > 1e-12 * mean(&col).abs().max(1.0) {
            params.mean.push(mean(&col));
            params.std.push(s);
            params.degenerate.push(false);
        } else {
            params.mean.push(0.0);
            params.std.push(1.0);
            params.degenerate.push(true);
        }
    }
    Ok(params)
}
