//! WAV ingestion, resampling to 16 kHz and fixed 30-second segmentation.

use std::path::Path;

use crate::error::{Error, Result};

pub const TARGET_RATE: u32 = 16_000;
pub const SUPPORTED_RATES: [u32; 5] = [8_000, 16_000, 22_050, 44_100, 48_000];
pub const SEGMENT_SECONDS: usize = 30;
pub const SEGMENT_LEN: usize = SEGMENT_SECONDS * TARGET_RATE as usize;

/// Zero crossings of the sinc kernel on each side of the centre tap.
const SINC_ZERO_CROSSINGS: f64 = 32.0;

/// Mono samples in [-1, 1] with their sample rate in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a PCM16 RIFF/WAVE file, downmixing stereo by per-frame average.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat {
            path: path.into(),
            reason: format!("{:?} {}-bit; only PCM 16-bit is supported", spec.sample_format, spec.bits_per_sample),
        });
    }
    if !(1..=2).contains(&spec.channels) {
        return Err(Error::UnsupportedFormat {
            path: path.into(),
            reason: format!("{} channels; only mono or stereo is supported", spec.channels),
        });
    }
    if !SUPPORTED_RATES.contains(&spec.sample_rate) {
        return Err(Error::UnsupportedFormat {
            path: path.into(),
            reason: format!("sample rate {} Hz", spec.sample_rate),
        });
    }
    let raw = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    let scale = 1.0 / 32768.0;
    let samples = match spec.channels {
        1 => raw.iter().map(|&s| f64::from(s) * scale).collect(),
        _ => {
            if raw.len() % 2 != 0 {
                return Err(Error::CorruptFile {
                    path: path.into(),
                    reason: "odd sample count in stereo stream".into(),
                });
            }
            raw.chunks_exact(2)
                .map(|f| 0.5 * (f64::from(f[0]) + f64::from(f[1])) * scale)
                .collect()
        }
    };
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::Unsupported => Error::UnsupportedFormat {
            path: path.into(),
            reason: "unsupported WAVE encoding".into(),
        },
        hound::Error::IoError(io)
            if matches!(io.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied) =>
        {
            Error::io(path, io)
        }
        other => Error::CorruptFile {
            path: path.into(),
            reason: other.to_string(),
        },
    }
}

/// Writes a mono PCM16 WAV, clipping to [-1, 1]. Used for fixtures and for
/// handing segments to external transcribers.
pub fn write_wav(path: &Path, buf: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &buf.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational-ratio polyphase resampler with a Hann-windowed sinc kernel.
///
/// Output sample `n` sits at input position `n * down / up`; its filter phase
/// is `(n * down) mod up`. Each phase's taps are normalized to unit sum so DC
/// passes exactly.
#[derive(Debug, Clone)]
pub struct PolyphaseResampler {
    up: u64,
    down: u64,
    /// Taps cover input offsets `-(half_taps - 1) ..= half_taps` from the base index.
    half_taps: usize,
    phases: Vec<Vec<f64>>,
}

impl PolyphaseResampler {
    pub fn new(from_rate: u32, to_rate: u32) -> Self {
        let g = gcd(u64::from(from_rate), u64::from(to_rate));
        let up = u64::from(to_rate) / g;
        let down = u64::from(from_rate) / g;
        // cutoff relative to the input Nyquist
        let cutoff = (up as f64 / down as f64).min(1.0);
        let half_width = SINC_ZERO_CROSSINGS / cutoff;
        let half_taps = half_width.ceil() as usize + 1;
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps: Vec<f64> = (0..2 * half_taps)
                    .map(|i| {
                        let j = i as f64 - (half_taps as f64 - 1.0);
                        kernel(frac - j, cutoff, half_width)
                    })
                    .collect();
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= sum);
                taps
            })
            .collect();
        Self {
            up,
            down,
            half_taps,
            phases,
        }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len as u128 * self.up as u128 + self.down as u128 / 2) / self.down as u128) as usize
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let n_out = self.output_len(input.len());
        let len = input.len() as i64;
        (0..n_out as u64)
            .map(|n| {
                let pos = n * self.down;
                let base = (pos / self.up) as i64;
                let taps = &self.phases[(pos % self.up) as usize];
                let first = base - (self.half_taps as i64 - 1);
                let lo = (-first).max(0) as usize;
                let hi = ((len - first).max(0) as usize).min(taps.len());
                if lo >= hi {
                    return 0.0;
                }
                let start = (first + lo as i64) as usize;
                taps[lo..hi]
                    .iter()
                    .zip(&input[start..start + (hi - lo)])
                    .map(|(t, x)| t * x)
                    .sum()
            })
            .collect()
    }
}

fn kernel(d: f64, cutoff: f64, half_width: f64) -> f64 {
    if d.abs() >= half_width {
        return 0.0;
    }
    let x = cutoff * d;
    let sinc = if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    };
    let window = 0.5 * (1.0 + (std::f64::consts::PI * d / half_width).cos());
    cutoff * sinc * window
}

/// Resamples to 16 kHz; a buffer already at 16 kHz is returned unchanged.
pub fn resample_to_16k(buf: &AudioBuffer) -> AudioBuffer {
    if buf.sample_rate == TARGET_RATE {
        return buf.clone();
    }
    if buf.is_empty() {
        return AudioBuffer::new(Vec::new(), TARGET_RATE);
    }
    let resampler = PolyphaseResampler::new(buf.sample_rate, TARGET_RATE);
    AudioBuffer::new(resampler.process(&buf.samples), TARGET_RATE)
}

/// Splits into consecutive 30 s windows, zero-padding the last one. Empty
/// input yields a single silent segment.
pub fn segment_30s(buf: &AudioBuffer) -> Result<Vec<AudioBuffer>> {
    if buf.sample_rate != TARGET_RATE {
        return Err(Error::Precondition(format!(
            "segmentation needs {TARGET_RATE} Hz audio, got {} Hz",
            buf.sample_rate
        )));
    }
    if buf.is_empty() {
        return Ok(vec![AudioBuffer::new(vec![0.0; SEGMENT_LEN], TARGET_RATE)]);
    }
    Ok(buf
        .samples
        .chunks(SEGMENT_LEN)
        .map(|chunk| {
            let mut samples = chunk.to_vec();
            samples.resize(SEGMENT_LEN, 0.0);
            AudioBuffer::new(samples, TARGET_RATE)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, rate: u32, seconds: f64, amp: f64) -> AudioBuffer {
        let n = (seconds * f64::from(rate)).round() as usize;
        AudioBuffer::new(
            (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / f64::from(rate)).sin()).collect(),
            rate,
        )
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn write_raw(path: &Path, channels: u16, rate: u32, bits: u16, samples: &[i32]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn reads_mono_silence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 1, 16000, 16, &vec![0; 16000]);
        let buf = read_wav(&p).unwrap();
        assert_eq!(buf.sample_rate, 16000);
        assert_eq!(buf.samples, vec![0.0; 16000]);
    }

    #[test]
    fn downmixes_stereo_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 2, 44100, 16, &[16384, -16384, -32768, -32768]);
        let buf = read_wav(&p).unwrap();
        assert_eq!(buf.samples, vec![0.0, -1.0]);
        assert_eq!(buf.sample_rate, 44100);
    }

    #[test]
    fn rejects_24_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 1, 16000, 24, &[0, 1, 2]);
        assert!(matches!(read_wav(&p), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 1, 16000, 16, &vec![100; 1000]);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 501]).unwrap();
        assert!(matches!(read_wav(&p), Err(Error::CorruptFile { .. })));
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(read_wav(&p), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn identity_at_16k() {
        let buf = sine(300.0, 16000, 0.1, 0.3);
        assert_eq!(resample_to_16k(&buf), buf);
    }

    #[test]
    fn empty_input_resamples_to_empty() {
        let out = resample_to_16k(&AudioBuffer::new(vec![], 44100));
        assert!(out.is_empty());
        assert_eq!(out.sample_rate, 16000);
    }

    #[test]
    fn dc_is_preserved() {
        let buf = AudioBuffer::new(vec![0.25; 44100], 44100);
        let out = resample_to_16k(&buf);
        assert!((out.len() as i64 - 16000).abs() <= 1);
        // kernel half-width is 89 input samples, about 33 output samples
        let interior = &out.samples[40..out.len() - 40];
        let worst = interior.iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-3, "max deviation {worst}");
    }

    #[test]
    fn output_lengths_for_all_rates() {
        for rate in SUPPORTED_RATES {
            let n = 12345;
            let out = resample_to_16k(&AudioBuffer::new(vec![0.1; n], rate));
            let want = (n as f64 * 16000.0 / f64::from(rate)).round() as i64;
            assert!((out.len() as i64 - want).abs() <= 1, "rate {rate}");
        }
    }

    #[test]
    fn band_limited_energy_is_kept() {
        for rate in [22050, 44100, 48000, 8000] {
            for freq in [100.0, 1000.0, 3000.0, 7000.0] {
                if freq >= f64::from(rate) / 2.0 {
                    continue;
                }
                let buf = sine(freq, rate, 0.5, 0.5);
                let out = resample_to_16k(&buf);
                let edge = 100;
                let ratio = rms(&out.samples[edge..out.len() - edge]) / rms(&buf.samples);
                assert!((ratio - 1.0).abs() < 0.02, "rate {rate} freq {freq} ratio {ratio}");
            }
        }
    }

    #[test]
    fn segments_75_seconds() {
        let buf = AudioBuffer::new(vec![0.5; 75 * 16000], 16000);
        let segs = segment_30s(&buf).unwrap();
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.len() == SEGMENT_LEN));
        assert!(segs[2].samples[..240_000].iter().all(|&v| v == 0.5));
        assert!(segs[2].samples[240_000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segments_exact_and_empty() {
        let exact = segment_30s(&AudioBuffer::new(vec![0.1; SEGMENT_LEN], 16000)).unwrap();
        assert_eq!(exact.len(), 1);
        assert!(exact[0].samples.iter().all(|&v| v == 0.1));
        let empty = segment_30s(&AudioBuffer::new(vec![], 16000)).unwrap();
        assert_eq!(empty.len(), 1);
        assert!(empty[0].samples.iter().all(|&v| v == 0.0));
        assert!(matches!(
            segment_30s(&AudioBuffer::new(vec![0.0; 10], 8000)),
            Err(Error::Precondition(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn resampler_is_linear(seed in any::<u64>(), gain in -3.0f64..3.0) {
            let mut rng = crate::rng::seeded(seed);
            let x: Vec<f64> = (0..2000).map(|_| crate::rng::symmetric(&mut rng, 0.3)).collect();
            let scaled: Vec<f64> = x.iter().map(|v| v * gain).collect();
            let a = resample_to_16k(&AudioBuffer::new(x, 22050));
            let b = resample_to_16k(&AudioBuffer::new(scaled, 22050));
            let peak = a.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (u, v) in a.samples.iter().zip(&b.samples) {
                prop_assert!((u * gain - v).abs() <= 1e-9 * peak.max(1e-300) * gain.abs().max(1.0));
            }
        }

        #[test]
        fn segments_partition_input(len in 0usize..1_100_000) {
            let samples: Vec<f64> = (0..len).map(|i| (i % 97) as f64 / 97.0).collect();
            let buf = AudioBuffer::new(samples.clone(), 16000);
            let joined: Vec<f64> = segment_30s(&buf).unwrap().into_iter().flat_map(|s| s.samples).collect();
            prop_assert_eq!(&joined[..len], &samples[..]);
            prop_assert!(joined[len..].iter().all(|&v| v == 0.0));
        }
    }
}
