//! Audio front end: WAV ingestion, log-mel spectrogram, frame stacking and
//! SNR-controlled noise mixing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rustfft::{num_complex::Complex, FftPlanner};
use std::path::Path;

pub const SAMPLE_RATE: u32 = 22_050;
/// 25 ms analysis window at 22.05 kHz.
pub const WINDOW: usize = 551;
/// 10 ms hop.
pub const HOP: usize = 220;
pub const N_FFT: usize = 1024;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 30;
pub const F_MIN: f64 = 80.0;
pub const F_MAX: f64 = 11_025.0;
pub const STACK: usize = 8;
pub const STACK_SHIFT: usize = 3;
pub const FEATURE_DIM: usize = STACK * N_MELS;
pub const LOG_FLOOR: f64 = 1e-6;
/// Seconds between consecutive stacked feature vectors (three hops).
pub const FEATURE_PERIOD_S: f64 = (STACK_SHIFT * HOP) as f64 / SAMPLE_RATE as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, rate: u32) -> Waveform {
        if rate == self.sample_rate || self.samples.is_empty() {
            return Waveform {
                samples: self.samples.clone(),
                sample_rate: rate,
            };
        }
        let ratio = self.sample_rate as f64 / rate as f64;
        let n_out = ((self.samples.len() as f64) / ratio).floor().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|k| {
                let pos = k as f64 * ratio;
                let i = (pos.floor() as usize).min(last);
                let frac = pos - i as f64;
                let next = self.samples[(i + 1).min(last)];
                self.samples[i] * (1.0 - frac) + next * frac
            })
            .collect();
        Waveform {
            samples,
            sample_rate: rate,
        }
    }

    /// Read 16-bit PCM mono RIFF WAV and resample to 22.05 kHz.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader =
            hound::WavReader::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Format(format!(
                "{}: expected 16-bit PCM mono, got {} ch / {} bit",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Waveform::new(samples, spec.sample_rate)?.resample(SAMPLE_RATE))
    }

    /// Write 16-bit PCM mono WAV (values clipped to [-1, 1]).
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Format(e.to_string()))?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

/// Stacked log-mel feature vectors (`N × 240`).
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSeq {
    pub vectors: Tensor,
    pub frame_period_s: f64,
}

impl AudioFeatureSeq {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank: `N_MELS` unit-peak filters over the one-sided
/// FFT bins, with `N_MELS + 2` edge frequencies equally spaced in mel between
/// `F_MIN` and `F_MAX`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// Row-major `N_MELS × N_BINS`.
    pub weights: Vec<f64>,
    /// Edge frequencies in Hz (`N_MELS + 2` values).
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new() -> Self {
        let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
        let edges_hz: Vec<f64> = (0..N_MELS + 2)
            .map(|k| mel_to_hz(lo + (hi - lo) * k as f64 / (N_MELS + 1) as f64))
            .collect();
        let mut weights = vec![0.0; N_MELS * N_BINS];
        for m in 0..N_MELS {
            let (l, c, r) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for b in 0..N_BINS {
                let f = b as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                let w = if f >= l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f <= r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[m * N_BINS + b] = w;
            }
        }
        MelFilterbank { weights, edges_hz }
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * N_BINS..(m + 1) * N_BINS]
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

/// Number of STFT frames for a signal of `len` samples.
pub fn num_stft_frames(len: usize) -> Option<usize> {
    (len >= WINDOW).then(|| 1 + (len - WINDOW) / HOP)
}

/// Number of stacked vectors for `t` STFT frames.
pub fn num_stacked(t: usize) -> Option<usize> {
    (t >= STACK).then(|| 1 + (t - STACK) / STACK_SHIFT)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// `T × 30` log-mel magnitude spectrogram of a 22.05 kHz waveform.
pub fn log_mel_spectrogram(w: &Waveform) -> Result<Tensor> {
    let wav = if w.sample_rate == SAMPLE_RATE {
        std::borrow::Cow::Borrowed(w)
    } else {
        std::borrow::Cow::Owned(w.resample(SAMPLE_RATE))
    };
    let t = num_stft_frames(wav.samples.len()).ok_or_else(|| {
        Error::Length(format!(
            "waveform of {} samples is shorter than one {WINDOW}-sample window",
            wav.samples.len()
        ))
    })?;
    let window = hann(WINDOW);
    let bank = MelFilterbank::new();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut mags = vec![0.0; N_BINS];
    let mut out = Vec::with_capacity(t * N_MELS);
    for frame in 0..t {
        let start = frame * HOP;
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = if k < WINDOW {
                Complex::new(wav.samples[start + k] * window[k], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (m, c) in mags.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for m in 0..N_MELS {
            let e: f64 = bank.filter(m).iter().zip(&mags).map(|(a, b)| a * b).sum();
            out.push((e + LOG_FLOOR).ln());
        }
    }
    Tensor::new(vec![t, N_MELS], out)
}

/// Stack 8 consecutive spectrogram frames into one 240-dim vector, advancing
/// 3 frames at a time.
pub fn stack_frames(spec: &Tensor) -> Result<AudioFeatureSeq> {
    let t = spec.rows();
    if spec.cols() != N_MELS {
        return Err(Error::Dimension(format!("expected {N_MELS} mel bins, got {}", spec.cols())));
    }
    let n = num_stacked(t)
        .ok_or_else(|| Error::Length(format!("{t} frames, need at least {STACK} to stack")))?;
    let mut data = Vec::with_capacity(n * FEATURE_DIM);
    for i in 0..n {
        let s = i * STACK_SHIFT * N_MELS;
        data.extend_from_slice(&spec.data()[s..s + FEATURE_DIM]);
    }
    Ok(AudioFeatureSeq {
        vectors: Tensor::new(vec![n, FEATURE_DIM], data)?,
        frame_period_s: FEATURE_PERIOD_S,
    })
}

/// Waveform straight to stacked features.
pub fn features(w: &Waveform) -> Result<AudioFeatureSeq> {
    stack_frames(&log_mel_spectrogram(w)?)
}

/// Noise gain `g = sqrt(P_clean / (P_noise · 10^(snr/10)))`, with `noise`
/// tiled to the clean length before measuring.
pub fn noise_gain(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    let tiled = tile(noise, clean.samples.len())?;
    let (pc, pn) = (clean.power(), mean_power(&tiled));
    if pc <= 0.0 {
        return Err(Error::Domain("clean signal has zero power".into()));
    }
    if pn <= 0.0 {
        return Err(Error::Domain("noise signal has zero power".into()));
    }
    Ok((pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

fn tile(noise: &Waveform, len: usize) -> Result<Vec<f64>> {
    if noise.samples.is_empty() {
        return Err(Error::Domain("noise signal is empty".into()));
    }
    Ok(noise.samples.iter().copied().cycle().take(len).collect())
}

/// `clean + g · noise` at the requested SNR (powers over the whole utterance).
pub fn mix_noise(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    let g = noise_gain(clean, noise, snr_db)?;
    let tiled = tile(noise, clean.samples.len())?;
    Ok(Waveform {
        samples: clean
            .samples
            .iter()
            .zip(&tiled)
            .map(|(c, n)| c + g * n)
            .collect(),
        sample_rate: clean.sample_rate,
    })
}

/// Write a feature matrix as CSV, one vector per line.
pub fn features_to_csv(seq: &AudioFeatureSeq) -> String {
    let mut s = String::new();
    for i in 0..seq.vectors.rows() {
        let row: Vec<String> = seq.vectors.row_slice(i).iter().map(|v| format!("{v}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, n: usize) -> Waveform {
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn silence_is_log_floor() {
        let w = Waveform::new(vec![0.0; 3000], SAMPLE_RATE).unwrap();
        let s = log_mel_spectrogram(&w).unwrap();
        assert!(s.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn too_short_is_length_error() {
        let w = Waveform::new(vec![0.1; WINDOW - 1], SAMPLE_RATE).unwrap();
        assert!(matches!(log_mel_spectrogram(&w), Err(Error::Length(_))));
        let spec = Tensor::zeros(vec![7, N_MELS]);
        assert!(matches!(stack_frames(&spec), Err(Error::Length(_))));
    }

    #[test]
    fn one_second_frame_counts() {
        let s = log_mel_spectrogram(&sine(300.0, 22_050)).unwrap();
        assert_eq!(s.rows(), 98);
        assert_eq!(stack_frames(&s).unwrap().len(), 31);
    }

    #[test]
    fn stack_layout() {
        let spec = Tensor::from_fn(vec![29, N_MELS], |i| i as f64);
        let seq = stack_frames(&spec).unwrap();
        assert_eq!(seq.len(), 8);
        assert_eq!(seq.vectors.row_slice(0), &spec.data()[..FEATURE_DIM]);
        assert_eq!(seq.vectors.row_slice(1)[0], spec.get2(3, 0));
        let one = stack_frames(&Tensor::zeros(vec![8, N_MELS])).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn gains() {
        let a = Waveform::new(vec![1.0, -1.0, 1.0, -1.0], SAMPLE_RATE).unwrap();
        let b = Waveform::new(vec![-1.0, 1.0], SAMPLE_RATE).unwrap();
        assert!((noise_gain(&a, &b, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((noise_gain(&a, &b, 10.0).unwrap() - 0.1f64.sqrt()).abs() < 1e-15);
        let z = Waveform::new(vec![0.0; 4], SAMPLE_RATE).unwrap();
        assert!(matches!(mix_noise(&z, &b, 0.0), Err(Error::Domain(_))));
        assert!(matches!(mix_noise(&a, &z, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn resample_halves_length() {
        let w = Waveform::new((0..100).map(|i| i as f64).collect(), 44_100).unwrap();
        let r = w.resample(SAMPLE_RATE);
        assert_eq!(r.samples.len(), 50);
        assert_eq!(r.samples[10], 20.0);
    }
}
