//! Audio front end: WAV ingestion, linear resampling and log-mel spectrograms.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

pub const SUPPORTED_RATES: &[u32] = &[8000, 16000, 22050, 32000, 44100, 48000];
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedRate(u32),
    #[error("upsampling {from} Hz to {to} Hz exceeds the 2x limit")]
    UpsampleLimit { from: u32, to: u32 },
    #[error("audio has {got} samples, fewer than the {need}-sample window")]
    TooShort { got: usize, need: usize },
    #[error("empty waveform")]
    Empty,
    #[error("{0}: expected PCM WAV (16-bit signed integer); {1}")]
    Codec(String, String),
    #[error("invalid feature configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, FeatureError> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(FeatureError::UnsupportedRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(FeatureError::Empty);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `T x F` frames of log-mel energies (or synthetic equivalents).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub frames: Vec<Vec<f32>>,
    pub frame_shift_ms: f32,
    pub frame_length_ms: f32,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }

    pub fn flat(&self) -> Vec<f32> {
        self.frames.iter().flatten().copied().collect()
    }

    pub fn from_flat(data: &[f32], dim: usize, shift_ms: f32, length_ms: f32) -> Self {
        Self {
            frames: data.chunks(dim).map(|c| c.to_vec()).collect(),
            frame_shift_ms: shift_ms,
            frame_length_ms: length_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

impl SpectrogramConfig {
    pub fn with_mels(n_mels: usize) -> Self {
        Self {
            n_mels,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), FeatureError> {
        if self.window == 0 || self.hop == 0 || self.n_mels == 0 {
            return Err(FeatureError::Config("window, hop and n_mels must be positive".into()));
        }
        if self.n_fft < self.window {
            return Err(FeatureError::Config(format!(
                "n_fft {} shorter than window {}",
                self.n_fft, self.window
            )));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min && self.f_max <= self.sample_rate as f64 / 2.0)
        {
            return Err(FeatureError::Config(format!(
                "mel range {}..{} Hz invalid at {} Hz",
                self.f_min, self.f_max, self.sample_rate
            )));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels + 2` filter edge frequencies in Hz, equally spaced on the mel scale.
/// Filter `i` rises from edge `i` to a peak at edge `i + 1` and falls to edge `i + 2`.
pub fn mel_edges(cfg: &SpectrogramConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filter weights, `[n_mels][n_fft / 2 + 1]`.
pub fn mel_filterbank(cfg: &SpectrogramConfig) -> Vec<Vec<f64>> {
    let edges = mel_edges(cfg);
    let bins = cfg.n_fft / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Linear-interpolation resampling.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform, FeatureError> {
    if !SUPPORTED_RATES.contains(&target_rate) {
        return Err(FeatureError::UnsupportedRate(target_rate));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    if target_rate as u64 > 2 * w.sample_rate as u64 {
        return Err(FeatureError::UpsampleLimit {
            from: w.sample_rate,
            to: target_rate,
        });
    }
    let n = w.samples.len();
    let ratio = w.sample_rate as f64 / target_rate as f64;
    let out_len = ((n as u64 * target_rate as u64).div_ceil(w.sample_rate as u64)) as usize;
    let out = (0..out_len.max(1))
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            if j + 1 >= n {
                return w.samples[n - 1];
            }
            let frac = (pos - j as f64) as f32;
            w.samples[j] * (1.0 - frac) + w.samples[j + 1] * frac
        })
        .collect();
    Waveform::new(out, target_rate)
}

pub fn frame_count(n_samples: usize, window: usize, hop: usize) -> usize {
    1 + (n_samples - window) / hop
}

/// Log-mel spectrogram of a Hann-windowed STFT power spectrum.
pub fn spectrogram(w: &Waveform, cfg: &SpectrogramConfig) -> Result<FeatureSequence, FeatureError> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(FeatureError::Config(format!(
            "waveform is {} Hz but the front end expects {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let n = w.samples.len();
    if n < cfg.window {
        return Err(FeatureError::TooShort {
            got: n,
            need: cfg.window,
        });
    }
    let frames = frame_count(n, cfg.window, cfg.hop);
    let hann: Vec<f64> = (0..cfg.window)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; bins];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let start = t * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, h) in hann.iter().enumerate() {
            buf[i].re = w.samples[start + i] as f64 * h;
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let row = bank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                e.max(LOG_FLOOR).ln() as f32
            })
            .collect();
        out.push(row);
    }
    Ok(FeatureSequence {
        frames: out,
        frame_shift_ms: cfg.hop as f32 * 1000.0 / cfg.sample_rate as f32,
        frame_length_ms: cfg.window as f32 * 1000.0 / cfg.sample_rate as f32,
    })
}

/// Reads 16-bit PCM WAV; multi-channel audio is averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform, FeatureError> {
    let shown = path.display().to_string();
    let mut reader =
        hound::WavReader::open(path).map_err(|e| FeatureError::Codec(shown.clone(), e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(FeatureError::Codec(
            shown,
            format!(
                "found {:?} with {} bits per sample",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    let ch = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<Result<_, _>>()
        .map_err(|e| FeatureError::Codec(shown.clone(), e.to_string()))?;
    let samples = raw
        .chunks(ch)
        .map(|frame| frame.iter().map(|&s| s as f32 / 32768.0).sum::<f32>() / ch as f32)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let shown = path.display().to_string();
    let codec = |e: hound::Error| FeatureError::Codec(shown.clone(), e.to_string());
    let mut wr = hound::WavWriter::create(path, spec).map_err(codec)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        wr.write_sample(v).map_err(codec)?;
    }
    wr.finalize().map_err(codec)
}

/// WAV file to features at the front end's sample rate.
pub fn wav_features(path: &Path, cfg: &SpectrogramConfig) -> Result<FeatureSequence, FeatureError> {
    let w = read_wav(path)?;
    let w = resample(&w, cfg.sample_rate)?;
    spectrogram(&w, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, secs: f64, amp: f32) -> Waveform {
        let n = (rate as f64 * secs) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    fn zero_crossings(x: &[f32]) -> usize {
        x.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count()
    }

    #[test]
    fn resample_identity_and_constant() {
        let w = sine(300.0, 16000, 0.1, 0.5);
        assert_eq!(resample(&w, 16000).unwrap(), w);
        let c = Waveform::new(vec![0.25; 3200], 32000).unwrap();
        let r = resample(&c, 16000).unwrap();
        assert!(r.samples().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn resample_preserves_zero_crossing_rate() {
        let w = sine(440.0, 32000, 1.0, 0.8);
        let r = resample(&w, 16000).unwrap();
        // a 440 Hz sine crosses zero 880 times a second
        let (a, b) = (zero_crossings(w.samples()), zero_crossings(r.samples()));
        assert!(a.abs_diff(880) <= 1 && b.abs_diff(880) <= 1, "{a} {b}");
        assert!((r.duration_s() - w.duration_s()).abs() <= 0.010);
    }

    #[test]
    fn upsampling_past_two_x_is_rejected() {
        let w = Waveform::new(vec![0.0; 100], 8000).unwrap();
        assert!(matches!(resample(&w, 22050), Err(FeatureError::UpsampleLimit { .. })));
        assert!(resample(&w, 16000).is_ok());
    }

    #[test]
    fn frame_count_and_silence() {
        let w = Waveform::new(vec![0.0; 400 + 3 * 160], 16000).unwrap();
        let f = spectrogram(&w, &SpectrogramConfig::default()).unwrap();
        assert_eq!(f.num_frames(), 4);
        assert_eq!(f.dim(), 80);
        let floor = (LOG_FLOOR).ln() as f32;
        assert!(f.frames.iter().flatten().all(|&v| v == floor));
        let short = Waveform::new(vec![0.0; 399], 16000).unwrap();
        assert!(matches!(
            spectrogram(&short, &SpectrogramConfig::default()),
            Err(FeatureError::TooShort { .. })
        ));
    }

    #[test]
    fn tone_peaks_in_the_filter_covering_its_frequency() {
        let cfg = SpectrogramConfig::default();
        let edges = mel_edges(&cfg);
        // closed-form triangle weights at 1 kHz
        let weight = |m: usize| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            ((1000.0 - l) / (c - l)).min((r - 1000.0) / (r - c)).max(0.0)
        };
        let expected = (0..cfg.n_mels)
            .max_by(|&a, &b| weight(a).total_cmp(&weight(b)))
            .unwrap();
        let f = spectrogram(&sine(1000.0, 16000, 0.5, 0.5), &cfg).unwrap();
        for row in &f.frames {
            let got = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn amplitude_scaling_is_a_uniform_log_shift() {
        let cfg = SpectrogramConfig::default();
        let mut s: Vec<f32> = Vec::new();
        for i in 0..4000 {
            let t = i as f64 / 16000.0;
            s.push((0.3 * (2.0 * PI * 440.0 * t).sin() + 0.2 * (2.0 * PI * 3100.0 * t).sin()
                + 0.01 * ((i * 7919 % 1000) as f64 / 500.0 - 1.0)) as f32);
        }
        let w = Waveform::new(s.clone(), 16000).unwrap();
        let c = 0.5f32;
        let w2 = Waveform::new(s.iter().map(|x| x * c).collect(), 16000).unwrap();
        let (a, b) = (spectrogram(&w, &cfg).unwrap(), spectrogram(&w2, &cfg).unwrap());
        let shift = 2.0 * (c as f64).ln();
        for (ra, rb) in a.frames.iter().zip(&b.frames) {
            for (&x, &y) in ra.iter().zip(rb) {
                if x as f64 > LOG_FLOOR.ln() + 1.0 {
                    assert!(((y - x) as f64 - shift).abs() < 1e-5, "{x} {y}");
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let w = sine(700.0, 16000, 0.2, 0.4);
        let cfg = SpectrogramConfig::default();
        let (a, b) = (spectrogram(&w, &cfg).unwrap(), spectrogram(&w, &cfg).unwrap());
        let bits = |f: &FeatureSequence| f.flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn wav_roundtrip_and_codec_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = sine(440.0, 16000, 0.05, 0.5);
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16000);
        assert!(back
            .samples()
            .iter()
            .zip(w.samples())
            .all(|(a, b)| (a - b).abs() < 1e-4));

        let mp3 = dir.path().join("b.mp3");
        std::fs::write(&mp3, b"ID3\x03\x00\x00\x00\x00\x00\x00").unwrap();
        let err = read_wav(&mp3).unwrap_err().to_string();
        assert!(err.contains("PCM WAV"), "{err}");

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..10 {
            wr.write_sample(16384i16).unwrap();
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        let m = read_wav(&stereo).unwrap();
        assert_eq!(m.samples().len(), 10);
        assert!(m.samples().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
