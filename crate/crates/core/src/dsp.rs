//! STFT, mel filterbank, log-mel features, Griffin-Lim inversion and resampling.
//!
//! Framing: frame `t` is centred on sample `t * hop` with zero padding outside
//! the signal, so a signal of `n` samples (a multiple of `hop`) yields exactly
//! `n / hop` frames. The analysis window is a periodic Hann window of length
//! `win`, centred in an `fft_size` buffer.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::config::AudioConfig;
use crate::error::{invalid, shape_err, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Log-mel matrix `[bins, frames]`, row-major, with framing provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f32>,
    pub sample_rate: u32,
    pub hop: usize,
    pub win: usize,
}

impl MelSpectrogram {
    pub fn new(bins: usize, frames: usize, values: Vec<f32>, cfg: &AudioConfig) -> Result<Self> {
        if values.len() != bins * frames {
            return Err(shape_err!("mel values {} != {bins}x{frames}", values.len()));
        }
        Ok(Self {
            bins,
            frames,
            values,
            sample_rate: cfg.sample_rate,
            hop: cfg.hop,
            win: cfg.win,
        })
    }

    pub fn at(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f32> {
        (0..self.bins).map(|b| self.at(b, frame)).collect()
    }

    /// First `frames` columns.
    pub fn truncate(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        let values = (0..self.bins)
            .flat_map(|b| {
                self.values[b * self.frames..b * self.frames + frames]
                    .iter()
                    .copied()
            })
            .collect();
        Self {
            frames,
            values,
            ..self.clone()
        }
    }
}

/// Triangular mel filters on the HTK mel scale from 0 Hz to Nyquist, peak 1.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub bins: usize,
    pub n_freq: usize,
    /// `[bins, n_freq]` row-major.
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &AudioConfig) -> Self {
        let n_freq = cfg.fft_size / 2 + 1;
        let sr = cfg.sample_rate as f64;
        let mel_max = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> = (0..cfg.mel_bins + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.mel_bins + 1) as f64))
            .collect();
        let mut weights = vec![0.0; cfg.mel_bins * n_freq];
        for b in 0..cfg.mel_bins {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            for f in 0..n_freq {
                let hz = f as f64 * sr / cfg.fft_size as f64;
                let w = if hz > lo && hz <= mid {
                    (hz - lo) / (mid - lo)
                } else if hz > mid && hz < hi {
                    (hi - hz) / (hi - mid)
                } else {
                    0.0
                };
                weights[b * n_freq + f] = w;
            }
        }
        Self {
            bins: cfg.mel_bins,
            n_freq,
            weights,
        }
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..self.bins)
            .map(|b| {
                self.weights[b * self.n_freq..(b + 1) * self.n_freq]
                    .iter()
                    .zip(power)
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect()
    }

    /// Approximate inverse: each frequency bin receives the weighted average of
    /// the power densities of the bands covering it. Non-negative by construction.
    pub fn pseudo_inverse_matrix(&self) -> Vec<f64> {
        let row_sums: Vec<f64> = (0..self.bins)
            .map(|b| {
                self.weights[b * self.n_freq..(b + 1) * self.n_freq]
                    .iter()
                    .sum()
            })
            .collect();
        let mut inv = vec![0.0; self.n_freq * self.bins];
        for f in 0..self.n_freq {
            let cover: f64 = (0..self.bins)
                .map(|b| self.weights[b * self.n_freq + f])
                .sum();
            if cover <= 0.0 {
                continue;
            }
            for b in 0..self.bins {
                let w = self.weights[b * self.n_freq + f];
                if w > 0.0 && row_sums[b] > 0.0 {
                    inv[f * self.bins + b] = w / row_sums[b] / cover;
                }
            }
        }
        inv
    }
}

pub struct Stft {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &AudioConfig) -> Self {
        let mut planner = FftPlanner::new();
        let mut window = vec![0.0; cfg.fft_size];
        let off = (cfg.fft_size - cfg.win) / 2;
        for i in 0..cfg.win {
            window[off + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.win as f64).cos();
        }
        Self {
            fft_size: cfg.fft_size,
            hop: cfg.hop,
            window,
            fwd: planner.plan_fft_forward(cfg.fft_size),
            inv: planner.plan_fft_inverse(cfg.fft_size),
        }
    }

    pub fn n_freq(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// One-sided spectra of `frames` centred frames.
    pub fn forward(&self, x: &[f64], frames: usize) -> Vec<Vec<Complex<f64>>> {
        let half = self.fft_size / 2;
        (0..frames)
            .map(|t| {
                let start = (t * self.hop) as isize - half as isize;
                let mut buf: Vec<Complex<f64>> = (0..self.fft_size)
                    .map(|i| {
                        let n = start + i as isize;
                        let v = if n >= 0 && (n as usize) < x.len() {
                            x[n as usize]
                        } else {
                            0.0
                        };
                        Complex::new(v * self.window[i], 0.0)
                    })
                    .collect();
                self.fwd.process(&mut buf);
                buf.truncate(self.n_freq());
                buf
            })
            .collect()
    }

    /// Weighted overlap-add inverse producing `len` samples.
    pub fn inverse(&self, spec: &[Vec<Complex<f64>>], len: usize) -> Vec<f64> {
        let half = self.fft_size / 2;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        for (t, half_spec) in spec.iter().enumerate() {
            let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
            buf[..half_spec.len()].copy_from_slice(half_spec);
            for k in 1..self.fft_size - half_spec.len() + 1 {
                buf[self.fft_size - k] = half_spec[k].conj();
            }
            self.inv.process(&mut buf);
            let start = (t * self.hop) as isize - half as isize;
            for i in 0..self.fft_size {
                let n = start + i as isize;
                if n < 0 || n as usize >= len {
                    continue;
                }
                let w = self.window[i];
                out[n as usize] += buf[i].re / self.fft_size as f64 * w;
                norm[n as usize] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(norm) {
            *o = if n > 1e-8 { *o / n } else { 0.0 };
        }
        out
    }
}

fn check_finite(x: &[f32]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(invalid!("waveform sample {i} is not finite")),
        None => Ok(()),
    }
}

/// Log-mel of a waveform whose length is a multiple of `hop`.
pub fn compute_mel_frames(waveform: &[f32], cfg: &AudioConfig) -> Result<MelSpectrogram> {
    check_finite(waveform)?;
    if waveform.is_empty() || waveform.len() % cfg.hop != 0 {
        return Err(invalid!(
            "waveform length {} is not a positive multiple of hop {}",
            waveform.len(),
            cfg.hop
        ));
    }
    let frames = waveform.len() / cfg.hop;
    let stft = Stft::new(cfg);
    let fb = MelFilterbank::new(cfg);
    let x: Vec<f64> = waveform.iter().map(|&v| v as f64).collect();
    let spec = stft.forward(&x, frames);
    let floor = cfg.mel_floor;
    let mut values = vec![0.0f32; cfg.mel_bins * frames];
    for (t, s) in spec.iter().enumerate() {
        let power: Vec<f64> = s.iter().map(|c| c.norm_sqr()).collect();
        for (b, m) in fb.apply(&power).into_iter().enumerate() {
            values[b * frames + t] = m.max(floor).ln() as f32;
        }
    }
    MelSpectrogram::new(cfg.mel_bins, frames, values, cfg)
}

/// Log-mel of a full utterance (`sample_rate × utterance_seconds` samples).
pub fn compute_mel(waveform: &[f32], cfg: &AudioConfig) -> Result<MelSpectrogram> {
    let want = cfg.samples_per_utterance();
    if waveform.len() != want {
        return Err(invalid!(
            "waveform has {} samples, expected {want}",
            waveform.len()
        ));
    }
    compute_mel_frames(waveform, cfg)
}

/// Linear magnitudes `[frames][n_freq]` implied by a log-mel.
fn mel_to_magnitude(mel: &MelSpectrogram, cfg: &AudioConfig) -> Vec<Vec<f64>> {
    let fb = MelFilterbank::new(cfg);
    let inv = fb.pseudo_inverse_matrix();
    // Floor as it round-trips through f32 storage.
    let floor = ((cfg.mel_floor.ln() as f32) as f64).exp();
    (0..mel.frames)
        .map(|t| {
            let power: Vec<f64> = (0..mel.bins)
                .map(|b| ((mel.at(b, t) as f64).exp() - floor).max(0.0))
                .collect();
            (0..fb.n_freq)
                .map(|f| {
                    let p: f64 = inv[f * fb.bins..(f + 1) * fb.bins]
                        .iter()
                        .zip(&power)
                        .map(|(w, p)| w * p)
                        .sum();
                    p.max(0.0).sqrt()
                })
                .collect()
        })
        .collect()
}

/// Griffin-Lim phase reconstruction with a seeded random initial phase.
/// Output has `frames × hop` samples clipped to [-1, 1].
pub fn griffin_lim_seeded(
    mel: &MelSpectrogram,
    cfg: &AudioConfig,
    iterations: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    if iterations == 0 {
        return Err(invalid!("griffin-lim needs at least one iteration"));
    }
    if mel.bins != cfg.mel_bins {
        return Err(shape_err!(
            "mel has {} bins, config expects {}",
            mel.bins,
            cfg.mel_bins
        ));
    }
    let stft = Stft::new(cfg);
    let len = mel.frames * cfg.hop;
    let mag = mel_to_magnitude(mel, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Vec<Complex<f64>>> = mag
        .iter()
        .map(|m| {
            m.iter()
                .map(|&a| Complex::from_polar(a, rng.random_range(0.0..2.0 * PI)))
                .collect()
        })
        .collect();
    let mut x = stft.inverse(&spec, len);
    for _ in 1..iterations {
        let est = stft.forward(&x, mel.frames);
        for (s, (e, m)) in spec.iter_mut().zip(est.iter().zip(&mag)) {
            for (sv, (ev, &a)) in s.iter_mut().zip(e.iter().zip(m)) {
                let n = ev.norm();
                *sv = if n > 1e-12 {
                    ev * (a / n)
                } else {
                    Complex::new(a, 0.0)
                };
            }
        }
        x = stft.inverse(&spec, len);
    }
    Ok(x.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect())
}

pub fn griffin_lim(mel: &MelSpectrogram, cfg: &AudioConfig, iterations: usize) -> Result<Vec<f32>> {
    griffin_lim_seeded(mel, cfg, iterations, 0)
}

/// Band-limited resampling between integer rates.
pub fn resample(x: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    use rubato::{FftFixedInOut, Resampler};
    if from == to {
        return Ok(x.to_vec());
    }
    let mut rs = FftFixedInOut::<f32>::new(from as usize, to as usize, 1024, 1)
        .map_err(|e| invalid!("resampler: {e}"))?;
    let want = (x.len() as u64 * to as u64).div_ceil(from as u64) as usize;
    let delay = rs.output_delay();
    let mut out = Vec::with_capacity(want + delay + 2048);
    let mut pos = 0;
    while out.len() < want + delay {
        let need = rs.input_frames_next();
        let mut chunk = vec![0.0f32; need];
        if pos < x.len() {
            let n = need.min(x.len() - pos);
            chunk[..n].copy_from_slice(&x[pos..pos + n]);
        }
        pos += need;
        let y = rs
            .process(&[chunk], None)
            .map_err(|e| invalid!("resampler: {e}"))?;
        out.extend_from_slice(&y[0]);
    }
    Ok(out[delay..delay + want].to_vec())
}

/// Pads with zeros or trims to exactly `len` samples.
pub fn fit_length(mut x: Vec<f32>, len: usize) -> Vec<f32> {
    x.resize(len, 0.0);
    x
}

pub fn write_pcm16(path: &std::path::Path, x: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = x.iter().flat_map(|&v| to_i16(v).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}

pub fn read_pcm16(path: &std::path::Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => crate::Error::NotFound(path.display().to_string()),
        _ => crate::Error::io(path, e),
    })?;
    if bytes.len() % 2 != 0 {
        return Err(crate::Error::corrupt(path, "odd byte count in 16-bit PCM"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect())
}

fn to_i16(v: f32) -> i16 {
    (v.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn write_wav(path: &std::path::Path, x: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &v in x {
        w.write_sample(to_i16(v))?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads a mono or multi-channel WAV, averaging channels. Returns samples and rate.
pub fn read_wav(path: &std::path::Path) -> Result<(Vec<f32>, u32)> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let ch = spec.channels as usize;
    let raw: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mono = raw
        .chunks(ch.max(1))
        .map(|c| c.iter().sum::<f32>() / c.len() as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AudioConfig {
        AudioConfig::default()
    }

    fn sine(hz: f64, n: usize, sr: f64) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * PI * hz * i as f64 / sr).sin() as f32)
            .collect()
    }

    #[test]
    fn zeros_hit_the_floor_everywhere() {
        let c = cfg();
        let mel = compute_mel(&vec![0.0; c.samples_per_utterance()], &c).unwrap();
        assert_eq!((mel.bins, mel.frames), (80, 150));
        let floor = c.mel_floor.ln() as f32;
        assert!(mel.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_peaks_in_the_band_that_weights_it_most() {
        let c = cfg();
        let mel = compute_mel(&sine(440.0, 48000, 16000.0), &c).unwrap();
        // Oracle: evaluate each triangle directly at 440 Hz.
        let mmax = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let edge = |i: usize| 700.0 * (10f64.powf(mmax * i as f64 / 81.0 / 2595.0) - 1.0);
        let resp = |b: usize| {
            let (lo, mid, hi) = (edge(b), edge(b + 1), edge(b + 2));
            if 440.0 > lo && 440.0 <= mid {
                (440.0 - lo) / (mid - lo)
            } else if 440.0 > mid && 440.0 < hi {
                (hi - 440.0) / (hi - mid)
            } else {
                0.0
            }
        };
        let want = (0..80)
            .max_by(|&a, &b| resp(a).partial_cmp(&resp(b)).unwrap())
            .unwrap();
        for t in 5..145 {
            let col = mel.column(t);
            let got = (0..80)
                .max_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap())
                .unwrap();
            assert_eq!(got, want, "frame {t}");
        }
    }

    #[test]
    fn nan_is_rejected_and_length_checked() {
        let c = cfg();
        let mut x = vec![0.0; 48000];
        x[5] = f32::NAN;
        assert!(compute_mel(&x, &c).is_err());
        assert!(compute_mel(&[0.0; 47999], &c).is_err());
    }

    #[test]
    fn stft_round_trip_reconstructs_interior() {
        let c = cfg();
        let s = Stft::new(&c);
        let x: Vec<f64> = sine(300.0, 6400, 16000.0)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let y = s.inverse(&s.forward(&x, 20), 6400);
        for i in 640..5760 {
            assert!((x[i] - y[i]).abs() < 1e-9, "{i}");
        }
    }

    fn mel_l1(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a.values.len() as f64
    }

    #[test]
    fn griffin_lim_improves_consistency_and_floor_is_silent() {
        let c = cfg();
        let x: Vec<f32> = sine(220.0, 16000, 16000.0)
            .iter()
            .zip(sine(660.0, 16000, 16000.0))
            .map(|(a, b)| 0.3 * a + 0.2 * b)
            .collect();
        let mel = compute_mel_frames(&x, &c).unwrap();
        let e1 = mel_l1(
            &mel,
            &compute_mel_frames(&griffin_lim(&mel, &c, 1).unwrap(), &c).unwrap(),
        );
        let e30 = mel_l1(
            &mel,
            &compute_mel_frames(&griffin_lim(&mel, &c, 30).unwrap(), &c).unwrap(),
        );
        assert!(e30 <= e1 + 1e-6, "{e30} vs {e1}");
        let floor = MelSpectrogram::new(80, 10, vec![c.mel_floor.ln() as f32; 800], &c).unwrap();
        let y = griffin_lim(&floor, &c, 5).unwrap();
        assert_eq!(y.len(), 3200);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resample_hits_exact_length_and_keeps_tone() {
        let x = sine(1000.0, 150000, 50000.0);
        let y = resample(&x, 50000, 16000).unwrap();
        assert_eq!(y.len(), 48000);
        let rms = (y[2000..46000].iter().map(|v| v * v).sum::<f32>() / 44000.0).sqrt();
        assert!(
            (rms - std::f32::consts::FRAC_1_SQRT_2).abs() < 0.02,
            "{rms}"
        );
    }

    #[test]
    fn pcm16_round_trip_is_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pcm16");
        let x = sine(100.0, 500, 16000.0);
        write_pcm16(&p, &x).unwrap();
        let y = read_pcm16(&p).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1.0 / 16000.0));
    }
}
