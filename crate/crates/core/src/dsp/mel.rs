//! STFT, mel filterbank, log-mel extraction, and Griffin-Lim inversion.

use super::{DspError, LogMel, MelConfig, Result, LOG_MEL_EPS};
use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Mel filterbank weights, `[n_mels x n_freqs]` with `n_freqs = n_fft/2 + 1`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub weights: Array2<f32>,
}

/// Break frequency where the mel scale switches from linear to logarithmic.
const MEL_BREAK_HZ: f64 = 1000.0;
/// Linear-region slope: 200/3 Hz per mel.
const MEL_F_SP: f64 = 200.0 / 3.0;
/// Mel value at the break frequency.
const MEL_BREAK: f64 = MEL_BREAK_HZ / MEL_F_SP;

fn log_step() -> f64 {
    (6.4f64).ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MEL_BREAK_HZ {
        hz / MEL_F_SP
    } else {
        MEL_BREAK + (hz / MEL_BREAK_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MEL_BREAK {
        mel * MEL_F_SP
    } else {
        MEL_BREAK_HZ * ((mel - MEL_BREAK) * log_step()).exp()
    }
}

/// Triangular mel filterbank with area normalization (each triangle is
/// scaled by 2 over its bandwidth in Hz).
pub fn mel_filterbank(config: &MelConfig) -> Result<MelFilterbank> {
    config.validate()?;
    let n_freqs = config.n_fft / 2 + 1;
    let fft_freqs: Vec<f64> = (0..n_freqs)
        .map(|k| k as f64 * config.sample_rate as f64 / config.n_fft as f64)
        .collect();

    let mel_lo = hz_to_mel(config.fmin as f64);
    let mel_hi = hz_to_mel(config.fmax as f64);
    let n_pts = config.n_mels + 2;
    let hz_pts: Vec<f64> = (0..n_pts)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_pts - 1) as f64))
        .collect();

    let mut weights = Array2::<f32>::zeros((config.n_mels, n_freqs));
    for m in 0..config.n_mels {
        let (left, center, right) = (hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]);
        let enorm = 2.0 / (right - left);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let lower = (f - left) / (center - left);
            let upper = (right - f) / (right - center);
            let w = lower.min(upper).max(0.0);
            weights[[m, k]] = (w * enorm) as f32;
        }
    }
    Ok(MelFilterbank { weights })
}

/// Internal STFT/ISTFT machinery with a periodic Hann window and
/// reflect-padded centered frames.
struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f32>,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl Stft {
    fn new(config: &MelConfig) -> Self {
        let n_fft = config.n_fft;
        let window: Vec<f32> = (0..n_fft)
            .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / n_fft as f64).cos())
            .map(|w| w as f32)
            .collect();
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop: config.hop_length,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Reflect index without edge repetition; `len` must be >= 1.
    fn reflect(pos: i64, len: usize) -> usize {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len as i64 - 1);
        let mut q = pos % period;
        if q < 0 {
            q += period;
        }
        if q < len as i64 {
            q as usize
        } else {
            (period - q) as usize
        }
    }

    /// Complex STFT, `[n_freqs][t]`.
    fn forward_complex(&self, waveform: &[f32]) -> Vec<Vec<Complex<f32>>> {
        let pad = self.n_fft as i64 / 2;
        let t_total = self.n_frames(waveform.len());
        let n_freqs = self.n_fft / 2 + 1;
        let mut out = vec![vec![Complex::new(0.0, 0.0); t_total]; n_freqs];
        let mut buf = vec![Complex::new(0.0f32, 0.0); self.n_fft];
        for t in 0..t_total {
            let start = t as i64 * self.hop as i64 - pad;
            for n in 0..self.n_fft {
                let src = Self::reflect(start + n as i64, waveform.len());
                buf[n] = Complex::new(waveform[src] * self.window[n], 0.0);
            }
            self.forward.process(&mut buf);
            for (k, row) in out.iter_mut().enumerate() {
                row[t] = buf[k];
            }
        }
        out
    }

    fn magnitude(spec: &[Vec<Complex<f32>>]) -> Array2<f32> {
        let n_freqs = spec.len();
        let t_total = spec[0].len();
        Array2::from_shape_fn((n_freqs, t_total), |(k, t)| spec[k][t].norm())
    }

    /// Overlap-add ISTFT with squared-window normalization; output length
    /// is `(T - 1) * hop` after trimming the center padding.
    fn inverse_complex(&self, spec: &[Vec<Complex<f32>>]) -> Vec<f32> {
        let n_freqs = self.n_fft / 2 + 1;
        assert_eq!(spec.len(), n_freqs, "spectrum height mismatch");
        let t_total = spec[0].len();
        let padded_len = (t_total - 1) * self.hop + self.n_fft;
        let mut acc = vec![0.0f64; padded_len];
        let mut wsum = vec![0.0f64; padded_len];
        let mut buf = vec![Complex::new(0.0f32, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f32;
        for t in 0..t_total {
            for k in 0..n_freqs {
                buf[k] = spec[k][t];
            }
            for k in n_freqs..self.n_fft {
                buf[k] = spec[self.n_fft - k][t].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for n in 0..self.n_fft {
                let v = buf[n].re * scale * self.window[n];
                acc[start + n] += v as f64;
                wsum[start + n] += (self.window[n] * self.window[n]) as f64;
            }
        }
        let pad = self.n_fft / 2;
        let out_len = (t_total - 1) * self.hop;
        let mut out = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let j = i + pad;
            out.push(if wsum[j] > 1e-9 { (acc[j] / wsum[j]) as f32 } else { 0.0 });
        }
        out
    }
}

/// Magnitude STFT, `[n_fft/2 + 1 x T]` with `T = 1 + floor(len / hop)`.
pub fn stft_magnitude(waveform: &[f32], config: &MelConfig) -> Result<Array2<f32>> {
    config.validate()?;
    if waveform.is_empty() {
        return Err(DspError::InvalidConfig("empty waveform".into()));
    }
    let stft = Stft::new(config);
    Ok(Stft::magnitude(&stft.forward_complex(waveform)))
}

/// Natural-log magnitude mel-spectrogram of a waveform.
pub fn mel_spectrogram(waveform: &[f32], config: &MelConfig) -> Result<LogMel> {
    let fb = mel_filterbank(config)?;
    let mag = stft_magnitude(waveform, config)?;
    let energies = fb.weights.dot(&mag);
    let values = energies.mapv(|e| (e + LOG_MEL_EPS).ln());
    LogMel::new(values, config.clone())
}

/// Inverts a log-mel-spectrogram to a waveform: undo the log, map mel
/// energies to a linear magnitude spectrogram through the clamped
/// pseudo-inverse filterbank, then run Griffin-Lim phase recovery.
pub fn mel_to_audio(mel: &LogMel, config: &MelConfig) -> Result<Vec<f32>> {
    config.validate()?;
    if mel.n_mels() != config.n_mels {
        return Err(DspError::DimensionMismatch {
            expected: config.n_mels,
            got: mel.n_mels(),
        });
    }
    let energies = mel.values.mapv(|v| (v.exp() - LOG_MEL_EPS).max(0.0));
    let fb = mel_filterbank(config)?;
    let inv = clamped_pinv(&fb.weights);
    let mag = inv.dot(&energies);
    Ok(griffin_lim(&mag, config))
}

/// Moore-Penrose pseudo-inverse with negative entries clamped to zero.
/// Input `[n_mels x n_freqs]`, output `[n_freqs x n_mels]`.
fn clamped_pinv(weights: &Array2<f32>) -> Array2<f32> {
    let (rows, cols) = weights.dim();
    let m = nalgebra::DMatrix::<f64>::from_fn(rows, cols, |r, c| weights[[r, c]] as f64);
    let pinv = m
        .pseudo_inverse(1e-10)
        .expect("SVD of the mel filterbank always converges");
    Array2::from_shape_fn((cols, rows), |(r, c)| pinv[(r, c)].max(0.0) as f32)
}

/// Griffin-Lim: start from zero phase, then alternate between the target
/// magnitude and the phase of the current reconstruction.
fn griffin_lim(magnitude: &Array2<f32>, config: &MelConfig) -> Vec<f32> {
    let stft = Stft::new(config);
    let (n_freqs, t_total) = magnitude.dim();
    assert_eq!(n_freqs, config.n_fft / 2 + 1, "magnitude height mismatch");

    let target: Vec<Vec<Complex<f32>>> = (0..n_freqs)
        .map(|k| (0..t_total).map(|t| Complex::new(magnitude[[k, t]], 0.0)).collect())
        .collect();
    let mut wav = stft.inverse_complex(&target);
    for _ in 0..config.griffin_lim_iters {
        let spec = stft.forward_complex(&wav);
        let projected: Vec<Vec<Complex<f32>>> = (0..n_freqs)
            .map(|k| {
                (0..t_total)
                    .map(|t| {
                        let c = spec[k][t];
                        let norm = c.norm();
                        if norm > 1e-12 {
                            c * (magnitude[[k, t]] / norm)
                        } else {
                            Complex::new(magnitude[[k, t]], 0.0)
                        }
                    })
                    .collect()
            })
            .collect();
        wav = stft.inverse_complex(&projected);
    }
    for v in &mut wav {
        *v = v.clamp(-1.0, 1.0);
    }
    wav
}
