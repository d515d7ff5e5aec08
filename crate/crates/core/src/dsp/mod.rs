//! Deterministic signal processing: waveform ↔ log-mel-spectrogram,
//! per-speaker scaling statistics, and Griffin-Lim reconstruction.

mod audio;
mod cache;
mod mel;
mod scaling;

pub use audio::{clip_silence, load_audio, resample, write_wav_16bit};
pub use cache::{load_mel_cache, save_mel_cache};
pub use mel::{mel_filterbank, mel_spectrogram, mel_to_audio, stft_magnitude, MelFilterbank};
pub use scaling::{compute_scaling_stats, scale, unscale, StatsArtifact};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

/// Spread between the per-bin maximum and minimum used for scaling:
/// the minimum is always `max - 4` in natural-log units.
pub const SCALING_RANGE: f32 = 4.0;

/// Floor added to mel energies before taking the log.
pub const LOG_MEL_EPS: f32 = 1e-10;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("audio file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("waveform is entirely below the silence threshold")]
    AllSilent,
    #[error("cannot compute scaling stats from an empty collection")]
    EmptyCollection,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid mel config: {0}")]
    InvalidConfig(String),
    #[error("spectrogram cache: {0}")]
    CacheFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mel-spectrogram extraction parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f32,
    pub fmax: f32,
    pub griffin_lim_iters: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 512,
            hop_length: 32,
            n_mels: 128,
            fmin: 40.0,
            fmax: 7_900.0,
            griffin_lim_iters: 60,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fmin < self.fmax && self.fmax <= self.sample_rate as f32 / 2.0) {
            return Err(DspError::InvalidConfig(format!(
                "need fmin < fmax <= sample_rate/2, got fmin={} fmax={} sr={}",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if self.hop_length == 0 || self.hop_length > self.n_fft {
            return Err(DspError::InvalidConfig(format!(
                "need 0 < hop_length <= n_fft, got hop={} n_fft={}",
                self.hop_length, self.n_fft
            )));
        }
        if self.n_mels == 0 {
            return Err(DspError::InvalidConfig("n_mels must be >= 1".into()));
        }
        Ok(())
    }

    /// Frame count produced by [`mel_spectrogram`] for a waveform of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop_length
    }
}

/// Natural-log magnitude mel-spectrogram, `[n_mels x T]`.
#[derive(Debug, Clone)]
pub struct LogMel {
    pub values: Array2<f32>,
    pub config: MelConfig,
}

impl LogMel {
    pub fn new(values: Array2<f32>, config: MelConfig) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(DspError::InvalidConfig("log-mel needs at least one frame".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DspError::InvalidConfig("log-mel contains NaN/Inf".into()));
        }
        Ok(Self { values, config })
    }

    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Log-mel-spectrogram scaled per frequency bin to `[-1, +1]`.
#[derive(Debug, Clone)]
pub struct ScaledMel {
    pub values: Array2<f32>,
    pub speaker_stats_id: String,
    pub config: MelConfig,
}

impl ScaledMel {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-frequency clipping/scaling bounds for one speaker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerScalingStats {
    pub speaker_id: String,
    pub per_bin_max: Vec<f32>,
    pub per_bin_min: Vec<f32>,
}

impl SpeakerScalingStats {
    /// Builds stats from the per-bin maxima; minima are pinned at `max - 4`.
    pub fn from_max(speaker_id: impl Into<String>, per_bin_max: Vec<f32>) -> Self {
        let per_bin_min = per_bin_max.iter().map(|m| m - SCALING_RANGE).collect();
        Self { speaker_id: speaker_id.into(), per_bin_max, per_bin_min }
    }

    pub fn n_bins(&self) -> usize {
        self.per_bin_max.len()
    }
}
