//! Per-speaker scaling of log-mel-spectrograms to `[-1, +1]`.
//!
//! A speaker's per-bin maximum is a high percentile of all pooled frames;
//! the minimum is pinned 4 log units below it. Values are clipped to that
//! window and mapped affinely.

use super::{DspError, LogMel, Result, ScaledMel, SpeakerScalingStats, SCALING_RANGE};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Pooled nearest-rank percentile per frequency bin across every frame of
/// every spectrogram. `percentile` is in `(0, 1]`, e.g. `0.999`.
pub fn compute_scaling_stats(
    speaker_id: &str,
    mels: &[LogMel],
    percentile: f64,
) -> Result<SpeakerScalingStats> {
    if mels.is_empty() {
        return Err(DspError::EmptyCollection);
    }
    assert!(percentile > 0.0 && percentile <= 1.0, "percentile out of range");
    let n_mels = mels[0].n_mels();
    for m in mels {
        if m.n_mels() != n_mels {
            return Err(DspError::DimensionMismatch { expected: n_mels, got: m.n_mels() });
        }
    }
    let mut per_bin_max = Vec::with_capacity(n_mels);
    let mut pooled: Vec<f32> = Vec::new();
    for bin in 0..n_mels {
        pooled.clear();
        for m in mels {
            pooled.extend(m.values.row(bin).iter().copied());
        }
        pooled.sort_unstable_by(|a, b| a.total_cmp(b));
        let n = pooled.len();
        let rank = (percentile * n as f64).ceil() as usize;
        per_bin_max.push(pooled[rank.clamp(1, n) - 1]);
    }
    Ok(SpeakerScalingStats::from_max(speaker_id, per_bin_max))
}

/// Clips each bin to the speaker's `[min, max]` window and maps it to
/// `[-1, +1]`.
pub fn scale(mel: &LogMel, stats: &SpeakerScalingStats) -> Result<ScaledMel> {
    if mel.n_mels() != stats.n_bins() {
        return Err(DspError::DimensionMismatch {
            expected: stats.n_bins(),
            got: mel.n_mels(),
        });
    }
    let mut values = mel.values.clone();
    for (bin, mut row) in values.outer_iter_mut().enumerate() {
        let max = stats.per_bin_max[bin];
        let min = stats.per_bin_min[bin];
        for v in row.iter_mut() {
            // The final clamp guards against f32 rounding when min = max - 4
            // is not exactly representable.
            *v = (2.0 * (v.clamp(min, max) - min) / SCALING_RANGE - 1.0).clamp(-1.0, 1.0);
        }
    }
    Ok(ScaledMel {
        values,
        speaker_stats_id: stats.speaker_id.clone(),
        config: mel.config.clone(),
    })
}

/// Inverse of [`scale`]: maps `[-1, +1]` back into the speaker's log-mel
/// window. Clipping is not invertible, so values outside the window stay
/// at its edges.
pub fn unscale(scaled: &ScaledMel, stats: &SpeakerScalingStats) -> Result<LogMel> {
    if scaled.n_mels() != stats.n_bins() {
        return Err(DspError::DimensionMismatch {
            expected: stats.n_bins(),
            got: scaled.n_mels(),
        });
    }
    let mut values = scaled.values.clone();
    for (bin, mut row) in values.outer_iter_mut().enumerate() {
        let min = stats.per_bin_min[bin];
        for v in row.iter_mut() {
            *v = (v.clamp(-1.0, 1.0) + 1.0) * SCALING_RANGE / 2.0 + min;
        }
    }
    LogMel::new(values, scaled.config.clone())
}

/// On-disk form of one speaker's scaling statistics, together with the
/// provenance needed to reproduce them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsArtifact {
    pub speaker_id: String,
    pub per_bin_max: Vec<f32>,
    pub subset_files: Vec<String>,
    pub seed: u64,
}

impl StatsArtifact {
    pub fn new(stats: &SpeakerScalingStats, subset_files: Vec<String>, seed: u64) -> Self {
        Self {
            speaker_id: stats.speaker_id.clone(),
            per_bin_max: stats.per_bin_max.clone(),
            subset_files,
            seed,
        }
    }

    pub fn to_stats(&self) -> SpeakerScalingStats {
        SpeakerScalingStats::from_max(&self.speaker_id, self.per_bin_max.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| DspError::CacheFormat(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json).map_err(|e| DspError::CacheFormat(e.to_string()))
    }
}
