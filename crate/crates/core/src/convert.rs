//! End-to-end inference: a source utterance, a target speaker reference,
//! and a trained checkpoint in; a waveform in the target's voice out.
//!
//! Target references come in two forms. Speakers seen during training
//! keep their scaling stats and cached spectrograms inside the run
//! directory. Unseen speakers are described entirely by a handful of
//! sample recordings: stats and a mean embedding are computed on the fly
//! and the checkpoint is never touched.

use crate::dataset::{self, DatasetError, RunPaths, UtteranceRecord};
use crate::dsp::{
    self, DspError, LogMel, MelConfig, ScaledMel, SpeakerScalingStats,
};
use crate::nets::{self, ModelParams, NetsError, SpeakerEmbedding};
use crate::training::Checkpoint;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("no utterance reaches {0} frames, cannot extract an embedding")]
    NoValidWindows(usize),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConvertError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvertConfig {
    /// Blend 50%-overlapped windows with a triangular cross-fade instead
    /// of converting consecutive disjoint windows.
    pub overlap_add: bool,
    /// Silence clipping threshold in dB below the utterance peak.
    pub silence_threshold_db: f32,
    /// Percentile for on-the-fly scaling stats of unseen speakers.
    pub percentile: f32,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            overlap_add: false,
            silence_threshold_db: 60.0,
            percentile: 0.999,
        }
    }
}

/// Embedding windows advance by half a window, matching training crops
/// often enough while reading each frame twice.
fn embed_stride(window_frames: usize) -> usize {
    (window_frames / 2).max(1)
}

/// Mean speaker embedding over all full windows of the given scaled
/// utterances. Both the embedding map and every unit summary are averaged
/// element-wise; utterances shorter than one window contribute nothing.
pub fn extract_embedding(
    params: &ModelParams,
    utterances: &[ScaledMel],
) -> Result<SpeakerEmbedding> {
    let frames = params.arch.frames;
    let stride = embed_stride(frames);
    let mut acc: Option<SpeakerEmbedding> = None;
    let mut count = 0usize;
    for utt in utterances {
        let total = utt.frames();
        let mut off = 0;
        while off + frames <= total {
            let window = ScaledMel {
                values: utt.values.slice(s![.., off..off + frames]).to_owned(),
                speaker_stats_id: utt.speaker_stats_id.clone(),
                config: utt.config.clone(),
            };
            let emb = nets::fe_forward(params, &window)?;
            match &mut acc {
                None => acc = Some(emb),
                Some(a) => {
                    a.values += &emb.values;
                    for (sum, e) in a.unit_summaries.iter_mut().zip(&emb.unit_summaries) {
                        *sum += e;
                    }
                }
            }
            count += 1;
            off += stride;
        }
    }
    let mut acc = acc.ok_or(ConvertError::NoValidWindows(frames))?;
    let n = count as f32;
    acc.values.mapv_inplace(|v| v / n);
    for sum in &mut acc.unit_summaries {
        sum.mapv_inplace(|v| v / n);
    }
    Ok(acc)
}

/// Scaling stats plus mean embedding for a speaker preprocessed into the
/// run directory.
pub fn seen_speaker_reference(
    paths: &RunPaths,
    records: &[UtteranceRecord],
    mel_config: &MelConfig,
    params: &ModelParams,
    speaker: &str,
) -> Result<(SpeakerScalingStats, SpeakerEmbedding)> {
    let stats = dataset::load_speaker_stats(paths, speaker)?;
    let mels = dataset::load_speaker_mels(paths, records, speaker, mel_config)?;
    let scaled = mels
        .iter()
        .map(|m| dsp::scale(m, &stats))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let embedding = extract_embedding(params, &scaled)?;
    Ok((stats, embedding))
}

/// Stats plus mean embedding computed directly from sample recordings of
/// a speaker the model never saw. Nothing is persisted.
pub fn reference_from_samples(
    params: &ModelParams,
    mel_config: &MelConfig,
    sample_paths: &[PathBuf],
    config: &ConvertConfig,
    speaker_label: &str,
) -> Result<(SpeakerScalingStats, SpeakerEmbedding)> {
    if sample_paths.is_empty() {
        return Err(ConvertError::NoValidWindows(params.arch.frames));
    }
    let mut mels = Vec::new();
    for path in sample_paths {
        let wav = dsp::load_audio(path, mel_config)?;
        let trimmed = dsp::clip_silence(&wav, mel_config.sample_rate, config.silence_threshold_db)?;
        mels.push(dsp::mel_spectrogram(&trimmed, mel_config)?);
    }
    let stats = dsp::compute_scaling_stats(speaker_label, &mels, config.percentile as f64)?;
    let scaled = mels
        .iter()
        .map(|m| dsp::scale(m, &stats))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let embedding = extract_embedding(params, &scaled)?;
    Ok((stats, embedding))
}

fn check_embedding(params: &ModelParams, emb: &SpeakerEmbedding) -> Result<()> {
    let (bh, bw) = params.arch.bottleneck();
    if emb.values.dim() != (1, bh, bw) {
        return Err(ConvertError::CheckpointMismatch(format!(
            "embedding is {:?}, the checkpoint expects 1x{bh}x{bw}",
            emb.values.dim()
        )));
    }
    if emb.unit_summaries.len() != params.arch.fe_units.len() {
        return Err(ConvertError::CheckpointMismatch(format!(
            "embedding carries {} unit summaries, the checkpoint expects {}",
            emb.unit_summaries.len(),
            params.arch.fe_units.len()
        )));
    }
    Ok(())
}

/// Converts a scaled spectrogram window-by-window, returning a scaled
/// spectrogram of the exact same width.
pub fn convert_mel(
    params: &ModelParams,
    source: &ScaledMel,
    target_emb: &SpeakerEmbedding,
    overlap_add: bool,
) -> Result<Array2<f32>> {
    check_embedding(params, target_emb)?;
    let frames = params.arch.frames;
    let (h, t) = source.values.dim();
    if h != params.arch.n_mels {
        return Err(ConvertError::CheckpointMismatch(format!(
            "source has {h} mel bins, the checkpoint expects {}",
            params.arch.n_mels
        )));
    }

    let stride = if overlap_add { embed_stride(frames) } else { frames };
    // Pad so windows at the chosen stride tile the utterance exactly.
    let padded_t = if t <= frames {
        frames
    } else {
        frames + (t - frames).div_ceil(stride) * stride
    };
    let padded = if padded_t > t {
        nets::reflect_pad_width(&source.values, padded_t)
    } else {
        source.values.clone()
    };

    let run_window = |off: usize| -> Result<Array2<f32>> {
        let window = ScaledMel {
            values: padded.slice(s![.., off..off + frames]).to_owned(),
            speaker_stats_id: source.speaker_stats_id.clone(),
            config: source.config.clone(),
        };
        Ok(nets::gen_forward(params, &window, target_emb)?.values)
    };

    let mut out = Array2::<f32>::zeros((h, padded_t));
    if overlap_add {
        let mut weight = Array2::<f32>::zeros((h, padded_t));
        let mut off = 0;
        while off + frames <= padded_t {
            let converted = run_window(off)?;
            for j in 0..frames {
                // Triangular fade, peaked mid-window.
                let w = (j + 1).min(frames - j) as f32;
                for i in 0..h {
                    out[[i, off + j]] += converted[[i, j]] * w;
                    weight[[i, off + j]] += w;
                }
            }
            off += stride;
        }
        ndarray::Zip::from(&mut out).and(&weight).for_each(|o, &w| *o /= w);
    } else {
        let mut off = 0;
        while off + frames <= padded_t {
            let converted = run_window(off)?;
            out.slice_mut(s![.., off..off + frames]).assign(&converted);
            off += frames;
        }
    }
    Ok(out.slice(s![.., ..t]).to_owned())
}

#[derive(Debug, Clone)]
pub struct ConversionOutput {
    pub waveform: Vec<f32>,
    /// Converted log-mel in the target's scale, before inversion.
    pub mel: LogMel,
    pub frames: usize,
}

/// Full pipeline: load, trim silence, analyze, convert, rescale into the
/// target's range, and invert back to a waveform. The checkpoint is only
/// read.
pub fn convert_utterance(
    ckpt: &Checkpoint,
    source_path: &Path,
    source_stats: &SpeakerScalingStats,
    target_stats: &SpeakerScalingStats,
    target_emb: &SpeakerEmbedding,
    config: &ConvertConfig,
) -> Result<ConversionOutput> {
    let mel_config = &ckpt.mel;
    if mel_config.n_mels != ckpt.params.arch.n_mels {
        return Err(ConvertError::CheckpointMismatch(format!(
            "checkpoint mel config has {} bins, the networks expect {}",
            mel_config.n_mels, ckpt.params.arch.n_mels
        )));
    }
    let wav = dsp::load_audio(source_path, mel_config)?;
    let trimmed = dsp::clip_silence(&wav, mel_config.sample_rate, config.silence_threshold_db)?;
    let mel = dsp::mel_spectrogram(&trimmed, mel_config)?;
    let scaled = dsp::scale(&mel, source_stats)?;
    let converted = convert_mel(&ckpt.params, &scaled, target_emb, config.overlap_add)?;
    let frames = converted.ncols();
    let out_scaled = ScaledMel {
        values: converted,
        speaker_stats_id: target_stats.speaker_id.clone(),
        config: mel_config.clone(),
    };
    let out_mel = dsp::unscale(&out_scaled, target_stats)?;
    let waveform = dsp::mel_to_audio(&out_mel, mel_config)?;
    Ok(ConversionOutput { waveform, mel: out_mel, frames })
}
