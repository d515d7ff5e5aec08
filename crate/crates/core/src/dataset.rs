//! Speaker registry, utterance manifest, per-speaker stats cache, and
//! training-pair sampling.
//!
//! A run directory owns every derived artifact: `registry.json`,
//! `manifest.jsonl`, cached mel-spectrograms under `cache/`, per-speaker
//! scaling stats under `stats/`, checkpoints, history, and plots.

use crate::dsp::{
    self, DspError, LogMel, MelConfig, ScaledMel, SpeakerScalingStats, StatsArtifact,
};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Training windows are exactly this many frames wide.
pub const WINDOW_FRAMES: usize = 64;
pub const DEFAULT_PERCENTILE: f32 = 0.999;
/// Stats are computed from at most this many files per speaker.
pub const DEFAULT_STATS_SUBSET: usize = 20;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no audio found under {0}")]
    EmptyDataset(PathBuf),
    #[error("duplicate speaker id {0}")]
    DuplicateSpeakerId(String),
    #[error("unknown speaker {0}")]
    UnknownSpeaker(String),
    #[error("need at least 2 in-dataset speakers, got {0}")]
    InsufficientSpeakers(usize),
    #[error("speaker {speaker} has no cached utterance of at least {needed} frames")]
    WindowTooShort { speaker: String, needed: usize },
    #[error("missing artifact for speaker {0}; run preprocess first")]
    MissingArtifact(String),
    #[error("unreadable audio {path}: {reason}")]
    BadAudio { path: PathBuf, reason: String },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest or registry malformed: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Canonical layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn registry_file(&self) -> PathBuf {
        self.root.join("registry.json")
    }

    pub fn manifest_file(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn cache_file(&self, speaker: &str, stem: &str) -> PathBuf {
        self.cache_dir().join(speaker).join(format!("{stem}.melc"))
    }

    pub fn stats_dir(&self) -> PathBuf {
        self.root.join("stats")
    }

    pub fn stats_file(&self, speaker: &str) -> PathBuf {
        self.stats_dir().join(format!("{speaker}.json"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_file(&self, step: u64) -> PathBuf {
        self.checkpoint_dir().join(format!("ckpt_{step}.bin"))
    }

    pub fn history_file(&self) -> PathBuf {
        self.root.join("history.jsonl")
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn lock_file(&self) -> PathBuf {
        self.root.join("run.lock")
    }

    pub fn plot_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn sid_file(&self) -> PathBuf {
        self.root.join("sid.json")
    }

    pub fn report_file(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RegistryEntry {
    pub id: String,
    pub in_dataset: bool,
}

/// Ordered speaker list; the training index of an in-dataset speaker is its
/// position among in-dataset entries.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SpeakerRegistry {
    pub speakers: Vec<RegistryEntry>,
}

impl SpeakerRegistry {
    pub fn from_ids(ids: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        let mut speakers = Vec::new();
        for id in ids {
            if !seen.insert(id.clone()) {
                return Err(DatasetError::DuplicateSpeakerId(id));
            }
            speakers.push(RegistryEntry { id, in_dataset: true });
        }
        Ok(Self { speakers })
    }

    /// Count of in-dataset speakers (N).
    pub fn n_speakers(&self) -> usize {
        self.speakers.iter().filter(|s| s.in_dataset).count()
    }

    /// Training index of an in-dataset speaker.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.speakers
            .iter()
            .filter(|s| s.in_dataset)
            .position(|s| s.id == id)
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        self.speakers
            .iter()
            .filter(|s| s.in_dataset)
            .nth(index)
            .map(|s| s.id.as_str())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.speakers.iter().any(|s| s.id == id)
    }

    pub fn in_dataset_ids(&self) -> Vec<String> {
        self.speakers
            .iter()
            .filter(|s| s.in_dataset)
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| DatasetError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Format(e.to_string()))
    }
}

/// Splits off held-out speakers: the train registry is reindexed over the
/// remaining speakers, the held-out registry lists only the removed ones.
pub fn split_held_out(
    registry: &SpeakerRegistry,
    held_out_ids: &[String],
) -> Result<(SpeakerRegistry, SpeakerRegistry)> {
    for id in held_out_ids {
        if !registry.contains(id) {
            return Err(DatasetError::UnknownSpeaker(id.clone()));
        }
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for entry in &registry.speakers {
        if held_out_ids.contains(&entry.id) {
            held.push(RegistryEntry { id: entry.id.clone(), in_dataset: true });
        } else {
            train.push(entry.clone());
        }
    }
    Ok((SpeakerRegistry { speakers: train }, SpeakerRegistry { speakers: held }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker_id: String,
    pub audio_path: PathBuf,
    pub cache_path: Option<PathBuf>,
    /// Seconds of source audio before silence clipping.
    pub duration: f64,
    /// Frames of the cached spectrogram, once cached.
    pub frames: Option<usize>,
}

fn wav_duration_seconds(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path).map_err(|e| DatasetError::BadAudio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let spec = reader.spec();
    let samples = reader.duration() as f64;
    if samples == 0.0 {
        return Err(DatasetError::BadAudio {
            path: path.to_path_buf(),
            reason: "zero-length audio".into(),
        });
    }
    Ok(samples / spec.sample_rate as f64)
}

/// Scans `root` (one subdirectory per speaker, WAV files inside) into a
/// registry in sorted speaker order plus one record per audio file.
pub fn build_manifest(root: &Path) -> Result<(SpeakerRegistry, Vec<UtteranceRecord>)> {
    let mut speaker_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            speaker_dirs.push((name, entry.path()));
        }
    }
    speaker_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut ids = Vec::new();
    let mut records = Vec::new();
    for (speaker, dir) in &speaker_dirs {
        let mut wavs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|x| x.to_string_lossy().eq_ignore_ascii_case("wav"))
                    .unwrap_or(false)
            })
            .collect();
        wavs.sort();
        if wavs.is_empty() {
            continue;
        }
        ids.push(speaker.clone());
        for wav in wavs {
            let duration = wav_duration_seconds(&wav)?;
            records.push(UtteranceRecord {
                speaker_id: speaker.clone(),
                audio_path: wav,
                cache_path: None,
                duration,
                frames: None,
            });
        }
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset(root.to_path_buf()));
    }
    let registry = SpeakerRegistry::from_ids(ids)?;
    Ok((registry, records))
}

pub fn save_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    for record in records {
        let line =
            serde_json::to_string(record).map_err(|e| DatasetError::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| DatasetError::Format(e.to_string()))?,
        );
    }
    Ok(records)
}

#[derive(Debug, Clone, Default)]
pub struct PreprocessSummary {
    pub n_speakers: usize,
    pub n_utterances: usize,
    pub caches_written: usize,
    pub caches_skipped: usize,
    pub stats_written: usize,
    pub stats_skipped: usize,
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn mtime(path: &Path) -> Option<std::time::SystemTime> {
    std::fs::metadata(path).and_then(|m| m.modified()).ok()
}

/// Stable per-speaker RNG so stats subsets survive partial re-runs.
fn speaker_rng(seed: u64, speaker: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(speaker.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(bytes))
}

/// Full preprocessing pass: manifest, silence-clipped cached mels, and
/// per-speaker scaling stats. Idempotent: up-to-date caches and stats are
/// left untouched.
pub fn preprocess(
    data_root: &Path,
    paths: &RunPaths,
    config: &MelConfig,
    silence_threshold_db: f32,
    percentile: f32,
    stats_subset: usize,
    seed: u64,
) -> Result<PreprocessSummary> {
    let (registry, mut records) = build_manifest(data_root)?;
    std::fs::create_dir_all(&paths.root)?;
    std::fs::create_dir_all(paths.cache_dir())?;
    std::fs::create_dir_all(paths.stats_dir())?;

    let mut summary = PreprocessSummary {
        n_speakers: registry.n_speakers(),
        n_utterances: records.len(),
        ..Default::default()
    };
    let mut speaker_cache_fresh: BTreeMap<String, bool> = BTreeMap::new();

    for record in &mut records {
        let cache = paths.cache_file(&record.speaker_id, &file_stem(&record.audio_path));
        std::fs::create_dir_all(cache.parent().unwrap())?;
        let up_to_date = match (mtime(&cache), mtime(&record.audio_path)) {
            (Some(c), Some(w)) => c >= w,
            _ => false,
        };
        if up_to_date {
            let existing = dsp::load_mel_cache(&cache)?;
            record.frames = Some(existing.ncols());
            summary.caches_skipped += 1;
        } else {
            let audio = dsp::load_audio(&record.audio_path, config).map_err(|e| {
                DatasetError::BadAudio {
                    path: record.audio_path.clone(),
                    reason: e.to_string(),
                }
            })?;
            let clipped = dsp::clip_silence(&audio, config.sample_rate, silence_threshold_db)
                .map_err(|e| DatasetError::BadAudio {
                    path: record.audio_path.clone(),
                    reason: e.to_string(),
                })?;
            let mel = dsp::mel_spectrogram(&clipped, config)?;
            dsp::save_mel_cache(&cache, &mel.values)?;
            record.frames = Some(mel.frames());
            summary.caches_written += 1;
            speaker_cache_fresh.insert(record.speaker_id.clone(), true);
        }
        record.cache_path = Some(cache);
    }

    for speaker in registry.in_dataset_ids() {
        let stats_path = paths.stats_file(&speaker);
        let speaker_records: Vec<&UtteranceRecord> =
            records.iter().filter(|r| r.speaker_id == speaker).collect();
        let newest_cache = speaker_records
            .iter()
            .filter_map(|r| r.cache_path.as_deref().and_then(mtime))
            .max();
        let fresh_ok = !speaker_cache_fresh.contains_key(&speaker)
            && match (mtime(&stats_path), newest_cache) {
                (Some(s), Some(c)) => s >= c,
                _ => false,
            };
        if fresh_ok {
            summary.stats_skipped += 1;
            continue;
        }

        let mut rng = speaker_rng(seed, &speaker);
        let take = stats_subset.min(speaker_records.len()).max(1);
        let chosen = rand::seq::index::sample(&mut rng, speaker_records.len(), take);
        let mut subset_files = Vec::new();
        let mut mels = Vec::new();
        for idx in chosen.iter() {
            let record = speaker_records[idx];
            let cache = record.cache_path.as_ref().unwrap();
            subset_files.push(file_stem(&record.audio_path));
            let values = dsp::load_mel_cache(cache)?;
            mels.push(LogMel::new(values, config.clone())?);
        }
        subset_files.sort();
        let stats = dsp::compute_scaling_stats(&speaker, &mels, percentile as f64)?;
        let artifact = StatsArtifact::new(&stats, subset_files, seed);
        artifact.save(&stats_path)?;
        summary.stats_written += 1;
    }

    registry.save(&paths.registry_file())?;
    save_manifest(&paths.manifest_file(), &records)?;
    Ok(summary)
}

/// Loads every cached spectrogram of one speaker.
pub fn load_speaker_mels(
    paths: &RunPaths,
    records: &[UtteranceRecord],
    speaker: &str,
    config: &MelConfig,
) -> Result<Vec<LogMel>> {
    let _ = paths;
    let mut mels = Vec::new();
    for record in records.iter().filter(|r| r.speaker_id == speaker) {
        let cache = record
            .cache_path
            .as_ref()
            .ok_or_else(|| DatasetError::MissingArtifact(speaker.to_string()))?;
        let values = dsp::load_mel_cache(cache)?;
        mels.push(LogMel::new(values, config.clone())?);
    }
    if mels.is_empty() {
        return Err(DatasetError::MissingArtifact(speaker.to_string()));
    }
    Ok(mels)
}

pub fn load_speaker_stats(paths: &RunPaths, speaker: &str) -> Result<SpeakerScalingStats> {
    let path = paths.stats_file(speaker);
    if !path.exists() {
        return Err(DatasetError::MissingArtifact(speaker.to_string()));
    }
    let artifact = StatsArtifact::load(&path)?;
    Ok(artifact.to_stats())
}

/// One sampled source/target window pair for a training step.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub source_window: ScaledMel,
    pub source_index: usize,
    pub target_window: ScaledMel,
    pub target_index: usize,
}

struct SpeakerWindows {
    id: String,
    stats: SpeakerScalingStats,
    mels: Vec<Array2<f32>>,
}

/// In-memory sampler over all in-dataset speakers' cached spectrograms.
pub struct PairSampler {
    speakers: Vec<SpeakerWindows>,
    config: MelConfig,
    window_frames: usize,
}

impl PairSampler {
    pub fn load(paths: &RunPaths, config: &MelConfig) -> Result<Self> {
        let registry = SpeakerRegistry::load(&paths.registry_file())?;
        let records = load_manifest(&paths.manifest_file())?;
        let mut speakers = Vec::new();
        for id in registry.in_dataset_ids() {
            let stats = load_speaker_stats(paths, &id)?;
            let mels = load_speaker_mels(paths, &records, &id, config)?
                .into_iter()
                .map(|m| m.values)
                .collect();
            speakers.push(SpeakerWindows { id, stats, mels });
        }
        Self::from_parts(speakers, config.clone(), WINDOW_FRAMES)
    }

    fn from_parts(
        speakers: Vec<SpeakerWindows>,
        config: MelConfig,
        window_frames: usize,
    ) -> Result<Self> {
        if speakers.len() < 2 {
            return Err(DatasetError::InsufficientSpeakers(speakers.len()));
        }
        for s in &speakers {
            if !s.mels.iter().any(|m| m.ncols() >= window_frames) {
                return Err(DatasetError::WindowTooShort {
                    speaker: s.id.clone(),
                    needed: window_frames,
                });
            }
        }
        Ok(Self { speakers, config, window_frames })
    }

    /// Builds a sampler directly from in-memory spectrograms, mainly for
    /// synthetic corpora in tests.
    pub fn from_memory(
        speakers: Vec<(String, SpeakerScalingStats, Vec<Array2<f32>>)>,
        config: MelConfig,
    ) -> Result<Self> {
        let speakers = speakers
            .into_iter()
            .map(|(id, stats, mels)| SpeakerWindows { id, stats, mels })
            .collect();
        Self::from_parts(speakers, config, WINDOW_FRAMES)
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        self.speakers.iter().map(|s| s.id.clone()).collect()
    }

    fn window<R: Rng>(&self, speaker: usize, rng: &mut R) -> ScaledMel {
        let s = &self.speakers[speaker];
        // Utterances shorter than the window are skipped by resampling;
        // construction guarantees at least one is long enough.
        let mel = loop {
            let pick = rng.gen_range(0..s.mels.len());
            if s.mels[pick].ncols() >= self.window_frames {
                break &s.mels[pick];
            }
        };
        let offset = rng.gen_range(0..=mel.ncols() - self.window_frames);
        let crop = mel.slice(ndarray::s![.., offset..offset + self.window_frames]).to_owned();
        let log_mel = LogMel::new(crop, self.config.clone()).expect("finite cached values");
        dsp::scale(&log_mel, &s.stats).expect("stats match cached bins")
    }

    /// Uniform source speaker j, then uniform target k ≠ j; one random
    /// window from each, scaled with its own speaker's stats.
    pub fn sample_training_pair<R: Rng>(&self, rng: &mut R) -> TrainingPair {
        let n = self.speakers.len();
        let j = rng.gen_range(0..n);
        let k = loop {
            let cand = rng.gen_range(0..n);
            if cand != j {
                break cand;
            }
        };
        TrainingPair {
            source_window: self.window(j, rng),
            source_index: j,
            target_window: self.window(k, rng),
            target_index: k,
        }
    }

    pub fn sample_batch<R: Rng>(&self, size: usize, rng: &mut R) -> Vec<TrainingPair> {
        (0..size).map(|_| self.sample_training_pair(rng)).collect()
    }

    /// Scaled full-length spectrograms of one speaker (for SID or eval).
    pub fn scaled_utterances(&self, speaker: usize) -> Vec<ScaledMel> {
        let s = &self.speakers[speaker];
        s.mels
            .iter()
            .map(|m| {
                let log_mel = LogMel::new(m.clone(), self.config.clone()).unwrap();
                dsp::scale(&log_mel, &s.stats).unwrap()
            })
            .collect()
    }

    pub fn stats_of(&self, speaker: usize) -> &SpeakerScalingStats {
        &self.speakers[speaker].stats
    }

    pub fn mels_of(&self, speaker: usize) -> &[Array2<f32>] {
        &self.speakers[speaker].mels
    }
}
