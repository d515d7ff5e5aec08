//! The `vc` command line: preprocess, train, convert, embed, evaluate.
//!
//! Configuration precedence is defaults < run config < `--config` file <
//! flags, and the fully resolved result is dumped into the run directory
//! so every artifact can be traced to one concrete configuration. Run
//! directories are guarded by an advisory lock file; concurrent runs must
//! use distinct directories.

use crate::convert::{self, ConvertConfig};
use crate::dataset::{self, RunPaths, UtteranceRecord};
use crate::dsp::{self, LogMel, MelConfig, SpeakerScalingStats};
use crate::eval::{
    self, chance_baseline, CellKey, ConversionRecord, Gender, Group, SidConfig, SidModel,
    DEFAULT_K_LIST,
};
use crate::nets::{ArchConfig, SpeakerEmbedding};
use crate::plot;
use crate::training::{self, TrainConfig};
use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Errors that should exit with the usage code (2) instead of 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

// ---- configuration ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PreprocessOptions {
    pub silence_threshold_db: f32,
    pub percentile: f32,
    pub stats_subset: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { silence_threshold_db: 60.0, percentile: 0.999, stats_subset: 20 }
    }
}

/// Fully resolved configuration for one run directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub mel: MelConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub convert: ConvertConfig,
    pub sid: SidConfig,
    pub preprocess: PreprocessOptions,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            convert: ConvertConfig::default(),
            sid: SidConfig::default(),
            preprocess: PreprocessOptions::default(),
            seed: 0,
        }
    }
}

fn merge_values(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (key, value) in o {
                match b.get_mut(&key) {
                    Some(slot) => merge_values(slot, value),
                    None => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// defaults < run config.json < --config file < flags.
pub fn resolve_config(
    paths: &RunPaths,
    cli_config: Option<&Path>,
    cli_seed: Option<u64>,
) -> anyhow::Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    let run_config = paths.config_file();
    if run_config.exists() {
        let text = std::fs::read_to_string(&run_config)
            .with_context(|| format!("reading {}", run_config.display()))?;
        merge_values(&mut value, serde_json::from_str(&text)?);
    }
    if let Some(path) = cli_config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        merge_values(&mut value, serde_json::from_str(&text)?);
    }
    let mut config: RunConfig = serde_json::from_value(value)?;
    if let Some(seed) = cli_seed {
        config.seed = seed;
        config.train.seed = seed;
        config.sid.seed = seed;
    }
    Ok(config)
}

pub fn save_config(paths: &RunPaths, config: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&paths.root)?;
    let json = serde_json::to_string_pretty(config)?;
    std::fs::write(paths.config_file(), json)?;
    Ok(())
}

// ---- run locking ----

/// Advisory per-run lock holding the owner's pid. Stale locks (dead pid)
/// are stolen; live ones are an error.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(paths: &RunPaths) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&paths.root)?;
        let path = paths.lock_file();
        loop {
            match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut file) => {
                    write!(file, "{}", std::process::id())?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder: Option<u32> = std::fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse().ok());
                    if let Some(pid) = holder {
                        let alive = pid != std::process::id()
                            && Path::new(&format!("/proc/{pid}")).exists();
                        if alive {
                            bail!(
                                "run directory {} is locked by running process {pid}; \
                                 concurrent runs need distinct run directories",
                                paths.root.display()
                            );
                        }
                    }
                    // Stale or unreadable lock: remove and retry.
                    let _ = std::fs::remove_file(&path);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

// ---- argument surface ----

#[derive(Parser)]
#[command(
    name = "vc",
    version,
    about = "Embedding-conditioned Cycle-GAN voice conversion toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file overlaying the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; overrides every per-component seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build spectrogram caches and per-speaker scaling stats.
    Preprocess(PreprocessArgs),
    /// Run (or resume) adversarial training on a preprocessed run.
    Train(TrainArgs),
    /// Convert one utterance into a target speaker's voice.
    Convert(ConvertArgs),
    /// Extract a speaker embedding from sample recordings.
    Embed(EmbedArgs),
    /// Rank conversions with the SID substitute and report top-K accuracy.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Dataset root: one subdirectory of WAV files per speaker.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run directory to create or refresh.
    #[arg(long, value_name = "RUN")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "RUN")]
    run: PathBuf,
    /// Total training steps (overrides the configured value).
    #[arg(long, value_name = "N")]
    steps: Option<u64>,
    /// Checkpoint to resume from.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("target").required(true).multiple(false))]
struct ConvertArgs {
    #[arg(long, value_name = "RUN")]
    run: PathBuf,
    /// Source utterance to convert.
    #[arg(long, value_name = "WAV")]
    source: PathBuf,
    /// Scaling stats of this preprocessed speaker are used for the source.
    #[arg(long, value_name = "ID")]
    source_id: Option<String>,
    /// Target speaker seen during training.
    #[arg(long, value_name = "ID", group = "target")]
    target_id: Option<String>,
    /// Sample recordings describing an unseen target speaker.
    #[arg(long, value_name = "WAV", num_args = 1.., group = "target")]
    target_samples: Vec<PathBuf>,
    #[arg(long, value_name = "WAV")]
    out: PathBuf,
    /// Specific checkpoint (default: latest in the run).
    #[arg(long, value_name = "CKPT")]
    checkpoint: Option<PathBuf>,
    /// Cross-fade 50%-overlapped windows instead of converting disjoint ones.
    #[arg(long)]
    overlap_add: bool,
    /// Also write source/converted spectrogram images next to the output.
    #[arg(long)]
    spectrograms: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, value_name = "RUN")]
    run: PathBuf,
    /// Sample recordings of one speaker.
    #[arg(long, value_name = "WAV", num_args = 1.., required = true)]
    samples: Vec<PathBuf>,
    /// Output JSON file receiving stats plus embedding.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Label recorded inside the artifact.
    #[arg(long, value_name = "NAME", default_value = "speaker")]
    label: String,
    #[arg(long, value_name = "CKPT")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "RUN")]
    run: PathBuf,
    /// Grid spec (JSON) describing sources, targets and utterance counts.
    #[arg(long, value_name = "SPEC")]
    grid: Option<PathBuf>,
    /// Train the SID substitute before evaluating (and save it to the run).
    #[arg(long)]
    train_sid: bool,
    /// Print the analytic chance row and exit.
    #[arg(long)]
    chance_only: bool,
    /// Speaker count for --chance-only (default: run registry size).
    #[arg(long, value_name = "N")]
    m: Option<usize>,
    #[arg(long, value_name = "CKPT")]
    checkpoint: Option<PathBuf>,
}

// ---- shared helpers ----

fn require_preprocessed(paths: &RunPaths) -> anyhow::Result<()> {
    if !paths.registry_file().exists() {
        bail!(
            "run directory {} has no preprocessed dataset; run `vc preprocess --data DIR --out {}` first",
            paths.root.display(),
            paths.root.display()
        );
    }
    Ok(())
}

fn latest_checkpoint(paths: &RunPaths) -> anyhow::Result<PathBuf> {
    let dir = paths.checkpoint_dir();
    let mut best: Option<(u64, PathBuf)> = None;
    if dir.is_dir() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(step) = name
                .strip_prefix("ckpt_")
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                if best.as_ref().map_or(true, |(b, _)| step > *b) {
                    best = Some((step, path));
                }
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        anyhow!("no checkpoints in {}; run `vc train` first", dir.display())
    })
}

fn mels_from_wavs(
    wavs: &[PathBuf],
    mel: &MelConfig,
    silence_threshold_db: f32,
) -> anyhow::Result<Vec<LogMel>> {
    let mut out = Vec::new();
    for path in wavs {
        let wav = dsp::load_audio(path, mel)
            .with_context(|| format!("loading {}", path.display()))?;
        let trimmed = dsp::clip_silence(&wav, mel.sample_rate, silence_threshold_db)
            .with_context(|| format!("trimming {}", path.display()))?;
        out.push(dsp::mel_spectrogram(&trimmed, mel)?);
    }
    Ok(out)
}

// ---- subcommands ----

fn cmd_preprocess(args: &PreprocessArgs, cli: &Cli) -> anyhow::Result<()> {
    let paths = RunPaths::new(&args.out);
    let config = resolve_config(&paths, cli.config.as_deref(), cli.seed)?;
    let _lock = RunLock::acquire(&paths)?;
    save_config(&paths, &config)?;
    let summary = dataset::preprocess(
        &args.data,
        &paths,
        &config.mel,
        config.preprocess.silence_threshold_db,
        config.preprocess.percentile,
        config.preprocess.stats_subset,
        config.seed,
    )?;
    println!(
        "preprocessed {} utterances across {} speakers: {} caches written, {} up to date, {} stats written, {} up to date",
        summary.n_utterances,
        summary.n_speakers,
        summary.caches_written,
        summary.caches_skipped,
        summary.stats_written,
        summary.stats_skipped,
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, cli: &Cli) -> anyhow::Result<()> {
    let paths = RunPaths::new(&args.run);
    require_preprocessed(&paths)?;
    let mut config = resolve_config(&paths, cli.config.as_deref(), cli.seed)?;
    if let Some(steps) = args.steps {
        config.train.total_steps = steps;
    }
    config.arch.validate()?;
    let _lock = RunLock::acquire(&paths)?;
    save_config(&paths, &config)?;

    let outcome =
        training::train(&paths, &config.mel, &config.arch, &config.train, args.resume.as_deref())?;
    let history = training::load_history(&paths.history_file())?;
    if !history.is_empty() {
        std::fs::create_dir_all(paths.plot_dir())?;
        plot::render_loss_plot(&history, &paths.plot_dir().join("loss.png"))?;
    }
    println!(
        "trained to step {} ({} steps this invocation); checkpoint {}",
        outcome.last_step,
        outcome.reports.len(),
        outcome.final_checkpoint.display()
    );
    if let Some(last) = outcome.reports.last() {
        println!(
            "final losses: d {:.4}, adv {:.4}, cycle {:.4}, total {:.4}",
            last.loss_d, last.loss_g_adv, last.loss_cycle, last.loss_g_total
        );
    }
    Ok(())
}

fn source_stats_for(
    paths: &RunPaths,
    records: &[UtteranceRecord],
    args: &ConvertArgs,
    mel: &MelConfig,
    convert_config: &ConvertConfig,
) -> anyhow::Result<SpeakerScalingStats> {
    if let Some(id) = &args.source_id {
        return Ok(dataset::load_speaker_stats(paths, id)?);
    }
    let canonical = std::fs::canonicalize(&args.source).ok();
    for record in records {
        let matches = match (&canonical, std::fs::canonicalize(&record.audio_path).ok()) {
            (Some(a), Some(b)) => a == &b,
            _ => record.audio_path == args.source,
        };
        if matches {
            return Ok(dataset::load_speaker_stats(paths, &record.speaker_id)?);
        }
    }
    // Unknown source utterance: derive stats from the recording itself.
    let mels = mels_from_wavs(
        std::slice::from_ref(&args.source),
        mel,
        convert_config.silence_threshold_db,
    )?;
    Ok(dsp::compute_scaling_stats("source", &mels, convert_config.percentile as f64)?)
}

fn cmd_convert(args: &ConvertArgs, cli: &Cli) -> anyhow::Result<()> {
    let paths = RunPaths::new(&args.run);
    require_preprocessed(&paths)?;
    let config = resolve_config(&paths, cli.config.as_deref(), cli.seed)?;
    let ckpt_path = match &args.checkpoint {
        Some(p) => p.clone(),
        None => latest_checkpoint(&paths)?,
    };
    let ckpt = training::load_checkpoint(&ckpt_path)?;
    let records = dataset::load_manifest(&paths.manifest_file())?;

    let mut convert_config = config.convert.clone();
    convert_config.overlap_add |= args.overlap_add;

    let source_stats = source_stats_for(&paths, &records, args, &ckpt.mel, &convert_config)?;
    let (target_stats, target_emb) = if let Some(id) = &args.target_id {
        convert::seen_speaker_reference(&paths, &records, &ckpt.mel, &ckpt.params, id)?
    } else {
        convert::reference_from_samples(
            &ckpt.params,
            &ckpt.mel,
            &args.target_samples,
            &convert_config,
            "target",
        )?
    };

    let out = convert::convert_utterance(
        &ckpt,
        &args.source,
        &source_stats,
        &target_stats,
        &target_emb,
        &convert_config,
    )?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dsp::write_wav_16bit(&args.out, &out.waveform, ckpt.mel.sample_rate)?;

    if args.spectrograms {
        let source_wav = dsp::load_audio(&args.source, &ckpt.mel)?;
        let trimmed = dsp::clip_silence(
            &source_wav,
            ckpt.mel.sample_rate,
            convert_config.silence_threshold_db,
        )?;
        let source_mel = dsp::mel_spectrogram(&trimmed, &ckpt.mel)?;
        plot::render_spectrogram(&source_mel.values, &args.out.with_extension("source.png"))?;
        plot::render_spectrogram(&out.mel.values, &args.out.with_extension("converted.png"))?;
    }

    let seconds = out.waveform.len() as f64 / ckpt.mel.sample_rate as f64;
    println!(
        "wrote {} ({} frames, {seconds:.2}s) using {}",
        args.out.display(),
        out.frames,
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EmbeddingArtifact {
    label: String,
    stats: SpeakerScalingStats,
    embedding: SpeakerEmbedding,
}

fn cmd_embed(args: &EmbedArgs, cli: &Cli) -> anyhow::Result<()> {
    let paths = RunPaths::new(&args.run);
    let config = resolve_config(&paths, cli.config.as_deref(), cli.seed)?;
    let ckpt_path = match &args.checkpoint {
        Some(p) => p.clone(),
        None => latest_checkpoint(&paths)?,
    };
    let ckpt = training::load_checkpoint(&ckpt_path)?;
    let (stats, embedding) = convert::reference_from_samples(
        &ckpt.params,
        &ckpt.mel,
        &args.samples,
        &config.convert,
        &args.label,
    )?;
    let artifact = EmbeddingArtifact { label: args.label.clone(), stats, embedding };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&artifact)?)?;
    println!(
        "wrote embedding for {} samples to {}",
        args.samples.len(),
        args.out.display()
    );
    Ok(())
}

// ---- evaluation grid ----

fn default_utterances_per_source() -> usize {
    5
}

#[derive(Debug, Deserialize)]
struct GridSpec {
    #[serde(default = "default_utterances_per_source")]
    utterances_per_source: usize,
    sources: Vec<GridSource>,
    targets: Vec<GridTarget>,
}

#[derive(Debug, Deserialize)]
struct GridSource {
    id: String,
    group: String,
    /// Explicit recordings; required for out-of-dataset sources.
    #[serde(default)]
    wavs: Vec<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct GridTarget {
    id: String,
    group: String,
    gender: String,
    /// Sample recordings; required for out-of-dataset targets.
    #[serde(default)]
    samples: Vec<PathBuf>,
}

fn parse_group(s: &str) -> anyhow::Result<Group> {
    match s.to_ascii_lowercase().as_str() {
        "in" => Ok(Group::In),
        "out" => Ok(Group::Out),
        other => Err(UsageError(format!("group must be \"in\" or \"out\", got {other:?}")).into()),
    }
}

fn parse_gender(s: &str) -> anyhow::Result<Gender> {
    match s.to_ascii_lowercase().as_str() {
        "f" | "female" => Ok(Gender::Female),
        "m" | "male" => Ok(Gender::Male),
        other => {
            Err(UsageError(format!("gender must be \"F\" or \"M\", got {other:?}")).into())
        }
    }
}

fn run_mels_by_speaker(
    paths: &RunPaths,
    records: &[UtteranceRecord],
    mel: &MelConfig,
) -> anyhow::Result<Vec<(String, Vec<LogMel>)>> {
    let registry = dataset::SpeakerRegistry::load(&paths.registry_file())?;
    let mut corpus = Vec::new();
    for id in registry.in_dataset_ids() {
        let mels = dataset::load_speaker_mels(paths, records, &id, mel)?;
        corpus.push((id, mels));
    }
    Ok(corpus)
}

fn cmd_evaluate(args: &EvaluateArgs, cli: &Cli) -> anyhow::Result<()> {
    let paths = RunPaths::new(&args.run);

    if args.chance_only {
        let m = match args.m {
            Some(m) => m,
            None => {
                require_preprocessed(&paths)?;
                dataset::SpeakerRegistry::load(&paths.registry_file())?.n_speakers()
            }
        };
        let mut line = String::from("chance");
        for k in DEFAULT_K_LIST {
            if k <= m {
                write!(line, "  top-{k}: {:.1}%", eval::display_pct(chance_baseline(m, k)))?;
            }
        }
        println!("M = {m}");
        println!("{line}");
        return Ok(());
    }

    let grid_path = args
        .grid
        .as_ref()
        .ok_or_else(|| UsageError("--grid SPEC is required unless --chance-only".into()))?;
    let grid: GridSpec = serde_json::from_str(
        &std::fs::read_to_string(grid_path)
            .with_context(|| format!("reading {}", grid_path.display()))?,
    )
    .with_context(|| format!("parsing {}", grid_path.display()))?;
    if grid.sources.is_empty() || grid.targets.is_empty() || grid.utterances_per_source == 0 {
        return Err(UsageError("grid spec needs at least one source, one target, and a positive utterance count".into())
            .into());
    }

    require_preprocessed(&paths)?;
    let config = resolve_config(&paths, cli.config.as_deref(), cli.seed)?;
    let ckpt_path = match &args.checkpoint {
        Some(p) => p.clone(),
        None => latest_checkpoint(&paths)?,
    };
    let ckpt = training::load_checkpoint(&ckpt_path)?;
    let records = dataset::load_manifest(&paths.manifest_file())?;
    let silence_db = config.preprocess.silence_threshold_db;

    // SID universe: every run speaker plus every out-of-dataset grid
    // speaker, mirroring a SID system that knows the whole speaker pool.
    let mut corpus = run_mels_by_speaker(&paths, &records, &ckpt.mel)?;
    for (id, wavs) in grid
        .sources
        .iter()
        .map(|s| (&s.id, &s.wavs))
        .chain(grid.targets.iter().map(|t| (&t.id, &t.samples)))
    {
        if corpus.iter().any(|(c, _)| c == id) {
            continue;
        }
        if wavs.is_empty() {
            return Err(UsageError(format!(
                "grid speaker {id} is not in the run and provides no recordings"
            ))
            .into());
        }
        corpus.push((id.clone(), mels_from_wavs(wavs, &ckpt.mel, silence_db)?));
    }

    let sid = if args.train_sid {
        let model = eval::train_sid(&corpus, &config.sid)?;
        model.save(&paths.sid_file())?;
        println!("sid trained: eval top-1 {:.1}%", model.eval_top1 * 100.0);
        model
    } else if paths.sid_file().exists() {
        SidModel::load(&paths.sid_file())?
    } else {
        bail!(
            "no SID model at {}; pass --train-sid to create one",
            paths.sid_file().display()
        );
    };

    // Pre-resolve target references once per target.
    let mut target_refs = Vec::new();
    for target in &grid.targets {
        let group = parse_group(&target.group)?;
        let gender = parse_gender(&target.gender)?;
        let (stats, emb) = if target.samples.is_empty() {
            convert::seen_speaker_reference(&paths, &records, &ckpt.mel, &ckpt.params, &target.id)?
        } else {
            convert::reference_from_samples(
                &ckpt.params,
                &ckpt.mel,
                &target.samples,
                &config.convert,
                &target.id,
            )?
        };
        target_refs.push((target, group, gender, stats, emb));
    }

    let mut conversions = Vec::new();
    let mut total = 0usize;
    for source in &grid.sources {
        let source_group = parse_group(&source.group)?;
        let (source_stats, utterances): (SpeakerScalingStats, Vec<PathBuf>) =
            if source.wavs.is_empty() {
                let stats = dataset::load_speaker_stats(&paths, &source.id)?;
                let utts: Vec<PathBuf> = records
                    .iter()
                    .filter(|r| r.speaker_id == source.id)
                    .take(grid.utterances_per_source)
                    .map(|r| r.audio_path.clone())
                    .collect();
                if utts.is_empty() {
                    bail!("source speaker {} has no utterances in the run", source.id);
                }
                (stats, utts)
            } else {
                let mels = mels_from_wavs(&source.wavs, &ckpt.mel, silence_db)?;
                let stats = dsp::compute_scaling_stats(
                    &source.id,
                    &mels,
                    config.preprocess.percentile as f64,
                )?;
                (stats, source.wavs.iter().take(grid.utterances_per_source).cloned().collect())
            };

        for utt in &utterances {
            for (target, target_group, target_gender, target_stats, target_emb) in &target_refs {
                let out = convert::convert_utterance(
                    &ckpt,
                    utt,
                    &source_stats,
                    target_stats,
                    target_emb,
                    &config.convert,
                )?;
                // The SID hears the rebuilt audio, not the internal mel.
                let heard = dsp::mel_spectrogram(&out.waveform, &ckpt.mel)?;
                conversions.push(ConversionRecord {
                    key: CellKey {
                        source_group,
                        target_group: *target_group,
                        target_gender: *target_gender,
                    },
                    target_id: target.id.clone(),
                    audio: heard,
                });
                total += 1;
            }
        }
    }
    println!("converted {total} utterances across the grid");

    let report = eval::topk_report(&sid, &conversions, &DEFAULT_K_LIST)?;
    report.save(&paths.report_file())?;
    let text = report.render_text();
    std::fs::write(paths.root.join("report.txt"), &text)?;
    println!("{text}");
    println!("report written to {}", paths.report_file().display());
    Ok(())
}

// ---- entry point ----

pub fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Preprocess(args) => cmd_preprocess(args, &cli),
        Command::Train(args) => cmd_train(args, &cli),
        Command::Convert(args) => cmd_convert(args, &cli),
        Command::Embed(args) => cmd_embed(args, &cli),
        Command::Evaluate(args) => cmd_evaluate(args, &cli),
    }
}

pub fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
