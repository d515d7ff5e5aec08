//! Speaker-identification scoring and the top-K conversion report.
//!
//! A small convolutional softmax classifier stands in for a full SID
//! system. It never shares parameters with the conversion model; it is
//! trained on real utterances (with a train/eval split that keeps the two
//! sets disjoint) and then asked to rank speakers for each converted
//! utterance. Report cells follow the published table layout: rows keyed
//! by source group, target group and target gender, columns by K.

use crate::autodiff::Tape;
use crate::dsp::{DspError, LogMel};
use crate::nets::reflect_pad_width;
use ndarray::{s, Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown target speaker {0}")]
    UnknownTarget(String),
    #[error("empty conversion set")]
    EmptyGroup,
    #[error("storage: {0}")]
    Storage(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const DEFAULT_K_LIST: [usize; 5] = [1, 3, 5, 10, 20];

/// Analytic accuracy of uniform random guessing, in percent.
pub fn chance_baseline(m: usize, k: usize) -> f64 {
    assert!(k >= 1 && k <= m, "need 1 <= K <= M, got K={k} M={m}");
    100.0 * k as f64 / m as f64
}

/// Truncate a percentage to one decimal for display. The reference
/// chance table truncates: 291 speakers at K=20 prints 6.8, not 6.9.
/// The nudge keeps exact tenths (300/250 = 1.2 sits just below 12/10
/// in binary) from truncating to the next lower decimal; percentages
/// here are 100*a/b with b far below 1e8, so no true value lies within
/// 1e-9 of a boundary unless it is the boundary.
pub fn display_pct(v: f64) -> f64 {
    (v * 10.0 + 1e-9).floor() / 10.0
}

// ---- scoring and ranking ----

/// Anything that can score an utterance against a fixed speaker list.
/// Higher scores mean a more likely speaker.
pub trait UtteranceScorer {
    fn speakers(&self) -> &[String];
    fn score(&self, utterance: &LogMel) -> Vec<f64>;
}

/// 1-based rank of `target` within `scores`, descending, ties broken by
/// speaker index ascending.
pub fn rank_from_scores(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count()
}

pub fn rank_target<S: UtteranceScorer + ?Sized>(
    scorer: &S,
    utterance: &LogMel,
    target_id: &str,
) -> Result<usize> {
    let target = scorer
        .speakers()
        .iter()
        .position(|s| s == target_id)
        .ok_or_else(|| EvalError::UnknownTarget(target_id.to_string()))?;
    let scores = scorer.score(utterance);
    debug_assert_eq!(scores.len(), scorer.speakers().len());
    Ok(rank_from_scores(&scores, target))
}

// ---- the report ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    In,
    Out,
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Group::In => "in",
            Group::Out => "out",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Female,
    Male,
}

impl std::fmt::Display for Gender {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Gender::Female => "F",
            Gender::Male => "M",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub source_group: Group,
    pub target_group: Group,
    pub target_gender: Gender,
}

/// One converted utterance, annotated for grouping.
#[derive(Debug, Clone)]
pub struct ConversionRecord {
    pub key: CellKey,
    pub target_id: String,
    pub audio: LogMel,
}

/// Hit counts per K; accuracy is derived so cells can be merged exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCell {
    pub count: usize,
    pub hits: BTreeMap<usize, usize>,
}

impl ReportCell {
    pub fn accuracy(&self, k: usize) -> f64 {
        100.0 * self.hits.get(&k).copied().unwrap_or(0) as f64 / self.count as f64
    }

    fn absorb(&mut self, other: &ReportCell) {
        self.count += other.count;
        for (k, h) in &other.hits {
            *self.hits.entry(*k).or_insert(0) += h;
        }
    }
}

/// JSON objects key by strings, so the cell map travels as (key, cell)
/// pairs instead.
mod cells_serde {
    use super::{CellKey, ReportCell};
    use serde::{Deserialize, Deserializer, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<CellKey, ReportCell>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<CellKey, ReportCell>, D::Error> {
        let pairs = Vec::<(CellKey, ReportCell)>::deserialize(d)?;
        Ok(pairs.into_iter().collect())
    }
}

/// Accuracy table over all populated group cells. Cells with no
/// conversions are absent, never reported as zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopKReport {
    pub k_list: Vec<usize>,
    pub n_speakers: usize,
    #[serde(with = "cells_serde")]
    pub cells: BTreeMap<CellKey, ReportCell>,
}

impl TopKReport {
    /// Table-1-style row: all conversions onto targets of one group.
    pub fn target_row(&self, group: Group) -> Option<ReportCell> {
        let mut row: Option<ReportCell> = None;
        for (key, cell) in &self.cells {
            if key.target_group == group {
                row.get_or_insert_with(ReportCell::default).absorb(cell);
            }
        }
        row
    }

    /// Chance row for the same speaker count, one value per K.
    pub fn chance_row(&self) -> Vec<f64> {
        self.k_list
            .iter()
            .map(|&k| chance_baseline(self.n_speakers, k.min(self.n_speakers)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| EvalError::Storage(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json).map_err(|e| EvalError::Storage(e.to_string()))
    }

    /// Plain-text rendering in the published row layout.
    pub fn render_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let header: String =
            self.k_list.iter().map(|k| format!("  top-{k:<3}")).collect();
        writeln!(out, "{:<22}{header}", "target group").unwrap();
        for group in [Group::In, Group::Out] {
            if let Some(row) = self.target_row(group) {
                let cells: String = self
                    .k_list
                    .iter()
                    .map(|&k| format!("  {:>7.1}", display_pct(row.accuracy(k))))
                    .collect();
                writeln!(out, "{:<22}{cells}", format!("{group}-dataset")).unwrap();
            }
        }
        let chance: String = self
            .chance_row()
            .iter()
            .map(|&v| format!("  {:>7.1}", display_pct(v)))
            .collect();
        writeln!(out, "{:<22}{chance}", "chance").unwrap();
        writeln!(out).unwrap();
        writeln!(out, "{:<22}{header}", "source/target/gender").unwrap();
        for (key, cell) in &self.cells {
            let label = format!(
                "{}->{} {} (n={})",
                key.source_group, key.target_group, key.target_gender, cell.count
            );
            let cells: String = self
                .k_list
                .iter()
                .map(|&k| format!("  {:>7.1}", display_pct(cell.accuracy(k))))
                .collect();
            writeln!(out, "{label:<22}{cells}").unwrap();
        }
        out
    }
}

/// Ranks every conversion and folds the hits into group cells.
pub fn topk_report<S: UtteranceScorer + ?Sized>(
    scorer: &S,
    conversions: &[ConversionRecord],
    k_list: &[usize],
) -> Result<TopKReport> {
    if conversions.is_empty() {
        return Err(EvalError::EmptyGroup);
    }
    let mut cells: BTreeMap<CellKey, ReportCell> = BTreeMap::new();
    for record in conversions {
        let rank = rank_target(scorer, &record.audio, &record.target_id)?;
        let cell = cells.entry(record.key).or_default();
        cell.count += 1;
        for &k in k_list {
            if rank <= k {
                *cell.hits.entry(k).or_insert(0) += 1;
            }
        }
    }
    Ok(TopKReport {
        k_list: k_list.to_vec(),
        n_speakers: scorer.speakers().len(),
        cells,
    })
}

// ---- the SID substitute ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SidConfig {
    pub window_frames: usize,
    pub window_stride: usize,
    pub channels: (usize, usize),
    pub lr: f32,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SidConfig {
    fn default() -> Self {
        Self {
            window_frames: 64,
            window_stride: 32,
            channels: (8, 16),
            lr: 1e-3,
            steps: 400,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// How the utterances were divided; kept with the model so the disjoint
/// train/eval invariant stays auditable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SidSplit {
    pub train_per_speaker: Vec<usize>,
    pub eval_per_speaker: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidModel {
    pub speakers: Vec<String>,
    pub n_mels: usize,
    pub config: SidConfig,
    pub params: BTreeMap<String, ArrayD<f32>>,
    pub split: SidSplit,
    /// Top-1 accuracy on the held-out half, measured right after training.
    pub eval_top1: f64,
}

/// Zero-mean unit-variance normalization of one window; identity offsets
/// between speakers must not leak through level alone.
fn standardize(values: &Array2<f32>) -> Array2<f32> {
    let n = values.len() as f32;
    let mean = values.sum() / n;
    let var = values.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    let denom = (var.sqrt()).max(1e-5);
    values.mapv(|v| (v - mean) / denom)
}

fn utterance_windows(mel: &LogMel, frames: usize, stride: usize) -> Vec<Array2<f32>> {
    let total = mel.frames();
    if total < frames {
        return vec![standardize(&reflect_pad_width(&mel.values, frames))];
    }
    let mut windows = Vec::new();
    let mut off = 0;
    while off + frames <= total {
        windows.push(standardize(&mel.values.slice(s![.., off..off + frames]).to_owned()));
        off += stride;
    }
    windows
}

fn stack_windows(windows: &[&Array2<f32>]) -> ArrayD<f32> {
    let (h, w) = windows[0].dim();
    let mut out = Array4::<f32>::zeros((windows.len(), 1, h, w));
    for (n, win) in windows.iter().enumerate() {
        out.slice_mut(s![n, 0, .., ..]).assign(win);
    }
    out.into_dyn()
}

fn sid_init(n_mels: usize, frames: usize, m: usize, config: &SidConfig) -> BTreeMap<String, ArrayD<f32>> {
    let (c1, c2) = config.channels;
    let fc_in = c2 * (n_mels / 4) * (frames / 4);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensor = |shape: &[usize], fan_in: usize, linear: bool| {
        let std = if linear {
            (1.0 / fan_in as f64).sqrt()
        } else {
            (2.0 / fan_in as f64).sqrt()
        };
        let normal = Normal::new(0.0, std).unwrap();
        let data: Vec<f32> = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    };
    let mut params = BTreeMap::new();
    params.insert("c1.w".into(), tensor(&[c1, 1, 3, 3], 9, false));
    params.insert("c1.b".into(), ArrayD::zeros(IxDyn(&[c1])));
    params.insert("c2.w".into(), tensor(&[c2, c1, 3, 3], c1 * 9, false));
    params.insert("c2.b".into(), ArrayD::zeros(IxDyn(&[c2])));
    params.insert("fc.w".into(), tensor(&[fc_in, m], fc_in, true));
    params.insert("fc.b".into(), ArrayD::zeros(IxDyn(&[m])));
    params
}

fn sid_logits(
    tape: &mut Tape<f32>,
    vars: &BTreeMap<String, crate::autodiff::VarId>,
    x: crate::autodiff::VarId,
) -> crate::autodiff::VarId {
    let c1 = tape.conv2d(x, vars["c1.w"], vars["c1.b"], (2, 2), (1, 1));
    let a1 = tape.leaky_relu(c1, 0.2);
    let c2 = tape.conv2d(a1, vars["c2.w"], vars["c2.b"], (2, 2), (1, 1));
    let a2 = tape.leaky_relu(c2, 0.2);
    let flat = tape.flatten(a2);
    tape.linear(flat, vars["fc.w"], vars["fc.b"])
}

fn register(
    tape: &mut Tape<f32>,
    params: &BTreeMap<String, ArrayD<f32>>,
) -> BTreeMap<String, crate::autodiff::VarId> {
    params
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
        .collect()
}

impl SidModel {
    /// Per-window log-probabilities, `[M]` per window.
    fn window_log_probs(&self, window: &Array2<f32>) -> Vec<f64> {
        let mut tape = Tape::<f32>::new();
        let vars = register(&mut tape, &self.params);
        let x = tape.leaf(stack_windows(&[window]));
        let logits = sid_logits(&mut tape, &vars, x);
        let row: Vec<f64> = tape.value(logits).iter().map(|&v| v as f64).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.iter().map(|v| v - log_z).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string(self).map_err(|e| EvalError::Storage(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json).map_err(|e| EvalError::Storage(e.to_string()))
    }
}

impl UtteranceScorer for SidModel {
    fn speakers(&self) -> &[String] {
        &self.speakers
    }

    /// Utterance score per speaker: mean of window log-probabilities.
    fn score(&self, utterance: &LogMel) -> Vec<f64> {
        let windows =
            utterance_windows(utterance, self.config.window_frames, self.config.window_stride);
        let mut acc = vec![0.0f64; self.speakers.len()];
        for window in &windows {
            for (a, v) in acc.iter_mut().zip(self.window_log_probs(window)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= windows.len() as f64;
        }
        acc
    }
}

/// Trains the SID substitute. Utterances are split per speaker into
/// disjoint train (even indices) and eval (odd indices) halves.
pub fn train_sid(corpus: &[(String, Vec<LogMel>)], config: &SidConfig) -> Result<SidModel> {
    if corpus.len() < 2 {
        return Err(EvalError::InsufficientData(format!(
            "need at least 2 speakers, got {}",
            corpus.len()
        )));
    }
    let n_mels = corpus
        .first()
        .and_then(|(_, mels)| mels.first())
        .map(|m| m.n_mels())
        .ok_or_else(|| EvalError::InsufficientData("speaker with no utterances".into()))?;

    let mut train_windows: Vec<(usize, Array2<f32>)> = Vec::new();
    let mut eval_utts: Vec<(usize, &LogMel)> = Vec::new();
    let mut split = SidSplit { train_per_speaker: Vec::new(), eval_per_speaker: Vec::new() };
    for (index, (id, mels)) in corpus.iter().enumerate() {
        if mels.len() < 2 {
            return Err(EvalError::InsufficientData(format!(
                "speaker {id} needs utterances in both split halves"
            )));
        }
        let mut n_train = 0;
        let mut n_eval = 0;
        for (u, mel) in mels.iter().enumerate() {
            if u % 2 == 0 {
                n_train += 1;
                for w in utterance_windows(mel, config.window_frames, config.window_stride) {
                    train_windows.push((index, w));
                }
            } else {
                n_eval += 1;
                eval_utts.push((index, mel));
            }
        }
        split.train_per_speaker.push(n_train);
        split.eval_per_speaker.push(n_eval);
    }

    let m = corpus.len();
    let mut params = sid_init(n_mels, config.window_frames, m, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = crate::training::AdamState::new();
    for _ in 0..config.steps {
        let picks: Vec<usize> =
            (0..config.batch_size).map(|_| rng.gen_range(0..train_windows.len())).collect();
        let views: Vec<&Array2<f32>> = picks.iter().map(|&i| &train_windows[i].1).collect();
        let labels: Vec<usize> = picks.iter().map(|&i| train_windows[i].0).collect();

        let mut tape = Tape::<f32>::new();
        let vars = register(&mut tape, &params);
        let x = tape.leaf(stack_windows(&views));
        let logits = sid_logits(&mut tape, &vars, x);
        let loss = tape.neg_log_softmax_pick(logits, &labels, 1e-12);
        let grads = tape.backward(loss);
        let grad_map: BTreeMap<String, ArrayD<f32>> = vars
            .iter()
            .filter_map(|(name, &var)| grads.get(var).map(|g| (name.clone(), g.clone())))
            .collect();
        opt.begin_step();
        opt.apply("sid", &mut params, &grad_map, config.lr, 0.9, 0.999, 1e-8);
    }

    let mut model = SidModel {
        speakers: corpus.iter().map(|(id, _)| id.clone()).collect(),
        n_mels,
        config: config.clone(),
        params,
        split,
        eval_top1: 0.0,
    };
    let mut hits = 0usize;
    for (index, mel) in &eval_utts {
        let scores = model.score(mel);
        if rank_from_scores(&scores, *index) == 1 {
            hits += 1;
        }
    }
    model.eval_top1 = hits as f64 / eval_utts.len() as f64;
    Ok(model)
}
