//! Losses, the alternating adversarial update, checkpointing, and the
//! training loop.
//!
//! Each step runs two phases on separate tapes. The discriminator phase
//! classifies real patches of both windows and detached generated patches,
//! then steps D alone. The generator phase recomputes the conversion and
//! its cycle against the already-updated D, then steps FE and G together.
//! Patch plans drawn in the D phase are reused in the G phase so both see
//! the same crops.

use crate::autodiff::{Grads, Scalar, Tape, VarId};
use crate::dataset::{DatasetError, PairSampler, RunPaths, TrainingPair};
use crate::dsp::{MelConfig, ScaledMel};
use crate::nets::{
    self, disc_apply, fe_apply, gen_apply, register_group, window_to_leaf, ArchConfig,
    ClassProbabilities, ModelParams, NetsError, ParamGroup, PatchPlan, VarMap,
};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Probabilities are floored here before the log; values at or below zero
/// are rejected instead.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("degenerate probability {0}")]
    DegenerateProb(f64),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

/// Discriminator class index: `2i` is real speaker i, `2i + 1` is fake
/// speaker i.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingLabels {
    pub class_index: usize,
}

impl TrainingLabels {
    pub fn real(speaker: usize) -> Self {
        Self { class_index: 2 * speaker }
    }

    pub fn fake(speaker: usize) -> Self {
        Self { class_index: 2 * speaker + 1 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_cycle: f64,
    pub loss_g_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lambda_cycle: f32,
    pub lr_d: f32,
    pub lr_g: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    /// Steps that fail with a non-finite loss are retried with a fresh
    /// batch this many times before the error propagates.
    pub max_step_retries: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_cycle: 10.0,
            lr_d: 2e-4,
            lr_g: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            total_steps: 2000,
            checkpoint_interval: 500,
            seed: 0,
            max_step_retries: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cycle < 0.0 || !self.lambda_cycle.is_finite() {
            return Err(TrainingError::Checkpoint(format!(
                "lambda_cycle must be non-negative, got {}",
                self.lambda_cycle
            )));
        }
        if self.lr_d <= 0.0 || self.lr_g <= 0.0 {
            return Err(TrainingError::Checkpoint("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::Checkpoint("batch_size must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(TrainingError::Checkpoint(
                "checkpoint_interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

// ---- losses on data-level outputs ----

fn floored_neg_log(p: f64) -> Result<f64> {
    if p <= 0.0 {
        return Err(TrainingError::DegenerateProb(p));
    }
    Ok(-(p.max(PROB_FLOOR)).ln())
}

/// `-log(probs[label])`, the per-sample discriminator loss.
pub fn loss_discriminator(probs: &ClassProbabilities, label: TrainingLabels) -> Result<f64> {
    let Some(&p) = probs.probs.get(label.class_index) else {
        return Err(TrainingError::ShapeMismatch {
            expected: format!("class index < {}", probs.probs.len()),
            got: format!("{}", label.class_index),
        });
    };
    floored_neg_log(p as f64)
}

/// `-log(probs[2k])`: pushes a generated utterance toward real-speaker-k.
pub fn loss_generator_adv(probs: &ClassProbabilities, target_index: usize) -> Result<f64> {
    loss_discriminator(probs, TrainingLabels::real(target_index))
}

/// Mean absolute difference over all entries.
pub fn loss_cycle(original: &ScaledMel, reconstructed: &ScaledMel) -> Result<f64> {
    if original.values.dim() != reconstructed.values.dim() {
        return Err(TrainingError::ShapeMismatch {
            expected: format!("{:?}", original.values.dim()),
            got: format!("{:?}", reconstructed.values.dim()),
        });
    }
    let total: f64 = original
        .values
        .iter()
        .zip(reconstructed.values.iter())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    Ok(total / original.values.len() as f64)
}

// ---- optimizer ----

/// Adam with lazily created per-tensor moment buffers, keyed by
/// `{group}/{tensor}` so one state can span several parameter groups.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, ArrayD<f32>>,
    pub v: BTreeMap<String, ArrayD<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before `apply`.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn apply(
        &mut self,
        prefix: &str,
        group: &mut ParamGroup,
        grads: &BTreeMap<String, ArrayD<f32>>,
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    ) {
        assert!(self.t > 0, "begin_step must run before apply");
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = group.get_mut(name).expect("gradient for unknown parameter");
            let key = format!("{prefix}/{name}");
            let m = self
                .m
                .entry(key.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v.entry(key).or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

// ---- step graph construction ----

/// Patch plans for one pair, in RNG draw order: source window, target
/// window, then the generated (fake) window.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairPlans {
    pub source: Vec<PatchPlan>,
    pub target: Vec<PatchPlan>,
    pub fake: Vec<PatchPlan>,
}

pub struct PhaseVars {
    pub fe: VarMap,
    pub gen: VarMap,
    pub disc: VarMap,
}

fn padded_for_planning(values: &Array2<f32>, max_width: usize) -> Array2<f32> {
    if values.ncols() < max_width {
        nets::reflect_pad_width(values, max_width)
    } else {
        values.clone()
    }
}

/// Window values of a `[1, 1, h, w]` tape tensor, cast back to f32 for
/// patch gating.
fn tape_window_f32<F: Scalar>(tape: &Tape<F>, var: VarId) -> Array2<f32> {
    let v = tape.value(var);
    let v4 = v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (_, _, h, w) = v4.dim();
    Array2::from_shape_fn((h, w), |(i, j)| v4[[0, 0, i, j]].to_f64() as f32)
}

/// Slices planned patches out of a window var, reflection-padding the time
/// axis when a plan exceeds the window (plans are drawn on padded values).
fn tape_patches<F: Scalar>(
    tape: &mut Tape<F>,
    window: VarId,
    plans: &[PatchPlan],
    max_width: usize,
) -> Vec<(VarId, usize)> {
    if plans.is_empty() {
        return Vec::new();
    }
    let w = tape.value(window).shape()[3];
    let target_w = w.max(max_width);
    let padded = if target_w > w { tape.reflect_pad_w(window, target_w) } else { window };
    plans
        .iter()
        .map(|p| (tape.patch(padded, 0, p.offset, p.width), p.width))
        .collect()
}

/// Builds the discriminator-phase loss: real patches of both windows plus
/// detached fake patches, each scored by the width-matched CNN. Returns
/// `None` when no patch anywhere survived the power gate.
pub fn build_d_phase<F: Scalar, R: Rng>(
    tape: &mut Tape<F>,
    params: &ModelParams,
    batch: &[TrainingPair],
    rng: &mut R,
) -> (PhaseVars, Option<VarId>, Vec<PairPlans>) {
    let arch = &params.arch;
    let max_width = *arch.disc_patch_widths.iter().max().unwrap();
    let tau = arch.patch_power_threshold;
    let vars = PhaseVars {
        fe: register_group(tape, &params.fe_params),
        gen: register_group(tape, &params.gen_params),
        disc: register_group(tape, &params.disc_params),
    };

    let mut patch_losses = Vec::new();
    let mut all_plans = Vec::with_capacity(batch.len());
    for pair in batch {
        let u_j = window_to_leaf(tape, &pair.source_window.values);
        let u_k = window_to_leaf(tape, &pair.target_window.values);
        let fe_k = fe_apply(tape, &vars.fe, arch, "", u_k);
        let fake = gen_apply(tape, &vars.gen, arch, u_j, fe_k.embedding, &fe_k.summaries);
        let fake_detached = tape.detach(fake);

        let source_padded = padded_for_planning(&pair.source_window.values, max_width);
        let target_padded = padded_for_planning(&pair.target_window.values, max_width);
        let fake_padded = padded_for_planning(&tape_window_f32(tape, fake_detached), max_width);
        let plans = PairPlans {
            source: nets::plan_patches(&source_padded, &arch.disc_patch_widths, tau, rng),
            target: nets::plan_patches(&target_padded, &arch.disc_patch_widths, tau, rng),
            fake: nets::plan_patches(&fake_padded, &arch.disc_patch_widths, tau, rng),
        };

        let groups = [
            (u_j, &plans.source, TrainingLabels::real(pair.source_index)),
            (u_k, &plans.target, TrainingLabels::real(pair.target_index)),
            (fake_detached, &plans.fake, TrainingLabels::fake(pair.target_index)),
        ];
        for (window, plans, label) in groups {
            for (patch, width) in tape_patches(tape, window, plans, max_width) {
                let logits = disc_apply(tape, &vars.disc, arch, patch, width);
                let floor = F::from_f64(PROB_FLOOR);
                patch_losses.push(tape.neg_log_softmax_pick(
                    logits,
                    &[label.class_index],
                    floor,
                ));
            }
        }
        all_plans.push(plans);
    }

    let loss = if patch_losses.is_empty() {
        None
    } else {
        Some(tape.mean_scalars(&patch_losses))
    };
    (vars, loss, all_plans)
}

pub struct GLosses {
    pub adv: Option<VarId>,
    pub cycle: VarId,
    pub total: VarId,
}

/// Builds the generator-phase graph: adversarial term on the reused fake
/// patch plans plus the cycle reconstruction term.
pub fn build_g_phase<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams,
    batch: &[TrainingPair],
    plans: &[PairPlans],
    lambda: f64,
) -> (PhaseVars, GLosses) {
    assert_eq!(batch.len(), plans.len(), "one plan set per pair");
    let arch = &params.arch;
    let max_width = *arch.disc_patch_widths.iter().max().unwrap();
    let vars = PhaseVars {
        fe: register_group(tape, &params.fe_params),
        gen: register_group(tape, &params.gen_params),
        disc: register_group(tape, &params.disc_params),
    };

    let mut adv_losses = Vec::new();
    let mut cycle_losses = Vec::new();
    for (pair, pair_plans) in batch.iter().zip(plans) {
        let u_j = window_to_leaf(tape, &pair.source_window.values);
        let u_k = window_to_leaf(tape, &pair.target_window.values);
        let fe_k = fe_apply(tape, &vars.fe, arch, "", u_k);
        let fake = gen_apply(tape, &vars.gen, arch, u_j, fe_k.embedding, &fe_k.summaries);

        for (patch, width) in tape_patches(tape, fake, &pair_plans.fake, max_width) {
            let logits = disc_apply(tape, &vars.disc, arch, patch, width);
            let floor = F::from_f64(PROB_FLOOR);
            adv_losses.push(tape.neg_log_softmax_pick(
                logits,
                &[TrainingLabels::real(pair.target_index).class_index],
                floor,
            ));
        }

        let fe_j = fe_apply(tape, &vars.fe, arch, "", u_j);
        let cycled = gen_apply(tape, &vars.gen, arch, fake, fe_j.embedding, &fe_j.summaries);
        cycle_losses.push(tape.mean_abs_diff(cycled, u_j));
    }

    let cycle = tape.mean_scalars(&cycle_losses);
    let weighted_cycle = tape.scale(cycle, F::from_f64(lambda));
    let (adv, total) = if adv_losses.is_empty() {
        (None, weighted_cycle)
    } else {
        let adv = tape.mean_scalars(&adv_losses);
        (Some(adv), tape.add(adv, weighted_cycle))
    };
    (vars, GLosses { adv, cycle, total })
}

// ---- parameter updates ----

fn finite_scalar(name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainingError::NonFiniteLoss(format!("{name} = {value}")))
    }
}

/// Pulls f32 gradients for one registered group out of a backward pass.
/// Parameters without a path to the loss are absent from the result.
fn collect_grads<F: Scalar>(
    grads: &Grads<F>,
    vars: &VarMap,
    phase: &str,
) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let mut out = BTreeMap::new();
    for (name, &var) in vars {
        if let Some(g) = grads.get(var) {
            let cast = g.mapv(|v| v.to_f64() as f32);
            if cast.iter().any(|v| !v.is_finite()) {
                return Err(TrainingError::NonFiniteLoss(format!(
                    "{phase} gradient for {name}"
                )));
            }
            out.insert(name.clone(), cast);
        }
    }
    Ok(out)
}

/// Discriminator phase: plans patches, scores them, steps D. FE and G
/// parameters are read but never written. Returns the mean loss and the
/// plans for the generator phase.
pub fn d_update<R: Rng>(
    params: &mut ModelParams,
    opt_d: &mut AdamState,
    batch: &[TrainingPair],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, Vec<PairPlans>)> {
    let mut tape = Tape::<f32>::new();
    let (vars, loss, plans) = build_d_phase(&mut tape, params, batch, rng);
    let Some(loss) = loss else {
        return Ok((0.0, plans));
    };
    let value = finite_scalar("loss_d", tape.scalar(loss) as f64)?;
    let grads = tape.backward(loss);
    let disc_grads = collect_grads(&grads, &vars.disc, "discriminator")?;
    opt_d.begin_step();
    opt_d.apply(
        "disc",
        &mut params.disc_params,
        &disc_grads,
        config.lr_d,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    Ok((value, plans))
}

/// Generator phase: recomputes conversions against the current (already
/// stepped) D and updates FE and G together. D parameters are read but
/// never written.
pub fn g_update(
    params: &mut ModelParams,
    opt_g: &mut AdamState,
    batch: &[TrainingPair],
    config: &TrainConfig,
    plans: &[PairPlans],
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::<f32>::new();
    let (vars, losses) =
        build_g_phase(&mut tape, params, batch, plans, config.lambda_cycle as f64);
    let adv = match losses.adv {
        Some(v) => finite_scalar("loss_g_adv", tape.scalar(v) as f64)?,
        None => 0.0,
    };
    let cycle = finite_scalar("loss_cycle", tape.scalar(losses.cycle) as f64)?;
    let total = finite_scalar("loss_g_total", tape.scalar(losses.total) as f64)?;
    let grads = tape.backward(losses.total);
    let fe_grads = collect_grads(&grads, &vars.fe, "generator")?;
    let gen_grads = collect_grads(&grads, &vars.gen, "generator")?;
    opt_g.begin_step();
    opt_g.apply(
        "fe",
        &mut params.fe_params,
        &fe_grads,
        config.lr_g,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    opt_g.apply(
        "gen",
        &mut params.gen_params,
        &gen_grads,
        config.lr_g,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    Ok((adv, cycle, total))
}

/// One full adversarial step. On a non-finite loss anywhere the step
/// aborts and every parameter and optimizer buffer is left as it was.
pub fn training_step<R: Rng>(
    params: &mut ModelParams,
    opt_d: &mut AdamState,
    opt_g: &mut AdamState,
    batch: &[TrainingPair],
    config: &TrainConfig,
    rng: &mut R,
    step: u64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(TrainingError::EmptyBatch);
    }
    let disc_snapshot = params.disc_params.clone();
    let opt_d_snapshot = opt_d.clone();
    let (loss_d, plans) = d_update(params, opt_d, batch, config, rng)?;
    match g_update(params, opt_g, batch, config, &plans) {
        Ok((loss_g_adv, loss_cycle, loss_g_total)) => Ok(LossReport {
            step,
            loss_d,
            loss_g_adv,
            loss_cycle,
            loss_g_total,
        }),
        Err(e) => {
            params.disc_params = disc_snapshot;
            *opt_d = opt_d_snapshot;
            Err(e)
        }
    }
}

// ---- checkpoints ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"VCCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub opt_d: AdamState,
    pub opt_g: AdamState,
    pub speakers: Vec<String>,
    pub mel: MelConfig,
    pub train_config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: ArchConfig,
    n_speakers: usize,
    step: u64,
    speakers: Vec<String>,
    mel: MelConfig,
    train_config: TrainConfig,
    rng: ChaCha8Rng,
    opt_d_t: u64,
    opt_g_t: u64,
}

fn write_tensor<W: Write>(out: &mut W, name: &str, tensor: &ArrayD<f32>) -> Result<()> {
    let bytes = name.as_bytes();
    out.write_u16::<LittleEndian>(bytes.len() as u16)?;
    out.write_all(bytes)?;
    out.write_u8(tensor.ndim() as u8)?;
    for d in tensor.shape() {
        out.write_u64::<LittleEndian>(*d as u64)?;
    }
    for v in tensor.iter() {
        out.write_f32::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(input: &mut R) -> Result<(String, ArrayD<f32>)> {
    let name_len = input.read_u16::<LittleEndian>()? as usize;
    let mut name_bytes = vec![0u8; name_len];
    input.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| TrainingError::Checkpoint("tensor name not utf8".into()))?;
    let ndim = input.read_u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(input.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(input.read_f32::<LittleEndian>()?);
    }
    let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| TrainingError::Checkpoint(format!("tensor {name}: {e}")))?;
    Ok((name, tensor))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let meta = CheckpointMeta {
        arch: ckpt.params.arch.clone(),
        n_speakers: ckpt.params.n_speakers,
        step: ckpt.step,
        speakers: ckpt.speakers.clone(),
        mel: ckpt.mel.clone(),
        train_config: ckpt.train_config.clone(),
        rng: ckpt.rng.clone(),
        opt_d_t: ckpt.opt_d.t,
        opt_g_t: ckpt.opt_g.t,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| TrainingError::Checkpoint(format!("meta encode: {e}")))?;

    let mut sections: Vec<(String, &ArrayD<f32>)> = Vec::new();
    for (prefix, group) in [
        ("fe", &ckpt.params.fe_params),
        ("gen", &ckpt.params.gen_params),
        ("disc", &ckpt.params.disc_params),
    ] {
        for (name, tensor) in group {
            sections.push((format!("{prefix}/{name}"), tensor));
        }
    }
    for (prefix, state) in [("od", &ckpt.opt_d), ("og", &ckpt.opt_g)] {
        for (name, tensor) in &state.m {
            sections.push((format!("{prefix}.m/{name}"), tensor));
        }
        for (name, tensor) in &state.v {
            sections.push((format!("{prefix}.v/{name}"), tensor));
        }
    }

    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u64::<LittleEndian>(meta_json.len() as u64)?;
    out.write_all(&meta_json)?;
    out.write_u32::<LittleEndian>(sections.len() as u32)?;
    for (name, tensor) in sections {
        write_tensor(&mut out, &name, tensor)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainingError::Checkpoint("bad magic".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainingError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = input.read_u64::<LittleEndian>()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    input.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| TrainingError::Checkpoint(format!("meta decode: {e}")))?;

    let n_tensors = input.read_u32::<LittleEndian>()? as usize;
    let mut fe = ParamGroup::new();
    let mut gen = ParamGroup::new();
    let mut disc = ParamGroup::new();
    let mut opt_d = AdamState { t: meta.opt_d_t, ..Default::default() };
    let mut opt_g = AdamState { t: meta.opt_g_t, ..Default::default() };
    for _ in 0..n_tensors {
        let (full_name, tensor) = read_tensor(&mut input)?;
        let (prefix, name) = full_name
            .split_once('/')
            .ok_or_else(|| TrainingError::Checkpoint(format!("unprefixed tensor {full_name}")))?;
        let name = name.to_string();
        match prefix {
            "fe" => {
                fe.insert(name, tensor);
            }
            "gen" => {
                gen.insert(name, tensor);
            }
            "disc" => {
                disc.insert(name, tensor);
            }
            "od.m" => {
                opt_d.m.insert(name, tensor);
            }
            "od.v" => {
                opt_d.v.insert(name, tensor);
            }
            "og.m" => {
                opt_g.m.insert(name, tensor);
            }
            "og.v" => {
                opt_g.v.insert(name, tensor);
            }
            other => {
                return Err(TrainingError::Checkpoint(format!("unknown section {other}")));
            }
        }
    }

    let params = ModelParams {
        arch: meta.arch,
        n_speakers: meta.n_speakers,
        fe_params: fe,
        gen_params: gen,
        disc_params: disc,
    };
    let reference = nets::init_params(&params.arch, params.n_speakers, 0)?;
    for (expected, actual, label) in [
        (&reference.fe_params, &params.fe_params, "fe"),
        (&reference.gen_params, &params.gen_params, "gen"),
        (&reference.disc_params, &params.disc_params, "disc"),
    ] {
        if expected.len() != actual.len()
            || expected
                .iter()
                .zip(actual.iter())
                .any(|((en, et), (an, at))| en != an || et.shape() != at.shape())
        {
            return Err(TrainingError::Checkpoint(format!(
                "{label} parameters disagree with the declared architecture"
            )));
        }
    }

    Ok(Checkpoint {
        params,
        step: meta.step,
        rng: meta.rng,
        opt_d,
        opt_g,
        speakers: meta.speakers,
        mel: meta.mel,
        train_config: meta.train_config,
    })
}

// ---- training loop ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_cycle: f64,
    pub loss_g_total: f64,
    pub wall_ms: u64,
}

pub fn load_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| TrainingError::Checkpoint(format!("history line: {e}")))?,
        );
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub last_step: u64,
    pub reports: Vec<LossReport>,
}

/// Runs (or resumes) the training loop over a preprocessed run directory.
pub fn train(
    paths: &RunPaths,
    mel_config: &MelConfig,
    arch: &ArchConfig,
    config: &TrainConfig,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let sampler = PairSampler::load(paths, mel_config)?;
    let speakers = sampler.speaker_ids();

    let (mut params, mut opt_d, mut opt_g, mut rng, start_step) = match resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            if ckpt.params.arch != *arch {
                return Err(TrainingError::Checkpoint(
                    "checkpoint architecture disagrees with the run configuration".into(),
                ));
            }
            if ckpt.speakers != speakers {
                return Err(TrainingError::Checkpoint(
                    "checkpoint speaker set disagrees with the run directory".into(),
                ));
            }
            (ckpt.params, ckpt.opt_d, ckpt.opt_g, ckpt.rng, ckpt.step)
        }
        None => {
            let params = nets::init_params(arch, sampler.n_speakers(), config.seed)?;
            (
                params,
                AdamState::new(),
                AdamState::new(),
                ChaCha8Rng::seed_from_u64(config.seed),
                0,
            )
        }
    };

    std::fs::create_dir_all(paths.checkpoint_dir())?;
    let mut history = BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(paths.history_file())?,
    );

    let save = |params: &ModelParams,
                step: u64,
                rng: &ChaCha8Rng,
                opt_d: &AdamState,
                opt_g: &AdamState|
     -> Result<PathBuf> {
        let path = paths.checkpoint_file(step);
        save_checkpoint(
            &path,
            &Checkpoint {
                params: params.clone(),
                step,
                rng: rng.clone(),
                opt_d: opt_d.clone(),
                opt_g: opt_g.clone(),
                speakers: speakers.clone(),
                mel: mel_config.clone(),
                train_config: config.clone(),
            },
        )?;
        Ok(path)
    };

    let mut reports = Vec::new();
    let mut final_checkpoint = save(&params, start_step, &rng, &opt_d, &opt_g)?;
    for step in (start_step + 1)..=config.total_steps {
        let started = std::time::Instant::now();
        let mut attempts = 0u32;
        let report = loop {
            let batch = sampler.sample_batch(config.batch_size, &mut rng);
            match training_step(&mut params, &mut opt_d, &mut opt_g, &batch, config, &mut rng, step)
            {
                Ok(report) => break report,
                Err(TrainingError::NonFiniteLoss(detail)) if attempts < config.max_step_retries => {
                    attempts += 1;
                    eprintln!("step {step}: non-finite loss ({detail}), retry {attempts}");
                }
                Err(e) => return Err(e),
            }
        };
        let record = HistoryRecord {
            step,
            loss_d: report.loss_d,
            loss_g_adv: report.loss_g_adv,
            loss_cycle: report.loss_cycle,
            loss_g_total: report.loss_g_total,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| TrainingError::Checkpoint(format!("history encode: {e}")))?;
        writeln!(history, "{line}")?;
        history.flush()?;
        reports.push(report);

        if step % config.checkpoint_interval == 0 || step == config.total_steps {
            final_checkpoint = save(&params, step, &rng, &opt_d, &opt_g)?;
        }
    }

    Ok(TrainOutcome {
        final_checkpoint,
        last_step: config.total_steps.max(start_step),
        reports,
    })
}

// ---- gradient verification ----

pub mod verify {
    //! Central finite-difference checks of the three losses on a frozen
    //! batch, evaluated in double precision. Parameters stay in f32
    //! storage; probes measure the exactly-representable step actually
    //! taken so the comparison is not limited by storage precision.

    use super::*;

    #[derive(Debug, Clone)]
    pub struct ProbeResult {
        pub loss: &'static str,
        pub group: String,
        pub name: String,
        pub index: usize,
        pub analytic: f64,
        pub numeric: f64,
        pub rel_err: f64,
    }

    #[derive(Debug, Clone)]
    pub struct GradCheckReport {
        pub probes: Vec<ProbeResult>,
        pub max_rel_err: f64,
    }

    fn eval_d(params: &ModelParams, batch: &[TrainingPair], plan_seed: u64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(plan_seed);
        let (_, loss, _) = build_d_phase(&mut tape, params, batch, &mut rng);
        tape.scalar(loss.expect("gradcheck batch must produce patches"))
    }

    fn eval_g(
        params: &ModelParams,
        batch: &[TrainingPair],
        plans: &[PairPlans],
        lambda: f64,
        total: bool,
    ) -> f64 {
        let mut tape = Tape::<f64>::new();
        let (_, losses) = build_g_phase(&mut tape, params, batch, plans, lambda);
        if total {
            tape.scalar(losses.total)
        } else {
            tape.scalar(losses.adv.expect("gradcheck batch must produce fake patches"))
        }
    }

    /// Analytic gradients for the named groups of one phase.
    type GradMap = BTreeMap<(String, String), ArrayD<f64>>;

    fn analytic_for(
        vars_groups: &[(&str, &VarMap)],
        grads: &Grads<f64>,
    ) -> GradMap {
        let mut out = GradMap::new();
        for (group, vars) in vars_groups {
            for (name, &var) in vars.iter() {
                if let Some(g) = grads.get(var) {
                    out.insert((group.to_string(), name.clone()), g.clone());
                }
            }
        }
        out
    }

    struct ProbeTarget {
        group: String,
        name: String,
        index: usize,
    }

    fn pick_probes<R: Rng>(
        groups: &[(&str, &ParamGroup)],
        count: usize,
        rng: &mut R,
    ) -> Vec<ProbeTarget> {
        let mut flat: Vec<(String, String, usize)> = Vec::new();
        for (label, group) in groups {
            for (name, tensor) in group.iter() {
                flat.push((label.to_string(), name.clone(), tensor.len()));
            }
        }
        let total: usize = flat.iter().map(|f| f.2).sum();
        (0..count)
            .map(|_| {
                let mut pick = rng.gen_range(0..total);
                for (group, name, len) in &flat {
                    if pick < *len {
                        return ProbeTarget {
                            group: group.clone(),
                            name: name.clone(),
                            index: pick,
                        };
                    }
                    pick -= len;
                }
                unreachable!("probe index within total");
            })
            .collect()
    }

    fn group_of<'p>(params: &'p mut ModelParams, label: &str) -> &'p mut ParamGroup {
        match label {
            "fe" => &mut params.fe_params,
            "gen" => &mut params.gen_params,
            "disc" => &mut params.disc_params,
            other => panic!("unknown group {other}"),
        }
    }

    /// Probes one loss: central differences at f32-representable points
    /// against analytic tape gradients.
    fn probe_loss(
        label: &'static str,
        params: &ModelParams,
        targets: &[ProbeTarget],
        analytic: &GradMap,
        eval: &dyn Fn(&ModelParams) -> f64,
        h: f64,
    ) -> Vec<ProbeResult> {
        let mut results = Vec::new();
        for target in targets {
            let mut work = params.clone();
            let original = group_of(&mut work, &target.group)
                .get(&target.name)
                .unwrap()
                .as_slice()
                .unwrap()[target.index];
            let plus = ((original as f64) + h) as f32;
            let minus = ((original as f64) - h) as f32;
            let denom = plus as f64 - minus as f64;

            group_of(&mut work, &target.group)
                .get_mut(&target.name)
                .unwrap()
                .as_slice_mut()
                .unwrap()[target.index] = plus;
            let f_plus = eval(&work);
            group_of(&mut work, &target.group)
                .get_mut(&target.name)
                .unwrap()
                .as_slice_mut()
                .unwrap()[target.index] = minus;
            let f_minus = eval(&work);

            let numeric = (f_plus - f_minus) / denom;
            let a = analytic
                .get(&(target.group.clone(), target.name.clone()))
                .map(|g| g.as_slice().unwrap()[target.index])
                .unwrap_or(0.0);
            let rel_err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            results.push(ProbeResult {
                loss: label,
                group: target.group.clone(),
                name: target.name.clone(),
                index: target.index,
                analytic: a,
                numeric,
                rel_err,
            });
        }
        results
    }

    /// Verifies L_D (over D parameters) and L_G_adv / L_G_total (over FE
    /// and G parameters) against central finite differences.
    pub fn gradcheck_losses(
        params: &ModelParams,
        batch: &[TrainingPair],
        lambda: f64,
        plan_seed: u64,
        probes_per_loss: usize,
        h: f64,
        probe_seed: u64,
    ) -> GradCheckReport {
        // Shared plans: the D phase draws them, the G phase reuses them.
        let plans = {
            let mut tape = Tape::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(plan_seed);
            let (_, _, plans) = build_d_phase(&mut tape, params, batch, &mut rng);
            plans
        };

        let mut probe_rng = ChaCha8Rng::seed_from_u64(probe_seed);
        let mut probes = Vec::new();

        {
            let mut tape = Tape::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(plan_seed);
            let (vars, loss, _) = build_d_phase(&mut tape, params, batch, &mut rng);
            let grads = tape.backward(loss.expect("patches required"));
            let analytic = analytic_for(&[("disc", &vars.disc)], &grads);
            let targets =
                pick_probes(&[("disc", &params.disc_params)], probes_per_loss, &mut probe_rng);
            probes.extend(probe_loss(
                "loss_d",
                params,
                &targets,
                &analytic,
                &|p| eval_d(p, batch, plan_seed),
                h,
            ));
        }

        for (label, total) in [("loss_g_adv", false), ("loss_g_total", true)] {
            let mut tape = Tape::<f64>::new();
            let (vars, losses) = build_g_phase(&mut tape, params, batch, &plans, lambda);
            let root = if total { losses.total } else { losses.adv.expect("fake patches") };
            let grads = tape.backward(root);
            let analytic = analytic_for(&[("fe", &vars.fe), ("gen", &vars.gen)], &grads);
            let targets = pick_probes(
                &[("fe", &params.fe_params), ("gen", &params.gen_params)],
                probes_per_loss,
                &mut probe_rng,
            );
            probes.extend(probe_loss(
                label,
                params,
                &targets,
                &analytic,
                &|p| eval_g(p, batch, &plans, lambda, total),
                h,
            ));
        }

        let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
        GradCheckReport { probes, max_rel_err }
    }
}
