//! Feature extractor FE, generator G, and the triple-patch discriminator D.
//!
//! All forward passes are expressed on an autodiff [`Tape`] so training can
//! differentiate them; thin data-level wrappers run single inputs in f32 for
//! inference. The generator owns a downsampling path with the same layout as
//! FE; the target speaker enters as a tiled embedding at the bottleneck plus
//! time-collapsed f3/f4 summaries concatenated into the upsampling path.

use crate::autodiff::{Scalar, Tape, VarId};
use crate::dsp::ScaledMel;
use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_PATCH_THRESHOLD: f32 = 0.15;

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("inconsistent architecture: {0}")]
    InconsistentArch(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("no discriminator for patch width {0}")]
    UnknownWidth(usize),
}

pub type Result<T> = std::result::Result<T, NetsError>;

/// One downsampling unit: two conv layers, the second strided.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct UnitSpec {
    pub channels: usize,
    pub stride: (usize, usize),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum UpMode {
    SubPixel,
    ConvTranspose,
    Plain,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct UpUnitSpec {
    pub channels: usize,
    pub stride: (usize, usize),
    pub mode: UpMode,
}

/// Concatenate the summary of `fe_unit`'s output after up unit `after_up`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct SkipSpec {
    pub after_up: usize,
    pub fe_unit: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchConfig {
    pub n_mels: usize,
    pub frames: usize,
    pub kernel: usize,
    pub fe_units: Vec<UnitSpec>,
    pub up_units: Vec<UpUnitSpec>,
    pub skips: Vec<SkipSpec>,
    /// Leading FE (and generator-down) units that use gated convolutions.
    pub gated_fe_units: usize,
    /// Leading upsampling units that use gated convolutions.
    pub gated_up_units: usize,
    pub disc_channels: Vec<usize>,
    pub disc_patch_widths: Vec<usize>,
    pub patch_power_threshold: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            frames: 64,
            kernel: 3,
            fe_units: vec![
                UnitSpec { channels: 32, stride: (2, 2) },
                UnitSpec { channels: 64, stride: (2, 2) },
                UnitSpec { channels: 128, stride: (2, 2) },
                UnitSpec { channels: 1, stride: (2, 1) },
            ],
            up_units: vec![
                UpUnitSpec { channels: 64, stride: (2, 1), mode: UpMode::SubPixel },
                UpUnitSpec { channels: 128, stride: (2, 2), mode: UpMode::SubPixel },
                UpUnitSpec { channels: 64, stride: (2, 2), mode: UpMode::ConvTranspose },
                UpUnitSpec { channels: 32, stride: (2, 2), mode: UpMode::ConvTranspose },
                UpUnitSpec { channels: 32, stride: (1, 1), mode: UpMode::Plain },
            ],
            skips: vec![SkipSpec { after_up: 0, fe_unit: 3 }, SkipSpec { after_up: 1, fe_unit: 2 }],
            gated_fe_units: 2,
            gated_up_units: 2,
            disc_channels: vec![64, 128, 256, 512],
            disc_patch_widths: vec![32, 64, 128],
            patch_power_threshold: DEFAULT_PATCH_THRESHOLD,
        }
    }
}

impl ArchConfig {
    /// A deliberately tiny architecture (under 5k parameters) for
    /// double-precision gradient verification.
    pub fn miniature() -> Self {
        Self {
            n_mels: 8,
            frames: 8,
            kernel: 3,
            fe_units: vec![
                UnitSpec { channels: 4, stride: (2, 2) },
                UnitSpec { channels: 1, stride: (2, 2) },
            ],
            up_units: vec![
                UpUnitSpec { channels: 4, stride: (2, 1), mode: UpMode::SubPixel },
                UpUnitSpec { channels: 4, stride: (2, 2), mode: UpMode::ConvTranspose },
                UpUnitSpec { channels: 4, stride: (1, 2), mode: UpMode::SubPixel },
            ],
            skips: vec![SkipSpec { after_up: 0, fe_unit: 1 }, SkipSpec { after_up: 1, fe_unit: 0 }],
            gated_fe_units: 1,
            gated_up_units: 2,
            disc_channels: vec![4, 8],
            disc_patch_widths: vec![4, 8],
            patch_power_threshold: DEFAULT_PATCH_THRESHOLD,
        }
    }

    /// Real input geometry with skeleton channel counts: fast enough for
    /// integration tests and toy corpora while exercising every layer
    /// kind.
    pub fn slim() -> Self {
        Self {
            n_mels: 128,
            frames: 64,
            kernel: 3,
            fe_units: vec![
                UnitSpec { channels: 2, stride: (2, 2) },
                UnitSpec { channels: 2, stride: (2, 2) },
                UnitSpec { channels: 2, stride: (2, 2) },
                UnitSpec { channels: 1, stride: (2, 1) },
            ],
            up_units: vec![
                UpUnitSpec { channels: 2, stride: (2, 1), mode: UpMode::SubPixel },
                UpUnitSpec { channels: 2, stride: (2, 2), mode: UpMode::SubPixel },
                UpUnitSpec { channels: 2, stride: (2, 2), mode: UpMode::ConvTranspose },
                UpUnitSpec { channels: 2, stride: (2, 2), mode: UpMode::ConvTranspose },
            ],
            skips: vec![SkipSpec { after_up: 0, fe_unit: 3 }, SkipSpec { after_up: 1, fe_unit: 2 }],
            gated_fe_units: 2,
            gated_up_units: 2,
            disc_channels: vec![2, 2, 2, 2],
            disc_patch_widths: vec![32, 64, 128],
            patch_power_threshold: DEFAULT_PATCH_THRESHOLD,
        }
    }

    /// Output spatial dims of each FE unit starting from (n_mels, frames).
    pub fn fe_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.fe_units.len());
        let (mut h, mut w) = (self.n_mels, self.frames);
        for u in &self.fe_units {
            h /= u.stride.0;
            w /= u.stride.1;
            dims.push((h, w));
        }
        dims
    }

    pub fn bottleneck(&self) -> (usize, usize) {
        *self.fe_dims().last().expect("fe_units validated non-empty")
    }

    /// Output spatial dims of each upsampling unit.
    pub fn up_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.up_units.len());
        let (mut h, mut w) = self.bottleneck();
        for u in &self.up_units {
            h *= u.stride.0;
            w *= u.stride.1;
            dims.push((h, w));
        }
        dims
    }

    pub fn fe_in_ch(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else {
            self.fe_units[i - 1].channels
        }
    }

    /// Channels appended by skip connections after up unit `i`.
    pub fn skip_ch_after(&self, i: usize) -> usize {
        self.skips
            .iter()
            .filter(|s| s.after_up == i)
            .map(|s| self.fe_units[s.fe_unit].channels)
            .sum()
    }

    pub fn up_in_ch(&self, i: usize) -> usize {
        if i == 0 {
            // Bottleneck: 1 content channel + 1 tiled embedding channel.
            2
        } else {
            self.up_units[i - 1].channels + self.skip_ch_after(i - 1)
        }
    }

    /// Total downsampling factor of each discriminator CNN.
    pub fn disc_down_factor(&self) -> usize {
        1 << self.disc_channels.len()
    }

    pub fn disc_fc_in(&self, width: usize) -> usize {
        let f = self.disc_down_factor();
        self.disc_channels.last().unwrap() * (self.n_mels / f) * (width / f)
    }

    /// Product of time strides across FE; generator inputs must have widths
    /// divisible by this.
    pub fn time_stride_product(&self) -> usize {
        self.fe_units.iter().map(|u| u.stride.1).product()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(NetsError::InconsistentArch(msg));
        if self.n_mels == 0 || self.frames == 0 {
            return fail("zero input dims".into());
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return fail(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.fe_units.is_empty() || self.up_units.is_empty() {
            return fail("need at least one FE unit and one upsampling unit".into());
        }
        if self.fe_units.last().unwrap().channels != 1 {
            return fail("final FE unit must emit a single channel".into());
        }
        if self.gated_fe_units > self.fe_units.len() || self.gated_up_units > self.up_units.len() {
            return fail("gated unit count exceeds unit count".into());
        }

        let (mut h, mut w) = (self.n_mels, self.frames);
        for (i, u) in self.fe_units.iter().enumerate() {
            if u.channels == 0 || u.stride.0 == 0 || u.stride.1 == 0 {
                return fail(format!("FE unit {i} has zero channel count or stride"));
            }
            if h % u.stride.0 != 0 || w % u.stride.1 != 0 {
                return fail(format!(
                    "FE unit {i} stride {:?} does not divide dims {h}x{w}",
                    u.stride
                ));
            }
            h /= u.stride.0;
            w /= u.stride.1;
        }
        let bottleneck = (h, w);

        for (i, u) in self.up_units.iter().enumerate() {
            if u.channels == 0 || u.stride.0 == 0 || u.stride.1 == 0 {
                return fail(format!("up unit {i} has zero channel count or stride"));
            }
            if matches!(u.mode, UpMode::Plain) && u.stride != (1, 1) {
                return fail(format!("up unit {i} is Plain but has stride {:?}", u.stride));
            }
            h *= u.stride.0;
            w *= u.stride.1;
        }
        if (h, w) != (self.n_mels, self.frames) {
            return fail(format!(
                "upsampling path ends at {h}x{w}, expected {}x{} \
                 (downsampling products must match upsampling products)",
                self.n_mels, self.frames
            ));
        }

        let fe_dims = {
            let mut dims = Vec::new();
            let (mut h, mut w) = (self.n_mels, self.frames);
            for u in &self.fe_units {
                h /= u.stride.0;
                w /= u.stride.1;
                dims.push((h, w));
            }
            dims
        };
        let mut up_dims = Vec::new();
        {
            let (mut h, mut w) = bottleneck;
            for u in &self.up_units {
                h *= u.stride.0;
                w *= u.stride.1;
                up_dims.push((h, w));
            }
        }
        for s in &self.skips {
            if s.after_up >= self.up_units.len() {
                return fail(format!("skip after_up {} out of range", s.after_up));
            }
            if s.fe_unit >= self.fe_units.len() {
                return fail(format!("skip fe_unit {} out of range", s.fe_unit));
            }
            let fe_h = fe_dims[s.fe_unit].0;
            let up_h = up_dims[s.after_up].0;
            if up_h % fe_h != 0 {
                return fail(format!(
                    "skip from FE unit {} (height {fe_h}) cannot tile up unit {} output \
                     (height {up_h})",
                    s.fe_unit, s.after_up
                ));
            }
        }

        if self.disc_channels.is_empty() || self.disc_patch_widths.is_empty() {
            return fail("discriminator needs channels and patch widths".into());
        }
        let f = self.disc_down_factor();
        if self.n_mels % f != 0 {
            return fail(format!("n_mels {} not divisible by disc factor {f}", self.n_mels));
        }
        for &w in &self.disc_patch_widths {
            if w == 0 || w % f != 0 {
                return fail(format!("patch width {w} not divisible by disc factor {f}"));
            }
        }
        let mut sorted = self.disc_patch_widths.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.disc_patch_widths.len() {
            return fail("duplicate patch widths".into());
        }
        if !(0.0..=1.0).contains(&self.patch_power_threshold) {
            return fail(format!(
                "patch power threshold {} outside [0, 1]",
                self.patch_power_threshold
            ));
        }
        Ok(())
    }
}

/// Target speaker representation produced by FE: the bottleneck embedding
/// plus the time-collapsed output summary of every FE unit. `f3`/`f4` name
/// the penultimate and final summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    /// `[1, bottleneck_h, bottleneck_w]` (CHW).
    pub values: Array3<f32>,
    /// Per-FE-unit `[channels, height, 1]` time-mean summaries.
    pub unit_summaries: Vec<Array3<f32>>,
}

impl SpeakerEmbedding {
    pub fn f4_summary(&self) -> &Array3<f32> {
        self.unit_summaries.last().expect("at least one FE unit")
    }

    pub fn f3_summary(&self) -> &Array3<f32> {
        &self.unit_summaries[self.unit_summaries.len().saturating_sub(2)]
    }
}

/// Softmax output of the discriminator: index `2i` is real-s_i, `2i+1` is
/// fake-s_i.
#[derive(Debug, Clone)]
pub struct ClassProbabilities {
    pub probs: Vec<f32>,
}

impl ClassProbabilities {
    pub fn n_speakers(&self) -> usize {
        self.probs.len() / 2
    }
}

pub type ParamGroup = BTreeMap<String, ArrayD<f32>>;

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub n_speakers: usize,
    pub fe_params: ParamGroup,
    pub gen_params: ParamGroup,
    pub disc_params: ParamGroup,
}

/// Ordered description of one tensor to create at init time.
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    std: f64,
}

fn conv_specs(
    out: &mut Vec<ParamSpec>,
    weight_name: &str,
    shape: Vec<usize>,
    fan_in: usize,
    linear: bool,
    transposed: bool,
) {
    let std = if linear { (1.0 / fan_in as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
    // Transposed conv weights are [in, out, kh, kw]; bias covers out.
    let bias_len = if transposed { shape[1] } else { shape[0] };
    let bias_name = format!("{}b", &weight_name[..weight_name.len() - 1]);
    out.push(ParamSpec { name: weight_name.to_string(), shape, std });
    out.push(ParamSpec { name: bias_name, shape: vec![bias_len], std: 0.0 });
}

/// Emits weight+bias specs for one two-layer unit under `prefix`.
/// `up` carries the upsampling mode for the second layer.
fn unit_specs(
    out: &mut Vec<ParamSpec>,
    prefix: &str,
    k: usize,
    in_ch: usize,
    out_ch: usize,
    gated: bool,
    final_linear: bool,
    up: Option<&UpUnitSpec>,
) {
    let mid = in_ch.max(out_ch);
    conv_specs(out, &format!("{prefix}.l1.w"), vec![mid, in_ch, k, k], in_ch * k * k, false, false);
    if gated {
        conv_specs(
            out,
            &format!("{prefix}.l1g.w"),
            vec![mid, in_ch, k, k],
            in_ch * k * k,
            false,
            false,
        );
    }
    let fan2 = mid * k * k;
    match up.map(|u| u.mode) {
        Some(UpMode::SubPixel) => {
            let u = up.unwrap();
            let ch = out_ch * u.stride.0 * u.stride.1;
            conv_specs(out, &format!("{prefix}.l2.w"), vec![ch, mid, k, k], fan2, false, false);
            if gated {
                conv_specs(out, &format!("{prefix}.l2g.w"), vec![ch, mid, k, k], fan2, false, false);
            }
        }
        Some(UpMode::ConvTranspose) => {
            conv_specs(out, &format!("{prefix}.l2t.w"), vec![mid, out_ch, k, k], fan2, false, true);
            if gated {
                conv_specs(
                    out,
                    &format!("{prefix}.l2gt.w"),
                    vec![mid, out_ch, k, k],
                    fan2,
                    false,
                    true,
                );
            }
        }
        Some(UpMode::Plain) | None => {
            conv_specs(
                out,
                &format!("{prefix}.l2.w"),
                vec![out_ch, mid, k, k],
                fan2,
                final_linear,
                false,
            );
            if gated && !final_linear {
                conv_specs(
                    out,
                    &format!("{prefix}.l2g.w"),
                    vec![out_ch, mid, k, k],
                    fan2,
                    false,
                    false,
                );
            }
        }
    }
}

fn fe_like_specs(arch: &ArchConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for (i, u) in arch.fe_units.iter().enumerate() {
        let is_final = i == arch.fe_units.len() - 1;
        unit_specs(
            &mut specs,
            &format!("u{i}"),
            arch.kernel,
            arch.fe_in_ch(i),
            u.channels,
            i < arch.gated_fe_units && !is_final,
            is_final,
            None,
        );
    }
    specs
}

fn gen_specs(arch: &ArchConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for s in fe_like_specs(arch) {
        specs.push(ParamSpec { name: format!("d.{}", s.name), shape: s.shape, std: s.std });
    }
    for (i, u) in arch.up_units.iter().enumerate() {
        let mut unit = Vec::new();
        unit_specs(
            &mut unit,
            &format!("u.u{i}"),
            arch.kernel,
            arch.up_in_ch(i),
            u.channels,
            i < arch.gated_up_units,
            false,
            Some(u),
        );
        specs.extend(unit);
    }
    let k = arch.kernel;
    let out_in =
        arch.up_units.last().unwrap().channels + arch.skip_ch_after(arch.up_units.len() - 1);
    conv_specs(&mut specs, "out.w", vec![1, out_in, k, k], out_in * k * k, true, false);
    specs
}

fn disc_specs(arch: &ArchConfig, n_speakers: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let k = arch.kernel;
    for &w in &arch.disc_patch_widths {
        let mut prev = 1;
        for (i, &ch) in arch.disc_channels.iter().enumerate() {
            conv_specs(
                &mut specs,
                &format!("p{w}.c{i}.w"),
                vec![ch, prev, k, k],
                prev * k * k,
                false,
                false,
            );
            prev = ch;
        }
        let fc_in = arch.disc_fc_in(w);
        specs.push(ParamSpec {
            name: format!("p{w}.fc.w"),
            shape: vec![fc_in, 2 * n_speakers],
            std: (1.0 / fc_in as f64).sqrt(),
        });
        specs.push(ParamSpec {
            name: format!("p{w}.fc.b"),
            shape: vec![2 * n_speakers],
            std: 0.0,
        });
    }
    specs
}

fn materialize(specs: Vec<ParamSpec>, rng: &mut ChaCha8Rng) -> ParamGroup {
    let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
    let mut group = ParamGroup::new();
    for spec in specs {
        let data = if spec.std == 0.0 {
            ArrayD::zeros(IxDyn(&spec.shape))
        } else {
            ArrayD::from_shape_fn(IxDyn(&spec.shape), |_| {
                (normal.sample(rng) * spec.std) as f32
            })
        };
        let prior = group.insert(spec.name.clone(), data);
        assert!(prior.is_none(), "duplicate parameter name {}", spec.name);
    }
    group
}

/// Builds fan-in-scaled zero-mean parameters, deterministic for a fixed
/// seed.
pub fn init_params(arch: &ArchConfig, n_speakers: usize, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    if n_speakers < 2 {
        return Err(NetsError::InconsistentArch(format!(
            "need at least 2 speakers, got {n_speakers}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fe_params = materialize(fe_like_specs(arch), &mut rng);
    let gen_params = materialize(gen_specs(arch), &mut rng);
    let disc_params = materialize(disc_specs(arch, n_speakers), &mut rng);
    Ok(ModelParams { arch: arch.clone(), n_speakers, fe_params, gen_params, disc_params })
}

impl ModelParams {
    /// SHA-256 over group names, tensor names, shapes, and little-endian
    /// f32 payloads; stable identifier for determinism checks.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (label, group) in
            [("fe", &self.fe_params), ("gen", &self.gen_params), ("disc", &self.disc_params)]
        {
            hasher.update(label.as_bytes());
            for (name, tensor) in group {
                hasher.update(name.as_bytes());
                for d in tensor.shape() {
                    hasher.update((*d as u64).to_le_bytes());
                }
                for v in tensor.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        format!("{:x}", hasher.finalize())
    }

    pub fn n_parameters(&self) -> usize {
        [&self.fe_params, &self.gen_params, &self.disc_params]
            .iter()
            .flat_map(|g| g.values())
            .map(|t| t.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        [&self.fe_params, &self.gen_params, &self.disc_params]
            .iter()
            .flat_map(|g| g.values())
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

// ---- tape-level forward passes ----

/// Leaf ids for one parameter group, keyed by tensor name.
pub type VarMap = BTreeMap<String, VarId>;

/// Registers every tensor in a group as a tape leaf (converted to `F`).
pub fn register_group<F: Scalar>(tape: &mut Tape<F>, group: &ParamGroup) -> VarMap {
    group
        .iter()
        .map(|(name, tensor)| {
            let cast = tensor.mapv(|v| F::from_f64(v as f64));
            (name.clone(), tape.leaf(cast))
        })
        .collect()
}

fn var(vars: &VarMap, name: &str) -> VarId {
    *vars.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn pad_of(k: usize) -> (usize, usize) {
    (k / 2, k / 2)
}

/// conv + instance norm + leaky relu, or the gated variant
/// `IN(conv_a) * sigmoid(IN(conv_b))`.
#[allow(clippy::too_many_arguments)]
fn conv_block<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &VarMap,
    name: &str,
    gate_name: Option<&str>,
    x: VarId,
    stride: (usize, usize),
    k: usize,
    linear: bool,
) -> VarId {
    let w = var(vars, &format!("{name}.w"));
    let b = var(vars, &format!("{name}.b"));
    let a = tape.conv2d(x, w, b, stride, pad_of(k));
    if linear {
        return a;
    }
    let eps = F::from_f64(INSTANCE_NORM_EPS);
    let a = tape.instance_norm(a, eps);
    match gate_name {
        Some(g) => {
            let gw = var(vars, &format!("{g}.w"));
            let gb = var(vars, &format!("{g}.b"));
            let gv = tape.conv2d(x, gw, gb, stride, pad_of(k));
            let gv = tape.instance_norm(gv, eps);
            let gv = tape.sigmoid(gv);
            tape.mul(a, gv)
        }
        None => tape.leaky_relu(a, F::from_f64(LEAKY_SLOPE)),
    }
}

/// One FE-style downsampling unit under `prefix`.
fn down_unit<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &VarMap,
    prefix: &str,
    x: VarId,
    stride: (usize, usize),
    k: usize,
    gated: bool,
    final_linear: bool,
) -> VarId {
    let g1 = gated.then(|| format!("{prefix}.l1g"));
    let h = conv_block(tape, vars, &format!("{prefix}.l1"), g1.as_deref(), x, (1, 1), k, false);
    let g2 = gated.then(|| format!("{prefix}.l2g"));
    conv_block(
        tape,
        vars,
        &format!("{prefix}.l2"),
        g2.as_deref(),
        h,
        stride,
        k,
        final_linear,
    )
}

pub struct FeTapeOut {
    /// Raw output of each FE unit, `[n, c, h, w]`.
    pub unit_outputs: Vec<VarId>,
    /// Time-mean summaries of each unit output, `[n, c, h, 1]`.
    pub summaries: Vec<VarId>,
    /// Final unit output (the embedding map before any pooling).
    pub embedding: VarId,
}

/// Runs FE (or the generator's downsampling clone when `prefix` is `d.`)
/// over `x: [n, 1, h, w]`.
pub fn fe_apply<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &VarMap,
    arch: &ArchConfig,
    prefix: &str,
    x: VarId,
) -> FeTapeOut {
    let mut cur = x;
    let mut unit_outputs = Vec::with_capacity(arch.fe_units.len());
    let mut summaries = Vec::with_capacity(arch.fe_units.len());
    for (i, u) in arch.fe_units.iter().enumerate() {
        let is_final = i == arch.fe_units.len() - 1;
        cur = down_unit(
            tape,
            vars,
            &format!("{prefix}u{i}"),
            cur,
            u.stride,
            arch.kernel,
            i < arch.gated_fe_units && !is_final,
            is_final,
        );
        unit_outputs.push(cur);
        summaries.push(tape.mean_w(cur));
    }
    FeTapeOut { embedding: cur, unit_outputs, summaries }
}

/// Runs the generator over `source: [n, 1, h, w]` conditioned on the target
/// embedding `emb: [n, 1, bh, bw]` and per-FE-unit summaries
/// (`[n, c, fh, 1]`, one per FE unit, from the target speaker).
pub fn gen_apply<F: Scalar>(
    tape: &mut Tape<F>,
    gen_vars: &VarMap,
    arch: &ArchConfig,
    source: VarId,
    emb: VarId,
    summaries: &[VarId],
) -> VarId {
    let down = fe_apply(tape, gen_vars, arch, "d.", source);
    let content = down.embedding;
    let wb = tape.value(content).shape()[3];
    let emb_tiled = tape.tile_w(emb, wb);
    let mut cur = tape.concat_ch(content, emb_tiled);

    for (i, u) in arch.up_units.iter().enumerate() {
        let prefix = format!("u.u{i}");
        let gated = i < arch.gated_up_units;
        let g1 = gated.then(|| format!("{prefix}.l1g"));
        let h = conv_block(tape, gen_vars, &format!("{prefix}.l1"), g1.as_deref(), cur, (1, 1), arch.kernel, false);

        cur = match u.mode {
            UpMode::SubPixel => {
                let name = format!("{prefix}.l2");
                let w = var(gen_vars, &format!("{name}.w"));
                let b = var(gen_vars, &format!("{name}.b"));
                let eps = F::from_f64(INSTANCE_NORM_EPS);
                let a = tape.conv2d(h, w, b, (1, 1), pad_of(arch.kernel));
                let a = tape.pixel_shuffle(a, u.stride.0, u.stride.1);
                let a = tape.instance_norm(a, eps);
                if gated {
                    let gw = var(gen_vars, &format!("{prefix}.l2g.w"));
                    let gb = var(gen_vars, &format!("{prefix}.l2g.b"));
                    let gv = tape.conv2d(h, gw, gb, (1, 1), pad_of(arch.kernel));
                    let gv = tape.pixel_shuffle(gv, u.stride.0, u.stride.1);
                    let gv = tape.instance_norm(gv, eps);
                    let gv = tape.sigmoid(gv);
                    tape.mul(a, gv)
                } else {
                    tape.leaky_relu(a, F::from_f64(LEAKY_SLOPE))
                }
            }
            UpMode::ConvTranspose => {
                let shape = tape.value(h).shape().to_vec();
                let out_hw = (shape[2] * u.stride.0, shape[3] * u.stride.1);
                let eps = F::from_f64(INSTANCE_NORM_EPS);
                let w = var(gen_vars, &format!("{prefix}.l2t.w"));
                let b = var(gen_vars, &format!("{prefix}.l2t.b"));
                let a = tape.conv_transpose2d(h, w, b, u.stride, pad_of(arch.kernel), out_hw);
                let a = tape.instance_norm(a, eps);
                if gated {
                    let gw = var(gen_vars, &format!("{prefix}.l2gt.w"));
                    let gb = var(gen_vars, &format!("{prefix}.l2gt.b"));
                    let gv =
                        tape.conv_transpose2d(h, gw, gb, u.stride, pad_of(arch.kernel), out_hw);
                    let gv = tape.instance_norm(gv, eps);
                    let gv = tape.sigmoid(gv);
                    tape.mul(a, gv)
                } else {
                    tape.leaky_relu(a, F::from_f64(LEAKY_SLOPE))
                }
            }
            UpMode::Plain => {
                let g2 = gated.then(|| format!("{prefix}.l2g"));
                conv_block(
                    tape,
                    gen_vars,
                    &format!("{prefix}.l2"),
                    g2.as_deref(),
                    h,
                    (1, 1),
                    arch.kernel,
                    false,
                )
            }
        };

        for s in arch.skips.iter().filter(|s| s.after_up == i) {
            let summary = summaries[s.fe_unit];
            let s_shape = tape.value(summary).shape().to_vec();
            let c_shape = tape.value(cur).shape().to_vec();
            let rep = tape.repeat_hw(summary, c_shape[2] / s_shape[2], c_shape[3]);
            cur = tape.concat_ch(cur, rep);
        }
    }

    let w = var(gen_vars, "out.w");
    let b = var(gen_vars, "out.b");
    let out = tape.conv2d(cur, w, b, (1, 1), pad_of(arch.kernel));
    tape.tanh(out)
}

/// Discriminator logits `[n, 2N]` for a full-height patch of the given
/// width. Panics if the width has no CNN; public callers validate first.
pub fn disc_apply<F: Scalar>(
    tape: &mut Tape<F>,
    disc_vars: &VarMap,
    arch: &ArchConfig,
    patch: VarId,
    width: usize,
) -> VarId {
    assert!(
        arch.disc_patch_widths.contains(&width),
        "no discriminator CNN for width {width}"
    );
    let eps = F::from_f64(INSTANCE_NORM_EPS);
    let mut cur = patch;
    for i in 0..arch.disc_channels.len() {
        let w = var(disc_vars, &format!("p{width}.c{i}.w"));
        let b = var(disc_vars, &format!("p{width}.c{i}.b"));
        cur = tape.conv2d(cur, w, b, (2, 2), pad_of(arch.kernel));
        cur = tape.instance_norm(cur, eps);
        cur = tape.leaky_relu(cur, F::from_f64(LEAKY_SLOPE));
    }
    let flat = tape.flatten(cur);
    let w = var(disc_vars, &format!("p{width}.fc.w"));
    let b = var(disc_vars, &format!("p{width}.fc.b"));
    tape.linear(flat, w, b)
}

// ---- data-level wrappers ----

/// Lifts a `[h, w]` matrix into a `[1, 1, h, w]` tape leaf.
pub fn window_to_leaf<F: Scalar>(tape: &mut Tape<F>, values: &Array2<f32>) -> VarId {
    let (h, w) = values.dim();
    let arr = Array4::from_shape_fn((1, 1, h, w), |(_, _, i, j)| {
        F::from_f64(values[[i, j]] as f64)
    });
    tape.leaf(arr.into_dyn())
}

fn to_f32_3d(values: &ArrayD<f32>) -> Array3<f32> {
    // Drops the leading batch axis of a [1, c, h, w] tensor.
    let v = values.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (_, c, h, w) = v.dim();
    Array3::from_shape_fn((c, h, w), |(a, b, d)| v[[0, a, b, d]])
}

/// FE on a single training-sized window, producing the full
/// [`SpeakerEmbedding`] (embedding map plus unit summaries).
pub fn fe_forward(params: &ModelParams, window: &ScaledMel) -> Result<SpeakerEmbedding> {
    let arch = &params.arch;
    if window.values.dim() != (arch.n_mels, arch.frames) {
        return Err(NetsError::ShapeMismatch {
            expected: format!("{}x{}", arch.n_mels, arch.frames),
            got: format!("{}x{}", window.values.nrows(), window.values.ncols()),
        });
    }
    let mut tape = Tape::<f32>::new();
    let vars = register_group(&mut tape, &params.fe_params);
    let x = window_to_leaf(&mut tape, &window.values);
    let out = fe_apply(&mut tape, &vars, arch, "", x);
    let values32 = tape.value(out.embedding).mapv(|v| v);
    let summaries = out
        .summaries
        .iter()
        .map(|&s| to_f32_3d(&tape.value(s).mapv(|v| v)))
        .collect();
    Ok(SpeakerEmbedding { values: to_f32_3d(&values32), unit_summaries: summaries })
}

/// Generator inference on a scaled window (any width divisible by the FE
/// time-stride product), conditioned on a stored speaker embedding.
pub fn gen_forward(
    params: &ModelParams,
    source: &ScaledMel,
    emb: &SpeakerEmbedding,
) -> Result<ScaledMel> {
    let arch = &params.arch;
    let (h, w) = source.values.dim();
    let tsp = arch.time_stride_product();
    if h != arch.n_mels || w == 0 || w % tsp != 0 {
        return Err(NetsError::ShapeMismatch {
            expected: format!("{}x(multiple of {tsp})", arch.n_mels),
            got: format!("{h}x{w}"),
        });
    }
    let (bh, bw) = arch.bottleneck();
    if emb.values.dim() != (1, bh, bw) {
        return Err(NetsError::ShapeMismatch {
            expected: format!("1x{bh}x{bw}"),
            got: format!("{:?}", emb.values.dim()),
        });
    }
    if emb.unit_summaries.len() != arch.fe_units.len() {
        return Err(NetsError::ShapeMismatch {
            expected: format!("{} unit summaries", arch.fe_units.len()),
            got: format!("{}", emb.unit_summaries.len()),
        });
    }

    let mut tape = Tape::<f32>::new();
    let vars = register_group(&mut tape, &params.gen_params);
    let x = window_to_leaf(&mut tape, &source.values);
    let emb_leaf = {
        let (c, eh, ew) = emb.values.dim();
        let arr =
            Array4::from_shape_fn((1, c, eh, ew), |(_, a, b, d)| emb.values[[a, b, d]]);
        tape.leaf(arr.into_dyn())
    };
    let summary_leaves: Vec<VarId> = emb
        .unit_summaries
        .iter()
        .map(|s| {
            let (c, sh, sw) = s.dim();
            let arr = Array4::from_shape_fn((1, c, sh, sw), |(_, a, b, d)| s[[a, b, d]]);
            tape.leaf(arr.into_dyn())
        })
        .collect();
    let out = gen_apply(&mut tape, &vars, arch, x, emb_leaf, &summary_leaves);
    let ov = tape.value(out);
    let o4 = ov.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let values = Array2::from_shape_fn((h, w), |(i, j)| o4[[0, 0, i, j]]);
    Ok(ScaledMel {
        values,
        speaker_stats_id: "generated".into(),
        config: source.config.clone(),
    })
}

/// Discriminator probabilities for one full-height patch.
pub fn disc_forward(
    params: &ModelParams,
    patch: &Array2<f32>,
    width: usize,
) -> Result<ClassProbabilities> {
    let arch = &params.arch;
    if !arch.disc_patch_widths.contains(&width) {
        return Err(NetsError::UnknownWidth(width));
    }
    if patch.dim() != (arch.n_mels, width) {
        return Err(NetsError::ShapeMismatch {
            expected: format!("{}x{width}", arch.n_mels),
            got: format!("{}x{}", patch.nrows(), patch.ncols()),
        });
    }
    let mut tape = Tape::<f32>::new();
    let vars = register_group(&mut tape, &params.disc_params);
    let x = window_to_leaf(&mut tape, patch);
    let logits = disc_apply(&mut tape, &vars, arch, x, width);
    let lv = tape.value(logits);
    let row: Vec<f32> = lv.iter().cloned().collect();
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
    let denom: f32 = exps.iter().sum();
    Ok(ClassProbabilities { probs: exps.iter().map(|e| e / denom).collect() })
}

// ---- patch planning ----

/// A chosen crop: full height, `width` columns starting at `offset` into
/// the (possibly reflection-padded) window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPlan {
    pub width: usize,
    pub offset: usize,
}

/// Symmetric reflection along the width axis out to `target` columns,
/// matching the tape-level `reflect_pad_w`.
pub fn reflect_pad_width(values: &Array2<f32>, target: usize) -> Array2<f32> {
    let (h, w) = values.dim();
    assert!(target >= w);
    Array2::from_shape_fn((h, target), |(i, j)| {
        let m = j % (2 * w);
        let src = if m < w { m } else { 2 * w - 1 - m };
        values[[i, src]]
    })
}

/// Draws one random crop per width and keeps it only when its mean power
/// `(value + 1) / 2` reaches the threshold. The RNG is consumed for every
/// width, kept or not, so downstream draws stay aligned.
pub fn plan_patches<R: Rng>(
    values: &Array2<f32>,
    widths: &[usize],
    threshold: f32,
    rng: &mut R,
) -> Vec<PatchPlan> {
    let (h, w_total) = values.dim();
    let mut plans = Vec::new();
    for &width in widths {
        assert!(width <= w_total, "plan_patches expects a pre-padded window");
        let offset = rng.gen_range(0..=w_total - width);
        let mut acc = 0.0f64;
        for i in 0..h {
            for j in offset..offset + width {
                acc += ((values[[i, j]] + 1.0) * 0.5) as f64;
            }
        }
        let power = (acc / (h * width) as f64) as f32;
        if power >= threshold {
            plans.push(PatchPlan { width, offset });
        }
    }
    plans
}

/// Random full-height crops of one window, one per configured width,
/// silence-gated. Windows narrower than a width are reflection-padded.
pub fn extract_patches<R: Rng>(
    window: &ScaledMel,
    arch: &ArchConfig,
    rng: &mut R,
) -> Vec<(Array2<f32>, usize)> {
    let max_width = *arch.disc_patch_widths.iter().max().unwrap();
    let padded;
    let values = if window.frames() < max_width {
        padded = reflect_pad_width(&window.values, max_width);
        &padded
    } else {
        &window.values
    };
    let plans = plan_patches(values, &arch.disc_patch_widths, arch.patch_power_threshold, rng);
    plans
        .into_iter()
        .map(|p| {
            let patch = values
                .slice(ndarray::s![.., p.offset..p.offset + p.width])
                .to_owned();
            (patch, p.width)
        })
        .collect()
}

pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}
