//! Acceptance suite: one test per criterion, each printing a summary line
//! with its pinned tolerances. Criteria 6 and 7 share one trained toy
//! fixture built the first time either test runs.

mod common;

use common::{synth_utterance, write_corpus, write_speaker_dir, HELD_OUT, TRAIN_SPEAKERS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;
use vc::convert::{self, ConvertConfig};
use vc::dataset::{self, RunPaths};
use vc::dsp::{self, LogMel, MelConfig, ScaledMel, SpeakerScalingStats};
use vc::eval::{
    self, chance_baseline, CellKey, ConversionRecord, Gender, Group, SidConfig, UtteranceScorer,
    DEFAULT_K_LIST,
};
use vc::nets::{self, ArchConfig, SpeakerEmbedding};
use vc::training::{self, Checkpoint, TrainConfig, TrainingLabels};

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_MIN_PROBES: usize = 100;
const LOG2N_TOL: f64 = 1e-9;
const SCALE_TOL: f32 = 1e-6;
const TOY_TRAIN_STEPS: u64 = 1400;
const TOY_BATCH: usize = 2;
const TOY_SID_TOP1_MIN: f64 = 0.60;
const CHANCE_ROW: [(usize, f64); 5] = [(1, 0.3), (3, 1.0), (5, 1.7), (10, 3.4), (20, 6.8)];
const CALIBRATION_TOL_PP: f64 = 2.0;

fn sha256_file(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    format!("{:x}", Sha256::digest(&bytes))
}

fn pattern_window(arch: &ArchConfig, seed: f32) -> ScaledMel {
    ScaledMel {
        values: Array2::from_shape_fn((arch.n_mels, arch.frames), |(i, j)| {
            ((i as f32 * 0.31 + j as f32 * 0.17 + seed).sin()) * 0.6
        }),
        speaker_stats_id: "pattern".into(),
        config: MelConfig::default(),
    }
}

fn flat_embedding(e: &SpeakerEmbedding) -> Vec<f32> {
    let mut flat: Vec<f32> = e.values.iter().copied().collect();
    for s in &e.unit_summaries {
        flat.extend(s.iter().copied());
    }
    flat
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-30)
}

// ---- shared trained fixture (criteria 6 and 7) ----

struct ToyFixture {
    _tmp: tempfile::TempDir,
    paths: RunPaths,
    ckpt_path: PathBuf,
    ckpt: Checkpoint,
    held_out_wavs: Vec<PathBuf>,
    first_cycle: f64,
    tail_cycle: f64,
    train_secs: f64,
}

static FIXTURE: OnceLock<ToyFixture> = OnceLock::new();

/// Real geometry with just enough width for the toy corpus to overfit.
fn toy_arch() -> ArchConfig {
    let mut arch = ArchConfig::slim();
    for u in &mut arch.fe_units[..3] {
        u.channels = 4;
    }
    for u in &mut arch.up_units {
        u.channels = 4;
    }
    for c in &mut arch.disc_channels {
        *c = 4;
    }
    arch
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: TOY_BATCH,
        total_steps: TOY_TRAIN_STEPS,
        checkpoint_interval: TOY_TRAIN_STEPS,
        seed: 0,
        // The toy fixture trades the full-scale schedule for a fast
        // overfit: stronger generator steps, gentler discriminator.
        lr_g: 1e-3,
        lr_d: 1e-4,
        ..TrainConfig::default()
    }
}

fn fixture() -> &'static ToyFixture {
    FIXTURE.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let mel = MelConfig::default();
        let corpus = tmp.path().join("corpus");
        write_corpus(&corpus, &TRAIN_SPEAKERS, 6, mel.sample_rate);
        let held_out_wavs =
            write_speaker_dir(&tmp.path().join("held"), &HELD_OUT, 6, mel.sample_rate);

        let paths = RunPaths::new(tmp.path().join("run"));
        dataset::preprocess(&corpus, &paths, &mel, 60.0, 0.999, 20, 0).unwrap();

        let start = Instant::now();
        let outcome =
            training::train(&paths, &mel, &toy_arch(), &toy_train_config(), None).unwrap();
        let train_secs = start.elapsed().as_secs_f64();

        let first_cycle = outcome.reports.first().unwrap().loss_cycle;
        // Oscillation-tolerant endpoint: mean over the final 100 steps.
        let tail: Vec<f64> =
            outcome.reports.iter().rev().take(100).map(|r| r.loss_cycle).collect();
        let tail_cycle = tail.iter().sum::<f64>() / tail.len() as f64;
        let ckpt = training::load_checkpoint(&outcome.final_checkpoint).unwrap();
        ToyFixture {
            _tmp: tmp,
            paths,
            ckpt_path: outcome.final_checkpoint,
            ckpt,
            held_out_wavs,
            first_cycle,
            tail_cycle,
            train_secs,
        }
    })
}

fn run_sid_corpus(fx: &ToyFixture) -> Vec<(String, Vec<LogMel>)> {
    let records = dataset::load_manifest(&fx.paths.manifest_file()).unwrap();
    TRAIN_SPEAKERS
        .iter()
        .map(|s| {
            let mels =
                dataset::load_speaker_mels(&fx.paths, &records, s.id, &fx.ckpt.mel).unwrap();
            (s.id.to_string(), mels)
        })
        .collect()
}

// ---- criteria ----

#[test]
fn criterion_01_shape_conformance() {
    let start = Instant::now();
    let arch = ArchConfig::default();
    let params = nets::init_params(&arch, 4, 11).unwrap();
    let window = pattern_window(&arch, 0.4);

    let emb = nets::fe_forward(&params, &window).unwrap();
    assert_eq!(emb.values.dim(), (1, 8, 8), "fe_forward must map 1x128x64 to 1x8x8");

    for &width in &arch.disc_patch_widths {
        let patch = Array2::from_shape_fn((arch.n_mels, width), |(i, j)| {
            ((i + 2 * j) as f32 * 0.21).sin() * 0.5
        });
        let probs = nets::disc_forward(&params, &patch, width).unwrap();
        assert_eq!(probs.probs.len(), 8, "discriminator head must output 2N = 8 classes");
        let sum: f32 = probs.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-4, "probabilities must sum to 1, got {sum}");
    }

    let converted = nets::gen_forward(&params, &window, &emb).unwrap();
    assert_eq!(converted.values.dim(), window.values.dim(), "gen_forward must preserve shape");

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "shape checks took {secs:.1}s, budget 10s");
    common::verdict(&format!("criterion 01 shape conformance: PASS (1x128x64 -> 1x8x8, 2N=8, {secs:.2}s)"));
}

#[test]
fn criterion_02_gradient_verification() {
    let start = Instant::now();
    let arch = ArchConfig::miniature();
    let params = nets::init_params(&arch, 2, 42).unwrap();
    let window = |seed: f32, flip: f32| ScaledMel {
        values: Array2::from_shape_fn((8, 8), |(i, j)| {
            ((i as f32 * 1.3 + j as f32 * flip + seed).sin()) * 0.6 + 0.2
        }),
        speaker_stats_id: "w".into(),
        config: MelConfig::default(),
    };
    let batch = vec![
        dataset::TrainingPair {
            source_window: window(0.0, 0.7),
            source_index: 0,
            target_window: window(1.0, -1.1),
            target_index: 1,
        },
        dataset::TrainingPair {
            source_window: window(2.0, 0.7),
            source_index: 1,
            target_window: window(3.0, -1.1),
            target_index: 0,
        },
    ];

    let report = training::verify::gradcheck_losses(&params, &batch, 10.0, 5, 34, 1e-5, 77);
    assert!(
        report.probes.len() >= GRAD_MIN_PROBES,
        "need >= {GRAD_MIN_PROBES} probes, got {}",
        report.probes.len()
    );
    for probe in &report.probes {
        assert!(
            probe.rel_err < GRAD_REL_TOL,
            "{} {}/{}[{}]: analytic {} vs numeric {} (rel {})",
            probe.loss,
            probe.group,
            probe.name,
            probe.index,
            probe.analytic,
            probe.numeric,
            probe.rel_err
        );
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradcheck took {secs:.1}s, budget 120s");
    common::verdict(&format!(
        "criterion 02 gradient verification: PASS ({} probes, max rel err {:.2e} < {GRAD_REL_TOL:.0e}, {secs:.1}s)",
        report.probes.len(),
        report.max_rel_err
    ));
}

#[test]
fn criterion_03_analytic_loss_values() {
    // Uniform probabilities over 2N = 8 classes.
    let uniform = nets::ClassProbabilities { probs: vec![0.125; 8] };
    let loss = training::loss_discriminator(&uniform, TrainingLabels::real(2)).unwrap();
    assert!((loss - 8.0f64.ln()).abs() < LOG2N_TOL, "L_D = {loss}, want ln 8");

    let mel = MelConfig::default();
    let window = |v: f32| ScaledMel {
        values: Array2::from_elem((16, 12), v),
        speaker_stats_id: "w".into(),
        config: mel.clone(),
    };
    let u = pattern_window(&ArchConfig::slim(), 1.0);
    assert_eq!(training::loss_cycle(&u, &u).unwrap(), 0.0, "L_cycle(U, U) must be 0");
    assert_eq!(
        training::loss_cycle(&window(-1.0), &window(1.0)).unwrap(),
        2.0,
        "worst case on [-1,1] inputs must be 2"
    );
    common::verdict("criterion 03 analytic loss values: PASS (ln(2N) within 1e-9, cycle 0 and 2 exact)");
}

#[test]
fn criterion_04_scaling_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (bins, frames) = (16, 24);
    for case in 0..1000 {
        let per_bin_max: Vec<f32> = (0..bins).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let stats = SpeakerScalingStats::from_max(format!("case{case}"), per_bin_max.clone());
        for (bin, max) in per_bin_max.iter().enumerate() {
            let min = stats.per_bin_min[bin];
            assert_eq!(min, max - 4.0, "per_bin_min must be pinned to per_bin_max - 4");
        }

        // Values straddle the valid range so the clip path is exercised.
        let values = Array2::from_shape_fn((bins, frames), |(bin, _)| {
            per_bin_max[bin] - 5.5 + 7.0 * rng.gen::<f32>()
        });
        let mel = LogMel::new(values.clone(), MelConfig::default()).unwrap();
        let scaled = dsp::scale(&mel, &stats).unwrap();
        let restored = dsp::unscale(&scaled, &stats).unwrap();
        for ((bin, frame), &orig) in values.indexed_iter() {
            let rest = restored.values[[bin, frame]];
            let clipped = orig.clamp(stats.per_bin_min[bin], stats.per_bin_max[bin]);
            assert!(
                (clipped - rest).abs() <= SCALE_TOL,
                "case {case}: {orig} -> {rest}, want clip {clipped}"
            );
        }
    }
    common::verdict(&format!(
        "criterion 04 scaling round trip: PASS (1000 matrices, |unscale(scale(x)) - clip(x)| <= 1e-6, min = max - 4)"
    ));
}

#[test]
fn criterion_05_griffin_lim_sanity() {
    let start = Instant::now();
    let config = MelConfig::default();
    let sr = config.sample_rate as f32;
    let tone: Vec<f32> =
        (0..config.sample_rate).map(|t| (std::f32::consts::TAU * 440.0 * t as f32 / sr).sin() * 0.4).collect();

    let mel = dsp::mel_spectrogram(&tone, &config).unwrap();
    let dominant = |m: &LogMel| -> usize {
        let means: Vec<f32> =
            m.values.outer_iter().map(|row| row.sum() / row.len() as f32).collect();
        means
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    let want_bin = dominant(&mel);

    let spectral_err = |recon: &[f32]| -> f64 {
        let again = dsp::mel_spectrogram(recon, &config).unwrap();
        let frames = again.frames().min(mel.frames());
        let mut sum = 0.0f64;
        for i in 0..config.n_mels {
            for j in 0..frames {
                sum += (again.values[[i, j]] - mel.values[[i, j]]).abs() as f64;
            }
        }
        sum / (config.n_mels * frames) as f64
    };

    let recon60 = dsp::mel_to_audio(&mel, &config).unwrap();
    let one_iter = MelConfig { griffin_lim_iters: 1, ..config.clone() };
    let recon1 = dsp::mel_to_audio(&mel, &one_iter).unwrap();

    let got_bin = dominant(&dsp::mel_spectrogram(&recon60, &config).unwrap());
    let diff = got_bin.abs_diff(want_bin);
    assert!(diff <= 1, "dominant mel bin moved from {want_bin} to {got_bin}");

    let (err60, err1) = (spectral_err(&recon60), spectral_err(&recon1));
    assert!(err60 < err1, "60-iteration error {err60:.4} must beat 1-iteration error {err1:.4}");

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "griffin-lim checks took {secs:.1}s, budget 30s");
    common::verdict(&format!(
        "criterion 05 griffin-lim sanity: PASS (440 Hz bin {want_bin} -> {got_bin}, err60 {err60:.4} < err1 {err1:.4}, {secs:.1}s)"
    ));
}

#[test]
fn criterion_06_toy_overfit() {
    let start = Instant::now();
    let fx = fixture();
    assert!(TOY_TRAIN_STEPS <= 2000, "toy budget is 2000 steps");

    // (a) cycle loss falls below half of its step-1 value.
    assert!(
        fx.tail_cycle < 0.5 * fx.first_cycle,
        "cycle loss {:.4} is not below 50% of step-1 value {:.4}",
        fx.tail_cycle,
        fx.first_cycle
    );

    // (b) an independently trained SID assigns conversions to the
    // intended target well above the 25% chance rate.
    let sid_config = SidConfig { steps: 150, batch_size: 8, ..SidConfig::default() };
    let sid = eval::train_sid(&run_sid_corpus(fx), &sid_config).unwrap();
    assert!(
        sid.eval_top1 >= 0.9,
        "SID must separate the raw toy speakers, got top-1 {:.2}",
        sid.eval_top1
    );

    let records = dataset::load_manifest(&fx.paths.manifest_file()).unwrap();
    let mut refs = Vec::new();
    for target in &TRAIN_SPEAKERS {
        let r = convert::seen_speaker_reference(
            &fx.paths,
            &records,
            &fx.ckpt.mel,
            &fx.ckpt.params,
            target.id,
        )
        .unwrap();
        refs.push((target.id, r));
    }

    let convert_config = ConvertConfig::default();
    let mut hits = 0usize;
    let mut total = 0usize;
    for source in &TRAIN_SPEAKERS {
        let source_stats = dataset::load_speaker_stats(&fx.paths, source.id).unwrap();
        let utterances: Vec<&PathBuf> = records
            .iter()
            .filter(|r| r.speaker_id == source.id)
            .take(2)
            .map(|r| &r.audio_path)
            .collect();
        for (target_id, (target_stats, target_emb)) in &refs {
            if *target_id == source.id {
                continue;
            }
            for utt in &utterances {
                let out = convert::convert_utterance(
                    &fx.ckpt,
                    utt,
                    &source_stats,
                    target_stats,
                    target_emb,
                    &convert_config,
                )
                .unwrap();
                let heard = dsp::mel_spectrogram(&out.waveform, &fx.ckpt.mel).unwrap();
                let rank = eval::rank_target(&sid, &heard, target_id).unwrap();
                hits += usize::from(rank == 1);
                total += 1;
            }
        }
    }
    let top1 = hits as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    assert!(
        top1 >= TOY_SID_TOP1_MIN,
        "conversion SID top-1 {top1:.2} below {TOY_SID_TOP1_MIN} ({hits}/{total} hits)"
    );
    assert!(secs < 1800.0, "toy overfit took {secs:.0}s, budget 1800s");
    common::verdict(&format!(
        "criterion 06 toy overfit: PASS (cycle {:.4} -> {:.4}, SID top-1 {top1:.2} on {total} conversions vs 0.25 chance, train {:.0}s, total {secs:.0}s)",
        fx.first_cycle, fx.tail_cycle, fx.train_secs
    ));
}

#[test]
fn criterion_07_out_of_dataset_speaker() {
    let fx = fixture();
    let start = Instant::now();
    let convert_config = ConvertConfig::default();

    // (a) conversion to the held-out speaker with the checkpoint untouched.
    let checksum_before = sha256_file(&fx.ckpt_path);
    let (held_stats, held_emb) = convert::reference_from_samples(
        &fx.ckpt.params,
        &fx.ckpt.mel,
        &fx.held_out_wavs[..3],
        &convert_config,
        HELD_OUT.id,
    )
    .unwrap();
    let records = dataset::load_manifest(&fx.paths.manifest_file()).unwrap();
    let source = records.iter().find(|r| r.speaker_id == "spk_a").unwrap();
    let source_stats = dataset::load_speaker_stats(&fx.paths, "spk_a").unwrap();
    let out = convert::convert_utterance(
        &fx.ckpt,
        &source.audio_path,
        &source_stats,
        &held_stats,
        &held_emb,
        &convert_config,
    )
    .unwrap();
    assert!(!out.waveform.is_empty() && out.waveform.iter().all(|v| v.is_finite()));
    let checksum_after = sha256_file(&fx.ckpt_path);
    assert_eq!(checksum_before, checksum_after, "conversion must not touch the checkpoint");

    // (b) disjoint sample sets of the held-out speaker agree more with
    // each other than with any training speaker's mean embedding.
    let (_, emb_a) = convert::reference_from_samples(
        &fx.ckpt.params,
        &fx.ckpt.mel,
        &fx.held_out_wavs[..3],
        &convert_config,
        "held_a",
    )
    .unwrap();
    let (_, emb_b) = convert::reference_from_samples(
        &fx.ckpt.params,
        &fx.ckpt.mel,
        &fx.held_out_wavs[3..],
        &convert_config,
        "held_b",
    )
    .unwrap();
    let flat_a = flat_embedding(&emb_a);
    let self_sim = cosine(&flat_a, &flat_embedding(&emb_b));

    let mut closest_other = f64::NEG_INFINITY;
    let mut closest_id = "";
    for speaker in &TRAIN_SPEAKERS {
        let (_, emb) = convert::seen_speaker_reference(
            &fx.paths,
            &records,
            &fx.ckpt.mel,
            &fx.ckpt.params,
            speaker.id,
        )
        .unwrap();
        let sim = cosine(&flat_a, &flat_embedding(&emb));
        if sim > closest_other {
            closest_other = sim;
            closest_id = speaker.id;
        }
    }
    assert!(
        self_sim > closest_other,
        "self-similarity {self_sim:.4} must beat closest other speaker {closest_id} at {closest_other:.4}"
    );

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "out-of-dataset checks took {secs:.0}s, budget 300s");
    common::verdict(&format!(
        "criterion 07 out-of-dataset speaker: PASS (checkpoint checksum unchanged, self cos {self_sim:.4} > best other {closest_other:.4} ({closest_id}), {secs:.0}s)"
    ));
}

#[test]
fn criterion_08_chance_baseline() {
    // The reference chance row is truncated to one decimal: exact chance
    // for K=20 is 100*20/291 = 6.8729, printed as 6.8 (rounding would
    // print 6.9). The first four entries agree under both readings.
    for (k, printed) in CHANCE_ROW {
        let exact = chance_baseline(291, k);
        let truncated = eval::display_pct(exact);
        assert!(
            (truncated - printed).abs() < 1e-9,
            "top-{k}: exact {exact} truncates to {truncated}, reference prints {printed}"
        );
    }
    for (k, printed) in &CHANCE_ROW[..4] {
        let exact = chance_baseline(291, *k);
        assert!(
            (exact - printed).abs() < 0.05,
            "top-{k}: exact {exact} vs printed {printed} must agree within 0.05pp"
        );
    }
    common::verdict(&format!(
        "criterion 08 chance baseline: PASS (chance_baseline(291, K) reproduces 0.3/1.0/1.7/3.4/6.8 after one-decimal truncation)"
    ));
}

#[test]
fn criterion_09_eval_harness_calibration() {
    let start = Instant::now();
    let m = 291;
    let speakers: Vec<String> = (0..m).map(|i| format!("spk{i:03}")).collect();
    let dummy = LogMel::new(Array2::zeros((8, 4)), MelConfig::default()).unwrap();

    struct RandomScorer {
        speakers: Vec<String>,
        rng: std::cell::RefCell<ChaCha8Rng>,
    }
    impl UtteranceScorer for RandomScorer {
        fn speakers(&self) -> &[String] {
            &self.speakers
        }
        fn score(&self, _: &LogMel) -> Vec<f64> {
            let mut rng = self.rng.borrow_mut();
            (0..self.speakers.len()).map(|_| rng.gen::<f64>()).collect()
        }
    }

    // Encodes the intended target in the utterance so the oracle can read it.
    struct OracleScorer {
        speakers: Vec<String>,
    }
    impl UtteranceScorer for OracleScorer {
        fn speakers(&self) -> &[String] {
            &self.speakers
        }
        fn score(&self, utterance: &LogMel) -> Vec<f64> {
            let target = utterance.values[[0, 0]] as usize;
            (0..self.speakers.len()).map(|i| if i == target { 1.0 } else { 0.0 }).collect()
        }
    }

    let random = RandomScorer {
        speakers: speakers.clone(),
        rng: std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(909)),
    };
    let key = CellKey {
        source_group: Group::In,
        target_group: Group::In,
        target_gender: Gender::Female,
    };
    let mut pick = ChaCha8Rng::seed_from_u64(910);
    let records: Vec<ConversionRecord> = (0..5000)
        .map(|_| ConversionRecord {
            key,
            target_id: speakers[pick.gen_range(0..m)].clone(),
            audio: dummy.clone(),
        })
        .collect();
    let report = eval::topk_report(&random, &records, &DEFAULT_K_LIST).unwrap();
    let cell = &report.cells[&key];
    for k in DEFAULT_K_LIST {
        let acc = cell.accuracy(k);
        let want = chance_baseline(m, k);
        assert!(
            (acc - want).abs() <= CALIBRATION_TOL_PP,
            "random scorer accuracy@{k} = {acc:.2}% vs chance {want:.2}% (tolerance {CALIBRATION_TOL_PP}pp)"
        );
    }

    let oracle = OracleScorer { speakers: speakers.clone() };
    let oracle_records: Vec<ConversionRecord> = (0..500)
        .map(|i| {
            let target = i % m;
            let mut values = Array2::zeros((8, 4));
            values[[0, 0]] = target as f32;
            ConversionRecord {
                key,
                target_id: speakers[target].clone(),
                audio: LogMel::new(values, MelConfig::default()).unwrap(),
            }
        })
        .collect();
    let oracle_report = eval::topk_report(&oracle, &oracle_records, &DEFAULT_K_LIST).unwrap();
    for k in DEFAULT_K_LIST {
        let acc = oracle_report.cells[&key].accuracy(k);
        assert_eq!(acc, 100.0, "oracle accuracy@{k} must be 100%");
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "calibration took {secs:.1}s, budget 60s");
    common::verdict(&format!(
        "criterion 09 eval harness calibration: PASS (5000 random trials within {CALIBRATION_TOL_PP}pp of K/M, oracle 100%, {secs:.1}s)"
    ));
}

#[test]
fn criterion_10_determinism_and_resume() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mel = MelConfig::default();
    let corpus = tmp.path().join("corpus");
    write_corpus(&corpus, &TRAIN_SPEAKERS[..2], 3, mel.sample_rate);

    let arch = ArchConfig::slim();
    let config = TrainConfig {
        batch_size: 2,
        total_steps: 6,
        checkpoint_interval: 3,
        seed: 7,
        ..TrainConfig::default()
    };

    let build = |dir: &Path, steps: u64, resume: Option<&Path>| {
        let paths = RunPaths::new(dir);
        if !paths.registry_file().exists() {
            dataset::preprocess(&corpus, &paths, &mel, 60.0, 0.999, 20, 0).unwrap();
        }
        let cfg = TrainConfig { total_steps: steps, ..config.clone() };
        (training::train(&paths, &mel, &arch, &cfg, resume).unwrap(), paths)
    };

    let (out_a, paths_a) = build(&tmp.path().join("a"), 6, None);
    let (out_b, paths_b) = build(&tmp.path().join("b"), 6, None);

    // Identical seeds give bit-identical artifacts.
    assert_eq!(sha256_file(&out_a.final_checkpoint), sha256_file(&out_b.final_checkpoint));
    let cache_rel = |paths: &RunPaths| paths.cache_file("spk_a", "utt_0");
    assert_eq!(sha256_file(&cache_rel(&paths_a)), sha256_file(&cache_rel(&paths_b)));
    assert_eq!(
        sha256_file(&paths_a.stats_file("spk_b")),
        sha256_file(&paths_b.stats_file("spk_b"))
    );
    let history_bits = |paths: &RunPaths| -> Vec<(u64, u64, u64)> {
        training::load_history(&paths.history_file())
            .unwrap()
            .iter()
            .map(|h| (h.step, h.loss_d.to_bits(), h.loss_g_total.to_bits()))
            .collect()
    };
    assert_eq!(history_bits(&paths_a), history_bits(&paths_b));

    // A 3-step run resumed for 3 more continues the uninterrupted run.
    let (out_c3, paths_c) = build(&tmp.path().join("c"), 3, None);
    assert_eq!(out_c3.last_step, 3);
    let (out_c6, _) = build(&tmp.path().join("c"), 6, Some(&out_c3.final_checkpoint));
    assert_eq!(out_c6.reports.first().unwrap().step, 4, "resume must continue at the next step");
    assert_eq!(sha256_file(&out_c6.final_checkpoint), sha256_file(&out_a.final_checkpoint));
    assert_eq!(history_bits(&paths_c), history_bits(&paths_a));

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "determinism checks took {secs:.0}s, budget 300s");
    common::verdict(&format!(
        "criterion 10 determinism and resume: PASS (twin runs and 3+3 resume bit-identical, {secs:.0}s)"
    ));
}

// Keeps the corpus generator honest: synthetic speech must survive the
// preprocessing gates used by every fixture above.
#[test]
fn toy_corpus_is_loud_enough_for_patches() {
    let mel = MelConfig::default();
    for speaker in TRAIN_SPEAKERS.iter().chain([&HELD_OUT]) {
        let wave = synth_utterance(speaker, 0, mel.sample_rate);
        let trimmed = dsp::clip_silence(&wave, mel.sample_rate, 60.0).unwrap();
        let spec = dsp::mel_spectrogram(&trimmed, &mel).unwrap();
        assert!(spec.frames() >= 128, "{} too short: {} frames", speaker.id, spec.frames());
    }
}
