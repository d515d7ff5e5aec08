//! End-to-end exercises of the `vc` binary: pipeline stages, idempotence,
//! usage errors, seeding, and the run lock.

mod common;

use common::{write_corpus, write_speaker_dir, HELD_OUT, TRAIN_SPEAKERS};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::process::{Command, Output};
use vc::dsp::MelConfig;

fn vc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vc"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        cmd,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn sha256_file(path: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(path).unwrap()))
}

/// Toy-sized overrides for every stage of the pipeline.
fn write_test_config(path: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "arch": serde_json::to_value(vc::nets::ArchConfig::slim()).unwrap(),
        "train": { "batch_size": 2, "checkpoint_interval": 50 },
        "sid": { "window_frames": 32, "window_stride": 16, "channels": [4, 8],
                 "steps": 80, "batch_size": 8 },
    });
    let file = path.join("config.json");
    std::fs::write(&file, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    file
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let mel = MelConfig::default();
    let corpus = tmp.path().join("corpus");
    write_corpus(&corpus, &TRAIN_SPEAKERS, 3, mel.sample_rate);
    let held = write_speaker_dir(&tmp.path().join("held"), &HELD_OUT, 3, mel.sample_rate);
    let config = write_test_config(tmp.path());
    let run = tmp.path().join("run");

    // Preprocess: one stats file per speaker, caches for every utterance.
    let out = run_ok(vc()
        .args(["preprocess", "--data"])
        .arg(&corpus)
        .arg("--out")
        .arg(&run)
        .arg("--config")
        .arg(&config));
    let text = stdout_of(&out);
    assert!(text.contains("12 caches written"), "unexpected summary: {text}");
    assert!(text.contains("4 speakers"), "unexpected summary: {text}");
    let stats_files = std::fs::read_dir(run.join("stats")).unwrap().count();
    assert_eq!(stats_files, 4, "expected one stats file per speaker");
    assert!(run.join("config.json").exists(), "resolved config must be dumped into the run");

    // Rerunning without changes rewrites nothing.
    let out = run_ok(vc()
        .args(["preprocess", "--data"])
        .arg(&corpus)
        .arg("--out")
        .arg(&run));
    let text = stdout_of(&out);
    assert!(text.contains("0 caches written"), "rerun must be idempotent: {text}");
    assert!(text.contains("0 stats written"), "rerun must be idempotent: {text}");

    // Train 10 steps: history rows, checkpoints, and the loss plot.
    let out = run_ok(vc().args(["train", "--run"]).arg(&run).args(["--steps", "10"]));
    assert!(stdout_of(&out).contains("trained to step 10"));
    let history = std::fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 10, "10 steps must leave 10 history rows");
    assert!(run.join("checkpoints/ckpt_10.bin").exists());
    assert!(run.join("plots/loss.png").exists());

    // Resume continues at the next step and extends the history.
    let out = run_ok(vc()
        .args(["train", "--run"])
        .arg(&run)
        .args(["--steps", "14", "--resume"])
        .arg(run.join("checkpoints/ckpt_10.bin")));
    assert!(stdout_of(&out).contains("trained to step 14"));
    let history = std::fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 14);
    let row11: serde_json::Value =
        serde_json::from_str(history.lines().nth(10).unwrap()).unwrap();
    assert_eq!(row11["step"], 11, "resume must continue at step 11");

    // Conversion to a seen target, with spectrogram images.
    let converted = tmp.path().join("out/converted.wav");
    run_ok(vc()
        .args(["convert", "--run"])
        .arg(&run)
        .arg("--source")
        .arg(corpus.join("spk_a/utt_0.wav"))
        .args(["--target-id", "spk_b", "--spectrograms", "--out"])
        .arg(&converted));
    assert!(converted.exists());
    assert!(tmp.path().join("out/converted.source.png").exists());
    assert!(tmp.path().join("out/converted.converted.png").exists());

    // Conversion to an unseen target leaves the checkpoint untouched.
    let ckpt = run.join("checkpoints/ckpt_14.bin");
    let before = sha256_file(&ckpt);
    let unseen_out = tmp.path().join("out/unseen.wav");
    run_ok(vc()
        .args(["convert", "--run"])
        .arg(&run)
        .arg("--source")
        .arg(corpus.join("spk_a/utt_1.wav"))
        .arg("--target-samples")
        .arg(&held[0])
        .arg(&held[1])
        .arg("--out")
        .arg(&unseen_out));
    assert!(unseen_out.exists());
    assert_eq!(before, sha256_file(&ckpt), "conversion must never write the checkpoint");

    // Embedding extraction.
    let emb_file = tmp.path().join("out/spk_e.json");
    run_ok(vc()
        .args(["embed", "--run"])
        .arg(&run)
        .arg("--samples")
        .arg(&held[0])
        .arg(&held[1])
        .args(["--label", "spk_e", "--out"])
        .arg(&emb_file));
    let artifact: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&emb_file).unwrap()).unwrap();
    assert_eq!(artifact["label"], "spk_e");
    assert!(artifact["embedding"]["values"].is_object() || artifact["embedding"]["values"].is_array());

    // Evaluation over a small grid with a freshly trained SID.
    let grid = serde_json::json!({
        "utterances_per_source": 1,
        "sources": [
            { "id": "spk_a", "group": "in" },
            { "id": "spk_b", "group": "in" },
        ],
        "targets": [
            { "id": "spk_c", "group": "in", "gender": "F" },
            { "id": "spk_e", "group": "out", "gender": "F",
              "samples": [held[0], held[1]] },
        ],
    });
    let grid_file = tmp.path().join("grid.json");
    std::fs::write(&grid_file, serde_json::to_string_pretty(&grid).unwrap()).unwrap();
    let out = run_ok(vc()
        .args(["evaluate", "--run"])
        .arg(&run)
        .arg("--grid")
        .arg(&grid_file)
        .arg("--train-sid"));
    let text = stdout_of(&out);
    assert!(text.contains("target group"), "report header missing: {text}");
    assert!(text.contains("chance"), "chance row missing: {text}");
    assert!(run.join("report.json").exists());
    assert!(run.join("report.txt").exists());
    assert!(run.join("sid.json").exists());

    // Chance-only mode needs no conversions at all.
    let out = run_ok(vc()
        .args(["evaluate", "--run"])
        .arg(&run)
        .args(["--chance-only", "--m", "291"]));
    let text = stdout_of(&out);
    assert!(text.contains("M = 291"));
    assert!(text.contains("0.3%") && text.contains("6.8%"), "chance row wrong: {text}");
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();

    // Both target forms at once.
    let out = vc()
        .args(["convert", "--run", "r", "--source", "s.wav"])
        .args(["--target-id", "x", "--target-samples", "y.wav"])
        .args(["--out", "o.wav"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));

    // Neither target form.
    let out = vc()
        .args(["convert", "--run", "r", "--source", "s.wav", "--out", "o.wav"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));

    // Evaluate without a grid.
    let out = vc().args(["evaluate", "--run", "r"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("--grid"));

    // Empty grid spec.
    let grid_file = tmp.path().join("empty.json");
    std::fs::write(&grid_file, r#"{"sources": [], "targets": []}"#).unwrap();
    let out = vc()
        .args(["evaluate", "--run", "r", "--grid"])
        .arg(&grid_file)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
}

#[test]
fn corrupt_wav_is_named_and_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let mel = MelConfig::default();
    let corpus = tmp.path().join("corpus");
    write_corpus(&corpus, &TRAIN_SPEAKERS[..2], 2, mel.sample_rate);
    std::fs::write(corpus.join("spk_a/garbage.wav"), b"this is not audio").unwrap();

    let out = vc()
        .args(["preprocess", "--data"])
        .arg(&corpus)
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("garbage.wav"),
        "the broken file must be named: {}",
        stderr_of(&out)
    );
}

#[test]
fn missing_preprocess_is_an_actionable_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vc()
        .args(["train", "--run"])
        .arg(tmp.path().join("fresh"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("vc preprocess"),
        "error must point at the preprocess step: {}",
        stderr_of(&out)
    );
}

#[test]
fn live_lock_blocks_a_second_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mel = MelConfig::default();
    let corpus = tmp.path().join("corpus");
    write_corpus(&corpus, &TRAIN_SPEAKERS[..2], 2, mel.sample_rate);
    let run = tmp.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    // The test process itself plays the live lock holder.
    std::fs::write(run.join("run.lock"), std::process::id().to_string()).unwrap();

    let out = vc()
        .args(["preprocess", "--data"])
        .arg(&corpus)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("locked"), "{}", stderr_of(&out));
}

#[test]
fn seed_pins_artifacts_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let mel = MelConfig::default();
    let corpus = tmp.path().join("corpus");
    write_corpus(&corpus, &TRAIN_SPEAKERS[..2], 2, mel.sample_rate);
    let config = write_test_config(tmp.path());

    let build = |dir: &str, seed: &str| {
        let run = tmp.path().join(dir);
        run_ok(vc()
            .args(["preprocess", "--data"])
            .arg(&corpus)
            .arg("--out")
            .arg(&run)
            .arg("--config")
            .arg(&config)
            .args(["--seed", seed]));
        run_ok(vc()
            .args(["train", "--run"])
            .arg(&run)
            .args(["--steps", "4", "--seed", seed]));
        sha256_file(&run.join("checkpoints/ckpt_4.bin"))
    };

    let a = build("a", "5");
    let b = build("b", "5");
    let c = build("c", "6");
    assert_eq!(a, b, "same seed must reproduce the checkpoint bit-for-bit");
    assert_ne!(a, c, "a different seed must change the trained weights");
}
