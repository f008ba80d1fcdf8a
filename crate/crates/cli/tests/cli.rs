//! End-to-end runs of the binary: pipeline stages chained through real
//! files, plus exit-code contracts.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-align"))
}

fn run_ok(args: &[&str], cwd: &Path) -> Output {
    let out = bin().args(args).current_dir(cwd).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str], cwd: &Path) -> i32 {
    bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap_or(-1)
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();

    run_ok(
        &[
            "build-dataset",
            "--output-dir",
            "run",
            "--n-prompts",
            "6",
            "--images-per-prompt",
            "2",
            "--t-total",
            "8",
        ],
        cwd,
    );
    assert!(cwd.join("run/dataset/manifest.jsonl").exists());
    assert!(cwd.join("run/resolved_config.json").exists());

    run_ok(&["corrupt", "--output-dir", "run", "--n-prompts", "6"], cwd);
    assert!(cwd.join("run/factual_sets.jsonl").exists());
    assert!(cwd
        .join("run/transcripts")
        .read_dir()
        .unwrap()
        .next()
        .is_some());

    let train_cfg = r#"{
        "dataset_root": "run/dataset",
        "train": {
            "latent_range": {"lo": 2, "hi": 5},
            "learning_rate": 0.001,
            "schedule": {"kind": "cosine-annealing", "warmup_ratio": 0.1},
            "weight_decay": 0.1,
            "batch_size": 6,
            "epochs": 1,
            "corpus_size": 24,
            "corpus_unit": "pairs",
            "temperature_init": 0.07,
            "trained_towers": "image_only",
            "seed": 1
        }
    }"#;
    std::fs::write(cwd.join("train.json"), train_cfg).unwrap();
    run_ok(
        &[
            "train",
            "--config",
            "train.json",
            "--output-dir",
            "run/train",
        ],
        cwd,
    );
    assert!(cwd.join("run/train/checkpoint.json").exists());
    assert!(cwd.join("run/train/checkpoint.meta.json").exists());
    assert!(cwd.join("run/train/train_log.jsonl").exists());

    // resume continues the step counter from the sidecar
    run_ok(
        &[
            "train",
            "--config",
            "train.json",
            "--output-dir",
            "run/train2",
            "--resume-from",
            "run/train/checkpoint.json",
        ],
        cwd,
    );
    let log = std::fs::read_to_string(cwd.join("run/train2/train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    let prior = std::fs::read_to_string(cwd.join("run/train/train_log.jsonl"))
        .unwrap()
        .lines()
        .count() as u64;
    assert_eq!(first["step"].as_u64().unwrap(), prior + 1);

    run_ok(
        &[
            "score",
            "--output-dir",
            "run/scores",
            "--dataset-root",
            "run/dataset",
            "--gateway",
            "run/train/checkpoint.json",
            "--workers",
            "2",
        ],
        cwd,
    );
    assert!(cwd.join("run/scores/scores.jsonl").exists());

    let eval_cfg = r#"{
        "kind": "consistency",
        "dataset_root": "run/dataset",
        "factual_sets": "run/factual_sets.jsonl",
        "gateway": "run/train/checkpoint.json",
        "steps": [2, 5, 8]
    }"#;
    std::fs::write(cwd.join("eval.json"), eval_cfg).unwrap();
    run_ok(
        &["eval", "--config", "eval.json", "--output-dir", "run/eval"],
        cwd,
    );
    let report = std::fs::read_to_string(cwd.join("run/eval/report.txt")).unwrap();
    assert!(report.contains("recall_at_1"));

    run_ok(
        &[
            "plot",
            "--report",
            "run/eval/consistency.json",
            "--output-dir",
            "run/figs",
        ],
        cwd,
    );
    let fig = std::fs::read_to_string(cwd.join("run/figs/figure_consistency.csv")).unwrap();
    assert!(fig.starts_with("step,recall_at_1_solid,distractor_mean_dashed"));

    // plot bytes are a pure function of the report
    run_ok(
        &[
            "plot",
            "--report",
            "run/eval/consistency.json",
            "--output-dir",
            "run/figs2",
        ],
        cwd,
    );
    let fig2 = std::fs::read_to_string(cwd.join("run/figs2/figure_consistency.csv")).unwrap();
    assert_eq!(fig, fig2);
}

#[test]
fn bon_prints_reference_cost_and_writes_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(
        &[
            "bon",
            "--output-dir",
            "run",
            "--n",
            "6",
            "--stop-step",
            "20",
            "--t-total",
            "50",
        ],
        dir.path(),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cost 150 per prompt"), "{stdout}");
    let records = std::fs::read_to_string(dir.path().join("run/bon_records.jsonl")).unwrap();
    assert!(records.lines().count() >= 6);

    // n = 1: plain generation at cost T
    let out = run_ok(
        &[
            "bon",
            "--output-dir",
            "run2",
            "--n",
            "1",
            "--stop-step",
            "0",
            "--t-total",
            "50",
        ],
        dir.path(),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cost 50 per prompt"), "{stdout}");
}

#[test]
fn rebuilds_with_same_seed_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "build-dataset",
        "--n-prompts",
        "4",
        "--t-total",
        "5",
        "--seed",
        "9",
    ];
    run_ok(&[&args[..], &["--output-dir", "a"]].concat(), dir.path());
    run_ok(&[&args[..], &["--output-dir", "b"]].concat(), dir.path());
    let a = std::fs::read(dir.path().join("a/dataset/manifest.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/dataset/manifest.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupt_replays_offline_from_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    run_ok(
        &["corrupt", "--output-dir", "online", "--n-prompts", "4"],
        cwd,
    );
    // replay with the endpoint conceptually down: only the transcript
    // cache is available
    let cfg = r#"{"client": "replay", "transcripts_dir": "online/transcripts", "n_prompts": 4}"#;
    std::fs::write(cwd.join("replay.json"), cfg).unwrap();
    run_ok(
        &[
            "corrupt",
            "--config",
            "replay.json",
            "--output-dir",
            "offline",
        ],
        cwd,
    );
    let online = std::fs::read(cwd.join("online/factual_sets.jsonl")).unwrap();
    let offline = std::fs::read(cwd.join("offline/factual_sets.jsonl")).unwrap();
    assert_eq!(online, offline);
}

#[test]
fn exit_codes_follow_error_domains() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    // 2: config errors
    assert_eq!(
        exit_code(
            &["corrupt", "--config", "missing.json", "--output-dir", "x"],
            cwd
        ),
        2
    );
    std::fs::write(cwd.join("bad_backend.json"), r#"{"backend": "sdxl"}"#).unwrap();
    assert_eq!(
        exit_code(
            &[
                "build-dataset",
                "--config",
                "bad_backend.json",
                "--output-dir",
                "x"
            ],
            cwd
        ),
        2
    );
    // 3: data errors
    assert_eq!(
        exit_code(
            &["score", "--dataset-root", "nowhere", "--output-dir", "x"],
            cwd
        ),
        3
    );
    // 4: transport errors (replay with an empty cache)
    std::fs::create_dir_all(cwd.join("empty_cache")).unwrap();
    std::fs::write(
        cwd.join("replay.json"),
        r#"{"client": "replay", "transcripts_dir": "empty_cache", "n_prompts": 1}"#,
    )
    .unwrap();
    assert_eq!(
        exit_code(
            &["corrupt", "--config", "replay.json", "--output-dir", "x"],
            cwd
        ),
        4
    );
}

#[test]
fn empty_eval_set_writes_empty_report_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    // dataset with zero samples
    std::fs::create_dir_all(cwd.join("empty/dataset")).unwrap();
    std::fs::write(
        cwd.join("empty/dataset/manifest.jsonl"),
        "{\"format_version\":1,\"subset_tag\":\"custom\",\"entry_count\":0}\n",
    )
    .unwrap();
    let cfg =
        r#"{"kind": "consistency", "dataset_root": "empty/dataset", "factual_sets": "none.jsonl"}"#;
    std::fs::write(cwd.join("eval.json"), cfg).unwrap();
    let out = bin()
        .args(["eval", "--config", "eval.json", "--output-dir", "empty/out"])
        .current_dir(cwd)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(cwd.join("empty/out/report.txt").exists());
}
