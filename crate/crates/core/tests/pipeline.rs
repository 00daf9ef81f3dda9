//! End-to-end CLI pipeline on a miniature experiment: gen-data → attack →
//! eval → ablate → defend → report, all within one temp directory.

use std::path::Path;

use clap::Parser;

use backroad::cli::{self, Cli};
use backroad::config::ExperimentConfig;

const TINY_CONFIG: &str = r#"
[experiment]
name = "pipeline-tiny"
seed = 11

[corpus]
train_scenes = 48
eval_scenes = 16

[model]
d_model = 32
n_layers = 1
n_heads = 2
d_enc = 16

[pretrain]
epochs = 20
batch = 16

[dataset]
pairs = 8

[attack]
alpha = 0.5
epochs = 8
batch_pairs = 4

[eval]
asr_scenes = 8
far_scenes = 8
qa_scenes = 8

[ablate]
alphas = [0.0, 1.0]
arms = ["no_replay"]

[defend]
counts = [10]
pool_scenes = 20
epochs = 1
batch = 8
"#;

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, TINY_CONFIG).unwrap();
    let out = dir.path().join("runs/tiny");
    let cfg = ExperimentConfig::from_path(&config_path).unwrap();

    // gen-data through the argv surface, to cover flag wiring too.
    let cli = Cli::try_parse_from([
        "backroad",
        "gen-data",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .unwrap();
    cli::run(cli).unwrap();

    for artifact in ["config.resolved.toml", "corpus.jsonl", "base.ckpt.json", "dataset.jsonl"] {
        assert!(out.join(artifact).exists(), "gen-data should produce {artifact}");
    }
    assert!(!out.join("dataset.jsonl.incomplete").exists());

    // Rerunning without --force must keep the existing artifacts.
    let base_before = read(&out.join("base.ckpt.json"));
    cli::cmd_gen_data(&cfg, &out, false).unwrap();
    assert_eq!(base_before, read(&out.join("base.ckpt.json")), "rerun must reuse the checkpoint");

    cli::cmd_attack(&cfg, &out, false).unwrap();
    assert!(out.join("attacked.ckpt.json").exists());
    assert!(out.join("attack_steps.csv").exists());

    cli::cmd_eval(&cfg, &out, None, None, false).unwrap();
    let scores = read(&out.join("eval/scores.csv"));
    assert!(scores.starts_with("condition,"), "scores header: {scores}");
    assert!(scores.contains("\nattacked,"), "missing attacked row: {scores}");
    assert!(scores.contains("\nclean_twin,"), "missing clean twin row: {scores}");
    assert!(out.join("clean.ckpt.json").exists());

    cli::cmd_ablate(&cfg, &out, false).unwrap();
    let sweep = read(&out.join("ablate/alpha_sweep.csv"));
    assert!(sweep.contains("alpha=0,") && sweep.contains("alpha=1,"), "{sweep}");
    let arms = read(&out.join("ablate/arms.csv"));
    assert!(arms.contains("arm_no_replay,"), "{arms}");
    assert!(out.join("ablate/cells/alpha_0.json").exists());

    cli::cmd_defend(&cfg, &out, false).unwrap();
    let defense = read(&out.join("defend/defense_curve.csv"));
    assert!(defense.contains("defense_n=0,"), "curve must include the undefended point: {defense}");
    assert!(defense.contains("defense_n=10,"), "{defense}");

    cli::cmd_report(&out).unwrap();
    let report = read(&out.join("report/summary.csv"));
    assert!(report.starts_with("stage,condition,"), "{report}");
    for stage in ["eval,", "alpha_sweep,", "arms,", "defense,"] {
        assert!(report.contains(stage), "report should merge the {stage} table:\n{report}");
    }

    // No stray .incomplete files anywhere after a clean run.
    let mut stack = vec![out.clone()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                assert!(
                    !p.to_string_lossy().ends_with(".incomplete"),
                    "leftover partial file: {}",
                    p.display()
                );
            }
        }
    }
}

#[test]
fn stages_fail_cleanly_without_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, TINY_CONFIG).unwrap();
    let cfg = ExperimentConfig::from_path(&config_path).unwrap();
    let out = dir.path().join("empty");

    let err = cli::cmd_attack(&cfg, &out, false).unwrap_err().to_string();
    assert!(err.contains("gen-data"), "attack error should name gen-data: {err}");

    let err = cli::cmd_report(&out).unwrap_err().to_string();
    assert!(err.contains("no stage tables"), "{err}");
}
