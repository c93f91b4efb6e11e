//! End-to-end smoke tests for the `flowplan` binary on a toy config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowplan_core::collision::CollisionConfig;
use flowplan_core::dataset::DatasetConfig;
use flowplan_core::experiment::{ExperimentConfig, SuiteConfig, TrainingConfig};
use flowplan_core::flow::InferenceConfig;
use flowplan_core::geometry::ArmModel;
use flowplan_core::nn::model::ArchConfig;
use flowplan_core::oracle::GenConfig;
use flowplan_core::scene::Family;

fn toy_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        arm: ArmModel::default_planar(2),
        gen: GenConfig {
            families: vec![Family::Tabletop],
            scenes_per_family: 2,
            problems_per_scene: 1,
            seed: 11,
            scene_seed_start: 0,
            ..Default::default()
        },
        dataset: DatasetConfig {
            n_r: 16,
            n_w: 32,
            ..Default::default()
        },
        arch: ArchConfig {
            d: 8,
            layers: 1,
            heads: 2,
            k_r: 3,
            k_w: 4,
            fourier_dim: 4,
            head_hidden: 12,
            ffn_mult: 2,
            gmm_components: 2,
            ..Default::default()
        },
        training: TrainingConfig {
            steps: 4,
            batch: 2,
            checkpoint_every: 2,
            ..Default::default()
        },
        inference: InferenceConfig {
            euler_steps: 2,
            chunks: 2,
            ..Default::default()
        },
        suite: SuiteConfig {
            families: vec![Family::Tabletop],
            problems_per_family: 1,
            n_list: vec![1, 2],
            euler_list: vec![2],
            max_scene_tries: 60,
            ..Default::default()
        },
        collision: CollisionConfig::default(),
        output_dir: out.to_path_buf(),
    }
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = toy_config(dir);
    let path = dir.join("exp.toml");
    fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}

fn flowplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowplan"))
        .args(args)
        .output()
        .expect("spawn flowplan")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let out = flowplan(&["gen-data", "--config", cfg]);
    assert_ok(&out);
    assert!(dir.path().join("dataset.jsonl").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("revalidation 100.0%"));

    assert_ok(&flowplan(&["audit", "--config", cfg]));

    let out = flowplan(&["train", "--config", cfg]);
    assert_ok(&out);
    let run = dir.path().join("run");
    assert!(run.join("policy.ckpt").exists());
    assert!(run.join("policy.json").exists());
    assert!(run.join("loss_curve.csv").exists());

    // trivial plan: q_start == q_goal in an empty scene, N flag override
    let run_s = run.to_str().unwrap().to_string();
    let out = flowplan(&[
        "plan", "--config", cfg, "--policy", &run_s, "--q-start", "0.3,0.2", "--q-goal",
        "0.3,0.2", "--n", "1",
    ]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("solved"));
    let plan_text = fs::read_to_string(dir.path().join("plan.json")).unwrap();

    // fixed seed: identical output bytes
    let out = flowplan(&[
        "plan", "--config", cfg, "--policy", &run_s, "--q-start", "0.3,0.2", "--q-goal",
        "0.3,0.2", "--n", "1",
    ]);
    assert_ok(&out);
    assert_eq!(plan_text, fs::read_to_string(dir.path().join("plan.json")).unwrap());

    let out = flowplan(&["bench", "--config", cfg, "--policy", &run_s]);
    assert_ok(&out);
    let bench = dir.path().join("bench");
    let report = fs::read_to_string(bench.join("report.csv")).unwrap();
    // cross-product contract: header + |families| * |heads| * |N| * |euler|
    assert_eq!(report.lines().count(), 1 + 2);
    assert!(bench.join("per_problem.csv").exists());
    assert!(bench.join("manifest.json").exists());
}

#[test]
fn output_root_env_var_redirects_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let redirected = dir.path().join("elsewhere");

    let out = Command::new(env!("CARGO_BIN_EXE_flowplan"))
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .env("FLOWPLAN_OUT", &redirected)
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(redirected.join("dataset.jsonl").exists());
    assert!(!dir.path().join("dataset.jsonl").exists());
}

#[test]
fn bad_config_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    cfg.suite.n_list.clear();
    let path = dir.path().join("bad.toml");
    fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();

    let out = flowplan(&["gen-data", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
