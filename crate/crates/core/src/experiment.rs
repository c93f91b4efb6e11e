//! Configuration-driven pipeline: dataset generation, policy training,
//! single-problem planning, and the benchmark suite with CSV reports.
//!
//! Wall-clock measurements are written to separate `*_timings` files so
//! every other artifact is a pure function of the configuration.

use std::fs;
use std::io::Write as _;
use std::path::{Path as FsPath, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::best_of_n::{plan, PlanResult};
use crate::collision::{path_cost, CollisionConfig};
use crate::dataset::{
    build_dataset, load_dataset, make_observation, save_dataset, ActionChunk, Dataset,
    DatasetConfig, NormStats, Observation,
};
use crate::error::{Error, Result};
use crate::flow::{training_step, zero_predictor_loss, InferenceConfig, Policy};
use crate::geometry::ArmModel;
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::model::{init_params, ArchConfig, HeadKind};
use crate::oracle::{generate_dataset, rrt_connect, sample_problem, GenConfig, PlanningProblem, RrtParams};
use crate::rng::{self, derive_seed, tag};
use crate::scene::{generate_scene, Family};

pub const POLICY_CHECKPOINT_FILE: &str = "policy.ckpt";
pub const POLICY_META_FILE: &str = "policy.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const GEN_LOG_FILE: &str = "gen_log.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_TIMINGS_FILE: &str = "report_timings.csv";
pub const PER_PROBLEM_FILE: &str = "per_problem.csv";
pub const PER_PROBLEM_TIMINGS_FILE: &str = "per_problem_timings.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lr: f64,
    /// cosine-decay floor; set equal to lr for a constant rate
    pub lr_final: f64,
    /// decay horizon in steps; 0 means decay over `steps`
    pub lr_decay_steps: usize,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub head: HeadKind,
    /// diffusion schedule length when head == diffusion
    pub k_steps: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 3e-4,
            lr_final: 1e-5,
            lr_decay_steps: 0,
            batch: 16,
            steps: 5000,
            seed: 0,
            checkpoint_every: 1000,
            head: HeadKind::Flow,
            k_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub families: Vec<Family>,
    pub problems_per_family: usize,
    /// first held-out scene seed; must sit above every training scene seed
    pub heldout_seed_start: u64,
    pub n_list: Vec<usize>,
    pub euler_list: Vec<usize>,
    pub heads: Vec<HeadKind>,
    pub seed: u64,
    /// scenes examined per family before giving up
    pub max_scene_tries: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            families: Family::ALL.to_vec(),
            problems_per_family: 50,
            heldout_seed_start: 10_000,
            n_list: vec![1, 10, 100],
            euler_list: vec![20],
            heads: vec![HeadKind::Flow],
            seed: 99,
            max_scene_tries: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub arm: ArmModel,
    pub gen: GenConfig,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub training: TrainingConfig,
    pub inference: InferenceConfig,
    pub suite: SuiteConfig,
    pub collision: CollisionConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        self.arch.validate()?;
        if self.arch.k != self.arm.dof() {
            return Err(Error::BadConfig(format!(
                "arch k={} but arm has {} joints",
                self.arch.k,
                self.arm.dof()
            )));
        }
        if self.gen.families.is_empty()
            || self.suite.families.is_empty()
            || self.suite.n_list.is_empty()
            || self.suite.euler_list.is_empty()
            || self.suite.heads.is_empty()
        {
            return Err(Error::BadConfig("empty family/N/euler/head list".into()));
        }
        let train_end = self.gen.scene_seed_start
            + (self.gen.families.len() * self.gen.scenes_per_family) as u64;
        if self.suite.heldout_seed_start < train_end {
            return Err(Error::BadConfig(format!(
                "held-out scene seeds start at {} but training uses seeds below {}",
                self.suite.heldout_seed_start, train_end
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &FsPath) -> Result<ExperimentConfig> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }
}

/// One benchmark summary cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub family: Family,
    pub head: HeadKind,
    pub n: usize,
    pub euler_steps: usize,
    pub problems: usize,
    pub solved: usize,
    /// success rate in percent
    pub success_rate: f64,
    pub time_mean: f64,
    pub time_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub records: usize,
    pub attempted: usize,
    pub solved: usize,
    pub revalidation_pass_rate: f64,
    pub mean_path_waypoints: f64,
    pub mean_arc_length: f64,
}

/// Generate the expert dataset, write it plus the generation log, and audit
/// every stored path at validation density.
pub fn cmd_gen_data(config: &ExperimentConfig) -> Result<GenSummary> {
    fs::create_dir_all(&config.output_dir)?;
    let (paths, log) = generate_dataset(&config.arm, &config.gen, &config.collision)?;
    let dataset = build_dataset(&config.arm, &config.gen, &config.dataset, &paths)?;
    save_dataset(&dataset, &config.output_dir.join(DATASET_FILE))?;
    fs::write(
        config.output_dir.join(GEN_LOG_FILE),
        serde_json::to_string_pretty(&log)?,
    )?;
    let summary = audit_dataset(&config.collision, &dataset)?;
    Ok(GenSummary {
        records: dataset.records.len(),
        attempted: log.attempted,
        solved: log.solved,
        ..summary
    })
}

/// Revalidate every stored path at validation density.
pub fn audit_dataset(collision: &CollisionConfig, dataset: &Dataset) -> Result<GenSummary> {
    let mut passes = 0usize;
    let mut waypoints = 0usize;
    let mut arc = 0.0;
    for record in &dataset.records {
        let report = path_cost(
            &dataset.header.arm,
            &record.waypoints,
            &record.problem.scene,
            collision.delta_safe,
            collision.validation_samples_per_link,
        )?;
        if report.cost == 0 {
            passes += 1;
        }
        waypoints += record.waypoints.waypoints.len();
        arc += record.waypoints.arc_length();
    }
    let n = dataset.records.len().max(1);
    Ok(GenSummary {
        records: dataset.records.len(),
        attempted: 0,
        solved: 0,
        revalidation_pass_rate: passes as f64 / n as f64,
        mean_path_waypoints: waypoints as f64 / n as f64,
        mean_arc_length: arc / n as f64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyMeta {
    norm: NormStats,
    data_cfg: DatasetConfig,
    arm: ArmModel,
}

pub fn save_policy(policy: &Policy, dir: &FsPath) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_checkpoint(&policy.params, &dir.join(POLICY_CHECKPOINT_FILE))?;
    let meta = PolicyMeta {
        norm: policy.norm.clone(),
        data_cfg: policy.data_cfg,
        arm: policy.arm.clone(),
    };
    fs::write(
        dir.join(POLICY_META_FILE),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

pub fn load_policy(dir: &FsPath) -> Result<Policy> {
    let params = load_checkpoint(&dir.join(POLICY_CHECKPOINT_FILE))?;
    let meta: PolicyMeta =
        serde_json::from_str(&fs::read_to_string(dir.join(POLICY_META_FILE))?)?;
    if params.arch.k != meta.arm.dof() {
        return Err(Error::ArchMismatch(format!(
            "checkpoint k={} vs arm dof {}",
            params.arch.k,
            meta.arm.dof()
        )));
    }
    Ok(Policy {
        params,
        norm: meta.norm,
        data_cfg: meta.data_cfg,
        arm: meta.arm,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Eq. 5 loss of the constant-zero predictor on the same data
    pub zero_predictor_loss: f64,
}

/// All supervision rows materialized once up front.
struct TrainingSet {
    samples: Vec<(Observation, ActionChunk)>,
}

fn materialize_training_set(
    dataset: &Dataset,
    data_cfg: &DatasetConfig,
) -> Result<TrainingSet> {
    let arm = &dataset.header.arm;
    let mut samples = Vec::new();
    for (ri, q_t, chunk) in dataset.training_chunks() {
        let record = &dataset.records[ri];
        let obs = make_observation(
            arm,
            &q_t,
            &record.problem.q_goal,
            &record.problem.scene,
            data_cfg,
            record.problem.scene.seed,
        )?;
        samples.push((obs, chunk));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("dataset yields no chunks".into()));
    }
    Ok(TrainingSet { samples })
}

/// Train (or resume) the policy on a dataset file. Every training step `s`
/// draws its batch and noise from a stream keyed by (seed, s), so a resumed
/// run is bitwise identical to an uninterrupted one.
pub fn cmd_train(
    config: &ExperimentConfig,
    dataset_path: &FsPath,
    out_dir: &FsPath,
    resume_from: Option<&FsPath>,
) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir)?;
    let dataset = load_dataset(dataset_path)?;
    let set = materialize_training_set(&dataset, &config.dataset)?;

    let mut policy = match resume_from {
        Some(dir) => load_policy(dir)?,
        None => Policy {
            params: init_params(&config.arch, config.training.seed)?,
            norm: dataset.header.norm.clone(),
            data_cfg: config.dataset,
            arm: dataset.header.arm.clone(),
        },
    };
    if policy.params.arch != config.arch {
        return Err(Error::ArchMismatch(
            "resume checkpoint arch differs from configured arch".into(),
        ));
    }

    let raw_chunks: Vec<ActionChunk> = set.samples.iter().map(|(_, c)| c.clone()).collect();
    let zero_loss = zero_predictor_loss(&raw_chunks);

    let start_step = policy.params.step as usize;
    let mut curve: Vec<(usize, f64)> = Vec::new();
    let mut initial = f64::NAN;
    let mut last = f64::NAN;
    for s in start_step..config.training.steps {
        let mut step_rng = rng::stream(config.training.seed, &[tag::TRAIN, s as u64]);
        let batch: Vec<(Observation, ActionChunk)> = (0..config.training.batch)
            .map(|_| {
                let i = step_rng.gen_range(0..set.samples.len());
                set.samples[i].clone()
            })
            .collect();
        let horizon = if config.training.lr_decay_steps > 0 {
            config.training.lr_decay_steps
        } else {
            config.training.steps
        };
        let progress = (s as f64 / horizon.max(1) as f64).min(1.0);
        let lr = config.training.lr_final
            + 0.5
                * (config.training.lr - config.training.lr_final)
                * (1.0 + (std::f64::consts::PI * progress).cos());
        let loss = match training_step(
            &mut policy.params,
            &batch,
            &mut step_rng,
            lr,
            config.training.head,
            config.training.k_steps,
        ) {
            Ok(l) => l,
            Err(e) => {
                // keep whatever checkpoint was last written
                flush_curve(out_dir, &curve)?;
                return Err(e);
            }
        };
        if initial.is_nan() {
            initial = loss;
        }
        last = loss;
        curve.push((s, loss));
        if (s + 1) % config.training.checkpoint_every == 0 {
            save_policy(&policy, out_dir)?;
        }
    }
    save_policy(&policy, out_dir)?;
    flush_curve(out_dir, &curve)?;
    Ok(TrainSummary {
        steps_run: config.training.steps.saturating_sub(start_step),
        initial_loss: initial,
        final_loss: last,
        zero_predictor_loss: zero_loss,
    })
}

fn flush_curve(out_dir: &FsPath, curve: &[(usize, f64)]) -> Result<()> {
    let mut f = fs::File::create(out_dir.join(LOSS_CURVE_FILE))?;
    writeln!(f, "step,loss")?;
    for (s, l) in curve {
        writeln!(f, "{s},{l}")?;
    }
    Ok(())
}

/// Plan one problem and write the result (and selected waypoints) as JSON.
pub fn cmd_plan(
    policy_dir: &FsPath,
    problem: &PlanningProblem,
    n: usize,
    inference: &InferenceConfig,
    collision: &CollisionConfig,
    out_file: &FsPath,
) -> Result<PlanResult> {
    let policy = load_policy(policy_dir)?;
    let result = plan(
        &policy,
        problem,
        n,
        derive_seed(inference.seed, &[tag::PROBLEM]),
        inference,
        collision,
        false,
    )?;
    if let Some(parent) = out_file.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out_file, serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

/// One held-out benchmark problem with its fixed per-problem seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteProblem {
    pub family: Family,
    pub scene_seed: u64,
    pub problem: PlanningProblem,
    pub base_seed: u64,
}

/// Deterministically assemble the held-out suite: walk scene seeds upward
/// from the held-out range, keep one sampled problem per scene, and keep
/// only problems the oracle planner can solve (so success rates measure the
/// policy, not unreachable queries).
pub fn build_suite(
    arm: &ArmModel,
    suite: &SuiteConfig,
    collision: &CollisionConfig,
) -> Result<Vec<SuiteProblem>> {
    let mut problems = Vec::new();
    for (f_idx, &family) in suite.families.iter().enumerate() {
        let mut found = 0usize;
        let mut tries = 0usize;
        let mut scene_seed = suite.heldout_seed_start + (f_idx as u64) * 100_000;
        while found < suite.problems_per_family {
            if tries >= suite.max_scene_tries {
                return Err(Error::GenerationFailure {
                    family: family.name().into(),
                    seed: scene_seed,
                    reason: format!(
                        "only {found}/{} feasible held-out problems after {tries} scenes",
                        suite.problems_per_family
                    ),
                });
            }
            tries += 1;
            let this_seed = scene_seed;
            scene_seed += 1;
            let Ok(scene) = generate_scene(family, this_seed) else {
                continue;
            };
            let problem_id = format!("{}-h{}", family.name(), this_seed);
            let prob_seed = derive_seed(suite.seed, &[tag::PROBLEM, this_seed]);
            let Some(problem) = sample_problem(arm, &scene, problem_id, prob_seed, collision)
            else {
                continue;
            };
            let rrt = RrtParams {
                seed: derive_seed(suite.seed, &[tag::PLANNER, this_seed]),
                ..Default::default()
            };
            match rrt_connect(arm, &problem, &rrt, collision)? {
                Ok(_) => {
                    let base_seed =
                        derive_seed(suite.seed, &[tag::CANDIDATE, f_idx as u64, found as u64]);
                    problems.push(SuiteProblem {
                        family,
                        scene_seed: this_seed,
                        problem,
                        base_seed,
                    });
                    found += 1;
                }
                Err(_) => continue,
            }
        }
    }
    Ok(problems)
}

/// Per-problem benchmark record. Timing fields are reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub family: Family,
    pub head: HeadKind,
    pub n: usize,
    pub euler_steps: usize,
    pub problem_id: String,
    pub solved: bool,
    pub selected_index: Option<usize>,
    pub candidates_evaluated: usize,
    pub min_cost: Option<usize>,
    #[serde(skip)]
    pub time_sampling: f64,
    #[serde(skip)]
    pub time_checking: f64,
    #[serde(skip)]
    pub time_total: f64,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub rows: Vec<MetricsRow>,
    pub records: Vec<ProblemRecord>,
}

/// Run the full (family x head x N x euler) cross product over the suite.
/// Candidate sets for different N share each problem's base seed, so they
/// are nested prefixes and success is exactly monotone in N.
pub fn run_suite(
    policy: &Policy,
    problems: &[SuiteProblem],
    suite: &SuiteConfig,
    inference: &InferenceConfig,
    collision: &CollisionConfig,
) -> Result<BenchOutcome> {
    let mut records = Vec::new();
    for &head in &suite.heads {
        for &euler in &suite.euler_list {
            for &n in &suite.n_list {
                for sp in problems {
                    let cfg = InferenceConfig {
                        euler_steps: euler,
                        head,
                        ..inference.clone()
                    };
                    // a failed plan is an unsolved row, never a suite abort
                    let record = match plan(policy, &sp.problem, n, sp.base_seed, &cfg, collision, true)
                    {
                        Ok(r) => ProblemRecord {
                            family: sp.family,
                            head,
                            n,
                            euler_steps: euler,
                            problem_id: sp.problem.problem_id.clone(),
                            solved: r.solved(),
                            selected_index: r.selected_index,
                            candidates_evaluated: r.candidates_evaluated,
                            min_cost: r.min_cost,
                            time_sampling: r.timings.sampling_time,
                            time_checking: r.timings.checking_time,
                            time_total: r.timings.total_time,
                        },
                        Err(_) => ProblemRecord {
                            family: sp.family,
                            head,
                            n,
                            euler_steps: euler,
                            problem_id: sp.problem.problem_id.clone(),
                            solved: false,
                            selected_index: None,
                            candidates_evaluated: 0,
                            min_cost: None,
                            time_sampling: 0.0,
                            time_checking: 0.0,
                            time_total: 0.0,
                        },
                    };
                    records.push(record);
                }
            }
        }
    }
    let rows = aggregate(&records, suite);
    Ok(BenchOutcome { rows, records })
}

/// Summaries recomputed from the per-problem records.
pub fn aggregate(records: &[ProblemRecord], suite: &SuiteConfig) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for &family in &suite.families {
        for &head in &suite.heads {
            for &n in &suite.n_list {
                for &euler in &suite.euler_list {
                    let cell: Vec<&ProblemRecord> = records
                        .iter()
                        .filter(|r| {
                            r.family == family
                                && r.head == head
                                && r.n == n
                                && r.euler_steps == euler
                        })
                        .collect();
                    if cell.is_empty() {
                        continue;
                    }
                    let solved = cell.iter().filter(|r| r.solved).count();
                    let times: Vec<f64> = cell.iter().map(|r| r.time_total).collect();
                    let mean = times.iter().sum::<f64>() / times.len() as f64;
                    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>()
                        / times.len() as f64;
                    rows.push(MetricsRow {
                        family,
                        head,
                        n,
                        euler_steps: euler,
                        problems: cell.len(),
                        solved,
                        success_rate: 100.0 * solved as f64 / cell.len() as f64,
                        time_mean: mean,
                        time_std: var.sqrt(),
                    });
                }
            }
        }
    }
    rows
}

fn head_name(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Flow => "flow",
        HeadKind::Diffusion => "diffusion",
        HeadKind::Gmm => "gmm",
    }
}

/// Write the benchmark artifacts: deterministic report + per-problem CSV,
/// timing sidecars, and a manifest describing the sweep.
pub fn write_reports(
    out_dir: &FsPath,
    outcome: &BenchOutcome,
    suite: &SuiteConfig,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;

    let mut report = String::from("family,head,n,euler_steps,problems,solved,success_pct\n");
    let mut timings =
        String::from("family,head,n,euler_steps,time_mean_s,time_std_s\n");
    for row in &outcome.rows {
        report.push_str(&format!(
            "{},{},{},{},{},{},{:.2}\n",
            row.family.name(),
            head_name(row.head),
            row.n,
            row.euler_steps,
            row.problems,
            row.solved,
            row.success_rate
        ));
        timings.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            row.family.name(),
            head_name(row.head),
            row.n,
            row.euler_steps,
            row.time_mean,
            row.time_std
        ));
    }
    fs::write(out_dir.join(REPORT_FILE), report)?;
    fs::write(out_dir.join(REPORT_TIMINGS_FILE), timings)?;

    let mut per = String::from(
        "family,head,n,euler_steps,problem_id,solved,selected_index,candidates_evaluated,min_cost\n",
    );
    let mut per_t = String::from("family,head,n,euler_steps,problem_id,time_sampling_s,time_checking_s,time_total_s\n");
    for r in &outcome.records {
        per.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.family.name(),
            head_name(r.head),
            r.n,
            r.euler_steps,
            r.problem_id,
            r.solved,
            r.selected_index.map_or(String::from(""), |i| i.to_string()),
            r.candidates_evaluated,
            r.min_cost.map_or(String::from(""), |c| c.to_string()),
        ));
        per_t.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.family.name(),
            head_name(r.head),
            r.n,
            r.euler_steps,
            r.problem_id,
            r.time_sampling,
            r.time_checking,
            r.time_total
        ));
    }
    fs::write(out_dir.join(PER_PROBLEM_FILE), per)?;
    fs::write(out_dir.join(PER_PROBLEM_TIMINGS_FILE), per_t)?;

    let manifest = serde_json::json!({
        "families": suite.families.iter().map(|f| f.name()).collect::<Vec<_>>(),
        "heads": suite.heads.iter().map(|&h| head_name(h)).collect::<Vec<_>>(),
        "n_list": suite.n_list,
        "euler_list": suite.euler_list,
        "problems_per_family": suite.problems_per_family,
        "seed": suite.seed,
        "row_count": outcome.rows.len(),
    });
    fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Full benchmark command: build the suite, run it, write reports.
pub fn cmd_bench(
    config: &ExperimentConfig,
    policy_dir: &FsPath,
    out_dir: &FsPath,
) -> Result<BenchOutcome> {
    config.validate()?;
    let policy = load_policy(policy_dir)?;
    let problems = build_suite(&policy.arm, &config.suite, &config.collision)?;
    let outcome = run_suite(
        &policy,
        &problems,
        &config.suite,
        &config.inference,
        &config.collision,
    )?;
    write_reports(out_dir, &outcome, &config.suite)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Configuration;
    use crate::scene::Scene;

    fn toy_config(dir: &FsPath) -> ExperimentConfig {
        ExperimentConfig {
            arm: ArmModel::default_planar(2),
            gen: GenConfig {
                families: vec![Family::Tabletop],
                scenes_per_family: 2,
                problems_per_scene: 2,
                seed: 7,
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
                steps: 6,
                batch: 2,
                checkpoint_every: 3,
                ..Default::default()
            },
            inference: InferenceConfig {
                euler_steps: 2,
                chunks: 2,
                ..Default::default()
            },
            suite: SuiteConfig {
                families: vec![Family::Tabletop],
                problems_per_family: 2,
                n_list: vec![1, 3],
                euler_list: vec![2],
                max_scene_tries: 60,
                ..Default::default()
            },
            collision: CollisionConfig::default(),
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);

        let mut bad = cfg.clone();
        bad.suite.heldout_seed_start = 0;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.suite.n_list.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gen_data_writes_dataset_and_audit_passes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let summary = cmd_gen_data(&cfg).unwrap();
        assert!(summary.records >= 1);
        assert_eq!(summary.revalidation_pass_rate, 1.0);
        assert!(dir.path().join(DATASET_FILE).exists());
        assert!(dir.path().join(GEN_LOG_FILE).exists());

        // regeneration is byte-identical
        let bytes = fs::read(dir.path().join(DATASET_FILE)).unwrap();
        cmd_gen_data(&cfg).unwrap();
        assert_eq!(bytes, fs::read(dir.path().join(DATASET_FILE)).unwrap());
    }

    #[test]
    fn train_zero_steps_equals_init_and_resume_matches() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cmd_gen_data(&cfg).unwrap();
        let data = dir.path().join(DATASET_FILE);

        // zero steps: checkpoint == fresh init
        cfg.training.steps = 0;
        let run0 = dir.path().join("run0");
        cmd_train(&cfg, &data, &run0, None).unwrap();
        let p = load_policy(&run0).unwrap();
        assert_eq!(
            p.params,
            init_params(&cfg.arch, cfg.training.seed).unwrap()
        );

        // uninterrupted 6 steps vs 3 + resume 3 (fixed decay horizon so the
        // interrupted run sees the same lr schedule)
        cfg.training.steps = 6;
        cfg.training.lr_decay_steps = 6;
        let full = dir.path().join("full");
        cmd_train(&cfg, &data, &full, None).unwrap();
        let mut half_cfg = cfg.clone();
        half_cfg.training.steps = 3;
        let part = dir.path().join("part");
        cmd_train(&half_cfg, &data, &part, None).unwrap();
        cmd_train(&cfg, &data, &part, Some(&part)).unwrap();
        assert_eq!(
            fs::read(full.join(POLICY_CHECKPOINT_FILE)).unwrap(),
            fs::read(part.join(POLICY_CHECKPOINT_FILE)).unwrap()
        );
        // loss curve exists with header + rows
        let curve = fs::read_to_string(full.join(LOSS_CURVE_FILE)).unwrap();
        assert!(curve.starts_with("step,loss\n"));
        assert_eq!(curve.lines().count(), 1 + 6);
    }

    #[test]
    fn plan_command_trivial_problem() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cfg.training.steps = 1;
        cmd_gen_data(&cfg).unwrap();
        let run = dir.path().join("run");
        cmd_train(&cfg, &dir.path().join(DATASET_FILE), &run, None).unwrap();

        let q = Configuration::new(vec![0.3, 0.3]);
        let problem = PlanningProblem {
            scene: Scene::empty(),
            q_start: q.clone(),
            q_goal: q,
            problem_id: "same".into(),
        };
        let out = dir.path().join("plan.json");
        let r = cmd_plan(&run, &problem, 1, &cfg.inference, &cfg.collision, &out).unwrap();
        assert!(r.solved());
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.contains("\"status\": \"solved\""));
        // timings never serialized
        assert!(!text.contains("time"));

        // same seed, same output file
        let out2 = dir.path().join("plan2.json");
        cmd_plan(&run, &problem, 1, &cfg.inference, &cfg.collision, &out2).unwrap();
        assert_eq!(text, fs::read_to_string(out2).unwrap());
    }

    #[test]
    fn bench_cross_product_and_monotonicity() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cfg.training.steps = 2;
        cmd_gen_data(&cfg).unwrap();
        let run = dir.path().join("run");
        cmd_train(&cfg, &dir.path().join(DATASET_FILE), &run, None).unwrap();

        let bench_dir = dir.path().join("bench");
        let outcome = cmd_bench(&cfg, &run, &bench_dir).unwrap();
        let expect_rows = cfg.suite.families.len()
            * cfg.suite.heads.len()
            * cfg.suite.n_list.len()
            * cfg.suite.euler_list.len();
        assert_eq!(outcome.rows.len(), expect_rows);
        for row in &outcome.rows {
            assert!(row.success_rate >= 0.0 && row.success_rate <= 100.0);
            assert!(row.problems == cfg.suite.problems_per_family);
        }

        // per-problem prefix monotonicity across the N list
        for sp_id in outcome.records.iter().map(|r| &r.problem_id) {
            let mut by_n: Vec<(usize, bool)> = outcome
                .records
                .iter()
                .filter(|r| &r.problem_id == sp_id)
                .map(|r| (r.n, r.solved))
                .collect();
            by_n.sort_by_key(|(n, _)| *n);
            for w in by_n.windows(2) {
                assert!(!w[0].1 || w[1].1, "solved regressed for {sp_id}");
            }
        }

        // aggregation audit: summary rows recomputed from records match
        let rows2 = aggregate(&outcome.records, &cfg.suite);
        assert_eq!(outcome.rows, rows2);

        // deterministic artifacts reproduce byte-for-byte
        let report = fs::read(bench_dir.join(REPORT_FILE)).unwrap();
        let per = fs::read(bench_dir.join(PER_PROBLEM_FILE)).unwrap();
        let bench2 = dir.path().join("bench2");
        cmd_bench(&cfg, &run, &bench2).unwrap();
        assert_eq!(report, fs::read(bench2.join(REPORT_FILE)).unwrap());
        assert_eq!(per, fs::read(bench2.join(PER_PROBLEM_FILE)).unwrap());
        assert!(bench_dir.join(MANIFEST_FILE).exists());
        assert!(bench_dir.join(REPORT_TIMINGS_FILE).exists());
    }
}
