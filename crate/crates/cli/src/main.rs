//! `flowplan` — configuration-driven harness around flowplan-core.
//!
//! Subcommands: gen-data, train, plan, bench, audit. All state flows
//! through a TOML experiment config; flags override a few common fields.
//! FLOWPLAN_OUT, if set, replaces the config's output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use flowplan_core::dataset::load_dataset;
use flowplan_core::experiment::{
    audit_dataset, cmd_bench, cmd_gen_data, cmd_plan, cmd_train, ExperimentConfig, DATASET_FILE,
};
use flowplan_core::flow::InferenceConfig;
use flowplan_core::geometry::Configuration;
use flowplan_core::nn::model::HeadKind;
use flowplan_core::oracle::PlanningProblem;
use flowplan_core::scene::load_scene;

#[derive(Parser)]
#[command(name = "flowplan", version, about = "flow-matching motion planner toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Flow,
    Diffusion,
    Gmm,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> HeadKind {
        match h {
            HeadArg::Flow => HeadKind::Flow,
            HeadArg::Diffusion => HeadKind::Diffusion,
            HeadArg::Gmm => HeadKind::Gmm,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the expert dataset and write it with a generation log
    GenData {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train the policy on a dataset file
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// dataset file (defaults to <output_dir>/dataset.jsonl)
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// run directory for checkpoint + loss curve (defaults to <output_dir>/run)
        #[arg(long)]
        out: Option<PathBuf>,
        /// resume from an existing run directory
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Plan one problem with a trained policy
    Plan {
        #[command(flatten)]
        config: ConfigArg,
        /// run directory containing policy.ckpt + policy.json
        #[arg(long)]
        policy: PathBuf,
        /// scene file (JSON); omit for an empty scene
        #[arg(long)]
        scene: Option<PathBuf>,
        /// start configuration, comma-separated radians
        #[arg(long, value_parser = parse_joints)]
        q_start: Configuration,
        /// goal configuration, comma-separated radians
        #[arg(long, value_parser = parse_joints)]
        q_goal: Configuration,
        /// candidate count; overrides the largest config N
        #[arg(long)]
        n: Option<usize>,
        /// sampling seed; overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// sampling head override
        #[arg(long)]
        head: Option<HeadArg>,
        /// output file (defaults to <output_dir>/plan.json)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the held-out benchmark suite and write the metric reports
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        /// run directory containing the trained policy
        #[arg(long)]
        policy: PathBuf,
        /// report directory (defaults to <output_dir>/bench)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Revalidate a stored dataset at validation density
    Audit {
        #[command(flatten)]
        config: ConfigArg,
        /// dataset file (defaults to <output_dir>/dataset.jsonl)
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn parse_joints(s: &str) -> Result<Configuration, String> {
    let joints: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    match joints {
        Ok(j) if !j.is_empty() => Ok(Configuration::new(j)),
        _ => Err(format!("expected comma-separated numbers, got {s:?}")),
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| e.to_string())?;
    if let Ok(root) = std::env::var("FLOWPLAN_OUT") {
        cfg.output_dir = PathBuf::from(root);
    }
    Ok(cfg)
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::GenData { config } => {
            let cfg = load_config(&config.config)?;
            let summary = cmd_gen_data(&cfg).map_err(|e| e.to_string())?;
            println!(
                "wrote {} records to {} (oracle solved {}/{}, revalidation {:.1}%)",
                summary.records,
                cfg.output_dir.join(DATASET_FILE).display(),
                summary.solved,
                summary.attempted,
                100.0 * summary.revalidation_pass_rate
            );
            Ok(())
        }
        Command::Train {
            config,
            dataset,
            out,
            resume,
        } => {
            let cfg = load_config(&config.config)?;
            let dataset = dataset.unwrap_or_else(|| cfg.output_dir.join(DATASET_FILE));
            let out = out.unwrap_or_else(|| cfg.output_dir.join("run"));
            let summary = cmd_train(&cfg, &dataset, &out, resume.as_deref())
                .map_err(|e| e.to_string())?;
            println!(
                "ran {} steps; loss {:.6} -> {:.6} (zero predictor {:.6}); checkpoint in {}",
                summary.steps_run,
                summary.initial_loss,
                summary.final_loss,
                summary.zero_predictor_loss,
                out.display()
            );
            Ok(())
        }
        Command::Plan {
            config,
            policy,
            scene,
            q_start,
            q_goal,
            n,
            seed,
            head,
            out,
        } => {
            let cfg = load_config(&config.config)?;
            let scene = match scene {
                Some(path) => load_scene(&path).map_err(|e| e.to_string())?,
                None => flowplan_core::scene::Scene::empty(),
            };
            let problem = PlanningProblem {
                scene,
                q_start,
                q_goal,
                problem_id: "cli".into(),
            };
            let n = n.unwrap_or_else(|| cfg.suite.n_list.iter().copied().max().unwrap_or(1));
            let inference = InferenceConfig {
                seed: seed.unwrap_or(cfg.inference.seed),
                head: head.map_or(cfg.inference.head, HeadKind::from),
                ..cfg.inference.clone()
            };
            let out = out.unwrap_or_else(|| cfg.output_dir.join("plan.json"));
            let result = cmd_plan(&policy, &problem, n, &inference, &cfg.collision, &out)
                .map_err(|e| e.to_string())?;
            println!(
                "{} after {} candidates; result in {}",
                if result.solved() { "solved" } else { "unsolved" },
                result.candidates_evaluated,
                out.display()
            );
            Ok(())
        }
        Command::Bench { config, policy, out } => {
            let cfg = load_config(&config.config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("bench"));
            let outcome = cmd_bench(&cfg, &policy, &out).map_err(|e| e.to_string())?;
            for row in &outcome.rows {
                println!(
                    "{:<10} n={:<4} steps={:<3} success {:>6.2}% ({}/{})",
                    row.family.name(),
                    row.n,
                    row.euler_steps,
                    row.success_rate,
                    row.solved,
                    row.problems
                );
            }
            println!("reports in {}", out.display());
            Ok(())
        }
        Command::Audit { config, dataset } => {
            let cfg = load_config(&config.config)?;
            let dataset = dataset.unwrap_or_else(|| cfg.output_dir.join(DATASET_FILE));
            let data = load_dataset(&dataset).map_err(|e| e.to_string())?;
            let summary = audit_dataset(&cfg.collision, &data).map_err(|e| e.to_string())?;
            println!(
                "{} records; revalidation pass rate {:.1}%; mean waypoints {:.1}; mean arc length {:.3}",
                summary.records,
                100.0 * summary.revalidation_pass_rate,
                summary.mean_path_waypoints,
                summary.mean_arc_length
            );
            if summary.revalidation_pass_rate < 1.0 {
                return Err("revalidation failures present".into());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
