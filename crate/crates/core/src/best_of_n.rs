//! Inference-time best-of-N: sample N candidate rollouts and return the
//! first goal-reaching, collision-free one.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::collision::{batch_path_costs, path_cost, CollisionConfig, Path};
use crate::error::Result;
use crate::flow::{rollout_batch, InferenceConfig, Policy, RolloutResult};
use crate::geometry::ArmModel;
use crate::oracle::PlanningProblem;
use crate::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Solved,
    Unsolved,
}

/// Wall-clock breakdown; excluded from serialized results so artifacts stay
/// byte-stable across runs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timings {
    pub sampling_time: f64,
    pub checking_time: f64,
    pub total_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub status: PlanStatus,
    pub selected_path: Option<Path>,
    pub selected_index: Option<usize>,
    pub candidates_evaluated: usize,
    /// goal flag of the selected path (false when unsolved)
    pub goal_reached: bool,
    /// smallest indicator cost among evaluated candidates (diagnostics when
    /// unsolved; 0 when solved)
    pub min_cost: Option<usize>,
    #[serde(skip)]
    pub timings: Timings,
}

impl PlanResult {
    pub fn solved(&self) -> bool {
        self.status == PlanStatus::Solved
    }
}

/// Scan candidates in index order; the first one that reached the goal AND
/// has zero indicator cost wins. Errored candidates (`None`) are skipped but
/// still count as evaluated. With `full_eval` every candidate is costed
/// (benchmark mode); otherwise the scan stops at the first qualifier.
pub fn select_first_collision_free(
    model: &ArmModel,
    candidates: &[Option<&RolloutResult>],
    scene: &Scene,
    collision: &CollisionConfig,
    full_eval: bool,
) -> Result<PlanResult> {
    assert!(!candidates.is_empty());
    let mut evaluated = 0usize;
    let mut min_cost: Option<usize> = None;
    let mut selected: Option<(usize, &RolloutResult)> = None;

    if full_eval {
        let paths: Vec<Path> = candidates
            .iter()
            .filter_map(|c| c.map(|r| r.path.clone()))
            .collect();
        let reports = batch_path_costs(
            model,
            &paths,
            scene,
            collision.delta_safe,
            collision.samples_per_link,
        )?;
        let mut ri = 0usize;
        for (i, cand) in candidates.iter().enumerate() {
            evaluated += 1;
            let Some(r) = cand else { continue };
            let report = &reports[ri];
            ri += 1;
            min_cost = Some(min_cost.map_or(report.cost, |m| m.min(report.cost)));
            if selected.is_none() && r.reached_goal && report.cost == 0 {
                selected = Some((i, r));
            }
        }
    } else {
        for (i, cand) in candidates.iter().enumerate() {
            evaluated += 1;
            let Some(r) = cand else { continue };
            let report = path_cost(
                model,
                &r.path,
                scene,
                collision.delta_safe,
                collision.samples_per_link,
            )?;
            min_cost = Some(min_cost.map_or(report.cost, |m| m.min(report.cost)));
            if r.reached_goal && report.cost == 0 {
                selected = Some((i, r));
                break;
            }
        }
    }

    Ok(match selected {
        Some((i, r)) => PlanResult {
            status: PlanStatus::Solved,
            selected_path: Some(r.path.clone()),
            selected_index: Some(i),
            candidates_evaluated: evaluated,
            goal_reached: true,
            min_cost: Some(0),
            timings: Timings::default(),
        },
        None => PlanResult {
            status: PlanStatus::Unsolved,
            selected_path: None,
            selected_index: None,
            candidates_evaluated: evaluated,
            goal_reached: false,
            min_cost,
            timings: Timings::default(),
        },
    })
}

/// End-to-end neural planning: N candidate rollouts (nested-prefix rng
/// streams keyed by candidate index), then first-collision-free selection.
/// N=1 is the pure end-to-end policy.
pub fn plan(
    policy: &Policy,
    problem: &PlanningProblem,
    n: usize,
    base_seed: u64,
    inference: &InferenceConfig,
    collision: &CollisionConfig,
    full_eval: bool,
) -> Result<PlanResult> {
    assert!(n >= 1);
    let start = Instant::now();
    let rollouts = rollout_batch(policy, problem, n, base_seed, inference);
    let sampling_time = start.elapsed().as_secs_f64();

    let check_start = Instant::now();
    let candidates: Vec<Option<&RolloutResult>> =
        rollouts.iter().map(|r| r.as_ref().ok()).collect();
    let mut result = select_first_collision_free(
        &policy.arm,
        &candidates,
        &problem.scene,
        collision,
        full_eval,
    )?;
    let checking_time = check_start.elapsed().as_secs_f64();
    result.timings = Timings {
        sampling_time,
        checking_time,
        total_time: start.elapsed().as_secs_f64(),
    };
    Ok(result)
}
