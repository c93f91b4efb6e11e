//! Robot-scene clearance queries and the per-path indicator cost used by
//! best-of-N selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{interpolate, robot_points, ArmModel, Configuration};
use crate::scene::{scene_sdf, Scene};

/// Ordered waypoint sequence in configuration space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub waypoints: Vec<Configuration>,
}

impl Path {
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Total joint-space arc length.
    pub fn arc_length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| w[0].joint_dist(&w[1]))
            .sum()
    }
}

/// Collision-check configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollisionConfig {
    /// Safety clearance threshold for the indicator cost.
    pub delta_safe: f64,
    /// Robot sampling density for policy-time checks.
    pub samples_per_link: usize,
    /// Denser sampling used for final validation of stored paths.
    pub validation_samples_per_link: usize,
    /// Joint-space spacing for edge checks.
    pub edge_resolution: f64,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        CollisionConfig {
            delta_safe: 0.02,
            samples_per_link: 8,
            validation_samples_per_link: 32,
            edge_resolution: 0.02,
        }
    }
}

/// Per-path indicator cost report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    /// Number of waypoints with clearance below `delta_safe`.
    pub cost: usize,
    pub first_violation_index: Option<usize>,
    /// Minimum clearance over all waypoints.
    pub min_clearance: f64,
}

/// Minimum signed distance between the robot surface at `q` and the scene:
/// min over centerline samples of scene SDF minus the link radius.
pub fn min_distance(
    model: &ArmModel,
    q: &Configuration,
    scene: &Scene,
    samples_per_link: usize,
) -> Result<f64> {
    let pc = robot_points(model, q, samples_per_link)?;
    Ok(pc
        .points
        .iter()
        .map(|p| scene_sdf(scene, p) - model.link_radius)
        .fold(f64::INFINITY, f64::min))
}

/// Indicator cost over waypoints: each waypoint with clearance below
/// `delta_safe` adds one. No sub-waypoint interpolation.
pub fn path_cost(
    model: &ArmModel,
    path: &Path,
    scene: &Scene,
    delta_safe: f64,
    samples_per_link: usize,
) -> Result<CollisionReport> {
    debug_assert!(delta_safe >= 0.0);
    let mut cost = 0usize;
    let mut first = None;
    let mut min_clearance = f64::INFINITY;
    for (i, q) in path.waypoints.iter().enumerate() {
        let d = min_distance(model, q, scene, samples_per_link)?;
        min_clearance = min_clearance.min(d);
        if d < delta_safe {
            cost += 1;
            if first.is_none() {
                first = Some(i);
            }
        }
    }
    Ok(CollisionReport {
        cost,
        first_violation_index: first,
        min_clearance,
    })
}

/// Batched path costs; element `i` equals `path_cost(paths[i])` bit-exactly
/// regardless of the parallel schedule.
pub fn batch_path_costs(
    model: &ArmModel,
    paths: &[Path],
    scene: &Scene,
    delta_safe: f64,
    samples_per_link: usize,
) -> Result<Vec<CollisionReport>> {
    paths
        .par_iter()
        .map(|p| path_cost(model, p, scene, delta_safe, samples_per_link))
        .collect()
}

/// True iff every interpolated configuration on a grid with joint-space
/// spacing at most `resolution` (endpoints included) has nonnegative
/// clearance.
pub fn edge_collision_free(
    model: &ArmModel,
    q_a: &Configuration,
    q_b: &Configuration,
    scene: &Scene,
    resolution: f64,
    samples_per_link: usize,
) -> Result<bool> {
    debug_assert!(resolution > 0.0);
    let dist = q_a.joint_dist(q_b);
    let steps = (dist / resolution).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let s = i as f64 / steps as f64;
        let q = interpolate(q_a, q_b, s)?;
        if min_distance(model, &q, scene, samples_per_link)? < 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}
