//! Shared fixtures for the criterion benchmarks.

use flowplan_core::dataset::{make_observation, DatasetConfig, NormStats, Observation};
use flowplan_core::flow::Policy;
use flowplan_core::geometry::{ArmModel, Configuration};
use flowplan_core::nn::model::{init_params, ArchConfig};
use flowplan_core::scene::{generate_scene, Family, Scene};
use flowplan_core::Result;

pub fn bench_arm() -> ArmModel {
    ArmModel::default_planar(2)
}

pub fn bench_scene() -> Scene {
    generate_scene(Family::Tabletop, 42).expect("bench scene")
}

pub fn bench_policy() -> Result<Policy> {
    let arch = ArchConfig::default();
    let arm = bench_arm();
    Ok(Policy {
        params: init_params(&arch, 7)?,
        norm: NormStats::identity(arm.dof()),
        data_cfg: DatasetConfig::default(),
        arm,
    })
}

pub fn bench_observation(policy: &Policy, scene: &Scene) -> Result<Observation> {
    let q = Configuration::new(vec![0.4, -0.3]);
    let goal = Configuration::new(vec![-0.5, 0.8]);
    make_observation(&policy.arm, &q, &goal, scene, &policy.data_cfg, scene.seed)
}
