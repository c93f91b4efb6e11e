//! Flow-matching motion policy toolkit for a planar k-DOF manipulator:
//! scene generation, sampling-based oracle planning, expert datasets,
//! a small transformer policy trained by flow matching, and best-of-N
//! neural planning with collision-cost selection.

pub mod best_of_n;
pub mod collision;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod geometry;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod scene;

pub use collision::{batch_path_costs, min_distance, path_cost, CollisionConfig, CollisionReport, Path};
pub use dataset::{ActionChunk, Dataset, DatasetConfig, NormStats, Observation};
pub use error::{Error, Result};
pub use geometry::{ArmModel, Configuration, Point2, PointCloud};
pub use oracle::{GenConfig, OraclePath, PlanningProblem, RrtParams};
pub use scene::{Bounds, Family, Obstacle, Scene, SceneCloud};
