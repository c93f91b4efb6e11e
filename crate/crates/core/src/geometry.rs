//! Planar serial-arm kinematics and configuration-space helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D workspace point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Joint-angle vector of a k-DOF arm. Angles are stored unwrapped; no
/// modular reduction is ever applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub joints: Vec<f64>,
}

impl Configuration {
    pub fn new(joints: Vec<f64>) -> Self {
        debug_assert!(joints.iter().all(|a| a.is_finite()));
        Configuration { joints }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Euclidean joint-space distance.
    pub fn joint_dist(&self, other: &Configuration) -> f64 {
        self.joints
            .iter()
            .zip(&other.joints)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Planar revolute chain with cumulative joint angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    pub link_radius: f64,
    pub base: Point2,
    /// Per-joint [lo, hi] limits in radians.
    pub joint_limits: Vec<(f64, f64)>,
}

impl Default for ArmModel {
    fn default() -> Self {
        ArmModel::default_planar(2)
    }
}

impl ArmModel {
    /// Default desk-scale arm: k unit links, base at the origin,
    /// limits [-pi, pi] per joint.
    pub fn default_planar(k: usize) -> Self {
        ArmModel {
            link_lengths: vec![1.0; k],
            link_radius: 0.08,
            base: Point2::new(0.0, 0.0),
            joint_limits: vec![(-std::f64::consts::PI, std::f64::consts::PI); k],
        }
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.link_lengths.is_empty() || self.link_lengths.iter().any(|&l| l <= 0.0) {
            return Err(Error::BadConfig("link lengths must be positive".into()));
        }
        if self.link_radius <= 0.0 {
            return Err(Error::BadConfig("link radius must be positive".into()));
        }
        if self.joint_limits.len() != self.link_lengths.len()
            || self.joint_limits.iter().any(|&(lo, hi)| lo >= hi)
        {
            return Err(Error::BadConfig("joint limits must satisfy lo < hi".into()));
        }
        Ok(())
    }

    fn check_dof(&self, q: &Configuration) -> Result<()> {
        if q.dof() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                got: q.dof(),
            });
        }
        Ok(())
    }
}

/// Ordered list of 2-D points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point2>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Joint positions of the chain: base, each joint, end effector (k+1 points).
pub fn forward_kinematics(model: &ArmModel, q: &Configuration) -> Result<Vec<Point2>> {
    model.check_dof(q)?;
    let mut pts = Vec::with_capacity(model.dof() + 1);
    let mut p = model.base;
    pts.push(p);
    let mut angle = 0.0;
    for (len, theta) in model.link_lengths.iter().zip(&q.joints) {
        angle += theta;
        p = Point2::new(p.x + len * angle.cos(), p.y + len * angle.sin());
        pts.push(p);
    }
    Ok(pts)
}

/// End-effector position.
pub fn end_effector(model: &ArmModel, q: &Configuration) -> Result<Point2> {
    Ok(*forward_kinematics(model, q)?.last().unwrap())
}

/// Uniform centerline samples along each link, `samples_per_link` per link,
/// endpoints included. Deterministic.
pub fn robot_points(
    model: &ArmModel,
    q: &Configuration,
    samples_per_link: usize,
) -> Result<PointCloud> {
    if samples_per_link < 2 {
        return Err(Error::InvalidArgument(
            "samples_per_link must be at least 2".into(),
        ));
    }
    let joints = forward_kinematics(model, q)?;
    let mut points = Vec::with_capacity(model.dof() * samples_per_link);
    for seg in joints.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        for i in 0..samples_per_link {
            let s = i as f64 / (samples_per_link - 1) as f64;
            points.push(Point2::new(a.x + s * (b.x - a.x), a.y + s * (b.y - a.y)));
        }
    }
    Ok(PointCloud { points })
}

/// Componentwise linear interpolation (1-s)*a + s*b.
pub fn interpolate(q_a: &Configuration, q_b: &Configuration, s: f64) -> Result<Configuration> {
    if q_a.dof() != q_b.dof() {
        return Err(Error::DimensionMismatch {
            expected: q_a.dof(),
            got: q_b.dof(),
        });
    }
    debug_assert!((0.0..=1.0).contains(&s));
    Ok(Configuration::new(
        q_a.joints
            .iter()
            .zip(&q_b.joints)
            .map(|(a, b)| (1.0 - s) * a + s * b)
            .collect(),
    ))
}

/// True iff the end effectors of `q` and `q_goal` are within `eps_goal`.
pub fn goal_reached(
    model: &ArmModel,
    q: &Configuration,
    q_goal: &Configuration,
    eps_goal: f64,
) -> Result<bool> {
    debug_assert!(eps_goal > 0.0);
    let ee = end_effector(model, q)?;
    let ee_goal = end_effector(model, q_goal)?;
    Ok(ee.dist(&ee_goal) <= eps_goal)
}
