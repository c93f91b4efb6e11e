//! Procedural planning scenes: convex obstacle generation per family,
//! exact signed-distance queries, and boundary point-cloud sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{robot_points, ArmModel, Configuration, Point2, PointCloud};
use crate::rng::{stream, tag};

/// Signed distance returned for queries against an empty scene. Finite so
/// serialized reports never carry infinities.
pub const EMPTY_SCENE_SDF: f64 = 1e9;

/// Current on-disk scene format.
pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Workspace rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point2,
    pub max: Point2,
}

impl Bounds {
    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    /// Default desk-scale workspace for unit-link arms (reach 2 plus margin).
    pub fn default_workspace() -> Self {
        Bounds {
            min: Point2::new(-2.5, -2.5),
            max: Point2::new(2.5, 2.5),
        }
    }
}

/// Convex obstacle with an exact signed distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Obstacle {
    Circle { center: Point2, radius: f64 },
    Rect { center: Point2, half_extents: Point2 },
}

impl Obstacle {
    /// Exact signed distance, negative inside.
    pub fn sdf(&self, p: &Point2) -> f64 {
        match self {
            Obstacle::Circle { center, radius } => p.dist(center) - radius,
            Obstacle::Rect {
                center,
                half_extents,
            } => {
                let dx = (p.x - center.x).abs() - half_extents.x;
                let dy = (p.y - center.y).abs() - half_extents.y;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
        }
    }

    pub fn perimeter(&self) -> f64 {
        match self {
            Obstacle::Circle { radius, .. } => 2.0 * std::f64::consts::PI * radius,
            Obstacle::Rect { half_extents, .. } => 4.0 * (half_extents.x + half_extents.y),
        }
    }

    /// Point on the boundary at perimeter parameter `s` in [0, 1).
    pub fn boundary_point(&self, s: f64) -> Point2 {
        match self {
            Obstacle::Circle { center, radius } => {
                let a = 2.0 * std::f64::consts::PI * s;
                Point2::new(center.x + radius * a.cos(), center.y + radius * a.sin())
            }
            Obstacle::Rect {
                center,
                half_extents,
            } => {
                let (hx, hy) = (half_extents.x, half_extents.y);
                let mut t = s * self.perimeter();
                // walk the four edges counterclockwise from the bottom-left corner
                if t < 2.0 * hx {
                    return Point2::new(center.x - hx + t, center.y - hy);
                }
                t -= 2.0 * hx;
                if t < 2.0 * hy {
                    return Point2::new(center.x + hx, center.y - hy + t);
                }
                t -= 2.0 * hy;
                if t < 2.0 * hx {
                    return Point2::new(center.x + hx - t, center.y + hy);
                }
                t -= 2.0 * hx;
                Point2::new(center.x - hx, center.y + hy - t)
            }
        }
    }
}

/// Scene family tags mirroring the four held-out task groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Tabletop,
    Box,
    Bins,
    Shelf,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Tabletop, Family::Box, Family::Bins, Family::Shelf];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Tabletop => "tabletop",
            Family::Box => "box",
            Family::Bins => "bins",
            Family::Shelf => "shelf",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        match s {
            "tabletop" => Ok(Family::Tabletop),
            "box" => Ok(Family::Box),
            "bins" => Ok(Family::Bins),
            "shelf" => Ok(Family::Shelf),
            other => Err(Error::InvalidArgument(format!(
                "unknown scene family '{other}'"
            ))),
        }
    }

    fn id(&self) -> u64 {
        match self {
            Family::Tabletop => 0,
            Family::Box => 1,
            Family::Bins => 2,
            Family::Shelf => 3,
        }
    }
}

/// Immutable planning scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub format_version: u32,
    pub family: Family,
    pub seed: u64,
    pub bounds: Bounds,
    pub obstacles: Vec<Obstacle>,
}

impl Scene {
    pub fn empty() -> Scene {
        Scene {
            format_version: SCENE_FORMAT_VERSION,
            family: Family::Tabletop,
            seed: 0,
            bounds: Bounds::default_workspace(),
            obstacles: Vec::new(),
        }
    }
}

/// Minimum signed distance from `p` to the scene, negative inside any
/// obstacle. Empty scene returns the finite sentinel.
pub fn scene_sdf(scene: &Scene, p: &Point2) -> f64 {
    scene
        .obstacles
        .iter()
        .map(|o| o.sdf(p))
        .fold(EMPTY_SCENE_SDF, f64::min)
}

/// Scene boundary cloud plus an explicit empty-scene marker.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCloud {
    pub cloud: PointCloud,
    pub empty_scene: bool,
}

/// `n_w` points on obstacle boundaries, allocated to obstacles
/// proportionally to perimeter (largest-remainder rounding), positions
/// uniform along each boundary. Deterministic given `seed`.
pub fn scene_points(scene: &Scene, n_w: usize, seed: u64) -> Result<SceneCloud> {
    if n_w == 0 {
        return Err(Error::InvalidArgument("n_w must be positive".into()));
    }
    if scene.obstacles.is_empty() {
        return Ok(SceneCloud {
            cloud: PointCloud { points: Vec::new() },
            empty_scene: true,
        });
    }
    let perims: Vec<f64> = scene.obstacles.iter().map(|o| o.perimeter()).collect();
    let total: f64 = perims.iter().sum();
    // largest-remainder allocation
    let quotas: Vec<f64> = perims.iter().map(|p| p / total * n_w as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut short = n_w - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut idx = 0;
    while short > 0 {
        counts[order[idx % order.len()]] += 1;
        idx += 1;
        short -= 1;
    }
    let mut rng = stream(seed, &[tag::SCENE_POINTS]);
    let mut points = Vec::with_capacity(n_w);
    for (obstacle, count) in scene.obstacles.iter().zip(&counts) {
        for _ in 0..*count {
            points.push(obstacle.boundary_point(rng.gen::<f64>()));
        }
    }
    Ok(SceneCloud {
        cloud: PointCloud { points },
        empty_scene: false,
    })
}

const GENERATION_RETRY_CAP: usize = 32;

/// Deterministic procedural scene generation. The generator keeps obstacles
/// disjoint and inside bounds, keeps a clear disk around the arm base, and
/// retries (up to a cap) until random free configurations with positive
/// clearance exist for the default arm of matching scale.
pub fn generate_scene(family: Family, seed: u64) -> Result<Scene> {
    for attempt in 0..GENERATION_RETRY_CAP {
        let mut rng = stream(seed, &[tag::SCENE, family.id(), attempt as u64]);
        let bounds = Bounds::default_workspace();
        let obstacles = match family {
            Family::Tabletop => gen_tabletop(&mut rng),
            Family::Box => gen_box(&mut rng),
            Family::Bins => gen_bins(&mut rng),
            Family::Shelf => gen_shelf(&mut rng),
        };
        let scene = Scene {
            format_version: SCENE_FORMAT_VERSION,
            family,
            seed,
            bounds,
            obstacles,
        };
        if scene_admits_free_pair(&scene, seed, attempt as u64) {
            return Ok(scene);
        }
    }
    Err(Error::GenerationFailure {
        family: family.name().into(),
        seed,
        reason: format!("no free start/goal pair after {GENERATION_RETRY_CAP} attempts"),
    })
}

/// Probe: at least two random configurations of the default 2-DOF arm must
/// have strictly positive clearance.
fn scene_admits_free_pair(scene: &Scene, seed: u64, attempt: u64) -> bool {
    let arm = ArmModel::default_planar(2);
    let mut rng = stream(seed, &[tag::SCENE, 99, attempt]);
    let mut free = 0usize;
    for _ in 0..200 {
        let q = Configuration::new(vec![
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        ]);
        let pc = robot_points(&arm, &q, 8).expect("probe dof");
        let clear = pc
            .points
            .iter()
            .map(|p| scene_sdf(scene, p) - arm.link_radius)
            .fold(f64::INFINITY, f64::min);
        if clear > 0.0 {
            free += 1;
            if free >= 2 {
                return true;
            }
        }
    }
    false
}

fn disjoint(candidate: &Obstacle, existing: &[Obstacle], margin: f64) -> bool {
    // conservative separation test via bounding circles
    let (c, r) = bounding_circle(candidate);
    existing.iter().all(|o| {
        let (oc, or) = bounding_circle(o);
        c.dist(&oc) > r + or + margin
    })
}

fn bounding_circle(o: &Obstacle) -> (Point2, f64) {
    match o {
        Obstacle::Circle { center, radius } => (*center, *radius),
        Obstacle::Rect {
            center,
            half_extents,
        } => (
            *center,
            (half_extents.x.powi(2) + half_extents.y.powi(2)).sqrt(),
        ),
    }
}

fn clear_of_base(o: &Obstacle, clearance: f64) -> bool {
    o.sdf(&Point2::new(0.0, 0.0)) > clearance
}

/// Scattered small blocks, count in [3, 8].
fn gen_tabletop(rng: &mut impl Rng) -> Vec<Obstacle> {
    let count = rng.gen_range(3..=8);
    let mut obstacles: Vec<Obstacle> = Vec::new();
    let mut guard = 0;
    while obstacles.len() < count && guard < 500 {
        guard += 1;
        let angle = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let dist = rng.gen_range(0.8..2.2);
        let center = Point2::new(dist * angle.cos(), dist * angle.sin());
        let o = if rng.gen_bool(0.5) {
            Obstacle::Circle {
                center,
                radius: rng.gen_range(0.15..0.3),
            }
        } else {
            Obstacle::Rect {
                center,
                half_extents: Point2::new(rng.gen_range(0.12..0.28), rng.gen_range(0.12..0.28)),
            }
        };
        if clear_of_base(&o, 0.4) && disjoint(&o, &obstacles, 0.15) {
            obstacles.push(o);
        }
    }
    obstacles
}

/// One hollow region: three thin walls forming an open box facing the base.
fn gen_box(rng: &mut impl Rng) -> Vec<Obstacle> {
    let angle = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let dist = rng.gen_range(1.2..1.7);
    let cx = dist * angle.cos();
    let cy = dist * angle.sin();
    let half = rng.gen_range(0.45..0.65);
    let t = 0.05; // wall half-thickness
                  // axis-aligned U: open side toward whichever axis points back at the base
    let open_left = cx > 0.0;
    let back_x = if open_left { cx + half } else { cx - half };
    vec![
        Obstacle::Rect {
            center: Point2::new(back_x, cy),
            half_extents: Point2::new(t, half),
        },
        Obstacle::Rect {
            center: Point2::new(cx, cy - half),
            half_extents: Point2::new(half, t),
        },
        Obstacle::Rect {
            center: Point2::new(cx, cy + half),
            half_extents: Point2::new(half, t),
        },
    ]
}

/// Two walled cells along the lower workspace edge.
fn gen_bins(rng: &mut impl Rng) -> Vec<Obstacle> {
    let y_floor = rng.gen_range(-2.0..-1.7);
    let wall_h = rng.gen_range(0.3..0.45);
    let span = rng.gen_range(0.9..1.2);
    let t = 0.05;
    let wall_cy = y_floor + wall_h;
    vec![
        // floor slab
        Obstacle::Rect {
            center: Point2::new(0.0, y_floor),
            half_extents: Point2::new(span + t, t),
        },
        // three upright dividers making two cells
        Obstacle::Rect {
            center: Point2::new(-span, wall_cy),
            half_extents: Point2::new(t, wall_h),
        },
        Obstacle::Rect {
            center: Point2::new(0.0, wall_cy),
            half_extents: Point2::new(t, wall_h),
        },
        Obstacle::Rect {
            center: Point2::new(span, wall_cy),
            half_extents: Point2::new(t, wall_h),
        },
    ]
}

/// Horizontal slabs spanning most of the workspace width, above and below
/// the free middle band.
fn gen_shelf(rng: &mut impl Rng) -> Vec<Obstacle> {
    let bounds = Bounds::default_workspace();
    // >= 80% of bounds width
    let half_w = rng.gen_range(0.42..0.48) * bounds.width();
    let t = rng.gen_range(0.04..0.07);
    let mut slabs = vec![
        Obstacle::Rect {
            center: Point2::new(0.0, rng.gen_range(1.2..1.7)),
            half_extents: Point2::new(half_w, t),
        },
        Obstacle::Rect {
            center: Point2::new(0.0, rng.gen_range(-1.7..-1.2)),
            half_extents: Point2::new(half_w, t),
        },
    ];
    if rng.gen_bool(0.5) {
        slabs.push(Obstacle::Rect {
            center: Point2::new(0.0, rng.gen_range(2.1..2.3)),
            half_extents: Point2::new(half_w, t),
        });
    }
    slabs
}

/// Write a scene as pretty JSON (the scene file format).
pub fn save_scene(scene: &Scene, path: &std::path::Path) -> Result<()> {
    let json = serde_json::to_string_pretty(scene)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_scene(path: &std::path::Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)?;
    let scene: Scene = serde_json::from_str(&text)?;
    if scene.format_version != SCENE_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: scene.format_version,
            expected: SCENE_FORMAT_VERSION,
        });
    }
    Ok(scene)
}
