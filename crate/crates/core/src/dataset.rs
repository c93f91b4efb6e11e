//! Supervised sample construction: oracle paths become (observation,
//! action-chunk) pairs with per-joint z-score normalization.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::collision::Path;
use crate::error::{Error, Result};
use crate::geometry::{robot_points, ArmModel, Configuration, Point2, PointCloud};
use crate::oracle::{GenConfig, PlanningProblem};
use crate::scene::{scene_points, Scene};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Placeholder scene-cloud point used when the scene has no obstacles;
/// sits outside the default workspace but stays network-scale.
pub const EMPTY_SCENE_POINT: Point2 = Point2 { x: 3.0, y: 3.0 };

/// Observation/chunk sizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Action-chunk horizon H.
    pub horizon: usize,
    /// Robot cloud size N_r (padded or truncated to this).
    pub n_r: usize,
    /// Scene cloud size N_w.
    pub n_w: usize,
    /// Chunk start stride; defaults to the horizon (no overlap).
    pub stride: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            horizon: 8,
            n_r: 32,
            n_w: 128,
            stride: 4,
        }
    }
}

/// Conditioning bundle for one policy call.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub q_t: Configuration,
    pub q_goal: Configuration,
    pub robot_cloud: PointCloud,
    pub scene_cloud: PointCloud,
}

/// H consecutive joint increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    /// horizon rows of k increments
    pub deltas: Vec<Vec<f64>>,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.deltas.len()
    }

    pub fn dof(&self) -> usize {
        self.deltas.first().map_or(0, |r| r.len())
    }

    pub fn zeros(h: usize, k: usize) -> Self {
        ActionChunk {
            deltas: vec![vec![0.0; k]; h],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.deltas.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64], h: usize, k: usize) -> Self {
        debug_assert_eq!(values.len(), h * k);
        ActionChunk {
            deltas: values.chunks(k).map(|c| c.to_vec()).collect(),
        }
    }
}

/// Per-joint z-score statistics over all chunk entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Identity stats (mean 0, std 1) for k joints.
    pub fn identity(k: usize) -> Self {
        NormStats {
            mean: vec![0.0; k],
            std: vec![1.0; k],
        }
    }

    pub fn apply(&self, chunk: &ActionChunk) -> ActionChunk {
        ActionChunk {
            deltas: chunk
                .deltas
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| (v - self.mean[j]) / self.std[j])
                        .collect()
                })
                .collect(),
        }
    }

    pub fn invert(&self, chunk: &ActionChunk) -> ActionChunk {
        ActionChunk {
            deltas: chunk
                .deltas
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| v * self.std[j] + self.mean[j])
                        .collect()
                })
                .collect(),
        }
    }
}

/// Fit per-joint mean/std over every entry of every chunk; std floored at
/// 1e-6 so degenerate data stays invertible.
pub fn fit_normalization(samples: &[ActionChunk]) -> Result<NormStats> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument(
            "cannot fit normalization on an empty sample set".into(),
        ));
    };
    let k = first.dof();
    let mut sum = vec![0.0; k];
    let mut count = 0usize;
    for chunk in samples {
        for row in &chunk.deltas {
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
            }
            count += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0; k];
    for chunk in samples {
        for row in &chunk.deltas {
            for (j, v) in row.iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(1e-6))
        .collect();
    Ok(NormStats { mean, std })
}

/// Sliding chunk extraction with start indices 0, stride, 2*stride, ...;
/// the tail is padded by repeating the final waypoint (zero increments).
pub fn chunk_path_with_stride(
    path: &Path,
    horizon: usize,
    stride: usize,
) -> Vec<(Configuration, ActionChunk)> {
    debug_assert!(horizon >= 1 && stride >= 1);
    let w = &path.waypoints;
    if w.len() <= 1 {
        let q = w.first().cloned().unwrap_or(Configuration::new(vec![]));
        let k = q.dof();
        return vec![(q, ActionChunk::zeros(horizon, k))];
    }
    let k = w[0].dof();
    let mut out = Vec::new();
    let mut t = 0usize;
    while t < w.len() - 1 {
        let mut deltas = Vec::with_capacity(horizon);
        for j in 0..horizon {
            let a = (t + j).min(w.len() - 1);
            let b = (t + j + 1).min(w.len() - 1);
            deltas.push(
                (0..k)
                    .map(|d| w[b].joints[d] - w[a].joints[d])
                    .collect::<Vec<f64>>(),
            );
        }
        out.push((w[t].clone(), ActionChunk { deltas }));
        t += stride;
    }
    out
}

/// Non-overlapping chunks (stride equals the horizon).
pub fn chunk_path(path: &Path, horizon: usize) -> Vec<(Configuration, ActionChunk)> {
    chunk_path_with_stride(path, horizon, horizon)
}

/// Build the conditioning observation at `q_t`: robot centerline cloud
/// padded/truncated to N_r and the scene boundary cloud at N_w.
/// Deterministic given `scene_seed`.
pub fn make_observation(
    model: &ArmModel,
    q_t: &Configuration,
    q_goal: &Configuration,
    scene: &Scene,
    config: &DatasetConfig,
    scene_seed: u64,
) -> Result<Observation> {
    let spl = (config.n_r + model.dof() - 1) / model.dof();
    let mut robot = robot_points(model, q_t, spl.max(2))?;
    robot.points.truncate(config.n_r);
    while robot.points.len() < config.n_r {
        let last = *robot.points.last().unwrap();
        robot.points.push(last);
    }
    let sc = scene_points_padded(scene, config.n_w, scene_seed)?;
    Ok(Observation {
        q_t: q_t.clone(),
        q_goal: q_goal.clone(),
        robot_cloud: robot,
        scene_cloud: sc,
    })
}

/// Scene cloud at exactly `n_w` points; an empty scene yields N_w copies of
/// the out-of-workspace placeholder.
pub fn scene_points_padded(scene: &Scene, n_w: usize, seed: u64) -> Result<PointCloud> {
    let sc = scene_points(scene, n_w, seed)?;
    if sc.empty_scene {
        Ok(PointCloud {
            points: vec![EMPTY_SCENE_POINT; n_w],
        })
    } else {
        Ok(sc.cloud)
    }
}

/// One stored expert path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub problem: PlanningProblem,
    pub waypoints: Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub arm: ArmModel,
    pub gen_config: GenConfig,
    pub dataset_config: DatasetConfig,
    pub norm: NormStats,
}

/// In-memory dataset: header plus expert-path records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    /// All normalized training chunks with their chunk-start configurations.
    pub fn training_chunks(&self) -> Vec<(usize, Configuration, ActionChunk)> {
        let cfg = &self.header.dataset_config;
        let mut out = Vec::new();
        for (ri, record) in self.records.iter().enumerate() {
            for (q_t, chunk) in
                chunk_path_with_stride(&record.waypoints, cfg.horizon, cfg.stride)
            {
                out.push((ri, q_t, self.header.norm.apply(&chunk)));
            }
        }
        out
    }
}

/// Assemble a dataset from oracle paths: fit normalization over all raw
/// chunks and attach it to the header.
pub fn build_dataset(
    arm: &ArmModel,
    gen_config: &GenConfig,
    dataset_config: &DatasetConfig,
    paths: &[crate::oracle::OraclePath],
) -> Result<Dataset> {
    let mut raw_chunks = Vec::new();
    for op in paths {
        for (_, chunk) in chunk_path_with_stride(&op.path, dataset_config.horizon, dataset_config.stride)
        {
            raw_chunks.push(chunk);
        }
    }
    let norm = fit_normalization(&raw_chunks)?;
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            arm: arm.clone(),
            gen_config: gen_config.clone(),
            dataset_config: *dataset_config,
            norm,
        },
        records: paths
            .iter()
            .map(|op| DatasetRecord {
                problem: op.problem.clone(),
                waypoints: op.path.clone(),
            })
            .collect(),
    })
}

/// JSON-lines dataset file: header line, then one record per line.
pub fn save_dataset(dataset: &Dataset, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, &dataset.header)?;
    w.write_all(b"\n")?;
    for record in &dataset.records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| Error::Truncated {
        record: 0,
        reason: "missing header line".into(),
    })??;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Truncated {
            record: 0,
            reason: format!("unreadable header: {e}"),
        })?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: header.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Truncated {
            record: i,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(Dataset { header, records })
}
