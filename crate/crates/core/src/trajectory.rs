//! Trajectory embeddings: a driven path, seen from the car, compressed to
//! the `x` offsets of a fitted cubic Bezier at evenly spaced forward
//! distances.
//!
//! Vehicle frame: origin at the car, `+y` along the heading, `+x` to the
//! car's right as drawn on the grid image.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolve::{drive, EvolveError, RolloutEnv};
use crate::geometry::{BezierCurve, GeometryError, Point2, DEFAULT_FIT_DEGREE};
use crate::policy::MlpPolicy;
use crate::track::{generate_track, rasterize, OccupancyGrid, TrackError, TrackParams};
use crate::vehicle::BicycleState;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("path has {0} points; at least 4 are needed")]
    PathTooShort(usize),
    #[error(
        "path reaches only {reached:.1} px ahead, embedding needs {needed:.1} px \
         ({steps_survived} steps driven)"
    )]
    Horizon {
        reached: f64,
        needed: f64,
        steps_survived: usize,
    },
    #[error("invalid embedding parameters: {0}")]
    InvalidParams(&'static str),
    #[error("fitting the path failed: {0}")]
    Fit(#[from] GeometryError),
    #[error(transparent)]
    Rollout(#[from] EvolveError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("export produced no samples")]
    EmptyExport,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TrajectoryError {
    /// Failures that mean "no usable plan from here" rather than a bug or
    /// I/O problem.
    pub fn is_planning_failure(&self) -> bool {
        matches!(
            self,
            TrajectoryError::Horizon { .. }
                | TrajectoryError::PathTooShort(_)
                | TrajectoryError::Fit(_)
        )
    }
}

/// World → vehicle frame.
pub fn to_vehicle_frame(pose: &BicycleState, p: Point2) -> Point2 {
    let d = p - pose.position();
    let (s, c) = pose.yaw.sin_cos();
    Point2::new(-s * d.x + c * d.y, c * d.x + s * d.y)
}

/// Vehicle → world frame.
pub fn to_world_frame(pose: &BicycleState, q: Point2) -> Point2 {
    let (s, c) = pose.yaw.sin_cos();
    pose.position() + Point2::new(-s * q.x + c * q.y, c * q.x + s * q.y)
}

/// Fraction of `y_step` the fitted path extends past the horizon. Enough
/// that the fit still reaches the last sample; more lets the cubic
/// overshoot on paths that bend sideways near the horizon.
pub const FIT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingConfig {
    pub k: usize,
    pub y_step: f64,
    /// Policy steps simulated by the oracle per plan.
    pub horizon_steps: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            k: 10,
            y_step: 15.0,
            horizon_steps: 200,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.k == 0 {
            return Err(TrajectoryError::InvalidParams("k must be positive"));
        }
        if !(self.y_step.is_finite() && self.y_step > 0.0) {
            return Err(TrajectoryError::InvalidParams("y_step must be positive"));
        }
        if self.horizon_steps == 0 {
            return Err(TrajectoryError::InvalidParams("horizon_steps must be positive"));
        }
        Ok(())
    }

    /// Forward distance the embedding spans.
    pub fn horizon(&self) -> f64 {
        self.k as f64 * self.y_step
    }

    /// Forward distance kept for fitting, slightly past the horizon.
    fn fit_reach(&self) -> f64 {
        (self.k as f64 + FIT_MARGIN) * self.y_step
    }
}

/// `xs[i]` is the lateral offset at forward distance `(i + 1) · y_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEmbedding {
    pub k: usize,
    pub y_step: f64,
    pub xs: Vec<f64>,
    /// Car pose the embedding is expressed in.
    pub frame: BicycleState,
}

impl TrajectoryEmbedding {
    /// Sample points in the vehicle frame.
    pub fn local_points(&self) -> Vec<Point2> {
        self.xs
            .iter()
            .enumerate()
            .map(|(i, &x)| Point2::new(x, (i + 1) as f64 * self.y_step))
            .collect()
    }

    pub fn world_points(&self) -> Vec<Point2> {
        self.local_points()
            .into_iter()
            .map(|q| to_world_frame(&self.frame, q))
            .collect()
    }
}

/// Fits and resamples a world-frame path as seen from `pose`.
///
/// The path is cut at its first backwards step (in the vehicle frame) and
/// after the first point [`FIT_MARGIN`] steps beyond the horizon.
pub fn path_to_embedding(
    path: &[Point2],
    pose: &BicycleState,
    k: usize,
    y_step: f64,
) -> Result<TrajectoryEmbedding, TrajectoryError> {
    let cfg = EmbeddingConfig {
        k,
        y_step,
        horizon_steps: 1,
    };
    cfg.validate()?;
    if path.len() < 4 {
        return Err(TrajectoryError::PathTooShort(path.len()));
    }
    let local = forward_prefix(path, pose, cfg.fit_reach());
    let reached = local.last().map_or(f64::NEG_INFINITY, |p| p.y);
    let horizon_error = || TrajectoryError::Horizon {
        reached,
        needed: cfg.horizon(),
        steps_survived: path.len() - 1,
    };
    if reached < cfg.horizon() {
        return Err(horizon_error());
    }
    if local.len() < DEFAULT_FIT_DEGREE + 1 {
        return Err(TrajectoryError::PathTooShort(local.len()));
    }
    let curve = BezierCurve::fit(&local, DEFAULT_FIT_DEGREE)?;
    let ys: Vec<f64> = (1..=k).map(|i| i as f64 * y_step).collect();
    let xs = curve.resample_at_y(&ys).map_err(|e| match e {
        GeometryError::YOutOfRange { .. } => horizon_error(),
        other => other.into(),
    })?;
    Ok(TrajectoryEmbedding {
        k,
        y_step,
        xs,
        frame: *pose,
    })
}

/// Vehicle-frame points up to the first backwards step, without repeated
/// points, stopping after the first point at or beyond `reach`.
fn forward_prefix(path: &[Point2], pose: &BicycleState, reach: f64) -> Vec<Point2> {
    let mut out: Vec<Point2> = Vec::with_capacity(path.len());
    for &p in path {
        let q = to_vehicle_frame(pose, p);
        if let Some(last) = out.last() {
            if q.y < last.y {
                break;
            }
            if q == *last {
                continue;
            }
        }
        out.push(q);
        if q.y >= reach {
            break;
        }
    }
    out
}

/// Drives `policy` from `pose` for a short horizon and embeds the path.
pub fn oracle_generate(
    policy: &MlpPolicy,
    grid: &OccupancyGrid,
    pose: &BicycleState,
    env: &RolloutEnv,
    dt: f64,
    cfg: &EmbeddingConfig,
) -> Result<TrajectoryEmbedding, TrajectoryError> {
    cfg.validate()?;
    let path = oracle_path(policy, grid, pose, env, dt, cfg)?;
    embed_oracle_path(&path, pose, cfg, cfg.k)
}

/// [`oracle_generate`], shortening the embedding rather than failing when
/// the path bends away before the full horizon.
///
/// Tries `cfg.k` samples first, then fewer, down to `min_k`; the error for
/// the full `cfg.k` is returned if none fit.
pub fn oracle_generate_at_least(
    policy: &MlpPolicy,
    grid: &OccupancyGrid,
    pose: &BicycleState,
    env: &RolloutEnv,
    dt: f64,
    cfg: &EmbeddingConfig,
    min_k: usize,
) -> Result<TrajectoryEmbedding, TrajectoryError> {
    cfg.validate()?;
    let path = oracle_path(policy, grid, pose, env, dt, cfg)?;
    let full = match embed_oracle_path(&path, pose, cfg, cfg.k) {
        Err(e) if e.is_planning_failure() => e,
        other => return other,
    };
    for k in (min_k.max(1)..cfg.k).rev() {
        if let Ok(e) = embed_oracle_path(&path, pose, cfg, k) {
            return Ok(e);
        }
    }
    Err(full)
}

fn oracle_path(
    policy: &MlpPolicy,
    grid: &OccupancyGrid,
    pose: &BicycleState,
    env: &RolloutEnv,
    dt: f64,
    cfg: &EmbeddingConfig,
) -> Result<Vec<Point2>, TrajectoryError> {
    let reach = cfg.fit_reach();
    let mut max_y: f64 = 0.0;
    let mut reversed = false;
    // Once the path has gone past `reach` or turned back, later states can
    // no longer change the embedding.
    let (states, _) = drive(policy, grid, pose, env, dt, cfg.horizon_steps, |s| {
        let y = to_vehicle_frame(pose, s.position()).y;
        if y < max_y {
            reversed = true;
        }
        max_y = max_y.max(y);
        reversed || y >= reach
    })?;
    Ok(states.iter().map(BicycleState::position).collect())
}

fn embed_oracle_path(
    path: &[Point2],
    pose: &BicycleState,
    cfg: &EmbeddingConfig,
    k: usize,
) -> Result<TrajectoryEmbedding, TrajectoryError> {
    let steps = path.len() - 1;
    match path_to_embedding(path, pose, k, cfg.y_step) {
        Err(TrajectoryError::PathTooShort(_)) | Err(TrajectoryError::Horizon { .. }) => {
            let reached = forward_prefix(path, pose, cfg.fit_reach())
                .last()
                .map_or(0.0, |p| p.y);
            Err(TrajectoryError::Horizon {
                reached,
                needed: k as f64 * cfg.y_step,
                steps_survived: steps,
            })
        }
        other => other,
    }
}

/// Local occupancy window: `size × size` cells of `scale` px, centred on
/// the car and rotated so the heading points up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropConfig {
    pub size: usize,
    pub scale: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        // 320 px window: the 150 px embedding horizon fits on either side.
        CropConfig {
            size: 128,
            scale: 2.5,
        }
    }
}

impl CropConfig {
    /// Vehicle-frame center of crop cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> Point2 {
        let half = self.size as f64 / 2.0;
        Point2::new(
            (col as f64 + 0.5 - half) * self.scale,
            (half - (row as f64 + 0.5)) * self.scale,
        )
    }

    /// Crop cell containing vehicle-frame point `q`.
    pub fn cell_of(&self, q: Point2) -> Option<(usize, usize)> {
        let half = self.size as f64 / 2.0;
        let col = (q.x / self.scale + half).floor();
        let row = (half - q.y / self.scale).floor();
        let n = self.size as f64;
        if !(col >= 0.0 && row >= 0.0 && col < n && row < n) {
            return None;
        }
        Some((row as usize, col as usize))
    }
}

/// Samples `grid` into a vehicle-aligned crop. Cells outside the grid are
/// off-track.
pub fn crop_grid(grid: &OccupancyGrid, pose: &BicycleState, crop: &CropConfig) -> Vec<bool> {
    let mut cells = Vec::with_capacity(crop.size * crop.size);
    for r in 0..crop.size {
        for c in 0..crop.size {
            cells.push(grid.is_on_track(to_world_frame(pose, crop.cell_center(r, c))));
        }
    }
    cells
}

/// Whether every embedding sample falls in a drivable crop cell.
pub fn embedding_in_crop(emb: &TrajectoryEmbedding, cells: &[bool], crop: &CropConfig) -> bool {
    emb.local_points().into_iter().all(|q| {
        crop.cell_of(q)
            .is_some_and(|(r, c)| cells[r * crop.size + c])
    })
}

/// Everything [`export_dataset`] needs besides the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportConfig {
    pub track: TrackParams,
    pub env: RolloutEnv,
    pub dt: f64,
    pub embedding: EmbeddingConfig,
    pub crop: CropConfig,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            track: TrackParams::default(),
            env: RolloutEnv::default(),
            dt: 0.05,
            embedding: EmbeddingConfig::default(),
            crop: CropConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Relative to the output directory.
    pub crop_path: String,
    pub embedding_row_index: usize,
    pub track_seed: u64,
    pub pose_x: f64,
    pub pose_y: f64,
    pub pose_yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Poses that produced no usable embedding.
    pub skipped: usize,
    /// The part of `skipped` whose path never reached the horizon.
    pub skipped_horizon: usize,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const DATASET_INFO_FILE: &str = "dataset.cfg";

/// Labels evenly spaced centerline poses of each track with oracle
/// embeddings and writes `(crop, embedding)` pairs under `out_dir`.
///
/// Poses whose plan fails, or whose embedding leaves the drivable part of
/// the crop, are skipped and logged.
pub fn export_dataset(
    policy: &MlpPolicy,
    track_seeds: &[u64],
    samples_per_track: usize,
    out_dir: &Path,
    cfg: &ExportConfig,
) -> Result<Manifest, TrajectoryError> {
    if samples_per_track == 0 || track_seeds.is_empty() {
        return Ok(Manifest::default());
    }
    cfg.embedding.validate()?;

    struct Sample {
        seed: u64,
        index: usize,
        pose: BicycleState,
        crop: Vec<bool>,
        embedding: TrajectoryEmbedding,
    }

    let mut samples: Vec<Sample> = Vec::new();
    let mut skipped = 0;
    let mut skipped_horizon = 0;
    for &seed in track_seeds {
        let spec = generate_track(seed, &cfg.track)?;
        let grid = rasterize(&spec);
        let line = spec.centerline();
        let spacing = line.length() / samples_per_track as f64;
        let poses: Vec<BicycleState> = line
            .arc_samples(spacing)
            .into_iter()
            .take(samples_per_track)
            .map(|s| BicycleState::at_rest(s.point, s.heading))
            .collect();
        let results: Vec<Result<Sample, TrajectoryError>> = poses
            .par_iter()
            .enumerate()
            .map(|(index, pose)| {
                let embedding =
                    oracle_generate(policy, &grid, pose, &cfg.env, cfg.dt, &cfg.embedding)?;
                let crop = crop_grid(&grid, pose, &cfg.crop);
                Ok(Sample {
                    seed,
                    index,
                    pose: *pose,
                    crop,
                    embedding,
                })
            })
            .collect();
        for (index, r) in results.into_iter().enumerate() {
            match r {
                Ok(s) if embedding_in_crop(&s.embedding, &s.crop, &cfg.crop) => samples.push(s),
                Ok(_) => {
                    warn!("track {seed} pose {index}: embedding leaves the drivable region, skipped");
                    skipped += 1;
                }
                Err(e) if e.is_planning_failure() => {
                    warn!("track {seed} pose {index}: {e}, skipped");
                    skipped += 1;
                    if matches!(e, TrajectoryError::Horizon { .. } | TrajectoryError::PathTooShort(_)) {
                        skipped_horizon += 1;
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    if samples.is_empty() {
        return Err(TrajectoryError::EmptyExport);
    }

    let crops_dir = out_dir.join("crops");
    fs::create_dir_all(&crops_dir)?;
    let k = cfg.embedding.k;
    let mut emb_writer = csv::Writer::from_path(out_dir.join(EMBEDDINGS_FILE))?;
    emb_writer.write_record((0..k).map(|i| format!("x{i}")))?;
    let mut rows = Vec::with_capacity(samples.len());
    for (row_index, s) in samples.iter().enumerate() {
        let rel: PathBuf = ["crops", &format!("track{}_{:04}.pgm", s.seed, s.index)]
            .iter()
            .collect();
        let crop_grid = OccupancyGrid::new(
            cfg.crop.size,
            cfg.crop.size,
            s.crop.clone(),
            cfg.track.px_per_meter / cfg.crop.scale,
        )?;
        fs::write(out_dir.join(&rel), crop_grid.to_pgm())?;
        emb_writer.write_record(s.embedding.xs.iter().map(|x| x.to_string()))?;
        rows.push(ManifestRow {
            crop_path: rel.to_string_lossy().into_owned(),
            embedding_row_index: row_index,
            track_seed: s.seed,
            pose_x: s.pose.x,
            pose_y: s.pose.y,
            pose_yaw: s.pose.yaw,
        });
    }
    emb_writer.flush()?;

    let mut manifest = csv::Writer::from_path(out_dir.join(MANIFEST_FILE))?;
    for row in &rows {
        manifest.serialize(row)?;
    }
    manifest.flush()?;

    let mut info_file = fs::File::create(out_dir.join(DATASET_INFO_FILE))?;
    writeln!(info_file, "k={k}")?;
    writeln!(info_file, "y_step={}", cfg.embedding.y_step)?;
    writeln!(info_file, "crop_size={}", cfg.crop.size)?;
    writeln!(info_file, "crop_scale={}", cfg.crop.scale)?;
    info!("exported {} samples, skipped {skipped}", rows.len());
    Ok(Manifest {
        rows,
        skipped,
        skipped_horizon,
    })
}

/// Reads `manifest.csv` back.
pub fn read_manifest(out_dir: &Path) -> Result<Vec<ManifestRow>, TrajectoryError> {
    let mut r = csv::Reader::from_path(out_dir.join(MANIFEST_FILE))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Reads `embeddings.csv` back, one vector per row.
pub fn read_embeddings(out_dir: &Path) -> Result<Vec<Vec<f64>>, TrajectoryError> {
    let mut r = csv::Reader::from_path(out_dir.join(EMBEDDINGS_FILE))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
