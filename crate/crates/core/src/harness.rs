//! Closed-loop benchmark: plan with the oracle, track with the
//! controllers, count laps until the car leaves the track.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::control::{ControlError, PidGains, StanleyParams, Tracker, TrackerConfig};
use crate::evolve::{EvolutionConfig, EvolveError, RolloutEnv};
use crate::geometry::Point2;
use crate::policy::MlpPolicy;
use crate::track::{generate_track, rasterize, OccupancyGrid, TrackError, TrackParams, TrackSpec};
use crate::trajectory::{
    oracle_generate, oracle_generate_at_least, CropConfig, EmbeddingConfig, ExportConfig,
    TrajectoryError,
};
use crate::vehicle::{self, BicycleState, SensorConfig, VehicleError, VehicleParams};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid run config: {0}")]
    Invalid(String),
    #[error("malformed report: {0}")]
    Report(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coverage of the centerline a lap must reach before the start line
/// counts again.
pub const LAP_COVERAGE: f64 = 0.8;
const COVERAGE_BINS: usize = 100;

/// Every knot of an experiment, readable from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub master_seed: u64,
    pub track: TrackParams,
    pub vehicle: VehicleParams,
    pub sensor: SensorConfig,
    pub evolution: EvolutionConfig,
    pub embedding: EmbeddingConfig,
    pub crop: CropConfig,
    pub pid: PidGains,
    pub stanley: StanleyParams,
    pub lookahead_idx: usize,
    pub target_gap: f64,
    /// Steps between oracle plans.
    pub replan_interval: usize,
    pub laps_target: usize,
    pub step_cap: usize,
    /// Held-out benchmark tracks.
    pub bench_seeds: Vec<u64>,
    /// Jitter of the benchmark tracks; the other track knobs are shared.
    pub bench_jitter: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 0,
            track: TrackParams::default(),
            vehicle: VehicleParams::default(),
            sensor: SensorConfig::default(),
            evolution: EvolutionConfig::default(),
            embedding: EmbeddingConfig::default(),
            crop: CropConfig::default(),
            pid: PidGains::default(),
            stanley: StanleyParams::default(),
            lookahead_idx: 2,
            target_gap: 30.0,
            replan_interval: 10,
            laps_target: 5,
            step_cap: 60_000,
            bench_seeds: vec![101, 102, 103, 104, 105],
            bench_jitter: 0.15,
        }
    }
}

fn parse_list(v: &str) -> Result<Vec<u64>, String> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad seed {s:?}")))
        .collect()
}

fn join(v: &[u64]) -> String {
    v.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| HarnessError::Config {
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "seed" => self.master_seed = num(v)?,
            "track.n_knots" => self.track.n_knots = num(v)?,
            "track.rows" => self.track.grid_size.0 = num(v)?,
            "track.cols" => self.track.grid_size.1 = num(v)?,
            "track.width" => self.track.width = num(v)?,
            "track.jitter" => self.track.jitter = num(v)?,
            "track.px_per_meter" => self.track.px_per_meter = num(v)?,
            "vehicle.l_f" => self.vehicle.l_f = num(v)?,
            "vehicle.l_r" => self.vehicle.l_r = num(v)?,
            "vehicle.mass" => self.vehicle.mass = num(v)?,
            "vehicle.a_max" => self.vehicle.a_max = num(v)?,
            "vehicle.steer_max" => self.vehicle.steer_max = num(v)?,
            "vehicle.drag" => self.vehicle.drag = num(v)?,
            "vehicle.v_max" => self.vehicle.v_max = num(v)?,
            "sensor.n_rays" => self.sensor.n_rays = num(v)?,
            "sensor.beta_offset_deg" => self.sensor.beta_offset = num::<f64>(v)?.to_radians(),
            "sensor.range_cap" => self.sensor.range_cap = num(v)?,
            "evolve.n_spawns" => self.evolution.n_spawns = num(v)?,
            "evolve.m_survivors" => self.evolution.m_survivors = num(v)?,
            "evolve.sigma" => self.evolution.sigma = num(v)?,
            "evolve.generations" => self.evolution.generations = num(v)?,
            "evolve.max_steps" => self.evolution.max_steps = num(v)?,
            "evolve.dt" => self.evolution.dt = num(v)?,
            "evolve.reward_alpha" => self.evolution.reward_alpha = num(v)?,
            "evolve.reward_beta" => self.evolution.reward_beta = num(v)?,
            "evolve.track_seeds" => self.evolution.track_seeds = parse_list(v)?,
            "embed.k" => self.embedding.k = num(v)?,
            "embed.y_step" => self.embedding.y_step = num(v)?,
            "embed.horizon_steps" => self.embedding.horizon_steps = num(v)?,
            "crop.size" => self.crop.size = num(v)?,
            "crop.scale" => self.crop.scale = num(v)?,
            "control.kp" => self.pid.kp = num(v)?,
            "control.ki" => self.pid.ki = num(v)?,
            "control.kd" => self.pid.kd = num(v)?,
            "control.integral_cap" => self.pid.integral_cap = num(v)?,
            "control.stanley_gain" => self.stanley.gain = num(v)?,
            "control.v_soft" => self.stanley.v_soft = num(v)?,
            "control.lookahead_idx" => self.lookahead_idx = num(v)?,
            "control.target_gap" => self.target_gap = num(v)?,
            "bench.replan_interval" => self.replan_interval = num(v)?,
            "bench.laps_target" => self.laps_target = num(v)?,
            "bench.step_cap" => self.step_cap = num(v)?,
            "bench.track_seeds" => self.bench_seeds = parse_list(v)?,
            "bench.jitter" => self.bench_jitter = num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Full config as parseable text.
    pub fn to_text(&self) -> String {
        let deg = (self.sensor.beta_offset.to_degrees() * 1e9).round() / 1e9;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.master_seed.to_string());
        put("track.n_knots", self.track.n_knots.to_string());
        put("track.rows", self.track.grid_size.0.to_string());
        put("track.cols", self.track.grid_size.1.to_string());
        put("track.width", self.track.width.to_string());
        put("track.jitter", self.track.jitter.to_string());
        put("track.px_per_meter", self.track.px_per_meter.to_string());
        put("vehicle.l_f", self.vehicle.l_f.to_string());
        put("vehicle.l_r", self.vehicle.l_r.to_string());
        put("vehicle.mass", self.vehicle.mass.to_string());
        put("vehicle.a_max", self.vehicle.a_max.to_string());
        put("vehicle.steer_max", self.vehicle.steer_max.to_string());
        put("vehicle.drag", self.vehicle.drag.to_string());
        put("vehicle.v_max", self.vehicle.v_max.to_string());
        put("sensor.n_rays", self.sensor.n_rays.to_string());
        put("sensor.beta_offset_deg", deg.to_string());
        put("sensor.range_cap", self.sensor.range_cap.to_string());
        put("evolve.n_spawns", self.evolution.n_spawns.to_string());
        put("evolve.m_survivors", self.evolution.m_survivors.to_string());
        put("evolve.sigma", self.evolution.sigma.to_string());
        put("evolve.generations", self.evolution.generations.to_string());
        put("evolve.max_steps", self.evolution.max_steps.to_string());
        put("evolve.dt", self.evolution.dt.to_string());
        put("evolve.reward_alpha", self.evolution.reward_alpha.to_string());
        put("evolve.reward_beta", self.evolution.reward_beta.to_string());
        put("evolve.track_seeds", join(&self.evolution.track_seeds));
        put("embed.k", self.embedding.k.to_string());
        put("embed.y_step", self.embedding.y_step.to_string());
        put("embed.horizon_steps", self.embedding.horizon_steps.to_string());
        put("crop.size", self.crop.size.to_string());
        put("crop.scale", self.crop.scale.to_string());
        put("control.kp", self.pid.kp.to_string());
        put("control.ki", self.pid.ki.to_string());
        put("control.kd", self.pid.kd.to_string());
        put("control.integral_cap", self.pid.integral_cap.to_string());
        put("control.stanley_gain", self.stanley.gain.to_string());
        put("control.v_soft", self.stanley.v_soft.to_string());
        put("control.lookahead_idx", self.lookahead_idx.to_string());
        put("control.target_gap", self.target_gap.to_string());
        put("bench.replan_interval", self.replan_interval.to_string());
        put("bench.laps_target", self.laps_target.to_string());
        put("bench.step_cap", self.step_cap.to_string());
        put("bench.track_seeds", join(&self.bench_seeds));
        put("bench.jitter", self.bench_jitter.to_string());
        s
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Invalid(m.to_string()));
        self.track.validate()?;
        self.vehicle.validate()?;
        self.sensor.validate()?;
        self.evolution.validate()?;
        self.embedding.validate()?;
        if self.replan_interval == 0 || self.laps_target == 0 || self.step_cap == 0 {
            return bad("replan_interval, laps_target and step_cap must be at least 1");
        }
        if self.lookahead_idx >= self.embedding.k {
            return bad("lookahead_idx must index an embedding sample");
        }
        if !(self.stanley.gain > 0.0 && self.stanley.v_soft > 0.0) {
            return bad("stanley gain and v_soft must be positive");
        }
        if !(self.pid.kp >= 0.0 && self.pid.ki >= 0.0 && self.pid.kd >= 0.0) {
            return bad("PID gains must be non-negative");
        }
        if !(self.pid.integral_cap >= 0.0) {
            return bad("integral_cap must be non-negative");
        }
        if !(self.crop.size > 0 && self.crop.scale > 0.0) {
            return bad("crop size and scale must be positive");
        }
        if !(0.0..1.0).contains(&self.bench_jitter) {
            return bad("bench.jitter must lie in [0, 1)");
        }
        Ok(())
    }

    /// Simulation step, shared by training and benchmarking.
    pub fn dt(&self) -> f64 {
        self.evolution.dt
    }

    /// `evolution` with the master seed applied.
    pub fn evolution_config(&self) -> EvolutionConfig {
        EvolutionConfig {
            master_seed: self.master_seed,
            ..self.evolution.clone()
        }
    }

    pub fn env(&self) -> RolloutEnv {
        RolloutEnv {
            vehicle: self.vehicle,
            sensor: self.sensor,
        }
    }

    pub fn bench_track_params(&self) -> TrackParams {
        TrackParams {
            jitter: self.bench_jitter,
            ..self.track.clone()
        }
    }

    pub fn export_config(&self) -> ExportConfig {
        ExportConfig {
            track: self.track.clone(),
            env: self.env(),
            dt: self.dt(),
            embedding: self.embedding,
            crop: self.crop,
        }
    }

    pub fn tracker(&self) -> Tracker {
        Tracker::new(
            PidGains {
                dt: self.dt(),
                ..self.pid
            },
            self.stanley,
            TrackerConfig {
                lookahead_idx: self.lookahead_idx,
                target_gap: self.target_gap,
                max_age: self.replan_interval as f64 * self.dt(),
            },
        )
    }
}

/// One benchmark row. `track_seed` is `None` for the aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub track_seed: Option<u64>,
    pub successful_laps: usize,
    pub t_lap_avg: Option<f64>,
    pub t_first_failure: Option<f64>,
    pub distance_covered: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub aggregate: BenchmarkRow,
}

const AGGREGATE_LABEL: &str = "aggregate";
const REPORT_HEADER: [&str; 5] = [
    "track",
    "successful_laps",
    "t_lap_avg",
    "t_first_failure",
    "distance_covered",
];

fn opt_to_string(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn opt_parse(s: &str) -> Result<Option<f64>, HarnessError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| HarnessError::Report(format!("bad number {s:?}")))
}

impl BenchmarkReport {
    /// Sums laps and distance, averages lap times over tracks with at least
    /// one lap, and reports the earliest failure.
    pub fn from_rows(rows: Vec<BenchmarkRow>) -> Self {
        let lapped: Vec<f64> = rows.iter().filter_map(|r| r.t_lap_avg).collect();
        let aggregate = BenchmarkRow {
            track_seed: None,
            successful_laps: rows.iter().map(|r| r.successful_laps).sum(),
            t_lap_avg: (!lapped.is_empty()).then(|| lapped.iter().sum::<f64>() / lapped.len() as f64),
            t_first_failure: rows
                .iter()
                .filter_map(|r| r.t_first_failure)
                .min_by(f64::total_cmp),
            distance_covered: rows.iter().map(|r| r.distance_covered).sum(),
        };
        BenchmarkReport { rows, aggregate }
    }

    /// Every track failed before finishing.
    pub fn all_failed(&self) -> bool {
        self.rows.iter().all(|r| r.t_first_failure.is_some())
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER)?;
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            w.write_record([
                r.track_seed
                    .map_or_else(|| AGGREGATE_LABEL.to_string(), |s| s.to_string()),
                r.successful_laps.to_string(),
                opt_to_string(r.t_lap_avg),
                opt_to_string(r.t_first_failure),
                r.distance_covered.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, HarnessError> {
        let mut r = csv::Reader::from_reader(input);
        if r.headers()?.iter().ne(REPORT_HEADER) {
            return Err(HarnessError::Report("unexpected header".into()));
        }
        let mut rows = Vec::new();
        let mut aggregate = None;
        for rec in r.records() {
            let rec = rec?;
            let bad = |m: &str| HarnessError::Report(m.to_string());
            let row = BenchmarkRow {
                track_seed: match &rec[0] {
                    AGGREGATE_LABEL => None,
                    s => Some(s.parse().map_err(|_| bad("bad track seed"))?),
                },
                successful_laps: rec[1].parse().map_err(|_| bad("bad lap count"))?,
                t_lap_avg: opt_parse(&rec[2])?,
                t_first_failure: opt_parse(&rec[3])?,
                distance_covered: rec[4].parse().map_err(|_| bad("bad distance"))?,
            };
            if row.track_seed.is_none() {
                if aggregate.replace(row).is_some() {
                    return Err(bad("two aggregate rows"));
                }
            } else {
                rows.push(row);
            }
        }
        let aggregate = aggregate.ok_or_else(|| HarnessError::Report("no aggregate row".into()))?;
        Ok(BenchmarkReport { rows, aggregate })
    }
}

/// World-frame samples of one plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRecord {
    pub step: usize,
    pub points: Vec<Point2>,
}

/// Everything a closed-loop run visited.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseLog {
    /// Starts with the spawn pose.
    pub poses: Vec<BicycleState>,
    pub plans: Vec<PlanRecord>,
}

impl PoseLog {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "t", "x", "y", "yaw", "v"])?;
        for (i, p) in self.poses.iter().enumerate() {
            w.write_record([
                i.to_string(),
                p.t.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.yaw.to_string(),
                p.v.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, HarnessError> {
        let mut r = csv::Reader::from_reader(input);
        let mut poses = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64, HarnessError> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| HarnessError::Report(format!("bad pose field {i}")))
            };
            poses.push(BicycleState {
                t: f(1)?,
                x: f(2)?,
                y: f(3)?,
                yaw: f(4)?,
                v: f(5)?,
            });
        }
        Ok(PoseLog {
            poses,
            plans: Vec::new(),
        })
    }
}

/// Start line and coverage bookkeeping for lap counting.
struct LapCounter {
    origin: Point2,
    forward: Point2,
    half_width: f64,
    samples: Vec<(Point2, usize)>,
    visited: Vec<bool>,
}

impl LapCounter {
    fn new(spec: &TrackSpec) -> Self {
        let (origin, heading) = spec.start_pose();
        let line = spec.centerline();
        let length = line.length();
        let samples = line
            .arc_samples(2.0)
            .into_iter()
            .map(|s| {
                let bin = ((s.arc / length * COVERAGE_BINS as f64) as usize).min(COVERAGE_BINS - 1);
                (s.point, bin)
            })
            .collect();
        LapCounter {
            origin,
            forward: Point2::from_angle(heading),
            half_width: spec.width / 2.0,
            samples,
            visited: vec![false; COVERAGE_BINS],
        }
    }

    fn coverage(&self) -> f64 {
        self.visited.iter().filter(|&&v| v).count() as f64 / COVERAGE_BINS as f64
    }

    /// Records the move `a → b`; true when it completes a lap.
    fn advance(&mut self, a: Point2, b: Point2) -> bool {
        if let Some(&(_, bin)) = self
            .samples
            .iter()
            .min_by(|x, y| x.0.distance(b).total_cmp(&y.0.distance(b)))
        {
            self.visited[bin] = true;
        }
        let sa = (a - self.origin).dot(self.forward);
        let sb = (b - self.origin).dot(self.forward);
        if !(sa < 0.0 && sb >= 0.0) {
            return false;
        }
        let cross = a.lerp(b, sa / (sa - sb));
        let lateral = (cross - self.origin).dot(self.forward.perp()).abs();
        if lateral > self.half_width || self.coverage() < LAP_COVERAGE {
            return false;
        }
        self.visited.fill(false);
        true
    }
}

/// Drives one track closed-loop until `laps_target` laps, the first
/// failure, or the step cap.
///
/// When the oracle path bends away before the full horizon, the plan is
/// shortened to the samples it does reach; a replan that cannot cover the
/// tracker's lookahead counts as a failure at the time it was attempted.
pub fn run_closed_loop(
    policy: &MlpPolicy,
    grid: &OccupancyGrid,
    spec: &TrackSpec,
    cfg: &RunConfig,
) -> Result<(BenchmarkRow, PoseLog), HarnessError> {
    let env = cfg.env();
    let dt = cfg.dt();
    let (p0, h0) = spec.start_pose();
    let mut state = BicycleState::at_rest(p0, h0);
    let mut tracker = cfg.tracker();
    let mut laps = LapCounter::new(spec);
    let mut log = PoseLog {
        poses: vec![state],
        plans: Vec::new(),
    };
    let mut lap_times = Vec::new();
    let mut last_lap_t = state.t;
    let mut distance = 0.0;
    let mut failure = None;
    let mut plan = None;

    for step in 0..cfg.step_cap {
        if step % cfg.replan_interval == 0 {
            let min_k = cfg.lookahead_idx + 1;
            match oracle_generate_at_least(policy, grid, &state, &env, dt, &cfg.embedding, min_k) {
                Ok(e) => {
                    log.plans.push(PlanRecord {
                        step,
                        points: e.world_points(),
                    });
                    plan = Some(e);
                }
                Err(e) if e.is_planning_failure() => {
                    failure = Some(state.t);
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        let Some(embedding) = plan.as_ref() else {
            unreachable!("a plan is made on step 0");
        };
        let cmd = tracker.command(&state, embedding, &cfg.vehicle)?;
        let next = vehicle::step(&state, &cfg.vehicle, cmd, dt)?;
        if !grid.is_on_track(next.position()) {
            failure = Some(next.t);
            break;
        }
        distance += next.position().distance(state.position());
        let lapped = laps.advance(state.position(), next.position());
        state = next;
        log.poses.push(state);
        if lapped {
            lap_times.push(state.t - last_lap_t);
            last_lap_t = state.t;
            if lap_times.len() >= cfg.laps_target {
                break;
            }
        }
    }

    let row = BenchmarkRow {
        track_seed: Some(spec.seed),
        successful_laps: lap_times.len(),
        t_lap_avg: (!lap_times.is_empty())
            .then(|| lap_times.iter().sum::<f64>() / lap_times.len() as f64),
        t_first_failure: failure,
        distance_covered: distance,
    };
    Ok((row, log))
}

/// Generates and drives each benchmark track. Tracks run in parallel; rows
/// keep the order of `track_seeds`.
pub fn run_benchmark(
    policy: &MlpPolicy,
    track_seeds: &[u64],
    cfg: &RunConfig,
) -> Result<BenchmarkReport, HarnessError> {
    if track_seeds.is_empty() {
        return Err(HarnessError::Invalid("no benchmark tracks".into()));
    }
    let params = cfg.bench_track_params();
    let rows = track_seeds
        .par_iter()
        .map(|&seed| {
            let spec = generate_track(seed, &params)?;
            let grid = rasterize(&spec);
            Ok(run_closed_loop(policy, &grid, &spec, cfg)?.0)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(BenchmarkReport::from_rows(rows))
}

pub const TRACK_RGB: [u8; 3] = [255, 255, 255];
pub const OFF_TRACK_RGB: [u8; 3] = [0, 0, 0];
pub const PLAN_RGB: [u8; 3] = [0, 96, 255];
pub const PATH_RGB: [u8; 3] = [255, 0, 0];
pub const MARKER_RGB: [u8; 3] = [0, 200, 0];

/// Binary PPM of the grid with plan samples, the driven path, and a 3×3
/// marker on the final pose.
pub fn replay_image(log: &PoseLog, grid: &OccupancyGrid) -> Vec<u8> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut px: Vec<[u8; 3]> = grid
        .cells()
        .iter()
        .map(|&c| if c { TRACK_RGB } else { OFF_TRACK_RGB })
        .collect();
    let mut put = |p: Point2, rgb: [u8; 3]| {
        let r = (p.y + 0.5).floor();
        let c = (p.x + 0.5).floor();
        if r >= 0.0 && c >= 0.0 && (r as usize) < rows && (c as usize) < cols {
            px[r as usize * cols + c as usize] = rgb;
        }
    };
    for plan in &log.plans {
        for &p in &plan.points {
            put(p, PLAN_RGB);
        }
    }
    for pose in &log.poses {
        put(pose.position(), PATH_RGB);
    }
    if let Some(last) = log.poses.last() {
        for dr in -1..=1 {
            for dc in -1..=1 {
                put(last.position() + Point2::new(dc as f64, dr as f64), MARKER_RGB);
            }
        }
    }
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.extend(px.iter().flatten());
    out
}

/// Writes the replay image to `out` and the pose log next to it as CSV.
/// Returns both paths.
pub fn render_replay(
    log: &PoseLog,
    grid: &OccupancyGrid,
    out: &Path,
) -> Result<(PathBuf, PathBuf), HarnessError> {
    if log.poses.is_empty() {
        return Err(HarnessError::Invalid("empty pose log".into()));
    }
    fs::write(out, replay_image(log, grid))?;
    let csv_path = out.with_extension("csv");
    log.write_csv(fs::File::create(&csv_path)?)?;
    Ok((out.to_path_buf(), csv_path))
}

/// Median rate (per second) of a full replanning step: sense, policy
/// forward, and an oracle plan. Failed plans are timed like any other.
pub fn measure_planner_rate(
    policy: &MlpPolicy,
    grid: &OccupancyGrid,
    poses: &[BicycleState],
    reps: usize,
    cfg: &RunConfig,
) -> Result<f64, HarnessError> {
    if reps < 100 {
        return Err(HarnessError::Invalid("at least 100 repetitions are needed".into()));
    }
    if poses.is_empty() {
        return Err(HarnessError::Invalid("no poses to plan from".into()));
    }
    let env = cfg.env();
    let mut times = Vec::with_capacity(reps);
    for i in 0..reps {
        let pose = &poses[i % poses.len()];
        let start = Instant::now();
        let mut ranges = vehicle::sense(pose, grid, &env.sensor);
        ranges.iter_mut().for_each(|r| *r /= env.sensor.range_cap);
        let cmd = policy.forward(&ranges).map_err(EvolveError::from)?;
        std::hint::black_box(cmd);
        match oracle_generate(policy, grid, pose, &env, cfg.dt(), &cfg.embedding) {
            Ok(e) => {
                std::hint::black_box(e);
            }
            Err(e) if e.is_planning_failure() => {}
            Err(e) => return Err(e.into()),
        }
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        times[reps / 2]
    } else {
        (times[reps / 2 - 1] + times[reps / 2]) / 2.0
    };
    Ok(1.0 / median.max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        let mut cfg = RunConfig {
            master_seed: 9,
            bench_seeds: vec![7, 8],
            ..RunConfig::default()
        };
        cfg.pid.kd = 0.25;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn config_errors_name_the_line() {
        let err = RunConfig::parse("seed = 1\n\nbogus = 2\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config { line: 3, .. }), "{err}");
        let err = RunConfig::parse("evolve.sigma = lots").unwrap_err();
        assert!(matches!(err, HarnessError::Config { line: 1, .. }));
        assert!(RunConfig::parse("bench.laps_target = 0").is_err());
        assert!(RunConfig::parse("# comment only\nseed=3 # trailing").is_ok());
    }

    #[test]
    fn aggregate_accounting() {
        let row = |seed, laps, lap: Option<f64>, fail: Option<f64>| BenchmarkRow {
            track_seed: Some(seed),
            successful_laps: laps,
            t_lap_avg: lap,
            t_first_failure: fail,
            distance_covered: 10.0,
        };
        let r = BenchmarkReport::from_rows(vec![
            row(1, 5, Some(20.0), None),
            row(2, 0, None, Some(0.5)),
            row(3, 2, Some(30.0), Some(70.0)),
        ]);
        assert_eq!(r.aggregate.successful_laps, 7);
        assert_eq!(r.aggregate.t_lap_avg, Some(25.0));
        assert_eq!(r.aggregate.t_first_failure, Some(0.5));
        assert_eq!(r.aggregate.distance_covered, 30.0);
        assert!(!r.all_failed());

        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(BenchmarkReport::read_csv(buf.as_slice()).unwrap(), r);
    }

    #[test]
    fn lap_counter_needs_coverage() {
        let spec = generate_track(4, &TrackParams::default()).unwrap();
        let mut lc = LapCounter::new(&spec);
        let (o, h) = spec.start_pose();
        let f = Point2::from_angle(h);
        // Wiggling across the start line never counts.
        for _ in 0..10 {
            assert!(!lc.advance(o - f * 2.0, o + f * 2.0));
            assert!(!lc.advance(o + f * 2.0, o - f * 2.0));
        }
        // Walk the centerline, then cross.
        let line = spec.centerline();
        let pts: Vec<Point2> = line.arc_samples(3.0).into_iter().map(|s| s.point).collect();
        let mut counted = 0;
        for w in pts.windows(2) {
            counted += lc.advance(w[0], w[1]) as usize;
        }
        counted += lc.advance(*pts.last().unwrap(), pts[1]) as usize;
        assert_eq!(counted, 1);
    }

    #[test]
    fn zero_policy_fails_immediately() {
        let spec = generate_track(5, &TrackParams::default()).unwrap();
        let grid = rasterize(&spec);
        let policy = MlpPolicy::zeros(MlpPolicy::default_sizes(7)).unwrap();
        let (row, log) = run_closed_loop(&policy, &grid, &spec, &RunConfig::default()).unwrap();
        assert_eq!(row.successful_laps, 0);
        assert_eq!(row.t_first_failure, Some(0.0));
        assert_eq!(row.distance_covered, 0.0);
        assert_eq!(log.poses.len(), 1);
    }

    #[test]
    fn single_pose_replay_has_one_marker() {
        let grid = OccupancyGrid::from_fn(20, 20, 100.0, |_, _| true).unwrap();
        let log = PoseLog {
            poses: vec![BicycleState::at_rest(Point2::new(10.0, 5.0), 0.0)],
            plans: Vec::new(),
        };
        let img = replay_image(&log, &grid);
        let header = b"P6\n20 20\n255\n".len();
        let marked: Vec<usize> = img[header..]
            .chunks(3)
            .enumerate()
            .filter(|(_, p)| *p == MARKER_RGB)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(marked.len(), 9);
        assert!(marked.contains(&(5 * 20 + 10)));
    }

    #[test]
    fn planner_rate_needs_reps() {
        let grid = OccupancyGrid::from_fn(20, 20, 100.0, |_, _| true).unwrap();
        let policy = MlpPolicy::zeros(MlpPolicy::default_sizes(7)).unwrap();
        let pose = BicycleState::at_rest(Point2::new(10.0, 10.0), 0.0);
        let cfg = RunConfig::default();
        assert!(measure_planner_rate(&policy, &grid, &[pose], 10, &cfg).is_err());
        assert!(measure_planner_rate(&policy, &grid, &[pose], 100, &cfg).unwrap() > 0.0);
    }
}
