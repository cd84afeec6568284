//! Population training: roll every policy out, keep the top `m`
//! unmodified, refill the population with Gaussian-mutated copies of them.
//!
//! Fitness of one rollout is `R = α·v + β·d` where `d` is the distance
//! driven before leaving the track and `v = d / elapsed` its mean speed.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;
use crate::policy::{MlpPolicy, PolicyError, Scratch};
use crate::seed::derive_seed;
use crate::track::{generate_track, rasterize, OccupancyGrid, TrackError, TrackParams};
use crate::vehicle::{self, BicycleState, SensorConfig, VehicleError, VehicleParams};

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("rollout must start on the track, got ({x:.2}, {y:.2})")]
    OffTrackStart { x: f64, y: f64 },
    #[error("invalid evolution config: {0}")]
    InvalidConfig(String),
    #[error("population has {got} members, expected {expected}")]
    PopulationSize { expected: usize, got: usize },
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("writing statistics: {0}")]
    Csv(#[from] csv::Error),
}

/// Car and sensor models shared by every rollout.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RolloutEnv {
    pub vehicle: VehicleParams,
    pub sensor: SensorConfig,
}

impl RolloutEnv {
    pub fn validate(&self) -> Result<(), EvolveError> {
        self.vehicle.validate()?;
        self.sensor.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionConfig {
    pub n_spawns: usize,
    pub m_survivors: usize,
    pub sigma: f64,
    pub generations: usize,
    pub max_steps: usize,
    pub dt: f64,
    pub reward_alpha: f64,
    pub reward_beta: f64,
    pub master_seed: u64,
    pub track_seeds: Vec<u64>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            n_spawns: 100,
            m_survivors: 20,
            sigma: 0.1,
            generations: 200,
            max_steps: 2000,
            dt: 0.05,
            reward_alpha: 1.0,
            reward_beta: 1.0,
            master_seed: 0,
            track_seeds: vec![1, 2, 3],
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvolveError> {
        let bad = |m: &str| Err(EvolveError::InvalidConfig(m.to_string()));
        if !(0 < self.m_survivors && self.m_survivors < self.n_spawns) {
            return bad("need 0 < m_survivors < n_spawns");
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad("sigma must be finite and non-negative");
        }
        if self.generations == 0 || self.max_steps == 0 {
            return bad("generations and max_steps must be at least 1");
        }
        if !(self.dt > 0.0 && self.dt <= vehicle::MAX_DT) {
            return bad("dt must lie in (0, 0.1] s");
        }
        if !(self.reward_alpha.is_finite() && self.reward_beta.is_finite()) {
            return bad("reward coefficients must be finite");
        }
        if self.track_seeds.is_empty() {
            return bad("at least one track seed is required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub fitness: f64,
    /// Center-of-mass positions, starting with the spawn point.
    pub path: Vec<Point2>,
    pub steps_survived: usize,
    pub total_distance: f64,
    pub mean_speed: f64,
    pub terminated_off_track: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    /// 1-based.
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_survivor_fitness: f64,
    pub mean_population_fitness: f64,
}

/// Eq.-style reward from mean speed and distance.
#[inline]
pub fn fitness(alpha: f64, beta: f64, mean_speed: f64, distance: f64) -> f64 {
    alpha * mean_speed + beta * distance
}

/// Raw closed-loop drive of `policy` from `start`.
///
/// Stops before the first off-track state, after `max_steps`, or once
/// `stop` returns true for a newly reached state (that state is kept).
pub(crate) fn drive(
    policy: &MlpPolicy,
    grid: &OccupancyGrid,
    start: &BicycleState,
    env: &RolloutEnv,
    dt: f64,
    max_steps: usize,
    mut stop: impl FnMut(&BicycleState) -> bool,
) -> Result<(Vec<BicycleState>, bool), EvolveError> {
    if !grid.is_on_track(start.position()) {
        return Err(EvolveError::OffTrackStart {
            x: start.x,
            y: start.y,
        });
    }
    let mut states = Vec::with_capacity(max_steps.min(4096) + 1);
    states.push(*start);
    let mut state = *start;
    let mut ranges = vec![0.0; env.sensor.n_rays];
    let mut scratch = Scratch::default();
    let inv_cap = 1.0 / env.sensor.range_cap;
    for _ in 0..max_steps {
        vehicle::sense_into(&state, grid, &env.sensor, &mut ranges);
        ranges.iter_mut().for_each(|r| *r *= inv_cap);
        let cmd = policy.forward_with(&ranges, &mut scratch)?;
        let next = vehicle::step(&state, &env.vehicle, cmd, dt)?;
        if !grid.is_on_track(next.position()) {
            return Ok((states, true));
        }
        states.push(next);
        state = next;
        if stop(&state) {
            break;
        }
    }
    Ok((states, false))
}

/// Sense → act → step until the car leaves the track or `max_steps` pass.
pub fn rollout(
    policy: &MlpPolicy,
    grid: &OccupancyGrid,
    start: &BicycleState,
    env: &RolloutEnv,
    cfg: &EvolutionConfig,
) -> Result<RolloutResult, EvolveError> {
    let (states, off) = drive(policy, grid, start, env, cfg.dt, cfg.max_steps, |_| false)?;
    let path: Vec<Point2> = states.iter().map(BicycleState::position).collect();
    let total_distance: f64 = path.windows(2).map(|w| w[0].distance(w[1])).sum();
    let steps = path.len() - 1;
    let mean_speed = if steps > 0 {
        total_distance / (steps as f64 * cfg.dt)
    } else {
        0.0
    };
    Ok(RolloutResult {
        fitness: fitness(cfg.reward_alpha, cfg.reward_beta, mean_speed, total_distance),
        path,
        steps_survived: steps,
        total_distance,
        mean_speed,
        terminated_off_track: off,
    })
}

/// Indices of the `m` fittest members, best first; ties go to the lower
/// index. NaN fitness ranks last.
pub fn select_survivors(fitnesses: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitnesses.len()).collect();
    let key = |i: usize| {
        let f = fitnesses[i];
        if f.is_nan() {
            f64::NEG_INFINITY
        } else {
            f
        }
    };
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// Next population: the top `m` unchanged, then `n - m` mutants whose
/// parents cycle through the survivors in rank order.
pub fn evolve_generation(
    population: &[(MlpPolicy, f64)],
    cfg: &EvolutionConfig,
    gen_seed: u64,
) -> Result<Vec<MlpPolicy>, EvolveError> {
    if population.len() != cfg.n_spawns {
        return Err(EvolveError::PopulationSize {
            expected: cfg.n_spawns,
            got: population.len(),
        });
    }
    let fits: Vec<f64> = population.iter().map(|(_, f)| *f).collect();
    let survivors = select_survivors(&fits, cfg.m_survivors);
    let mut next: Vec<MlpPolicy> = survivors.iter().map(|&i| population[i].0.clone()).collect();
    let offspring: Vec<MlpPolicy> = (0..cfg.n_spawns - cfg.m_survivors)
        .into_par_iter()
        .map(|slot| {
            let parent = &population[survivors[slot % survivors.len()]].0;
            parent.mutate(cfg.sigma, derive_seed(gen_seed, slot as u64))
        })
        .collect();
    next.extend(offspring);
    Ok(next)
}

/// A training track with its spawn state.
#[derive(Debug, Clone)]
pub struct TrainingTrack {
    pub seed: u64,
    pub grid: OccupancyGrid,
    pub start: BicycleState,
}

impl TrainingTrack {
    pub fn generate(seed: u64, params: &TrackParams) -> Result<Self, EvolveError> {
        let spec = generate_track(seed, params)?;
        let (p, heading) = spec.start_pose();
        Ok(TrainingTrack {
            seed,
            grid: rasterize(&spec),
            start: BicycleState::at_rest(p, heading),
        })
    }
}

/// Mean rollout fitness over `tracks`.
pub fn evaluate(
    policy: &MlpPolicy,
    tracks: &[TrainingTrack],
    env: &RolloutEnv,
    cfg: &EvolutionConfig,
) -> Result<f64, EvolveError> {
    let mut sum = 0.0;
    for t in tracks {
        sum += rollout(policy, &t.grid, &t.start, env, cfg)?.fitness;
    }
    Ok(sum / tracks.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: MlpPolicy,
    pub best_fitness: f64,
    pub stats: Vec<GenerationStats>,
}

const INIT_STREAM: u64 = 0;
const GENERATION_STREAM: u64 = 1 << 32;

/// Trains from scratch. Deterministic in its arguments.
pub fn train(
    cfg: &EvolutionConfig,
    env: &RolloutEnv,
    track: &TrackParams,
) -> Result<TrainOutcome, EvolveError> {
    train_with_progress(cfg, env, track, |_| {})
}

/// [`train`] with a callback after each generation.
pub fn train_with_progress(
    cfg: &EvolutionConfig,
    env: &RolloutEnv,
    track: &TrackParams,
    mut progress: impl FnMut(&GenerationStats),
) -> Result<TrainOutcome, EvolveError> {
    cfg.validate()?;
    env.validate()?;
    let tracks = cfg
        .track_seeds
        .iter()
        .map(|&s| TrainingTrack::generate(s, track))
        .collect::<Result<Vec<_>, _>>()?;
    let sizes = MlpPolicy::default_sizes(env.sensor.n_rays);

    let mut population = (0..cfg.n_spawns)
        .map(|i| {
            MlpPolicy::random_init(derive_seed(cfg.master_seed, INIT_STREAM + i as u64), sizes)
        })
        .collect::<Result<Vec<_>, _>>()?;
    // Survivors are byte-identical copies and evaluation is deterministic,
    // so their fitness is carried over instead of recomputed.
    let mut known: Vec<Option<f64>> = vec![None; cfg.n_spawns];

    let mut stats = Vec::with_capacity(cfg.generations);
    let mut best: Option<(MlpPolicy, f64)> = None;
    for g in 0..cfg.generations {
        let fits = population
            .par_iter()
            .zip(known.par_iter())
            .map(|(p, k)| match k {
                Some(f) => Ok(*f),
                None => evaluate(p, &tracks, env, cfg),
            })
            .collect::<Result<Vec<f64>, _>>()?;

        let survivors = select_survivors(&fits, cfg.m_survivors);
        let gen_best = survivors[0];
        let record = GenerationStats {
            generation: g + 1,
            best_fitness: fits[gen_best],
            mean_survivor_fitness: survivors.iter().map(|&i| fits[i]).sum::<f64>()
                / survivors.len() as f64,
            mean_population_fitness: fits.iter().sum::<f64>() / fits.len() as f64,
        };
        progress(&record);
        stats.push(record);
        if best.as_ref().is_none_or(|(_, f)| fits[gen_best] > *f) {
            best = Some((population[gen_best].clone(), fits[gen_best]));
        }

        if g + 1 < cfg.generations {
            let scored: Vec<(MlpPolicy, f64)> = population.into_iter().zip(fits.iter().copied()).collect();
            population = evolve_generation(
                &scored,
                cfg,
                derive_seed(cfg.master_seed, GENERATION_STREAM + g as u64),
            )?;
            known = vec![None; cfg.n_spawns];
            for (slot, &i) in survivors.iter().enumerate() {
                known[slot] = Some(fits[i]);
            }
        }
    }
    let (best, best_fitness) = best.expect("at least one generation ran");
    Ok(TrainOutcome {
        best,
        best_fitness,
        stats,
    })
}

/// Writes `generation,best_fitness,mean_survivor_fitness,mean_population_fitness`.
pub fn write_stats_csv<W: Write>(stats: &[GenerationStats], out: W) -> Result<(), EvolveError> {
    let mut w = csv::Writer::from_writer(out);
    for s in stats {
        w.serialize(s)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
