//! Tracking controllers: PID on throttle, Stanley on steering.

use thiserror::Error;

use crate::geometry::Point2;
use crate::trajectory::TrajectoryEmbedding;
use crate::vehicle::{wrap_angle, BicycleState, ControlCommand, VehicleParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("embedding is {age:.3} s old, at most {max_age:.3} s allowed")]
    StaleEmbedding { age: f64, max_age: f64 },
    #[error("lookahead index {index} outside an embedding of {k} samples")]
    LookaheadOutOfRange { index: usize, k: usize },
    #[error("embedding has no samples")]
    EmptyEmbedding,
}

/// PID gains together with the controller state they act on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral_state: f64,
    pub prev_error: f64,
    pub dt: f64,
    /// Bound on `|integral_state|`.
    pub integral_cap: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains {
            kp: 1.0,
            ki: 0.0,
            kd: 0.1,
            integral_state: 0.0,
            prev_error: 0.0,
            dt: 0.05,
            integral_cap: 10.0,
        }
    }
}

impl PidGains {
    /// Same gains, zeroed state.
    pub fn reset(&self) -> Self {
        PidGains {
            integral_state: 0.0,
            prev_error: 0.0,
            ..*self
        }
    }

    /// One PID step on `e = y_des - y`; the output is clamped to `[-1, 1]`
    /// and the integral to `±integral_cap`.
    pub fn update(&mut self, y_des: f64, y: f64) -> f64 {
        let e = y_des - y;
        if !e.is_finite() {
            return 0.0;
        }
        self.integral_state =
            (self.integral_state + e * self.dt).clamp(-self.integral_cap, self.integral_cap);
        let derivative = (e - self.prev_error) / self.dt;
        self.prev_error = e;
        (self.kp * e + self.ki * self.integral_state + self.kd * derivative).clamp(-1.0, 1.0)
    }
}

/// Functional form of [`PidGains::update`].
pub fn pid_throttle(gains: &PidGains, y_des: f64, y: f64) -> (f64, PidGains) {
    let mut next = *gains;
    let u = next.update(y_des, y);
    (u, next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StanleyParams {
    pub gain: f64,
    /// Keeps the cross-track term finite at standstill.
    pub v_soft: f64,
}

impl Default for StanleyParams {
    fn default() -> Self {
        StanleyParams {
            gain: 2.5,
            v_soft: 1.0,
        }
    }
}

/// The Stanley law `θ_e + atan(K·e / (v + v_soft))`, unclamped.
pub fn stanley_raw(heading_error: f64, cross_track: f64, speed: f64, params: &StanleyParams) -> f64 {
    heading_error + (params.gain * cross_track / (speed + params.v_soft)).atan()
}

/// Normalized steering command toward a path with heading `path_heading`.
///
/// `heading_error` is `wrap(yaw - path_heading)`, and `cross_track` is the
/// front axle's offset from the path, positive when it sits to the path's
/// left as drawn (the side a positive steer turns toward). Both terms are
/// steered away, so this is [`stanley_raw`] applied in the mirrored frame.
pub fn stanley_steer(
    state: &BicycleState,
    path_heading: f64,
    cross_track: f64,
    params: &StanleyParams,
    steer_max: f64,
) -> f64 {
    let heading_error = wrap_angle(state.yaw - path_heading);
    let delta = -stanley_raw(heading_error, -cross_track, state.v.max(0.0), params);
    (delta / steer_max).clamp(-1.0, 1.0)
}

/// Signed offset of `p` from the polyline and the heading of the closest
/// segment. The first segment extends backwards without bound.
pub fn cross_track_error(polyline: &[Point2], p: Point2) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64, f64)> = None;
    for (i, w) in polyline.windows(2).enumerate() {
        let seg = w[1] - w[0];
        let len2 = seg.dot(seg);
        if len2 == 0.0 {
            continue;
        }
        let mut t = (p - w[0]).dot(seg) / len2;
        t = if i == 0 { t.min(1.0) } else { t.clamp(0.0, 1.0) };
        let foot = w[0] + seg * t;
        let dist = p.distance(foot);
        if best.is_none_or(|(d, _, _)| dist < d) {
            let heading = seg.angle();
            // Left of the path as drawn (y down) is `(sin θ, -cos θ)`.
            let left = Point2::new(heading.sin(), -heading.cos());
            best = Some((dist, (p - foot).dot(left), heading));
        }
    }
    best.map(|(_, e, h)| (e, h))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Embedding sample the throttle loop chases.
    pub lookahead_idx: usize,
    /// Forward gap to the lookahead sample the throttle loop holds.
    pub target_gap: f64,
    /// Oldest embedding (seconds since its frame) that is still used.
    pub max_age: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            lookahead_idx: 2,
            target_gap: 30.0,
            max_age: 0.5,
        }
    }
}

/// Stanley + PID tracker. Holds the PID state between calls.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracker {
    pub pid: PidGains,
    pub stanley: StanleyParams,
    pub config: TrackerConfig,
}

impl Tracker {
    pub fn new(pid: PidGains, stanley: StanleyParams, config: TrackerConfig) -> Self {
        Tracker {
            pid: pid.reset(),
            stanley,
            config,
        }
    }

    /// Command that follows `embedding` from `state`.
    pub fn command(
        &mut self,
        state: &BicycleState,
        embedding: &TrajectoryEmbedding,
        vehicle: &VehicleParams,
    ) -> Result<ControlCommand, ControlError> {
        let age = state.t - embedding.frame.t;
        let max_age = self.config.max_age;
        if !(age >= -1e-9 && age <= max_age + 1e-9) {
            return Err(ControlError::StaleEmbedding { age, max_age });
        }
        let points = embedding.world_points();
        if points.is_empty() {
            return Err(ControlError::EmptyEmbedding);
        }
        let idx = self.config.lookahead_idx;
        let target = *points.get(idx).ok_or(ControlError::LookaheadOutOfRange {
            index: idx,
            k: points.len(),
        })?;

        let gap = (target - state.position()).dot(state.heading());
        // Throttle up while the lookahead point is further than the target gap.
        let throttle = self.pid.update(gap, self.config.target_gap);

        let front = state.front_axle(vehicle);
        let steer = match cross_track_error(&points, front) {
            Some((e, heading)) => {
                stanley_steer(state, heading, e, &self.stanley, vehicle.steer_max)
            }
            None => 0.0,
        };
        Ok(ControlCommand::new(steer, throttle))
    }
}

/// Functional one-shot form of [`Tracker::command`].
pub fn track_trajectory(
    state: &BicycleState,
    embedding: &TrajectoryEmbedding,
    pid: &PidGains,
    stanley: &StanleyParams,
    config: &TrackerConfig,
    vehicle: &VehicleParams,
) -> Result<(ControlCommand, PidGains), ControlError> {
    let mut t = Tracker {
        pid: *pid,
        stanley: *stanley,
        config: *config,
    };
    let cmd = t.command(state, embedding, vehicle)?;
    Ok((cmd, t.pid))
}
