//! Kinematic bicycle model and ray-cast ranging sensors.
//!
//! Angles follow the grid frame: yaw is measured from +x towards +y. Because
//! grid rows grow downward, positive yaw rates turn the car clockwise on
//! screen, i.e. to its right.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;
use crate::track::OccupancyGrid;

/// Largest accepted integration step, in seconds.
pub const MAX_DT: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VehicleError {
    #[error("non-finite {0} in vehicle update")]
    NonFinite(&'static str),
    #[error("time step {0} s must be nonzero and at most {MAX_DT} s in magnitude")]
    InvalidTimeStep(f64),
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(&'static str),
    #[error("invalid sensor configuration: {0}")]
    InvalidSensor(&'static str),
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Geometry and actuation limits of the simulated car.
///
/// Lengths are in pixels; `mass` is informational only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub l_f: f64,
    pub l_r: f64,
    pub mass: f64,
    pub a_max: f64,
    pub steer_max: f64,
    /// Linear drag coefficient (1/s) standing in for ground friction.
    pub drag: f64,
    pub v_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        // 1/10-scale car at 100 px/m.
        VehicleParams {
            l_f: 13.0,
            l_r: 13.0,
            mass: 1.8,
            a_max: 40.0,
            steer_max: 0.6,
            drag: 0.3,
            v_max: 80.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let all = [
            self.l_f,
            self.l_r,
            self.mass,
            self.a_max,
            self.steer_max,
            self.drag,
            self.v_max,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(VehicleError::NonFinite("parameter"));
        }
        if self.l_f <= 0.0 || self.l_r <= 0.0 {
            return Err(VehicleError::InvalidParams("axle distances must be positive"));
        }
        if self.a_max <= 0.0 || self.v_max <= 0.0 {
            return Err(VehicleError::InvalidParams("a_max and v_max must be positive"));
        }
        if !(self.steer_max > 0.0 && self.steer_max <= PI / 3.0) {
            return Err(VehicleError::InvalidParams("steer_max must lie in (0, π/3]"));
        }
        if self.drag < 0.0 {
            return Err(VehicleError::InvalidParams("drag must be non-negative"));
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    /// Slip angle of the center of mass for front-wheel angle `delta`.
    pub fn slip_angle(&self, delta: f64) -> f64 {
        (self.l_r * delta.tan() / self.wheelbase()).atan()
    }

    /// Radius of the circle traced by the center of mass at constant
    /// wheel angle `delta`.
    pub fn turning_radius(&self, delta: f64) -> f64 {
        self.l_r / self.slip_angle(delta).sin().abs()
    }
}

/// Pose and speed of the car.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BicycleState {
    pub x: f64,
    pub y: f64,
    /// Yaw in `(-π, π]`.
    pub yaw: f64,
    pub v: f64,
    pub t: f64,
}

impl BicycleState {
    pub fn at_rest(position: Point2, yaw: f64) -> Self {
        BicycleState {
            x: position.x,
            y: position.y,
            yaw: wrap_angle(yaw),
            v: 0.0,
            t: 0.0,
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn heading(&self) -> Point2 {
        Point2::from_angle(self.yaw)
    }

    pub fn front_axle(&self, params: &VehicleParams) -> Point2 {
        self.position() + self.heading() * params.l_f
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.yaw.is_finite()
            && self.v.is_finite()
            && self.t.is_finite()
    }
}

/// Normalized actuation: `steer` scales `steer_max`, `throttle` scales
/// `a_max`. Both are clamped to `[-1, 1]` on construction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    pub steer: f64,
    pub throttle: f64,
}

impl ControlCommand {
    pub fn new(steer: f64, throttle: f64) -> Self {
        ControlCommand {
            steer: steer.clamp(-1.0, 1.0),
            throttle: throttle.clamp(-1.0, 1.0),
        }
    }
}

/// One explicit-Euler step of the kinematic bicycle model.
///
/// A negative `dt` integrates backwards.
pub fn step(
    state: &BicycleState,
    params: &VehicleParams,
    cmd: ControlCommand,
    dt: f64,
) -> Result<BicycleState, VehicleError> {
    if !dt.is_finite() {
        return Err(VehicleError::NonFinite("time step"));
    }
    if dt == 0.0 || dt.abs() > MAX_DT {
        return Err(VehicleError::InvalidTimeStep(dt));
    }
    if !state.is_finite() {
        return Err(VehicleError::NonFinite("state"));
    }
    if !(cmd.steer.is_finite() && cmd.throttle.is_finite()) {
        return Err(VehicleError::NonFinite("command"));
    }
    let cmd = ControlCommand::new(cmd.steer, cmd.throttle);
    let delta = cmd.steer * params.steer_max;
    let accel = cmd.throttle * params.a_max;
    let slip = params.slip_angle(delta);
    let course = state.yaw + slip;
    let v = state.v;
    Ok(BicycleState {
        x: state.x + v * course.cos() * dt,
        y: state.y + v * course.sin() * dt,
        yaw: wrap_angle(state.yaw + v * slip.sin() / params.l_r * dt),
        v: (v + (accel - params.drag * v) * dt).clamp(0.0, params.v_max),
        t: state.t + dt,
    })
}

/// Fan of ranging rays centred on the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub n_rays: usize,
    /// Angular spacing between neighbouring rays, radians.
    pub beta_offset: f64,
    /// Maximum reported distance `L`, pixels.
    pub range_cap: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            n_rays: 7,
            beta_offset: 30f64.to_radians(),
            range_cap: 150.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), VehicleError> {
        if self.n_rays < 2 || self.n_rays.is_multiple_of(2) {
            return Err(VehicleError::InvalidSensor("ray count must be odd and at least 3"));
        }
        if !(self.beta_offset.is_finite() && self.beta_offset > 0.0) {
            return Err(VehicleError::InvalidSensor("ray spacing must be positive"));
        }
        if (self.n_rays - 1) as f64 * self.beta_offset > PI + 1e-12 {
            return Err(VehicleError::InvalidSensor("rays may span at most π"));
        }
        if !(self.range_cap.is_finite() && self.range_cap > 0.0) {
            return Err(VehicleError::InvalidSensor("range cap must be positive"));
        }
        Ok(())
    }

    /// Offset of ray `i` from the heading.
    pub fn ray_offset(&self, i: usize) -> f64 {
        (i as f64 - (self.n_rays - 1) as f64 / 2.0) * self.beta_offset
    }
}

/// Capped ray distances from the car, one per ray.
///
/// Returns all zeros when the car itself is off-track.
pub fn sense(state: &BicycleState, grid: &OccupancyGrid, cfg: &SensorConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.n_rays];
    sense_into(state, grid, cfg, &mut out);
    out
}

/// Allocation-free [`sense`]; `out` must hold `cfg.n_rays` values.
pub fn sense_into(state: &BicycleState, grid: &OccupancyGrid, cfg: &SensorConfig, out: &mut [f64]) {
    debug_assert_eq!(out.len(), cfg.n_rays);
    let origin = state.position();
    if !grid.is_on_track(origin) {
        out.fill(0.0);
        return;
    }
    for (i, d) in out.iter_mut().enumerate() {
        *d = ray_distance(grid, origin, state.yaw + cfg.ray_offset(i), cfg.range_cap);
    }
}

/// Spacing of the sample points along a sensor ray, pixels.
pub const RAY_SAMPLE_STEP: f64 = 0.05;

/// Distance along a ray to the first off-track cell, capped at `max_range`.
///
/// The ray is sampled every [`RAY_SAMPLE_STEP`] px; an off-track cell stops
/// it only if one of those samples lands inside. A ray that clips the corner
/// of a cell for less than a step passes through. The returned distance is
/// where the ray enters that cell.
///
/// Walks the cells pierced by the ray (Amanatides-Woo traversal), so the
/// cost is proportional to the number of cells crossed, not samples.
pub fn ray_distance(grid: &OccupancyGrid, origin: Point2, angle: f64, max_range: f64) -> f64 {
    // Shift so cell (r, c) covers [c, c+1) x [r, r+1).
    let u = origin.x + 0.5;
    let w = origin.y + 0.5;
    let mut col = u.floor() as i64;
    let mut row = w.floor() as i64;
    if !grid.get_signed(row, col) {
        return 0.0;
    }
    let (dy, dx) = angle.sin_cos();
    let (step_c, delta_c, mut next_c) = axis(u, dx);
    let (step_r, delta_r, mut next_r) = axis(w, dy);

    loop {
        let enter;
        if next_c < next_r {
            enter = next_c;
            next_c += delta_c;
            col += step_c;
        } else {
            enter = next_r;
            next_r += delta_r;
            row += step_r;
        }
        if enter >= max_range {
            return max_range;
        }
        if !grid.get_signed(row, col) {
            let exit = next_c.min(next_r);
            let first_sample = (enter / RAY_SAMPLE_STEP).ceil().max(1.0) * RAY_SAMPLE_STEP;
            if first_sample < exit {
                return enter;
            }
        }
    }
}

fn axis(start: f64, dir: f64) -> (i64, f64, f64) {
    if dir > 0.0 {
        let delta = 1.0 / dir;
        (1, delta, (start.floor() + 1.0 - start) * delta)
    } else if dir < 0.0 {
        let delta = -1.0 / dir;
        (-1, delta, (start - start.floor()) * delta)
    } else {
        (0, f64::INFINITY, f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_grid(n: usize) -> OccupancyGrid {
        OccupancyGrid::from_fn(n, n, 100.0, |_, _| true).unwrap()
    }

    #[test]
    fn straight_coasting() {
        let p = VehicleParams {
            drag: 0.0,
            ..VehicleParams::default()
        };
        let s = BicycleState {
            v: 10.0,
            ..BicycleState::default()
        };
        let next = step(&s, &p, ControlCommand::new(0.0, 0.0), 0.1).unwrap();
        assert_eq!(next.x, 1.0);
        assert_eq!((next.y, next.yaw, next.v), (0.0, 0.0, 10.0));
        // One second in ten steps.
        let mut s = s;
        for _ in 0..10 {
            s = step(&s, &p, ControlCommand::default(), 0.1).unwrap();
        }
        assert!((s.x - 10.0).abs() < 1e-12);
    }

    #[test]
    fn speed_approaches_terminal_value() {
        let p = VehicleParams {
            drag: 0.8,
            v_max: 1000.0,
            ..VehicleParams::default()
        };
        let dt = 0.001;
        let mut s = BicycleState::default();
        for _ in 0..5000 {
            s = step(&s, &p, ControlCommand::new(0.0, 1.0), dt).unwrap();
        }
        let t: f64 = s.t;
        let closed = p.a_max / p.drag * (1.0 - (-p.drag * t).exp());
        assert!((s.v - closed).abs() / closed < 1e-3, "{} vs {closed}", s.v);
        let capped = VehicleParams {
            drag: 0.3,
            ..VehicleParams::default()
        };
        let mut s = BicycleState::default();
        for _ in 0..2000 {
            s = step(&s, &capped, ControlCommand::new(0.0, 1.0), 0.05).unwrap();
            assert!(s.v <= capped.v_max);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = VehicleParams::default();
        let s = BicycleState::default();
        assert_eq!(
            step(&s, &p, ControlCommand::default(), 0.0),
            Err(VehicleError::InvalidTimeStep(0.0))
        );
        assert_eq!(
            step(&s, &p, ControlCommand::default(), 0.2),
            Err(VehicleError::InvalidTimeStep(0.2))
        );
        let bad = BicycleState { x: f64::NAN, ..s };
        assert!(step(&bad, &p, ControlCommand::default(), 0.05).is_err());
        let cmd = ControlCommand {
            steer: f64::NAN,
            throttle: 0.0,
        };
        assert!(step(&s, &p, cmd, 0.05).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(VehicleParams::default().validate().is_ok());
        let wide = VehicleParams {
            steer_max: 1.2,
            ..VehicleParams::default()
        };
        assert!(wide.validate().is_err());
        assert!(SensorConfig::default().validate().is_ok());
        let even = SensorConfig {
            n_rays: 6,
            ..SensorConfig::default()
        };
        assert!(even.validate().is_err());
        let wide = SensorConfig {
            beta_offset: 1.0,
            ..SensorConfig::default()
        };
        assert!(wide.validate().is_err());
    }

    #[test]
    fn wraps_angles() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn open_field_reads_cap() {
        let grid = open_grid(1000);
        let s = BicycleState::at_rest(Point2::new(500.0, 500.0), 0.3);
        let d = sense(&s, &grid, &SensorConfig::default());
        assert_eq!(d, vec![150.0; 7]);
    }

    #[test]
    fn wall_distance() {
        // Drivable rows 0..=59; the wall starts at the boundary y = 59.5.
        let grid = OccupancyGrid::from_fn(200, 200, 100.0, |r, _| r < 60).unwrap();
        let s = BicycleState::at_rest(Point2::new(100.0, 49.5), PI / 2.0);
        let d = sense(&s, &grid, &SensorConfig::default());
        assert!((d[3] - 10.0).abs() <= 1.0, "{}", d[3]);
    }

    #[test]
    fn off_track_reads_zero() {
        let grid = OccupancyGrid::from_fn(10, 10, 100.0, |r, _| r < 5).unwrap();
        let s = BicycleState::at_rest(Point2::new(3.0, 8.0), 0.0);
        assert_eq!(sense(&s, &grid, &SensorConfig::default()), vec![0.0; 7]);
    }

    #[test]
    fn corner_clips_shorter_than_a_sample_pass_through() {
        // One blocked cell covering [9.5, 10.5) x [4.5, 5.5).
        let grid = OccupancyGrid::from_fn(20, 20, 100.0, |r, c| (r, c) != (5, 10)).unwrap();
        let up_right = -PI / 4.0;
        // Crosses the cell's corner with a 0.014 px chord: missed.
        let d = ray_distance(&grid, Point2::new(5.0, 9.01), up_right, 150.0);
        assert!((d - 9.51 * 2f64.sqrt()).abs() < 1e-9, "{d}");
        // A 0.28 px chord: hit where the ray enters the cell.
        let d = ray_distance(&grid, Point2::new(5.0, 9.2), up_right, 150.0);
        assert!((d - 4.5 * 2f64.sqrt()).abs() < 1e-9, "{d}");
    }

    #[test]
    fn axis_aligned_ray_hits_grid_edge() {
        let grid = open_grid(20);
        let d = ray_distance(&grid, Point2::new(10.0, 10.0), 0.0, 150.0);
        assert!((d - 9.5).abs() < 1e-12);
        let d = ray_distance(&grid, Point2::new(10.0, 10.0), -PI / 2.0, 150.0);
        assert!((d - 10.5).abs() < 1e-12);
    }
}
