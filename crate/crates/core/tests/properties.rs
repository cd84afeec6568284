//! Property tests for the invariants each module promises.

use proptest::prelude::*;

use raceline::control::{pid_throttle, stanley_raw, stanley_steer, PidGains, StanleyParams};
use raceline::evolve::select_survivors;
use raceline::geometry::{bernstein, de_casteljau, BezierCurve, Point2};
use raceline::policy::MlpPolicy;
use raceline::track::{generate_track, rasterize, TrackParams};
use raceline::trajectory::{path_to_embedding, to_world_frame};
use raceline::vehicle::{sense, step, wrap_angle, BicycleState, ControlCommand, SensorConfig, VehicleParams};

fn point() -> impl Strategy<Value = Point2> {
    (-100.0..100.0f64, -100.0..100.0f64).prop_map(|(x, y)| Point2::new(x, y))
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a - o).cross(b - o)
}

/// Andrew's monotone chain, counter-clockwise.
fn convex_hull(mut pts: Vec<Point2>) -> Vec<Point2> {
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn in_hull(hull: &[Point2], p: Point2, slack: f64) -> bool {
    match hull.len() {
        0 => false,
        1 => p.distance(hull[0]) <= slack,
        2 => raceline::geometry::point_segment_distance(p, hull[0], hull[1]) <= slack,
        n => (0..n).all(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            cross(a, b, p) / a.distance(b) >= -slack
        }),
    }
}

proptest! {
    #[test]
    fn de_casteljau_matches_bernstein(pts in prop::collection::vec(point(), 2..=9), t in 0.0..=1.0f64) {
        let n = pts.len() - 1;
        let mut sum = Point2::ORIGIN;
        for (i, p) in pts.iter().enumerate() {
            sum = sum + *p * bernstein(n, i, t);
        }
        prop_assert!(de_casteljau(&pts, t).distance(sum) < 1e-9);
    }

    #[test]
    fn eval_stays_in_control_hull(pts in prop::collection::vec(point(), 2..=9), t in 0.0..=1.0f64) {
        let curve = BezierCurve::new(pts.clone()).unwrap();
        let hull = convex_hull(pts);
        prop_assert!(in_hull(&hull, curve.eval(t).unwrap(), 1e-9));
    }

    #[test]
    fn samples_at_known_params_fit_exactly(
        ctrl in prop::collection::vec(point(), 4),
        mut ts in prop::collection::vec(0.001..0.999f64, 2..30),
    ) {
        ts.push(0.0);
        ts.push(1.0);
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        prop_assume!(ts.len() >= 4);
        let cubic = BezierCurve::new(ctrl).unwrap();
        let pts: Vec<Point2> = ts.iter().map(|&t| cubic.point_at(t)).collect();
        let fit = BezierCurve::fit_with_params(&pts, &ts, 3).unwrap();
        for (p, &t) in pts.iter().zip(&ts) {
            prop_assert!(fit.point_at(t).distance(*p) < 1e-8);
        }
    }

    #[test]
    fn collinear_fit_is_exact(a in point(), b in point(), n in 4usize..20, degree in 1usize..4) {
        prop_assume!(a.distance(b) > 1.0);
        let pts: Vec<Point2> = (0..n).map(|i| a.lerp(b, i as f64 / (n - 1) as f64)).collect();
        let curve = BezierCurve::fit(&pts, degree).unwrap();
        let params = raceline::geometry::chord_length_params(&pts).unwrap();
        for (p, t) in pts.iter().zip(params) {
            prop_assert!(curve.point_at(t).distance(*p) < 1e-8);
        }
    }

    #[test]
    fn resample_is_order_preserving(
        dx in prop::collection::vec(-50.0..50.0f64, 4),
        dy in prop::collection::vec(1.0..50.0f64, 3),
        mut ys in prop::collection::vec(0.0..1.0f64, 1..20),
    ) {
        let mut y = 0.0;
        let mut ctrl = vec![Point2::new(dx[0], 0.0)];
        for i in 0..3 {
            y += dy[i];
            ctrl.push(Point2::new(dx[i + 1], y));
        }
        let curve = BezierCurve::new(ctrl).unwrap();
        let top = curve.end().y;
        ys.iter_mut().for_each(|v| *v *= top);
        ys.sort_by(f64::total_cmp);
        let ts = curve.params_at_y(&ys).unwrap();
        prop_assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        for (t, y) in ts.iter().zip(&ys) {
            prop_assert!((curve.point_at(*t).y - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn policy_bytes_round_trip(seed in any::<u64>(), n_in in 1usize..12, h1 in 1usize..20, h2 in 1usize..20) {
        let p = MlpPolicy::random_init(seed, [n_in, h1, h2, 2]).unwrap();
        let bytes = p.to_bytes();
        let back = MlpPolicy::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, p);
    }

    #[test]
    fn policy_outputs_are_bounded(seed in any::<u64>(), inputs in prop::collection::vec(-1e3..1e3f64, 7)) {
        let p = MlpPolicy::random_init(seed, MlpPolicy::default_sizes(7)).unwrap().mutate(5.0, seed);
        let c = p.forward(&inputs).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c.steer) && (-1.0..=1.0).contains(&c.throttle));
    }

    #[test]
    fn stanley_is_bounded(yaw in -10.0..10.0f64, heading in -10.0..10.0f64, e in -1e4..1e4f64, v in 0.0..200.0f64) {
        let s = BicycleState { yaw: wrap_angle(yaw), v, ..BicycleState::default() };
        let steer = stanley_steer(&s, heading, e, &StanleyParams::default(), 0.6);
        prop_assert!((-1.0..=1.0).contains(&steer));
    }

    #[test]
    fn stanley_cross_term_shrinks_with_speed(e in 1e-3..1e3f64, v in 0.0..100.0f64, dv in 0.0..100.0f64) {
        let p = StanleyParams::default();
        let slow = stanley_raw(0.0, e, v, &p);
        let fast = stanley_raw(0.0, e, v + dv, &p);
        prop_assert!(fast <= slow);
        prop_assert!(slow > 0.0 && slow < std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn pid_stays_bounded(
        kp in 0.0..10.0f64, ki in 0.0..10.0f64, kd in 0.0..10.0f64,
        errors in prop::collection::vec(-1e4..1e4f64, 1..200),
    ) {
        let mut g = PidGains { kp, ki, kd, ..PidGains::default() };
        for e in errors {
            let (u, next) = pid_throttle(&g, e, 0.0);
            prop_assert!((-1.0..=1.0).contains(&u));
            prop_assert!(next.integral_state.abs() <= next.integral_cap);
            g = next;
        }
    }

    #[test]
    fn pid_without_integral_replays(kp in 0.0..5.0f64, kd in 0.0..5.0f64, errors in prop::collection::vec(-50.0..50.0f64, 1..50)) {
        let g0 = PidGains { kp, ki: 0.0, kd, ..PidGains::default() };
        let run = || {
            let mut g = g0;
            errors.iter().map(|&e| g.update(e, 0.0)).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn speed_stays_in_range(cmds in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 1..300)) {
        let params = VehicleParams::default();
        let mut s = BicycleState::at_rest(Point2::new(0.0, 0.0), 0.0);
        for (steer, throttle) in cmds {
            s = step(&s, &params, ControlCommand { steer, throttle }, 0.05).unwrap();
            prop_assert!(s.v >= 0.0 && s.v <= params.v_max);
            prop_assert!(s.yaw > -std::f64::consts::PI && s.yaw <= std::f64::consts::PI);
        }
    }

    #[test]
    fn straight_coasting_is_reversible(yaw in -3.0..3.0f64, v in 0.0..80.0f64, dt in 0.001..0.1f64) {
        let params = VehicleParams { drag: 0.0, ..VehicleParams::default() };
        let s0 = BicycleState { yaw, v, ..BicycleState::at_rest(Point2::new(12.0, -4.0), yaw) };
        let cmd = ControlCommand::new(0.0, 0.0);
        let s1 = step(&s0, &params, cmd, dt).unwrap();
        let back = step(&s1, &params, cmd, -dt).unwrap();
        prop_assert!((back.x - s0.x).abs() < 1e-9 && (back.y - s0.y).abs() < 1e-9);
        prop_assert!((back.yaw - s0.yaw).abs() < 1e-12 && (back.v - s0.v).abs() < 1e-12);
    }

    #[test]
    fn survivors_are_the_top_m(fits in prop::collection::vec(-100.0..100.0f64, 2..60), m in 1usize..10) {
        let m = m.min(fits.len() - 1);
        let idx = select_survivors(&fits, m);
        prop_assert_eq!(idx.len(), m);
        let worst_kept = idx.iter().map(|&i| fits[i]).fold(f64::INFINITY, f64::min);
        for (i, f) in fits.iter().enumerate() {
            if !idx.contains(&i) {
                prop_assert!(*f <= worst_kept);
            }
        }
        prop_assert!(idx.windows(2).all(|w| fits[w[0]] >= fits[w[1]]));
    }

    #[test]
    fn embedding_is_rigid_motion_invariant(
        curvature in -0.004..0.004f64,
        angle in -3.1..3.1f64,
        shift in point(),
        yaw in -3.1..3.1f64,
    ) {
        let origin = BicycleState::at_rest(Point2::new(50.0, 60.0), yaw);
        // Constant-curvature path ahead of the car, in its own frame.
        let local: Vec<Point2> = (0..120).map(|i| {
            let s = i as f64 * 2.0;
            if curvature.abs() < 1e-9 {
                Point2::new(0.0, s)
            } else {
                let r = 1.0 / curvature;
                Point2::new(r - r * (s / r).cos(), r * (s / r).sin())
            }
        }).collect();
        let path: Vec<Point2> = local.iter().map(|q| to_world_frame(&origin, *q)).collect();
        let a = path_to_embedding(&path, &origin, 10, 15.0).unwrap();

        let (s, c) = angle.sin_cos();
        let rot = |p: Point2| Point2::new(c * p.x - s * p.y, s * p.x + c * p.y) + shift;
        let moved: Vec<Point2> = path.iter().map(|p| rot(*p)).collect();
        let pose = BicycleState::at_rest(rot(origin.position()), wrap_angle(yaw + angle));
        let b = path_to_embedding(&moved, &pose, 10, 15.0).unwrap();
        for (x, y) in a.xs.iter().zip(&b.xs) {
            prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn on_track_agrees_with_index_arithmetic(seed in 0u64..50, pts in prop::collection::vec((-20.0..540.0f64, -20.0..540.0f64), 200)) {
        let grid = rasterize(&generate_track(seed, &TrackParams::default()).unwrap());
        for (x, y) in pts {
            let (r, c) = ((y + 0.5).floor(), (x + 0.5).floor());
            let want = r >= 0.0 && c >= 0.0 && r < 512.0 && c < 512.0
                && grid.cells()[r as usize * 512 + c as usize];
            prop_assert_eq!(grid.is_on_track(Point2::new(x, y)), want);
        }
    }

    #[test]
    fn sense_is_within_cap(seed in 0u64..20, picks in prop::collection::vec((0usize..1_000_000, -3.2..3.2f64), 50)) {
        let grid = rasterize(&generate_track(seed, &TrackParams::default()).unwrap());
        let cfg = SensorConfig::default();
        let on: Vec<usize> = (0..grid.cells().len()).filter(|&i| grid.cells()[i]).collect();
        for (k, yaw) in picks {
            let i = on[k % on.len()];
            let p = Point2::new((i % 512) as f64, (i / 512) as f64);
            for d in sense(&BicycleState::at_rest(p, yaw), &grid, &cfg) {
                prop_assert!((0.0..=cfg.range_cap).contains(&d));
            }
        }
    }
}
