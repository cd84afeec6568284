//! Planar points and single-segment Bezier curves.
//!
//! Curves are evaluated with De Casteljau's algorithm, fitted to point
//! sequences by linear least squares over the Bernstein basis, and resampled
//! at prescribed `y` values by bisection on `y(t)`.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples used to check that `y(t)` is monotone before resampling.
pub const MONOTONE_CHECK_SAMPLES: usize = 256;

/// Bisection stops once `|y(t) - y|` is below this many pixels.
pub const RESAMPLE_TOLERANCE: f64 = 1e-6;

/// Default degree for trajectory fits.
pub const DEFAULT_FIT_DEGREE: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("a Bezier curve needs at least 2 control points, got {0}")]
    TooFewControlPoints(usize),
    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("curve parameter {0} is outside [0, 1]")]
    ParameterOutOfRange(f64),
    #[error("fitting degree {degree} needs at least {needed} points, got {got}")]
    TooFewPoints {
        degree: usize,
        needed: usize,
        got: usize,
    },
    #[error("fit degree must be at least 1")]
    ZeroDegree,
    #[error("points {0} and {1} coincide; chord-length parameters would repeat")]
    RepeatedParameter(usize, usize),
    #[error("least-squares basis matrix is rank deficient")]
    RankDeficient,
    #[error("curve is not monotonically increasing in y")]
    NonMonotone,
    #[error("y = {y} is outside the curve's range [{min}, {max}]")]
    YOutOfRange { y: f64, min: f64, max: f64 },
    #[error("requested y values are not in ascending order")]
    UnsortedQuery,
}

/// A point (or vector) in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    /// Unit vector at angle `theta` from +x towards +y.
    #[inline]
    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Point2 { x: c, y: s }
    }

    #[inline]
    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    #[inline]
    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        self + (other - self) * t
    }

    /// Counter-clockwise rotation by 90° in a right-handed frame.
    #[inline]
    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }

    #[inline]
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    #[inline]
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    #[inline]
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    #[inline]
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    #[inline]
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// De Casteljau evaluation over an arbitrary control polygon (length ≥ 1).
///
/// Used directly for hodographs, which may have a single control point.
pub fn de_casteljau(points: &[Point2], t: f64) -> Point2 {
    debug_assert!(!points.is_empty());
    match points.len() {
        1 => points[0],
        2 => points[0].lerp(points[1], t),
        4 => {
            let a = points[0].lerp(points[1], t);
            let b = points[1].lerp(points[2], t);
            let c = points[2].lerp(points[3], t);
            let ab = a.lerp(b, t);
            let bc = b.lerp(c, t);
            ab.lerp(bc, t)
        }
        _ => {
            let mut scratch = points.to_vec();
            for level in (1..scratch.len()).rev() {
                for i in 0..level {
                    scratch[i] = scratch[i].lerp(scratch[i + 1], t);
                }
            }
            scratch[0]
        }
    }
}

/// Bernstein basis polynomial `b_{i,n}(t)`.
pub fn bernstein(n: usize, i: usize, t: f64) -> f64 {
    if i > n {
        return 0.0;
    }
    binomial(n, i) * t.powi(i as i32) * (1.0 - t).powi((n - i) as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Cumulative chord length normalized to `[0, 1]`.
///
/// Consecutive points must be distinct.
pub fn chord_length_params(points: &[Point2]) -> Result<Vec<f64>, GeometryError> {
    let mut params = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    params.push(0.0);
    for (i, w) in points.windows(2).enumerate() {
        let chord = w[0].distance(w[1]);
        if chord <= 0.0 {
            return Err(GeometryError::RepeatedParameter(i, i + 1));
        }
        acc += chord;
        params.push(acc);
    }
    if acc > 0.0 {
        for p in &mut params {
            *p /= acc;
        }
    }
    if let Some(last) = params.last_mut() {
        *last = 1.0;
    }
    Ok(params)
}

/// A single Bezier segment of arbitrary degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BezierCurve {
    control_points: Vec<Point2>,
}

impl BezierCurve {
    pub fn new(control_points: Vec<Point2>) -> Result<Self, GeometryError> {
        if control_points.len() < 2 {
            return Err(GeometryError::TooFewControlPoints(control_points.len()));
        }
        if let Some(i) = control_points.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(BezierCurve { control_points })
    }

    /// Straight segment from `a` to `b`.
    pub fn line(a: Point2, b: Point2) -> Result<Self, GeometryError> {
        Self::new(vec![a, b])
    }

    pub fn control_points(&self) -> &[Point2] {
        &self.control_points
    }

    pub fn degree(&self) -> usize {
        self.control_points.len() - 1
    }

    pub fn start(&self) -> Point2 {
        self.control_points[0]
    }

    pub fn end(&self) -> Point2 {
        self.control_points[self.control_points.len() - 1]
    }

    /// Evaluates the curve at `t ∈ [0, 1]`.
    pub fn eval(&self, t: f64) -> Result<Point2, GeometryError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(GeometryError::ParameterOutOfRange(t));
        }
        Ok(self.point_at(t))
    }

    /// Unchecked evaluation for hot loops where `t` is known to be in range.
    #[inline]
    pub fn point_at(&self, t: f64) -> Point2 {
        de_casteljau(&self.control_points, t)
    }

    /// Control points of the derivative curve (the hodograph).
    pub fn hodograph(&self) -> Vec<Point2> {
        let n = self.degree() as f64;
        self.control_points
            .windows(2)
            .map(|w| (w[1] - w[0]) * n)
            .collect()
    }

    /// First derivative `dC/dt`.
    pub fn derivative_at(&self, t: f64) -> Point2 {
        de_casteljau(&self.hodograph(), t)
    }

    /// Second derivative `d²C/dt²` (zero for lines).
    pub fn second_derivative_at(&self, t: f64) -> Point2 {
        if self.degree() < 2 {
            return Point2::ORIGIN;
        }
        let d1 = self.hodograph();
        let n = (d1.len() - 1) as f64;
        let d2: Vec<Point2> = d1.windows(2).map(|w| (w[1] - w[0]) * n).collect();
        de_casteljau(&d2, t)
    }

    /// Length of the control polygon, an upper bound on arc length.
    pub fn control_polygon_length(&self) -> f64 {
        self.control_points
            .windows(2)
            .map(|w| w[0].distance(w[1]))
            .sum()
    }

    /// Least-squares fit of a degree-`degree` curve to `points`.
    ///
    /// Parameters are assigned by normalized chord length, so the first and
    /// last points sit at `t = 0` and `t = 1`. All control points, including
    /// the endpoints, are free.
    pub fn fit(points: &[Point2], degree: usize) -> Result<Self, GeometryError> {
        if degree == 0 {
            return Err(GeometryError::ZeroDegree);
        }
        if points.len() < degree + 1 {
            return Err(GeometryError::TooFewPoints {
                degree,
                needed: degree + 1,
                got: points.len(),
            });
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
        let params = chord_length_params(points)?;
        Self::fit_with_params(points, &params, degree)
    }

    /// Least-squares fit with caller-assigned parameters.
    pub fn fit_with_params(
        points: &[Point2],
        params: &[f64],
        degree: usize,
    ) -> Result<Self, GeometryError> {
        debug_assert_eq!(points.len(), params.len());
        let m = points.len();
        let basis = DMatrix::from_fn(m, degree + 1, |r, c| bernstein(degree, c, params[r]));
        let targets = DMatrix::from_fn(m, 2, |r, c| if c == 0 { points[r].x } else { points[r].y });

        let svd = basis.svd(true, true);
        let max_sv = svd.singular_values.max();
        let min_sv = svd.singular_values.min();
        if !(max_sv > 0.0) || min_sv <= max_sv * 1e-12 {
            return Err(GeometryError::RankDeficient);
        }
        let solution = svd
            .solve(&targets, 0.0)
            .map_err(|_| GeometryError::RankDeficient)?;
        let control_points = (0..=degree)
            .map(|i| Point2::new(solution[(i, 0)], solution[(i, 1)]))
            .collect();
        Self::new(control_points)
    }

    /// Whether `y(t)` is non-decreasing over [`MONOTONE_CHECK_SAMPLES`]
    /// samples and strictly increasing end to end.
    pub fn is_monotone_in_y(&self) -> bool {
        let n = MONOTONE_CHECK_SAMPLES;
        let mut prev = self.point_at(0.0).y;
        for j in 1..n {
            let y = self.point_at(j as f64 / (n - 1) as f64).y;
            if y < prev {
                return false;
            }
            prev = y;
        }
        self.end().y > self.start().y
    }

    /// Parameters `t*` with `y(t*) = y` for each requested `y`.
    pub fn params_at_y(&self, ys: &[f64]) -> Result<Vec<f64>, GeometryError> {
        if !self.is_monotone_in_y() {
            return Err(GeometryError::NonMonotone);
        }
        if ys.windows(2).any(|w| w[1] < w[0]) {
            return Err(GeometryError::UnsortedQuery);
        }
        let (min, max) = (self.start().y, self.end().y);
        ys.iter()
            .map(|&y| {
                if !(y >= min - 1e-9 && y <= max + 1e-9) {
                    return Err(GeometryError::YOutOfRange { y, min, max });
                }
                Ok(self.bisect_y(y))
            })
            .collect()
    }

    /// The `x` coordinates of the curve at each requested `y`.
    pub fn resample_at_y(&self, ys: &[f64]) -> Result<Vec<f64>, GeometryError> {
        Ok(self
            .params_at_y(ys)?
            .into_iter()
            .map(|t| self.point_at(t).x)
            .collect())
    }

    fn bisect_y(&self, y: f64) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        if (self.start().y - y).abs() <= RESAMPLE_TOLERANCE {
            return 0.0;
        }
        if (self.end().y - y).abs() <= RESAMPLE_TOLERANCE {
            return 1.0;
        }
        let mut mid = 0.5;
        for _ in 0..200 {
            mid = 0.5 * (lo + hi);
            let ym = self.point_at(mid).y;
            if (ym - y).abs() <= RESAMPLE_TOLERANCE {
                break;
            }
            if ym < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        mid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    #[test]
    fn endpoints_interpolate() {
        let c = BezierCurve::new(vec![p(1.0, 2.0), p(5.0, -3.0), p(7.0, 9.0), p(-2.0, 4.0)]).unwrap();
        assert_eq!(c.eval(0.0).unwrap(), p(1.0, 2.0));
        assert_eq!(c.eval(1.0).unwrap(), p(-2.0, 4.0));
    }

    #[test]
    fn collinear_cubic_midpoint() {
        // B(0.5) = (0 + 3*1 + 3*2 + 3) / 8 = 1.5
        let c = BezierCurve::new(vec![p(0.0, 0.0), p(1.0, 0.0), p(2.0, 0.0), p(3.0, 0.0)]).unwrap();
        let m = c.eval(0.5).unwrap();
        assert!((m.x - 1.5).abs() < 1e-15 && m.y == 0.0);
    }

    #[test]
    fn rejects_bad_parameters_and_curves() {
        let c = BezierCurve::line(p(0.0, 0.0), p(1.0, 1.0)).unwrap();
        assert_eq!(c.eval(1.5), Err(GeometryError::ParameterOutOfRange(1.5)));
        assert!(matches!(c.eval(-0.1), Err(GeometryError::ParameterOutOfRange(_))));
        assert!(matches!(c.eval(f64::NAN), Err(GeometryError::ParameterOutOfRange(_))));
        assert_eq!(
            BezierCurve::new(vec![p(0.0, 0.0)]),
            Err(GeometryError::TooFewControlPoints(1))
        );
        assert_eq!(
            BezierCurve::new(vec![p(0.0, 0.0), p(f64::INFINITY, 0.0)]),
            Err(GeometryError::NonFinite(1))
        );
    }

    #[test]
    fn fit_errors() {
        let pts = [p(0.0, 0.0), p(1.0, 1.0), p(2.0, 2.0)];
        assert!(matches!(
            BezierCurve::fit(&pts, 3),
            Err(GeometryError::TooFewPoints { needed: 4, got: 3, .. })
        ));
        let dup = [p(0.0, 0.0), p(1.0, 1.0), p(1.0, 1.0), p(2.0, 2.0), p(3.0, 3.0)];
        assert_eq!(
            BezierCurve::fit(&dup, 3),
            Err(GeometryError::RepeatedParameter(1, 2))
        );
        // Only two distinct parameter values cannot pin a cubic.
        let pts = [p(0.0, 0.0), p(1.0, 0.0), p(2.0, 0.0), p(3.0, 0.0)];
        let params = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(
            BezierCurve::fit_with_params(&pts, &params, 3),
            Err(GeometryError::RankDeficient)
        );
    }

    #[test]
    fn collinear_fit_is_exact() {
        let pts: Vec<_> = (0..8).map(|i| p(i as f64, 2.0 * i as f64)).collect();
        let c = BezierCurve::fit(&pts, 3).unwrap();
        let params = chord_length_params(&pts).unwrap();
        for (q, t) in pts.iter().zip(&params) {
            assert!(c.point_at(*t).distance(*q) < 1e-8);
        }
        for cp in c.control_points() {
            assert!((cp.y - 2.0 * cp.x).abs() < 1e-8);
        }
    }

    #[test]
    fn resample_straight_lines() {
        let v = BezierCurve::line(p(5.0, 0.0), p(5.0, 100.0)).unwrap();
        assert_eq!(v.resample_at_y(&[0.0, 50.0, 100.0]).unwrap(), vec![5.0, 5.0, 5.0]);

        let d = BezierCurve::line(p(0.0, 0.0), p(10.0, 100.0)).unwrap();
        let xs = d.resample_at_y(&[0.0, 25.0, 50.0, 75.0, 100.0]).unwrap();
        for (x, want) in xs.iter().zip([0.0, 2.5, 5.0, 7.5, 10.0]) {
            assert!((x - want).abs() < 1e-6, "{x} vs {want}");
        }
    }

    #[test]
    fn resample_errors() {
        let hook = BezierCurve::new(vec![p(0.0, 0.0), p(0.0, 100.0), p(50.0, 100.0), p(50.0, 20.0)]).unwrap();
        assert_eq!(hook.resample_at_y(&[10.0]), Err(GeometryError::NonMonotone));
        let d = BezierCurve::line(p(0.0, 0.0), p(10.0, 100.0)).unwrap();
        assert!(matches!(
            d.resample_at_y(&[101.0]),
            Err(GeometryError::YOutOfRange { .. })
        ));
        assert_eq!(d.resample_at_y(&[50.0, 10.0]), Err(GeometryError::UnsortedQuery));
    }

    #[test]
    fn point_segment_distance_cases() {
        let a = p(0.0, 0.0);
        let b = p(10.0, 0.0);
        assert_eq!(point_segment_distance(p(5.0, 3.0), a, b), 3.0);
        assert_eq!(point_segment_distance(p(-3.0, 4.0), a, b), 5.0);
        assert_eq!(point_segment_distance(p(1.0, 1.0), a, a), 2f64.sqrt());
    }
}
