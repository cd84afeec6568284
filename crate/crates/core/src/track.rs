//! Procedural race tracks and their occupancy-grid rasterization.
//!
//! A track is a closed loop of knots on a jittered ellipse, joined by cubic
//! Bezier segments with Catmull-Rom tangents (C1 at every knot). The grid
//! marks a cell drivable when its center lies within half the track width of
//! the centerline.
//!
//! Grid coordinates: cell `(row, col)` has its center at pixel `(col, row)`
//! and covers `[col - 0.5, col + 0.5) × [row - 0.5, row + 0.5)`. Row 0 is the
//! top of the image, so world `y` grows downward.

use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{BezierCurve, Point2};

/// Half the width of the simulated car, in pixels.
pub const VEHICLE_HALF_WIDTH: f64 = 9.0;

/// Centerline samples per pixel of arc length used by [`rasterize`].
pub const RASTER_SAMPLES_PER_PX: f64 = 8.0;

const MAX_GENERATION_ATTEMPTS: usize = 100;
const BORDER_MARGIN: f64 = 4.0;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("invalid track parameters: {0}")]
    InvalidParams(String),
    #[error("no feasible track for seed {seed} after {attempts} attempts: {reason}")]
    Infeasible {
        seed: u64,
        attempts: usize,
        reason: String,
    },
    #[error("invalid occupancy grid: {0}")]
    InvalidGrid(String),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error("malformed grid metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Knobs for [`generate_track`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrackParams {
    pub n_knots: usize,
    /// (rows, cols)
    pub grid_size: (usize, usize),
    pub width: f64,
    /// Radial jitter as a fraction of the ellipse radius.
    pub jitter: f64,
    pub px_per_meter: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            n_knots: 12,
            grid_size: (512, 512),
            width: 60.0,
            jitter: 0.25,
            px_per_meter: 100.0,
        }
    }
}

impl TrackParams {
    pub fn validate(&self) -> Result<(), TrackError> {
        let bad = |m: &str| Err(TrackError::InvalidParams(m.to_string()));
        if self.n_knots < 4 {
            return bad("n_knots must be at least 4");
        }
        if self.grid_size.0 == 0 || self.grid_size.1 == 0 {
            return bad("grid dimensions must be positive");
        }
        if !(self.width.is_finite() && self.width >= 2.0 * VEHICLE_HALF_WIDTH) {
            return bad("width must be finite and at least twice the vehicle half-width");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must lie in [0, 1)");
        }
        if !(self.px_per_meter.is_finite() && self.px_per_meter > 0.0) {
            return bad("px_per_meter must be positive");
        }
        Ok(())
    }
}

/// A track: centerline knots plus constant width.
///
/// For closed tracks the last knot repeats the first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSpec {
    pub knots: Vec<Point2>,
    pub closed: bool,
    pub width: f64,
    /// (rows, cols)
    pub grid_size: (usize, usize),
    pub seed: u64,
    pub px_per_meter: f64,
}

impl TrackSpec {
    /// An open (non-loop) track through `knots`, for debugging and tests.
    pub fn open(knots: Vec<Point2>, width: f64, grid_size: (usize, usize)) -> Self {
        TrackSpec {
            knots,
            closed: false,
            width,
            grid_size,
            seed: 0,
            px_per_meter: 100.0,
        }
    }

    pub fn centerline(&self) -> Centerline {
        Centerline::through(&self.knots, self.closed)
    }

    /// Spawn point and heading: the first knot, facing along the tangent.
    pub fn start_pose(&self) -> (Point2, f64) {
        let line = self.centerline();
        (line.point(0.0), line.tangent(0.0).angle())
    }
}

/// Piecewise cubic Bezier centerline with C1 joins.
#[derive(Debug, Clone)]
pub struct Centerline {
    segments: Vec<BezierCurve>,
    closed: bool,
}

/// A point on the centerline with its arc-length position and heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterlineSample {
    pub point: Point2,
    pub heading: f64,
    pub arc: f64,
}

impl Centerline {
    /// Catmull-Rom style spline through `knots`.
    ///
    /// For a closed loop the final knot must repeat the first.
    pub fn through(knots: &[Point2], closed: bool) -> Self {
        let unique: &[Point2] = if closed && knots.len() > 1 && knots[0] == knots[knots.len() - 1] {
            &knots[..knots.len() - 1]
        } else {
            knots
        };
        let n = unique.len();
        assert!(n >= 2, "a centerline needs at least two distinct knots");

        let tangent = |i: usize| -> Point2 {
            if closed {
                (unique[(i + 1) % n] - unique[(i + n - 1) % n]) * 0.5
            } else if i == 0 {
                unique[1] - unique[0]
            } else if i == n - 1 {
                unique[n - 1] - unique[n - 2]
            } else {
                (unique[i + 1] - unique[i - 1]) * 0.5
            }
        };

        let seg_count = if closed { n } else { n - 1 };
        let segments = (0..seg_count)
            .map(|i| {
                let j = (i + 1) % n;
                let (a, b) = (unique[i], unique[j]);
                let (ta, tb) = (tangent(i), tangent(j));
                BezierCurve::new(vec![a, a + ta * (1.0 / 3.0), b - tb * (1.0 / 3.0), b])
                    .expect("finite knots give a finite segment")
            })
            .collect();
        Centerline { segments, closed }
    }

    pub fn segments(&self) -> &[BezierCurve] {
        &self.segments
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let n = self.segments.len();
        let s = s.clamp(0.0, n as f64);
        let i = (s.floor() as usize).min(n - 1);
        (i, s - i as f64)
    }

    /// Point at spline parameter `s ∈ [0, segment count]`.
    pub fn point(&self, s: f64) -> Point2 {
        let (i, t) = self.locate(s);
        self.segments[i].point_at(t)
    }

    pub fn tangent(&self, s: f64) -> Point2 {
        let (i, t) = self.locate(s);
        self.segments[i].derivative_at(t)
    }

    /// Samples with at least `per_px` points per pixel of arc length.
    ///
    /// The sample at the end of each segment is the start of the next; for a
    /// closed loop the first point is not repeated at the end.
    pub fn sample_dense(&self, per_px: f64) -> Vec<Point2> {
        let mut out = Vec::new();
        for seg in &self.segments {
            let n = (seg.control_polygon_length() * per_px).ceil().max(1.0) as usize;
            for j in 0..n {
                out.push(seg.point_at(j as f64 / n as f64));
            }
        }
        if !self.closed {
            out.push(self.segments[self.segments.len() - 1].end());
        }
        out
    }

    /// Smallest radius of curvature found by sampling each segment.
    pub fn min_turning_radius(&self, samples_per_segment: usize) -> f64 {
        let mut min_r = f64::INFINITY;
        for seg in &self.segments {
            for j in 0..=samples_per_segment {
                let t = j as f64 / samples_per_segment as f64;
                let d1 = seg.derivative_at(t);
                let d2 = seg.second_derivative_at(t);
                let speed = d1.norm();
                let cross = d1.cross(d2).abs();
                if cross > 0.0 {
                    min_r = min_r.min(speed * speed * speed / cross);
                }
            }
        }
        min_r
    }

    /// Polyline with roughly uniform arc spacing, carrying arc length and
    /// heading. For closed loops the start is not repeated.
    pub fn arc_samples(&self, spacing: f64) -> Vec<CenterlineSample> {
        let dense_per_px = 4.0;
        let mut dense: Vec<(Point2, usize, f64)> = Vec::new();
        for (i, seg) in self.segments.iter().enumerate() {
            let n = (seg.control_polygon_length() * dense_per_px).ceil().max(1.0) as usize;
            for j in 0..n {
                let t = j as f64 / n as f64;
                dense.push((seg.point_at(t), i, t));
            }
        }
        let last = self.segments.len() - 1;
        dense.push((self.segments[last].end(), last, 1.0));

        let mut out = Vec::new();
        let mut arc = 0.0;
        let mut next = 0.0;
        for w in 0..dense.len() {
            if w > 0 {
                arc += dense[w].0.distance(dense[w - 1].0);
            }
            let is_closing = self.closed && w == dense.len() - 1;
            if arc >= next && !is_closing {
                let (pt, i, t) = dense[w];
                out.push(CenterlineSample {
                    point: pt,
                    heading: self.segments[i].derivative_at(t).angle(),
                    arc,
                });
                next += spacing;
            }
        }
        out
    }

    /// Arc length, from a dense polyline.
    pub fn length(&self) -> f64 {
        let pts = self.sample_dense(4.0);
        let mut len: f64 = pts.windows(2).map(|w| w[0].distance(w[1])).sum();
        if self.closed {
            len += pts[pts.len() - 1].distance(pts[0]);
        }
        len
    }
}

/// Generates a closed track. Deterministic in `(seed, params)`.
pub fn generate_track(seed: u64, params: &TrackParams) -> Result<TrackSpec, TrackError> {
    params.validate()?;
    let (rows, cols) = params.grid_size;
    let center = Point2::new((cols as f64 - 1.0) / 2.0, (rows as f64 - 1.0) / 2.0);
    let clearance = params.width / 2.0 + BORDER_MARGIN;
    let semi_x = ((cols as f64 - 1.0) / 2.0 - clearance) / (1.0 + params.jitter);
    let semi_y = ((rows as f64 - 1.0) / 2.0 - clearance) / (1.0 + params.jitter);
    if semi_x <= params.width || semi_y <= params.width {
        return Err(TrackError::Infeasible {
            seed,
            attempts: 0,
            reason: format!(
                "grid {rows}x{cols} is too small for width {}",
                params.width
            ),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reason = String::new();
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let n = params.n_knots;
        let noise: Vec<f64> = (0..n)
            .map(|_| {
                if params.jitter > 0.0 {
                    rng.random_range(-1.0..=1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let mut knots: Vec<Point2> = (0..n)
            .map(|i| {
                // Circular [1, 2, 1] / 4 smoothing keeps neighbouring knots
                // from producing corners tighter than the track width.
                let u = 0.25 * noise[(i + n - 1) % n] + 0.5 * noise[i] + 0.25 * noise[(i + 1) % n];
                let theta = TAU * i as f64 / n as f64;
                let scale = 1.0 + params.jitter * u;
                center + Point2::new(semi_x * theta.cos(), semi_y * theta.sin()) * scale
            })
            .collect();
        knots.push(knots[0]);
        let spec = TrackSpec {
            knots,
            closed: true,
            width: params.width,
            grid_size: params.grid_size,
            seed,
            px_per_meter: params.px_per_meter,
        };
        match check_feasible(&spec) {
            Ok(()) => return Ok(spec),
            Err(why) => reason = why,
        }
    }
    Err(TrackError::Infeasible {
        seed,
        attempts: MAX_GENERATION_ATTEMPTS,
        reason,
    })
}

fn check_feasible(spec: &TrackSpec) -> Result<(), String> {
    let line = spec.centerline();
    let min_r = line.min_turning_radius(64);
    if min_r < spec.width {
        return Err(format!(
            "turning radius {min_r:.1} px is below the width {}",
            spec.width
        ));
    }

    let (rows, cols) = spec.grid_size;
    let half = spec.width / 2.0;
    let samples = line.arc_samples(2.0);
    for s in &samples {
        let p = s.point;
        if p.x - half < 0.0
            || p.y - half < 0.0
            || p.x + half > cols as f64 - 1.0
            || p.y + half > rows as f64 - 1.0
        {
            return Err("the track leaves the grid".to_string());
        }
    }
    if let Some((a, b)) = find_pinch(&samples, line.length(), spec.width) {
        return Err(format!("centerline pinches near arc {a:.0} and {b:.0}"));
    }
    Ok(())
}

/// Finds two centerline samples closer than `width` although far apart
/// along the loop.
fn find_pinch(samples: &[CenterlineSample], loop_len: f64, width: f64) -> Option<(f64, f64)> {
    let neighbourhood = 1.5 * width;
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            let along = b.arc - a.arc;
            let along = along.min(loop_len - along);
            if along > neighbourhood && a.point.distance(b.point) < width {
                return Some((a.arc, b.arc));
            }
        }
    }
    None
}

/// Binarized top-view raster: `true` = drivable.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
    px_per_meter: f64,
}

impl OccupancyGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        cells: Vec<bool>,
        px_per_meter: f64,
    ) -> Result<Self, TrackError> {
        if rows == 0 || cols == 0 {
            return Err(TrackError::InvalidGrid("empty dimensions".into()));
        }
        if cells.len() != rows * cols {
            return Err(TrackError::InvalidGrid(format!(
                "{} cells for a {rows}x{cols} grid",
                cells.len()
            )));
        }
        if !cells.iter().any(|&c| c) {
            return Err(TrackError::InvalidGrid("no drivable cell".into()));
        }
        if !(px_per_meter.is_finite() && px_per_meter > 0.0) {
            return Err(TrackError::InvalidGrid("px_per_meter must be positive".into()));
        }
        Ok(OccupancyGrid {
            rows,
            cols,
            cells,
            px_per_meter,
        })
    }

    /// Builds a grid by evaluating `f(row, col)` for every cell.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        px_per_meter: f64,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, TrackError> {
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                cells.push(f(r, c));
            }
        }
        Self::new(rows, cols, cells, px_per_meter)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn px_per_meter(&self) -> f64 {
        self.px_per_meter
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    /// Signed-index lookup; anything outside the grid is off-track.
    #[inline]
    pub fn get_signed(&self, row: i64, col: i64) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.rows
            && (col as usize) < self.cols
            && self.cells[row as usize * self.cols + col as usize]
    }

    /// The cell containing `p` (rounding half up), if inside the grid.
    #[inline]
    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        if !p.is_finite() {
            return None;
        }
        let col = (p.x + 0.5).floor();
        let row = (p.y + 0.5).floor();
        if col < 0.0 || row < 0.0 || col >= self.cols as f64 || row >= self.rows as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    #[inline]
    pub fn is_on_track(&self, p: Point2) -> bool {
        self.cell_of(p).is_some_and(|(r, c)| self.get(r, c))
    }

    pub fn drivable_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Whether all drivable cells form one 4-connected component.
    pub fn is_connected(&self) -> bool {
        let Some(start) = self.cells.iter().position(|&c| c) else {
            return false;
        };
        self.flood_fill(start / self.cols, start % self.cols) == self.drivable_count()
    }

    /// Number of drivable cells 4-connected to `(row, col)`.
    pub fn flood_fill(&self, row: usize, col: usize) -> usize {
        if !self.get(row, col) {
            return 0;
        }
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::new();
        seen[row * self.cols + col] = true;
        queue.push_back((row, col));
        let mut count = 0;
        while let Some((r, c)) = queue.pop_front() {
            count += 1;
            let neighbours = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            for (nr, nc) in neighbours {
                if nr < self.rows && nc < self.cols {
                    let idx = nr * self.cols + nc;
                    if self.cells[idx] && !seen[idx] {
                        seen[idx] = true;
                        queue.push_back((nr, nc));
                    }
                }
            }
        }
        count
    }

    /// Binary PGM (P5, maxval 255): 255 drivable, 0 off-track.
    pub fn to_pgm(&self) -> Vec<u8> {
        let header = format!("P5\n{} {}\n255\n", self.cols, self.rows);
        let mut out = Vec::with_capacity(header.len() + self.cells.len());
        out.extend_from_slice(header.as_bytes());
        out.extend(self.cells.iter().map(|&c| if c { 255u8 } else { 0u8 }));
        out
    }

    /// Parses a binary PGM. Any nonzero sample counts as drivable.
    pub fn from_pgm(bytes: &[u8], px_per_meter: f64) -> Result<Self, TrackError> {
        let (cols, rows, maxval, offset) = parse_pnm_header(bytes, b"P5")?;
        if maxval == 0 || maxval > 255 {
            return Err(TrackError::Pgm(format!("unsupported maxval {maxval}")));
        }
        let data = &bytes[offset..];
        if data.len() != rows * cols {
            return Err(TrackError::Pgm(format!(
                "expected {} samples, found {}",
                rows * cols,
                data.len()
            )));
        }
        Self::new(rows, cols, data.iter().map(|&b| b > 0).collect(), px_per_meter)
    }

    /// Writes `path` as PGM plus its sidecar metadata file.
    pub fn write_pgm(&self, path: &Path, meta: &GridMetadata) -> Result<(), TrackError> {
        fs::write(path, self.to_pgm())?;
        fs::write(sidecar_path(path), meta.to_text())?;
        Ok(())
    }

    /// Reads a PGM and, when present, its sidecar metadata.
    pub fn read_pgm(path: &Path) -> Result<(Self, Option<GridMetadata>), TrackError> {
        let bytes = fs::read(path)?;
        let side = sidecar_path(path);
        let meta = if side.exists() {
            Some(GridMetadata::parse(&fs::read_to_string(side)?)?)
        } else {
            None
        };
        let ppm = meta.as_ref().map_or(100.0, |m| m.px_per_meter);
        Ok((Self::from_pgm(&bytes, ppm)?, meta))
    }
}

/// Parses a PNM header of the given magic; returns (width, height, maxval,
/// data offset).
pub(crate) fn parse_pnm_header(
    bytes: &[u8],
    magic: &[u8],
) -> Result<(usize, usize, usize, usize), TrackError> {
    if !bytes.starts_with(magic) {
        return Err(TrackError::Pgm("bad magic number".into()));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(TrackError::Pgm("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrackError::Pgm("expected a number in the header".into()))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(TrackError::Pgm("missing separator after maxval".into()));
    }
    Ok((fields[0], fields[1], fields[2], pos + 1))
}

/// `track.pgm` → `track.meta`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

/// Key=value sidecar stored next to a grid file.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMetadata {
    pub seed: Option<u64>,
    pub width: Option<f64>,
    pub px_per_meter: f64,
}

impl GridMetadata {
    pub fn for_track(spec: &TrackSpec) -> Self {
        GridMetadata {
            seed: Some(spec.seed),
            width: Some(spec.width),
            px_per_meter: spec.px_per_meter,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed={seed}");
        }
        if let Some(width) = self.width {
            let _ = writeln!(s, "width={width}");
        }
        let _ = writeln!(s, "px_per_meter={}", self.px_per_meter);
        s
    }

    pub fn parse(text: &str) -> Result<Self, TrackError> {
        let mut meta = GridMetadata {
            seed: None,
            width: None,
            px_per_meter: 100.0,
        };
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrackError::Metadata(format!("expected key=value, got {line:?}")))?;
            match key.trim() {
                "seed" => meta.seed = Some(parse_value(key, value)?),
                "width" => meta.width = Some(parse_value(key, value)?),
                "px_per_meter" => meta.px_per_meter = parse_value(key, value)?,
                other => return Err(TrackError::Metadata(format!("unknown key {other:?}"))),
            }
        }
        Ok(meta)
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrackError> {
    value
        .trim()
        .parse()
        .map_err(|_| TrackError::Metadata(format!("bad value for {key}: {value:?}")))
}

/// Rasterizes a track: a cell is drivable iff its center is within
/// `width / 2` of the densely sampled centerline.
pub fn rasterize(spec: &TrackSpec) -> OccupancyGrid {
    let (rows, cols) = spec.grid_size;
    let mut cells = vec![false; rows * cols];
    let half = spec.width / 2.0;
    let half2 = half * half;
    for p in spec.centerline().sample_dense(RASTER_SAMPLES_PER_PX) {
        let r_lo = (p.y - half).ceil().max(0.0) as usize;
        let r_hi = (p.y + half).floor().min(rows as f64 - 1.0);
        if r_hi < 0.0 {
            continue;
        }
        for r in r_lo..=r_hi as usize {
            let dy = r as f64 - p.y;
            let dx = (half2 - dy * dy).max(0.0).sqrt();
            let c_lo = (p.x - dx).ceil().max(0.0) as usize;
            let c_hi = (p.x + dx).floor().min(cols as f64 - 1.0);
            if c_hi < 0.0 {
                continue;
            }
            for c in c_lo..=c_hi as usize {
                cells[r * cols + c] = true;
            }
        }
    }
    OccupancyGrid::new(rows, cols, cells, spec.px_per_meter)
        .expect("a valid track spec rasterizes to at least one drivable cell")
}

/// Free-function form of [`OccupancyGrid::is_on_track`].
#[inline]
pub fn is_on_track(grid: &OccupancyGrid, p: Point2) -> bool {
    grid.is_on_track(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_track() {
        let params = TrackParams::default();
        let a = generate_track(0, &params).unwrap();
        let b = generate_track(0, &params).unwrap();
        let bits = |s: &TrackSpec| -> Vec<u64> {
            s.knots.iter().flat_map(|p| [p.x.to_bits(), p.y.to_bits()]).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
        assert_eq!(rasterize(&a), rasterize(&b));
    }

    #[test]
    fn zero_jitter_lies_on_ellipse() {
        let params = TrackParams {
            n_knots: 16,
            jitter: 0.0,
            ..TrackParams::default()
        };
        let spec = generate_track(7, &params).unwrap();
        let c = Point2::new(255.5, 255.5);
        let semi = 255.5 - (30.0 + 4.0);
        for k in &spec.knots {
            let d = *k - c;
            let e = (d.x / semi).powi(2) + (d.y / semi).powi(2);
            assert!((e - 1.0).abs() < 1e-9, "{e}");
        }
        assert_eq!(spec.knots.first(), spec.knots.last());
    }

    #[test]
    fn rejects_infeasible_params() {
        let params = TrackParams {
            width: 200.0,
            grid_size: (256, 256),
            ..TrackParams::default()
        };
        assert!(matches!(generate_track(1, &params), Err(TrackError::Infeasible { .. })));
        let few = TrackParams {
            n_knots: 3,
            ..TrackParams::default()
        };
        assert!(matches!(generate_track(1, &few), Err(TrackError::InvalidParams(_))));
    }

    #[test]
    fn straight_band_has_constant_width() {
        let spec = TrackSpec::open(
            vec![Point2::new(-20.0, 50.0), Point2::new(220.0, 50.0)],
            20.0,
            (100, 200),
        );
        let grid = rasterize(&spec);
        for c in [0, 57, 100, 199] {
            let n = (0..grid.rows()).filter(|&r| grid.get(r, c)).count();
            assert!((19..=21).contains(&n), "column {c}: {n} rows");
        }
    }

    #[test]
    fn out_of_bounds_is_off_track() {
        let grid = OccupancyGrid::from_fn(4, 4, 100.0, |_, _| true).unwrap();
        assert!(!grid.is_on_track(Point2::new(-0.6, 1.0)));
        assert!(!grid.is_on_track(Point2::new(1.0, 3.5)));
        assert!(!grid.is_on_track(Point2::new(f64::NAN, 1.0)));
        assert!(grid.is_on_track(Point2::new(3.0, 3.0)));
        assert!(grid.is_on_track(Point2::new(-0.5, 3.49)));
    }

    #[test]
    fn pgm_round_trip() {
        let spec = generate_track(3, &TrackParams::default()).unwrap();
        let grid = rasterize(&spec);
        let bytes = grid.to_pgm();
        let back = OccupancyGrid::from_pgm(&bytes, grid.px_per_meter()).unwrap();
        assert_eq!(back, grid);
        assert_eq!(back.to_pgm(), bytes);
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5 # a comment\n2 1\n255\n".to_vec();
        bytes.extend([255, 0]);
        let g = OccupancyGrid::from_pgm(&bytes, 10.0).unwrap();
        assert!(g.get(0, 0) && !g.get(0, 1));
        assert!(matches!(OccupancyGrid::from_pgm(b"P6\n1 1\n255\n\xff", 1.0), Err(TrackError::Pgm(_))));
        assert!(matches!(OccupancyGrid::from_pgm(b"P5\n2 2\n255\n\xff", 1.0), Err(TrackError::Pgm(_))));
    }

    #[test]
    fn metadata_round_trip() {
        let meta = GridMetadata {
            seed: Some(42),
            width: Some(60.0),
            px_per_meter: 100.0,
        };
        assert_eq!(GridMetadata::parse(&meta.to_text()).unwrap(), meta);
        assert!(GridMetadata::parse("colour=blue").is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(OccupancyGrid::new(2, 2, vec![true; 3], 1.0).is_err());
        assert!(OccupancyGrid::new(2, 2, vec![false; 4], 1.0).is_err());
        let split = OccupancyGrid::new(1, 3, vec![true, false, true], 1.0).unwrap();
        assert!(!split.is_connected());
    }

    #[test]
    fn start_pose_faces_along_track() {
        let spec = generate_track(5, &TrackParams::default()).unwrap();
        let (p, heading) = spec.start_pose();
        assert_eq!(p, spec.knots[0]);
        let ahead = p + Point2::from_angle(heading) * 5.0;
        let line = spec.centerline();
        assert!(line.point(0.05).distance(ahead) < line.point(0.05).distance(p));
    }
}
