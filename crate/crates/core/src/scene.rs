//! Seeded synthetic BEV scenes with class-labelled ground truth.
//!
//! Dividers and boundaries are chains of constant-curvature arcs; pedestrian
//! crossings are jittered rectangles (convex quadrilaterals). Each element
//! carries its raw vertices, an `N`-point arc-length resampling and a binary
//! mask: a round-capped stroke of `half_width` for polylines, a fill for
//! polygons, both decided by majority vote over `s x s` sub-samples per
//! pixel.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{MapClass, Point, DEFAULT_GAUSSIANS_PER_ELEMENT};
use crate::raster::{DensityMask, RasterGrid};
use crate::vector::{dist, resample_uniform, Polyline};

pub const DEFAULT_HALF_WIDTH: f64 = 0.45;
pub const DEFAULT_SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthElement {
    pub class: MapClass,
    pub vertices: Polyline,
    pub resampled: Polyline,
    pub mask: DensityMask,
    pub half_width: f64,
}

impl GroundTruthElement {
    pub fn new(
        class: MapClass,
        vertices: Polyline,
        grid: &RasterGrid,
        half_width: f64,
        supersample: usize,
        n_points: usize,
    ) -> Result<Self> {
        if vertices.closed != class.is_closed() {
            return Err(Error::DegenerateGeometry(format!(
                "{class} must be {}",
                if class.is_closed() { "closed" } else { "open" }
            )));
        }
        let mask = gt_mask(&vertices, grid, half_width, supersample)?;
        let resampled = resample_uniform(&vertices, n_points)?;
        Ok(Self {
            class,
            vertices,
            resampled,
            mask,
            half_width,
        })
    }

    pub fn closed(&self) -> bool {
        self.vertices.closed
    }

    /// Copy with the resampled polyline at a different point count.
    pub fn with_points(&self, n_points: usize) -> Result<Self> {
        Ok(Self {
            resampled: resample_uniform(&self.vertices, n_points)?,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassCounts {
    pub ped_crossing: usize,
    pub divider: usize,
    pub boundary: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub grid: RasterGrid,
    pub counts: ClassCounts,
    /// Range of absolute arc curvature (1/m) for dividers and boundaries.
    pub curvature: [f64; 2],
    /// Polyline length range (m).
    pub length: [f64; 2],
    /// Constant-curvature pieces per polyline; each piece draws its own
    /// curvature sign, so 2 gives S-bends.
    pub arcs: usize,
    pub crossing_width: [f64; 2],
    pub crossing_length: [f64; 2],
    /// Gaussian jitter (m) applied to raw polyline vertices.
    pub vertex_jitter: f64,
    /// Keep-out distance from the extent border (m).
    pub margin: f64,
    /// Minimum distance between any two elements (m).
    pub min_separation: f64,
    pub half_width: f64,
    pub supersample: usize,
    pub points_per_element: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: RasterGrid::default(),
            counts: ClassCounts {
                ped_crossing: 1,
                divider: 2,
                boundary: 1,
            },
            curvature: [0.0, 0.05],
            length: [12.0, 22.0],
            arcs: 1,
            crossing_width: [2.5, 4.0],
            crossing_length: [4.0, 7.0],
            vertex_jitter: 0.0,
            margin: 1.0,
            min_separation: 2.5,
            half_width: DEFAULT_HALF_WIDTH,
            supersample: DEFAULT_SUPERSAMPLE,
            points_per_element: DEFAULT_GAUSSIANS_PER_ELEMENT,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let range_ok =
            |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] <= r[1];
        if !range_ok(self.curvature)
            || !range_ok(self.length)
            || !range_ok(self.crossing_width)
            || !range_ok(self.crossing_length)
        {
            return Err(Error::Config("ranges must satisfy 0 <= min <= max".into()));
        }
        if self.arcs == 0 || self.supersample == 0 || self.points_per_element < 2 {
            return Err(Error::Config(
                "arcs and supersample must be >= 1, points_per_element >= 2".into(),
            ));
        }
        if !(self.half_width > 0.0) || self.vertex_jitter < 0.0 || self.margin < 0.0 {
            return Err(Error::Config(
                "half_width must be positive; jitter and margin non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Ten seeded scenes, each with two dividers, one boundary and one
    /// crossing.
    pub fn standard_suite() -> Vec<SceneSpec> {
        (0..10)
            .map(|i| SceneSpec {
                seed: 1000 + i,
                ..Default::default()
            })
            .collect()
    }

    /// Single strongly curved boundary.
    pub fn curved_boundary(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            counts: ClassCounts {
                boundary: 1,
                ..Default::default()
            },
            curvature: [0.06, 0.12],
            length: [16.0, 22.0],
            ..Default::default()
        }
    }

    /// Single S-bend boundary with tight turns.
    pub fn high_curvature(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            counts: ClassCounts {
                boundary: 1,
                ..Default::default()
            },
            curvature: [0.15, 0.25],
            length: [16.0, 20.0],
            arcs: 2,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub grid: RasterGrid,
    pub supersample: usize,
    pub elements: Vec<GroundTruthElement>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn with_points(&self, n_points: usize) -> Result<Scene> {
        Ok(Scene {
            elements: self
                .elements
                .iter()
                .map(|e| e.with_points(n_points))
                .collect::<Result<_>>()?,
            ..self.clone()
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

const MAX_ATTEMPTS: usize = 2000;

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let g = &spec.grid;
    let inner = [
        g.x_min + spec.margin,
        g.x_max - spec.margin,
        g.y_min + spec.margin,
        g.y_max - spec.margin,
    ];
    let diag = (inner[1] - inner[0]).hypot(inner[3] - inner[2]);
    let needs_lines = spec.counts.divider + spec.counts.boundary > 0;
    if inner[1] <= inner[0] || inner[3] <= inner[2] {
        return Err(Error::Generation("margin leaves no usable extent".into()));
    }
    if needs_lines && spec.length[0] >= diag {
        return Err(Error::Generation(format!(
            "polyline length {} m cannot fit in a {diag:.1} m extent",
            spec.length[0]
        )));
    }
    if spec.counts.ped_crossing > 0 && spec.crossing_width[0].hypot(spec.crossing_length[0]) >= diag
    {
        return Err(Error::Generation("crossing larger than the extent".into()));
    }
    let inside =
        |p: &Point| p[0] >= inner[0] && p[0] <= inner[1] && p[1] >= inner[2] && p[1] <= inner[3];

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed: Vec<(MapClass, Polyline)> = Vec::new();
    let recipe = [
        (MapClass::Divider, spec.counts.divider),
        (MapClass::Boundary, spec.counts.boundary),
        (MapClass::PedCrossing, spec.counts.ped_crossing),
    ];
    for (class, count) in recipe {
        for _ in 0..count {
            let mut accepted = None;
            for _ in 0..MAX_ATTEMPTS {
                let poly = if class.is_closed() {
                    sample_crossing(&mut rng, spec, inner)
                } else {
                    sample_polyline(&mut rng, spec, inner)
                };
                if !poly.points.iter().all(inside) {
                    continue;
                }
                let clear = placed
                    .iter()
                    .all(|(_, other)| min_vertex_distance(&poly, other) >= spec.min_separation);
                if clear {
                    accepted = Some(poly);
                    break;
                }
            }
            let poly = accepted.ok_or_else(|| {
                Error::Generation(format!(
                    "could not place a {class} after {MAX_ATTEMPTS} attempts"
                ))
            })?;
            placed.push((class, poly));
        }
    }

    let elements = placed
        .into_iter()
        .map(|(class, poly)| {
            GroundTruthElement::new(
                class,
                poly,
                g,
                spec.half_width,
                spec.supersample,
                spec.points_per_element,
            )
        })
        .collect::<Result<_>>()?;
    Ok(Scene {
        seed: spec.seed,
        grid: *g,
        supersample: spec.supersample,
        elements,
    })
}

fn sample_polyline(rng: &mut ChaCha8Rng, spec: &SceneSpec, inner: [f64; 4]) -> Polyline {
    let length = uniform(rng, spec.length);
    let mut p = [
        rng.random_range(inner[0]..inner[1]),
        rng.random_range(inner[2]..inner[3]),
    ];
    let mut heading = rng.random_range(-PI..PI);
    let steps_per_arc = 24;
    let ds = length / (spec.arcs * steps_per_arc) as f64;
    let mut points = vec![p];
    for _ in 0..spec.arcs {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let kappa = sign * uniform(rng, spec.curvature);
        for _ in 0..steps_per_arc {
            // exact arc step: chord at the mid-heading
            let turn = kappa * ds;
            let chord = if turn.abs() > 1e-12 {
                2.0 * (turn / 2.0).sin() / kappa
            } else {
                ds
            };
            let mid = heading + turn / 2.0;
            p = [p[0] + chord * mid.cos(), p[1] + chord * mid.sin()];
            heading += turn;
            points.push(p);
        }
    }
    if spec.vertex_jitter > 0.0 {
        for q in points.iter_mut() {
            q[0] += spec.vertex_jitter * normal(rng);
            q[1] += spec.vertex_jitter * normal(rng);
        }
    }
    Polyline {
        points,
        closed: false,
    }
}

fn sample_crossing(rng: &mut ChaCha8Rng, spec: &SceneSpec, inner: [f64; 4]) -> Polyline {
    let w = uniform(rng, spec.crossing_width);
    let l = uniform(rng, spec.crossing_length);
    let c = [
        rng.random_range(inner[0]..inner[1]),
        rng.random_range(inner[2]..inner[3]),
    ];
    let a = rng.random_range(-PI..PI);
    let (s, co) = a.sin_cos();
    let jitter = 0.05 * w.min(l);
    // counter-clockwise rectangle corners in the local frame
    let corners = [
        [-l / 2.0, -w / 2.0],
        [l / 2.0, -w / 2.0],
        [l / 2.0, w / 2.0],
        [-l / 2.0, w / 2.0],
    ];
    let points = corners
        .iter()
        .map(|q| {
            let x = q[0] + rng.random_range(-jitter..=jitter);
            let y = q[1] + rng.random_range(-jitter..=jitter);
            [c[0] + co * x - s * y, c[1] + s * x + co * y]
        })
        .collect();
    Polyline {
        points,
        closed: true,
    }
}

fn min_vertex_distance(a: &Polyline, b: &Polyline) -> f64 {
    let mut best = f64::INFINITY;
    for (p0, p1) in a.segments() {
        for q in &b.points {
            best = best.min(point_segment_distance(*q, p0, p1));
        }
    }
    for (q0, q1) in b.segments() {
        for p in &a.points {
            best = best.min(point_segment_distance(*p, q0, q1));
        }
    }
    best
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
}

/// Binary reference mask: stroke of `half_width` around open polylines,
/// fill for closed ones. A pixel is set when at least half of its
/// `supersample^2` sub-samples are covered.
pub fn gt_mask(
    vertices: &Polyline,
    grid: &RasterGrid,
    half_width: f64,
    supersample: usize,
) -> Result<DensityMask> {
    grid.validate()?;
    vertices.validate()?;
    if !(half_width > 0.0) {
        return Err(Error::Config(format!(
            "half_width must be positive, got {half_width}"
        )));
    }
    if supersample == 0 {
        return Err(Error::Config("supersample must be >= 1".into()));
    }
    if vertices.closed {
        if polygon_area(&vertices.points) <= 1e-12 {
            return Err(Error::DegenerateGeometry("polygon has zero area".into()));
        }
    } else if vertices.arc_length() <= 0.0 {
        return Err(Error::DegenerateGeometry("polyline has zero length".into()));
    }

    let pad = if vertices.closed { 0.0 } else { half_width };
    let xs = vertices.points.iter().map(|p| p[0]);
    let ys = vertices.points.iter().map(|p| p[1]);
    let (x0, x1) = (
        xs.clone().fold(f64::INFINITY, f64::min),
        xs.fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = (
        ys.clone().fold(f64::INFINITY, f64::min),
        ys.fold(f64::NEG_INFINITY, f64::max),
    );
    let (dx, dy) = (grid.dx(), grid.dy());
    let col_lo = (((x0 - pad - grid.x_min) / dx).floor() - 1.0).max(0.0) as usize;
    let col_hi =
        ((((x1 + pad - grid.x_min) / dx).ceil() + 1.0).max(0.0) as usize).min(grid.width_px);
    let row_lo = (((y0 - pad - grid.y_min) / dy).floor() - 1.0).max(0.0) as usize;
    let row_hi =
        ((((y1 + pad - grid.y_min) / dy).ceil() + 1.0).max(0.0) as usize).min(grid.height_px);

    let segs: Vec<(Point, Point)> = vertices.segments().collect();
    let covered = |p: Point| -> bool {
        if vertices.closed {
            point_in_polygon(p, &vertices.points)
        } else {
            segs.iter()
                .any(|(a, b)| point_segment_distance(p, *a, *b) <= half_width)
        }
    };

    let s = supersample;
    let need = (s * s).div_ceil(2);
    let mut mask = DensityMask::zeros(*grid);
    for row in row_lo..row_hi {
        for col in col_lo..col_hi {
            let c = grid.pixel_center(row, col);
            let mut hits = 0;
            for a in 0..s {
                for b in 0..s {
                    let p = [
                        c[0] - dx / 2.0 + (b as f64 + 0.5) * dx / s as f64,
                        c[1] - dy / 2.0 + (a as f64 + 0.5) * dy / s as f64,
                    ];
                    if covered(p) {
                        hits += 1;
                    }
                }
            }
            if hits >= need {
                mask.set(row, col, 1.0);
            }
        }
    }
    Ok(mask)
}
