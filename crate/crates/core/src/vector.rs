//! Polyline view of map elements: vectorization, arc-length resampling,
//! Chamfer distance, and the Manhattan point loss with its
//! permutation-equivalent point ordering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{MapElement, Point};

/// Default number of samples per curve for Chamfer distance.
pub const DEFAULT_CHAMFER_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point>,
    /// Closed polylines have an implicit edge from the last point back to
    /// the first.
    pub closed: bool,
}

impl Polyline {
    pub fn new(points: Vec<Point>, closed: bool) -> Result<Self> {
        let p = Self { points, closed };
        p.validate()?;
        Ok(p)
    }

    pub fn open(points: Vec<Point>) -> Result<Self> {
        Self::new(points, false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::DegenerateGeometry(format!(
                "polyline needs at least 2 points, got {}",
                self.points.len()
            )));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateGeometry(
                "non-finite polyline vertex".into(),
            ));
        }
        if self.closed && self.points.first() == self.points.last() {
            return Err(Error::DegenerateGeometry(
                "closed polyline repeats its first vertex; closure is implicit".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Segments in traversal order, including the closing edge when closed.
    pub fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.points.len();
        let m = if self.closed && n > 1 {
            n
        } else {
            n.saturating_sub(1)
        };
        (0..m).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    pub fn arc_length(&self) -> f64 {
        self.segments().map(|(a, b)| dist(a, b)).sum()
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self {
            points,
            closed: self.closed,
        }
    }

    pub fn translated(&self, t: Point) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1]])
                .collect(),
            closed: self.closed,
        }
    }
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// The ordered Gaussian centers, with the element's topology.
pub fn vectorize(element: &MapElement) -> Polyline {
    Polyline {
        points: element.centers(),
        closed: element.closed,
    }
}

/// `n` points at equal arc-length spacing. Open polylines keep both
/// endpoints; closed ones start at the first vertex and space `n` points
/// around the loop.
pub fn resample_uniform(poly: &Polyline, n: usize) -> Result<Polyline> {
    poly.validate()?;
    if n < 2 {
        return Err(Error::Config(format!(
            "resample count must be >= 2, got {n}"
        )));
    }
    let segs: Vec<(Point, Point, f64)> = poly.segments().map(|(a, b)| (a, b, dist(a, b))).collect();
    let total: f64 = segs.iter().map(|s| s.2).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateGeometry("polyline has zero length".into()));
    }
    let step = if poly.closed {
        total / n as f64
    } else {
        total / (n - 1) as f64
    };

    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..n {
        let s = step * k as f64;
        while seg + 1 < segs.len() && seg_start + segs[seg].2 < s {
            seg_start += segs[seg].2;
            seg += 1;
        }
        let (a, b, len) = segs[seg];
        let t = if len > 0.0 {
            ((s - seg_start) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out[0] = poly.points[0];
    if !poly.closed {
        out[n - 1] = *poly.points.last().unwrap();
    }
    Ok(Polyline {
        points: out,
        closed: poly.closed,
    })
}

/// Symmetric mean nearest-neighbour distance between two point sets.
pub fn chamfer_points(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Shape(
            "chamfer distance of an empty point set".into(),
        ));
    }
    let directed = |from: &[Point], to: &[Point]| -> f64 {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| dist(*p, *q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

/// Chamfer distance after resampling both curves to `samples` points.
pub fn chamfer_distance(a: &Polyline, b: &Polyline, samples: usize) -> Result<f64> {
    let ra = resample_uniform(a, samples)?;
    let rb = resample_uniform(b, samples)?;
    chamfer_points(&ra.points, &rb.points)
}

/// Maps prediction index `i` to ground-truth index `shift + i` (forward) or
/// `shift - i` (reversed), modulo the point count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointOrdering {
    pub shift: usize,
    pub reversed: bool,
}

impl PointOrdering {
    pub const IDENTITY: PointOrdering = PointOrdering {
        shift: 0,
        reversed: false,
    };

    pub fn reversal(n: usize) -> Self {
        Self {
            shift: n.saturating_sub(1),
            reversed: true,
        }
    }

    #[inline]
    pub fn map(&self, i: usize, n: usize) -> usize {
        if self.reversed {
            (self.shift + n - i % n) % n
        } else {
            (self.shift + i) % n
        }
    }

    /// Candidate orderings in tie-break order: identity first.
    pub fn candidates(n: usize, closed: bool) -> Vec<PointOrdering> {
        if closed {
            let fwd = (0..n).map(|shift| PointOrdering {
                shift,
                reversed: false,
            });
            let rev = (0..n).map(|shift| PointOrdering {
                shift,
                reversed: true,
            });
            fwd.chain(rev).collect()
        } else {
            vec![Self::IDENTITY, Self::reversal(n)]
        }
    }

    pub fn is_valid_for(&self, n: usize, closed: bool) -> bool {
        if closed {
            self.shift < n.max(1)
        } else {
            *self == Self::IDENTITY || *self == Self::reversal(n)
        }
    }
}

fn check_pair(pred: &MapElement, gt: &Polyline, ordering: &PointOrdering) -> Result<()> {
    let n = pred.gaussians.len();
    if gt.points.len() != n {
        return Err(Error::Shape(format!(
            "prediction has {n} gaussians but ground truth has {} points",
            gt.points.len()
        )));
    }
    if !ordering.is_valid_for(n, pred.closed) {
        return Err(Error::Shape(format!(
            "ordering {ordering:?} is not valid for a {} element of {n} points",
            if pred.closed { "closed" } else { "open" }
        )));
    }
    Ok(())
}

/// Sum of Manhattan distances between centers and their assigned ground
/// truth points.
pub fn vector_loss(pred: &MapElement, gt: &Polyline, ordering: &PointOrdering) -> Result<f64> {
    check_pair(pred, gt, ordering)?;
    let n = gt.points.len();
    Ok(pred
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let t = gt.points[ordering.map(i, n)];
            (g.mu_x - t[0]).abs() + (g.mu_y - t[1]).abs()
        })
        .sum())
}

/// Subgradient of [`vector_loss`] with respect to each center; zero at
/// coordinate kinks.
pub fn vector_loss_grad(
    pred: &MapElement,
    gt: &Polyline,
    ordering: &PointOrdering,
) -> Result<Vec<[f64; 2]>> {
    check_pair(pred, gt, ordering)?;
    let n = gt.points.len();
    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    Ok(pred
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let t = gt.points[ordering.map(i, n)];
            [sign(g.mu_x - t[0]), sign(g.mu_y - t[1])]
        })
        .collect())
}

/// The ordering minimizing [`vector_loss`] together with that loss.
pub fn best_point_ordering_with_loss(
    pred: &MapElement,
    gt: &Polyline,
) -> Result<(PointOrdering, f64)> {
    check_pair(pred, gt, &PointOrdering::IDENTITY)?;
    let mut best = (PointOrdering::IDENTITY, f64::INFINITY);
    for cand in PointOrdering::candidates(gt.points.len(), pred.closed) {
        let loss = vector_loss(pred, gt, &cand)?;
        if loss < best.1 {
            best = (cand, loss);
        }
    }
    Ok(best)
}

/// Reversal for open elements; cyclic shift and direction for closed ones.
pub fn best_point_ordering(pred: &MapElement, gt: &Polyline) -> Result<PointOrdering> {
    best_point_ordering_with_loss(pred, gt).map(|(o, _)| o)
}
