//! Oriented 2D Gaussian primitives and the map elements built from them.
//!
//! A primitive is the 5-vector `(mu_x, mu_y, sigma_x, sigma_y, theta)`. Its
//! density at a BEV position `p` is `exp(-0.5 (p - mu)^T Sigma^-1 (p - mu))`
//! with `Sigma = R diag(sigma_x^2, sigma_y^2) R^T`. The density peaks at 1 on
//! the center, so the rasterizer can treat it directly as an occupancy
//! probability.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A metric BEV position `[x, y]`.
pub type Point = [f64; 2];

/// Row-major 2x2 matrix.
pub type Mat2 = [[f64; 2]; 2];

/// Densities below this are flushed to exactly zero.
pub const DENSITY_FLUSH: f64 = 1e-30;

/// Default number of Gaussians per map element.
pub const DEFAULT_GAUSSIANS_PER_ELEMENT: usize = 20;

/// Default instance budget per map.
pub const DEFAULT_INSTANCE_BUDGET: usize = 50;

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct Gaussian2D {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
}

impl From<[f64; 5]> for Gaussian2D {
    fn from(v: [f64; 5]) -> Self {
        Self {
            mu_x: v[0],
            mu_y: v[1],
            sigma_x: v[2],
            sigma_y: v[3],
            theta: v[4],
        }
    }
}

impl From<Gaussian2D> for [f64; 5] {
    fn from(g: Gaussian2D) -> Self {
        g.to_array()
    }
}

impl Gaussian2D {
    pub fn new(mu: Point, sigma: [f64; 2], theta: f64) -> Result<Self> {
        let g = Self {
            mu_x: mu[0],
            mu_y: mu[1],
            sigma_x: sigma[0],
            sigma_y: sigma[1],
            theta,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(mu: Point, sigma: f64) -> Result<Self> {
        Self::new(mu, [sigma, sigma], 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPrimitive(format!(
                "non-finite field in {a:?}"
            )));
        }
        if self.sigma_x <= 0.0 || self.sigma_y <= 0.0 {
            return Err(Error::InvalidPrimitive(format!(
                "scales must be positive, got ({}, {})",
                self.sigma_x, self.sigma_y
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn mu(&self) -> Point {
        [self.mu_x, self.mu_y]
    }

    #[inline]
    pub fn to_array(&self) -> [f64; 5] {
        [self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.theta]
    }

    /// `R diag(sigma_x^2, sigma_y^2) R^T`.
    pub fn covariance(&self) -> Result<Mat2> {
        self.validate()?;
        let (s, c) = self.theta.sin_cos();
        let (a, b) = (self.sigma_x * self.sigma_x, self.sigma_y * self.sigma_y);
        let xy = c * s * (a - b);
        Ok([[c * c * a + s * s * b, xy], [xy, s * s * a + c * c * b]])
    }

    /// Squared Mahalanobis distance of `p` from the center.
    #[inline]
    pub fn mahalanobis_sq(&self, p: Point) -> f64 {
        self.kernel().mahalanobis_sq(p)
    }

    /// Unnormalized density in `(0, 1]`; `NaN` for an invalid primitive.
    #[inline]
    pub fn density(&self, p: Point) -> f64 {
        self.kernel().density(p)
    }

    /// Analytic gradient of [`density`](Self::density) with respect to
    /// `(mu_x, mu_y, sigma_x, sigma_y, theta)`.
    #[inline]
    pub fn density_gradient(&self, p: Point) -> [f64; 5] {
        self.kernel().density_and_gradient(p).1
    }

    /// Same primitive with `theta` wrapped into `[-pi/2, pi/2)`.
    pub fn canonicalized(&self) -> Self {
        Self {
            theta: canonical_angle(self.theta),
            ..*self
        }
    }

    pub(crate) fn kernel(&self) -> Kernel {
        Kernel::new(self)
    }
}

impl fmt::Display for Gaussian2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N(mu=({:.3}, {:.3}), sigma=({:.3}, {:.3}), theta={:.3})",
            self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.theta
        )
    }
}

/// Wraps an angle into `[-pi/2, pi/2)` using the period-pi symmetry of the
/// covariance.
pub fn canonical_angle(theta: f64) -> f64 {
    let mut t = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    if t < -FRAC_PI_2 {
        t += PI;
    }
    t
}

/// Cached trigonometry and inverse scales for repeated evaluation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Kernel {
    pub mu: Point,
    pub sigma: [f64; 2],
    pub cos: f64,
    pub sin: f64,
    pub inv_sx2: f64,
    pub inv_sy2: f64,
}

impl Kernel {
    fn new(g: &Gaussian2D) -> Self {
        let (sin, cos) = g.theta.sin_cos();
        Self {
            mu: g.mu(),
            sigma: [g.sigma_x, g.sigma_y],
            cos,
            sin,
            inv_sx2: 1.0 / (g.sigma_x * g.sigma_x),
            inv_sy2: 1.0 / (g.sigma_y * g.sigma_y),
        }
    }

    /// Offset of `p` in the primitive's principal frame.
    #[inline]
    fn local(&self, p: Point) -> (f64, f64) {
        let dx = p[0] - self.mu[0];
        let dy = p[1] - self.mu[1];
        (
            self.cos * dx + self.sin * dy,
            -self.sin * dx + self.cos * dy,
        )
    }

    #[inline]
    pub fn mahalanobis_sq(&self, p: Point) -> f64 {
        let (u, v) = self.local(p);
        u * u * self.inv_sx2 + v * v * self.inv_sy2
    }

    #[inline]
    pub fn density_from_q(q: f64) -> f64 {
        let d = (-0.5 * q).exp();
        if d < DENSITY_FLUSH {
            0.0
        } else {
            d
        }
    }

    #[inline]
    pub fn density(&self, p: Point) -> f64 {
        Self::density_from_q(self.mahalanobis_sq(p))
    }

    /// Half extents of the axis-aligned box enclosing the `k`-sigma ellipse.
    pub fn half_extent(&self, k: f64) -> [f64; 2] {
        let (a, b) = (self.sigma[0] * self.sigma[0], self.sigma[1] * self.sigma[1]);
        let (c2, s2) = (self.cos * self.cos, self.sin * self.sin);
        [k * (c2 * a + s2 * b).sqrt(), k * (s2 * a + c2 * b).sqrt()]
    }

    #[inline]
    pub fn density_and_gradient(&self, p: Point) -> (f64, [f64; 5]) {
        let (u, v) = self.local(p);
        let q = u * u * self.inv_sx2 + v * v * self.inv_sy2;
        let g = Self::density_from_q(q);
        if g == 0.0 {
            return (0.0, [0.0; 5]);
        }
        let (c, s) = (self.cos, self.sin);
        let ua = u * self.inv_sx2;
        let vb = v * self.inv_sy2;
        (
            g,
            [
                g * (ua * c - vb * s),
                g * (ua * s + vb * c),
                g * u * ua / self.sigma[0],
                g * v * vb / self.sigma[1],
                -g * u * v * (self.inv_sx2 - self.inv_sy2),
            ],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    PedCrossing,
    Divider,
    Boundary,
}

impl MapClass {
    pub const ALL: [MapClass; NUM_CLASSES] =
        [MapClass::PedCrossing, MapClass::Divider, MapClass::Boundary];

    pub fn index(self) -> usize {
        match self {
            MapClass::PedCrossing => 0,
            MapClass::Divider => 1,
            MapClass::Boundary => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MapClass::PedCrossing => "ped_crossing",
            MapClass::Divider => "divider",
            MapClass::Boundary => "boundary",
        }
    }

    /// Pedestrian crossings are polygons; dividers and boundaries are open.
    pub fn is_closed(self) -> bool {
        matches!(self, MapClass::PedCrossing)
    }

    /// Confidence vector that puts all mass on this class.
    pub fn one_hot(self) -> [f64; NUM_CLASSES] {
        let mut s = [0.0; NUM_CLASSES];
        s[self.index()] = 1.0;
        s
    }
}

impl fmt::Display for MapClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MapClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MapClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown map class `{s}`")))
    }
}

/// An ordered sequence of Gaussians forming one polyline or polygon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub class: MapClass,
    pub closed: bool,
    /// Per-class confidence, indexed by [`MapClass::index`].
    pub score: [f64; NUM_CLASSES],
    pub gaussians: Vec<Gaussian2D>,
}

impl MapElement {
    /// Element with the class's topology and a one-hot score.
    pub fn new(class: MapClass, gaussians: Vec<Gaussian2D>) -> Self {
        Self {
            class,
            closed: class.is_closed(),
            score: class.one_hot(),
            gaussians,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Confidence of the element's own class.
    pub fn confidence(&self) -> f64 {
        self.score[self.class.index()]
    }

    pub fn centers(&self) -> Vec<Point> {
        self.gaussians.iter().map(Gaussian2D::mu).collect()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.gaussians.len() != n {
            return Err(Error::Shape(format!(
                "element has {} gaussians, expected {n}",
                self.gaussians.len()
            )));
        }
        for g in &self.gaussians {
            g.validate()?;
        }
        if self.score.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config(format!(
                "scores out of [0, 1]: {:?}",
                self.score
            )));
        }
        let total: f64 = self.score.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(Error::Config(format!("scores sum to {total} > 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianMap {
    pub elements: Vec<MapElement>,
}

impl GaussianMap {
    pub fn new(elements: Vec<MapElement>) -> Self {
        Self { elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Checks every element against `n` Gaussians and the instance budget.
    pub fn validate(&self, n: usize, budget: usize) -> Result<()> {
        if self.elements.len() > budget {
            return Err(Error::Config(format!(
                "{} elements exceed the instance budget of {budget}",
                self.elements.len()
            )));
        }
        self.elements.iter().try_for_each(|e| e.validate(n))
    }
}
