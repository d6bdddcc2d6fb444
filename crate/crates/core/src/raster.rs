//! BEV occupancy rendering of Gaussian sequences.
//!
//! An element renders to `R(p) = 1 - prod_i (1 - G_i(p))` sampled at pixel
//! centers. With a finite cutoff, a Gaussian only touches pixels inside its
//! `cutoff`-sigma Mahalanobis ellipse, and contributes an exact factor of 1
//! everywhere else. The backward pass uses the same support so gradients are
//! consistent with the values actually produced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianMap, Kernel, MapElement, Point};

/// Default Mahalanobis cutoff used outside of tests.
pub const DEFAULT_CUTOFF_SIGMAS: f64 = 3.5;

/// Pixel grid over a metric BEV extent. Row `i` spans `y`, column `j` spans `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterGrid {
    pub width_px: usize,
    pub height_px: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for RasterGrid {
    /// 200x100 pixels over `[-30, 30] x [-15, 15]` meters.
    fn default() -> Self {
        Self {
            width_px: 200,
            height_px: 100,
            x_min: -30.0,
            x_max: 30.0,
            y_min: -15.0,
            y_max: 15.0,
        }
    }
}

impl RasterGrid {
    pub fn new(width_px: usize, height_px: usize, x: [f64; 2], y: [f64; 2]) -> Result<Self> {
        let grid = Self {
            width_px,
            height_px,
            x_min: x[0],
            x_max: x[1],
            y_min: y[0],
            y_max: y[1],
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Config(format!(
                "grid must be at least 1x1, got {}x{}",
                self.width_px, self.height_px
            )));
        }
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::Config(format!(
                "invalid grid extent x=[{}, {}] y=[{}, {}]",
                self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.width_px as f64
    }

    #[inline]
    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.height_px as f64
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width_px * self.height_px
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn pixel_center(&self, row: usize, col: usize) -> Point {
        [
            self.x_min + (col as f64 + 0.5) * self.dx(),
            self.y_min + (row as f64 + 0.5) * self.dy(),
        ]
    }

    /// Pixel whose cell contains `p`, if inside the extent.
    pub fn pixel_of(&self, p: Point) -> Option<(usize, usize)> {
        let c = ((p[0] - self.x_min) / self.dx()).floor();
        let r = ((p[1] - self.y_min) / self.dy()).floor();
        if c < 0.0 || r < 0.0 || c >= self.width_px as f64 || r >= self.height_px as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    /// Column range whose centers fall in `[lo, hi]` meters.
    fn col_span(&self, lo: f64, hi: f64) -> (usize, usize) {
        span(lo, hi, self.x_min, self.dx(), self.width_px)
    }

    fn row_span(&self, lo: f64, hi: f64) -> (usize, usize) {
        span(lo, hi, self.y_min, self.dy(), self.height_px)
    }
}

fn span(lo: f64, hi: f64, origin: f64, step: f64, n: usize) -> (usize, usize) {
    let a = ((lo - origin) / step - 0.5).ceil().max(0.0);
    let b = ((hi - origin) / step - 0.5).floor() + 1.0;
    let b = b.min(n as f64);
    if b <= a {
        (0, 0)
    } else {
        (a as usize, b as usize)
    }
}

/// Row-major `height x width` array of values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMask {
    pub grid: RasterGrid,
    pub values: Vec<f64>,
}

impl DensityMask {
    pub fn zeros(grid: RasterGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn filled(grid: RasterGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_values(grid: RasterGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.width_px,
                grid.height_px
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.width_px + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let w = self.grid.width_px;
        self.values[row * w + col] = v;
    }

    pub fn check_same_grid(&self, other: &DensityMask) -> Result<()> {
        if self.grid != other.grid || self.values.len() != other.values.len() {
            return Err(Error::Shape(format!(
                "grid mismatch: {}x{} vs {}x{}",
                self.grid.width_px, self.grid.height_px, other.grid.width_px, other.grid.height_px
            )));
        }
        Ok(())
    }

    /// 1 where the value is strictly above `threshold`, else 0.
    pub fn binarize(&self, threshold: f64) -> DensityMask {
        DensityMask {
            grid: self.grid,
            values: self
                .values
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v > threshold).count()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// 8-bit quantization `round(255 * v)`, row-major from `y_min`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect()
    }
}

fn check_cutoff(cutoff_sigmas: f64) -> Result<()> {
    if cutoff_sigmas.is_nan() || cutoff_sigmas <= 0.0 {
        return Err(Error::Config(format!(
            "cutoff must be positive or infinite, got {cutoff_sigmas}"
        )));
    }
    Ok(())
}

/// Pixels a single Gaussian may touch.
struct Footprint {
    kernel: Kernel,
    rows: (usize, usize),
    cols: (usize, usize),
    /// Squared Mahalanobis radius, infinite in exact mode.
    max_q: f64,
}

fn footprints(element: &MapElement, grid: &RasterGrid, cutoff_sigmas: f64) -> Vec<Footprint> {
    element
        .gaussians
        .iter()
        .map(|g| {
            let kernel = g.kernel();
            if cutoff_sigmas.is_infinite() {
                Footprint {
                    kernel,
                    rows: (0, grid.height_px),
                    cols: (0, grid.width_px),
                    max_q: f64::INFINITY,
                }
            } else {
                let [ex, ey] = kernel.half_extent(cutoff_sigmas);
                Footprint {
                    kernel,
                    rows: grid.row_span(g.mu_y - ey, g.mu_y + ey),
                    cols: grid.col_span(g.mu_x - ex, g.mu_x + ex),
                    max_q: cutoff_sigmas * cutoff_sigmas,
                }
            }
        })
        .collect()
}

/// Renders one element. `cutoff_sigmas = f64::INFINITY` evaluates every
/// Gaussian at every pixel.
pub fn render_element(
    element: &MapElement,
    grid: &RasterGrid,
    cutoff_sigmas: f64,
) -> Result<DensityMask> {
    grid.validate()?;
    check_cutoff(cutoff_sigmas)?;
    let w = grid.width_px;
    // transmittance, accumulated in element order
    let mut trans = vec![1.0f64; grid.len()];
    for fp in footprints(element, grid, cutoff_sigmas) {
        for row in fp.rows.0..fp.rows.1 {
            for col in fp.cols.0..fp.cols.1 {
                let q = fp.kernel.mahalanobis_sq(grid.pixel_center(row, col));
                if q <= fp.max_q {
                    let g = Kernel::density_from_q(q);
                    trans[row * w + col] *= 1.0 - g;
                }
            }
        }
    }
    let values = trans
        .into_iter()
        .map(|t| (1.0 - t).clamp(0.0, 1.0))
        .collect();
    Ok(DensityMask {
        grid: *grid,
        values,
    })
}

/// One mask per element, in element order.
pub fn render_map(
    map: &GaussianMap,
    grid: &RasterGrid,
    cutoff_sigmas: f64,
) -> Result<Vec<DensityMask>> {
    map.elements
        .par_iter()
        .map(|e| render_element(e, grid, cutoff_sigmas))
        .collect()
}

/// Reference renderer: every Gaussian at every pixel, composited in log
/// space. Used to check [`render_element`].
pub fn render_oracle(element: &MapElement, grid: &RasterGrid) -> Result<DensityMask> {
    grid.validate()?;
    let mut mask = DensityMask::zeros(*grid);
    for row in 0..grid.height_px {
        for col in 0..grid.width_px {
            let p = grid.pixel_center(row, col);
            let log_t: f64 = element
                .gaussians
                .iter()
                .map(|g| {
                    let d = (-0.5 * g.mahalanobis_sq(p)).exp();
                    (-d).ln_1p()
                })
                .sum();
            mask.set(row, col, 1.0 - log_t.exp());
        }
    }
    Ok(mask)
}

/// Gradient of a scalar loss with respect to each Gaussian's
/// `(mu_x, mu_y, sigma_x, sigma_y, theta)`, given `upstream = dL/dR` per
/// pixel.
pub fn render_backward(
    element: &MapElement,
    grid: &RasterGrid,
    upstream: &[f64],
    cutoff_sigmas: f64,
) -> Result<Vec<[f64; 5]>> {
    grid.validate()?;
    check_cutoff(cutoff_sigmas)?;
    if upstream.len() != grid.len() {
        return Err(Error::Shape(format!(
            "upstream has {} entries, grid has {}",
            upstream.len(),
            grid.len()
        )));
    }
    let n = element.gaussians.len();
    let mut grads = vec![[0.0f64; 5]; n];
    if n == 0 {
        return Ok(grads);
    }
    let w = grid.width_px;
    let fps = footprints(element, grid, cutoff_sigmas);

    // Bucket (pixel, gaussian) contributions by pixel, keeping element order
    // within each pixel.
    let mut counts = vec![0u32; grid.len() + 1];
    let mut hits: Vec<(u32, u32, f64)> = Vec::new();
    for (gi, fp) in fps.iter().enumerate() {
        for row in fp.rows.0..fp.rows.1 {
            for col in fp.cols.0..fp.cols.1 {
                let pix = row * w + col;
                if upstream[pix] == 0.0 {
                    continue;
                }
                let q = fp.kernel.mahalanobis_sq(grid.pixel_center(row, col));
                if q <= fp.max_q {
                    hits.push((pix as u32, gi as u32, Kernel::density_from_q(q)));
                    counts[pix + 1] += 1;
                }
            }
        }
    }
    for i in 0..grid.len() {
        counts[i + 1] += counts[i];
    }
    let mut cursor = counts.clone();
    let mut order = vec![0u32; hits.len()];
    for (k, h) in hits.iter().enumerate() {
        let slot = &mut cursor[h.0 as usize];
        order[*slot as usize] = k as u32;
        *slot += 1;
    }

    let mut suffix: Vec<f64> = Vec::new();
    for pix in 0..grid.len() {
        let (a, b) = (counts[pix] as usize, counts[pix + 1] as usize);
        if a == b {
            continue;
        }
        let up = upstream[pix];
        let p = grid.pixel_center(pix / w, pix % w);
        let entries = &order[a..b];
        // suffix[k] = prod_{m >= k} (1 - G_m)
        suffix.clear();
        suffix.resize(entries.len() + 1, 1.0);
        for k in (0..entries.len()).rev() {
            suffix[k] = suffix[k + 1] * (1.0 - hits[entries[k] as usize].2);
        }
        let mut prefix = 1.0;
        for (k, &e) in entries.iter().enumerate() {
            let (_, gi, g) = hits[e as usize];
            let d_r = up * prefix * suffix[k + 1];
            prefix *= 1.0 - g;
            if d_r == 0.0 || g == 0.0 {
                continue;
            }
            let (_, dg) = fps[gi as usize].kernel.density_and_gradient(p);
            let acc = &mut grads[gi as usize];
            for c in 0..5 {
                acc[c] += d_r * dg[c];
            }
        }
    }
    Ok(grads)
}
