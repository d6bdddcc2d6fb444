//! Training objectives on rendered masks and center sequences.
//!
//! The raster term mixes a foreground-weighted L1 with D-SSIM; the instance
//! loss adds a focal classification term and the Manhattan center loss. Every
//! differentiable piece has an analytic gradient so the fitting loop does not
//! need an autodiff engine.

pub mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{MapClass, MapElement, NUM_CLASSES};
use crate::raster::{render_backward, render_element, DensityMask, RasterGrid};
use crate::scene::GroundTruthElement;
use crate::vector::{best_point_ordering_with_loss, vector_loss, vector_loss_grad, PointOrdering};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
const LOG_CLAMP: f64 = 1e-12;

/// Relative weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_r: f64,
    pub lambda_alpha: f64,
    /// Foreground pixel weight of the L1 term. `None` uses the
    /// background/foreground pixel ratio of the target mask, clamped to
    /// `[1, 50]`.
    pub w_pos: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_r: 10.0,
            lambda_alpha: 0.8,
            w_pos: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_v >= 0.0
            && self.lambda_r >= 0.0
            && (0.0..=1.0).contains(&self.lambda_alpha)
            && self.w_pos.is_none_or(|w| w >= 1.0);
        if !ok {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }

    /// Foreground weight applied against `gt`.
    pub fn w_pos_for(&self, gt: &DensityMask) -> f64 {
        self.w_pos.unwrap_or_else(|| auto_w_pos(gt))
    }
}

/// Background-to-foreground pixel ratio, clamped to `[1, 50]`.
pub fn auto_w_pos(gt: &DensityMask) -> f64 {
    let fg = gt.count_above(0.5);
    if fg == 0 {
        return 1.0;
    }
    let bg = gt.values.len() - fg;
    (bg as f64 / fg as f64).clamp(1.0, 50.0)
}

fn check_masks(pred: &DensityMask, gt: &DensityMask) -> Result<()> {
    pred.check_same_grid(gt)
}

/// `sum w |pred - gt| / sum w`, `w = w_pos` on ground-truth foreground.
pub fn weighted_l1(pred: &DensityMask, gt: &DensityMask, w_pos: f64) -> Result<f64> {
    weighted_l1_impl(pred, gt, w_pos, None)
}

fn weighted_l1_impl(
    pred: &DensityMask,
    gt: &DensityMask,
    w_pos: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_masks(pred, gt)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        let w = if g > 0.5 { w_pos } else { 1.0 };
        num += w * (p - g).abs();
        den += w;
    }
    if let Some(grad) = grad {
        for ((d, &p), &g) in grad.iter_mut().zip(&pred.values).zip(&gt.values) {
            let w = if g > 0.5 { w_pos } else { 1.0 };
            let s = if p > g {
                1.0
            } else if p < g {
                -1.0
            } else {
                0.0
            };
            *d = w * s / den;
        }
    }
    Ok(num / den)
}

/// `(1 - SSIM(pred, gt)) / 2`.
pub fn d_ssim(pred: &DensityMask, gt: &DensityMask) -> Result<f64> {
    check_masks(pred, gt)?;
    let g = &pred.grid;
    let s = ssim::ssim(&pred.values, &gt.values, g.height_px, g.width_px);
    Ok(((1.0 - s) / 2.0).clamp(0.0, 1.0))
}

/// `lambda_alpha * D_w + (1 - lambda_alpha) * D-SSIM`.
pub fn raster_loss(pred: &DensityMask, gt: &DensityMask, w: &LossWeights) -> Result<f64> {
    let a = w.lambda_alpha;
    let l1 = if a > 0.0 {
        weighted_l1(pred, gt, w.w_pos_for(gt))?
    } else {
        0.0
    };
    let ds = if a < 1.0 { d_ssim(pred, gt)? } else { 0.0 };
    Ok(a * l1 + (1.0 - a) * ds)
}

/// [`raster_loss`] and its gradient with respect to every pred pixel.
pub fn raster_loss_with_grad(
    pred: &DensityMask,
    gt: &DensityMask,
    w: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    check_masks(pred, gt)?;
    let a = w.lambda_alpha;
    let mut grad = vec![0.0; pred.values.len()];
    let mut value = 0.0;
    if a > 0.0 {
        let mut g_l1 = vec![0.0; grad.len()];
        value += a * weighted_l1_impl(pred, gt, w.w_pos_for(gt), Some(&mut g_l1))?;
        grad.iter_mut().zip(&g_l1).for_each(|(d, g)| *d += a * g);
    }
    if a < 1.0 {
        let grid = &pred.grid;
        let (s, g_s) =
            ssim::ssim_with_grad(&pred.values, &gt.values, grid.height_px, grid.width_px);
        value += (1.0 - a) * (1.0 - s) / 2.0;
        grad.iter_mut()
            .zip(&g_s)
            .for_each(|(d, g)| *d -= (1.0 - a) * 0.5 * g);
    }
    Ok((value, grad))
}

#[inline]
fn focal_pos(p: f64) -> f64 {
    FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -(p.max(LOG_CLAMP)).ln()
}

#[inline]
fn focal_neg(p: f64) -> f64 {
    (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -((1.0 - p).max(LOG_CLAMP)).ln()
}

/// Sigmoid focal loss of a score vector against `target`: the positive term
/// at the target class plus the negative terms of every other class.
pub fn focal_cls_cost(scores: &[f64; NUM_CLASSES], target: MapClass) -> f64 {
    scores
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            if c == target.index() {
                focal_pos(p)
            } else {
                focal_neg(p)
            }
        })
        .sum()
}

/// Focal loss of a prediction assigned to background.
pub fn focal_background_cost(scores: &[f64; NUM_CLASSES]) -> f64 {
    scores.iter().map(|&p| focal_neg(p)).sum()
}

/// `sum min(a, b) / sum max(a, b)`; two empty masks count as identical.
pub fn soft_iou(a: &DensityMask, b: &DensityMask) -> Result<f64> {
    check_masks(a, b)?;
    let (mut inter, mut union) = (0.0, 0.0);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0.0 {
        log::debug!("soft IoU of two empty masks");
        return Ok(1.0);
    }
    Ok(inter / union)
}

/// Loss components of one matched prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceLoss {
    pub total: f64,
    pub cls: f64,
    pub vector: f64,
    pub raster: f64,
}

impl std::ops::AddAssign for InstanceLoss {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.cls += o.cls;
        self.vector += o.vector;
        self.raster += o.raster;
    }
}

/// `L_cls + lambda_v L_vector + lambda_r L_raster` with the vector term
/// taken under the best point ordering.
pub fn instance_loss(
    pred: &MapElement,
    gt: &GroundTruthElement,
    grid: &RasterGrid,
    w: &LossWeights,
    cutoff_sigmas: f64,
) -> Result<InstanceLoss> {
    instance_loss_with_grad(pred, gt, None, grid, w, cutoff_sigmas, false).map(|(l, _)| l)
}

/// Instance loss under a fixed `ordering` (best ordering when `None`), and
/// when `want_grad` the gradient with respect to each Gaussian's
/// `(mu_x, mu_y, sigma_x, sigma_y, theta)`.
pub fn instance_loss_with_grad(
    pred: &MapElement,
    gt: &GroundTruthElement,
    ordering: Option<PointOrdering>,
    grid: &RasterGrid,
    w: &LossWeights,
    cutoff_sigmas: f64,
    want_grad: bool,
) -> Result<(InstanceLoss, Vec<[f64; 5]>)> {
    w.validate()?;
    let cls = focal_cls_cost(&pred.score, gt.class);
    let (ordering, vector) = match ordering {
        Some(o) => (o, vector_loss(pred, &gt.resampled, &o)?),
        None => best_point_ordering_with_loss(pred, &gt.resampled)?,
    };
    let rendered = render_element(pred, grid, cutoff_sigmas)?;
    let mut grads = vec![[0.0; 5]; pred.gaussians.len()];
    let raster = if want_grad && w.lambda_r > 0.0 {
        let (value, mut upstream) = raster_loss_with_grad(&rendered, &gt.mask, w)?;
        upstream.iter_mut().for_each(|u| *u *= w.lambda_r);
        grads = render_backward(pred, grid, &upstream, cutoff_sigmas)?;
        value
    } else {
        raster_loss(&rendered, &gt.mask, w)?
    };
    if want_grad && w.lambda_v > 0.0 {
        for (g, v) in grads
            .iter_mut()
            .zip(vector_loss_grad(pred, &gt.resampled, &ordering)?)
        {
            g[0] += w.lambda_v * v[0];
            g[1] += w.lambda_v * v[1];
        }
    }
    Ok((
        InstanceLoss {
            total: cls + w.lambda_v * vector + w.lambda_r * raster,
            cls,
            vector,
            raster,
        },
        grads,
    ))
}
