//! Instance-level bipartite matching between predicted elements and ground
//! truth, and the map-level loss assembled over the resulting pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianMap, MapElement};
use crate::losses::{
    focal_background_cost, focal_cls_cost, instance_loss_with_grad, soft_iou, InstanceLoss,
    LossWeights,
};
use crate::raster::{render_element, DensityMask, RasterGrid};
use crate::scene::GroundTruthElement;
use crate::vector::{best_point_ordering_with_loss, PointOrdering};

/// Cost given to cross-class pairs so the solver stays total.
pub const CROSS_CLASS_COST: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Ground-truth index per prediction; `None` is background.
    pub pairs: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Minimum-cost one-to-one assignment of rows (predictions) to columns
/// (ground truth). Rectangular inputs are padded to square with zero-cost
/// dummies; rows paired with a dummy column map to background.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidCost("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidCost("non-finite entry".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: vec![None; rows],
            total_cost: 0.0,
        });
    }
    let n = rows.max(cols);
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            0.0
        }
    };

    // Shortest augmenting path with potentials, 1-based with a virtual
    // column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = vec![None; rows];
    let mut total_cost = 0.0;
    for j in 1..=n {
        let i = owner[j];
        if i >= 1 && i <= rows && j <= cols {
            pairs[i - 1] = Some(j - 1);
            total_cost += cost[i - 1][j - 1];
        }
    }
    Ok(Assignment { pairs, total_cost })
}

/// `C_cls + C_mu / N + (1 - soft IoU)` for a same-class pair.
pub fn instance_cost(
    pred: &MapElement,
    gt: &GroundTruthElement,
    grid: &RasterGrid,
    cutoff_sigmas: f64,
) -> Result<f64> {
    let rendered = render_element(pred, grid, cutoff_sigmas)?;
    instance_cost_rendered(pred, &rendered, gt)
}

fn instance_cost_rendered(
    pred: &MapElement,
    rendered: &DensityMask,
    gt: &GroundTruthElement,
) -> Result<f64> {
    let n = pred.gaussians.len().max(1) as f64;
    let (_, point_cost) = best_point_ordering_with_loss(pred, &gt.resampled)?;
    let iou = soft_iou(rendered, &gt.mask)?;
    Ok(focal_cls_cost(&pred.score, gt.class) + point_cost / n + (1.0 - iou))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Ground-truth index per prediction; `None` is background.
    pub assignment: Vec<Option<usize>>,
    /// Point ordering per prediction, present for matched ones.
    pub point_orderings: Vec<Option<PointOrdering>>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn matched(&self) -> usize {
        self.assignment.iter().flatten().count()
    }
}

/// Full cost matrix over all prediction/ground-truth pairs. Cross-class
/// pairs get [`CROSS_CLASS_COST`].
pub fn cost_matrix(
    pred: &GaussianMap,
    gt: &[GroundTruthElement],
    grid: &RasterGrid,
    cutoff_sigmas: f64,
) -> Result<Vec<Vec<f64>>> {
    pred.elements
        .par_iter()
        .map(|p| {
            let rendered = render_element(p, grid, cutoff_sigmas)?;
            gt.iter()
                .map(|g| {
                    if g.class == p.class {
                        instance_cost_rendered(p, &rendered, g)
                    } else {
                        Ok(CROSS_CLASS_COST)
                    }
                })
                .collect()
        })
        .collect()
}

/// Hungarian assignment over same-class pairs followed by point-level
/// ordering of every matched pair.
pub fn match_map(
    pred: &GaussianMap,
    gt: &[GroundTruthElement],
    grid: &RasterGrid,
    cutoff_sigmas: f64,
) -> Result<MatchResult> {
    let cost = cost_matrix(pred, gt, grid, cutoff_sigmas)?;
    let solved = hungarian_assign(&cost)?;
    let mut assignment = solved.pairs;
    let mut point_orderings = vec![None; assignment.len()];
    let mut total_cost = 0.0;
    for (i, slot) in assignment.iter_mut().enumerate() {
        let Some(j) = *slot else { continue };
        if pred.elements[i].class != gt[j].class {
            *slot = None;
            continue;
        }
        total_cost += cost[i][j];
        let (o, _) = best_point_ordering_with_loss(&pred.elements[i], &gt[j].resampled)?;
        point_orderings[i] = Some(o);
    }
    Ok(MatchResult {
        assignment,
        point_orderings,
        total_cost,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ElementLoss {
    Matched { gt: usize, loss: InstanceLoss },
    Background { cls: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapLoss {
    pub total: f64,
    /// Component sums across elements; background terms count as `cls`.
    pub components: InstanceLoss,
    pub per_element: Vec<ElementLoss>,
}

/// Loss of a map under a fixed matching; with `want_grad`, also the
/// gradient for every Gaussian of every element (zero for background).
pub fn map_loss_with_match(
    pred: &GaussianMap,
    gt: &[GroundTruthElement],
    matching: &MatchResult,
    grid: &RasterGrid,
    w: &LossWeights,
    cutoff_sigmas: f64,
    want_grad: bool,
) -> Result<(MapLoss, Vec<Vec<[f64; 5]>>)> {
    if matching.assignment.len() != pred.elements.len() {
        return Err(Error::Shape(format!(
            "matching covers {} predictions, map has {}",
            matching.assignment.len(),
            pred.elements.len()
        )));
    }
    let parts: Vec<(ElementLoss, Vec<[f64; 5]>)> = pred
        .elements
        .par_iter()
        .enumerate()
        .map(|(i, e)| match matching.assignment[i] {
            Some(j) => {
                let g = gt.get(j).ok_or_else(|| {
                    Error::Shape(format!("matching refers to missing ground truth {j}"))
                })?;
                let (loss, grad) = instance_loss_with_grad(
                    e,
                    g,
                    matching.point_orderings[i],
                    grid,
                    w,
                    cutoff_sigmas,
                    want_grad,
                )?;
                Ok((ElementLoss::Matched { gt: j, loss }, grad))
            }
            None => Ok((
                ElementLoss::Background {
                    cls: focal_background_cost(&e.score),
                },
                vec![[0.0; 5]; e.gaussians.len()],
            )),
        })
        .collect::<Result<_>>()?;

    let mut components = InstanceLoss::default();
    let mut per_element = Vec::with_capacity(parts.len());
    let mut grads = Vec::with_capacity(parts.len());
    for (el, g) in parts {
        match el {
            ElementLoss::Matched { loss, .. } => components += loss,
            ElementLoss::Background { cls } => {
                components += InstanceLoss {
                    total: cls,
                    cls,
                    ..Default::default()
                }
            }
        }
        per_element.push(el);
        grads.push(g);
    }
    Ok((
        MapLoss {
            total: components.total,
            components,
            per_element,
        },
        grads,
    ))
}

/// Matches, then sums instance losses over pairs plus background terms.
pub fn map_loss(
    pred: &GaussianMap,
    gt: &[GroundTruthElement],
    grid: &RasterGrid,
    w: &LossWeights,
    cutoff_sigmas: f64,
) -> Result<MapLoss> {
    let m = match_map(pred, gt, grid, cutoff_sigmas)?;
    map_loss_with_match(pred, gt, &m, grid, w, cutoff_sigmas, false).map(|(l, _)| l)
}
