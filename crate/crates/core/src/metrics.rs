//! Chamfer-distance AP and rasterized-IoU AP.
//!
//! Both follow the same protocol per class and threshold: detections from
//! every scene are ranked by confidence, each is greedily paired with its
//! nearest unmatched ground truth of the same class in the same scene, and
//! AP is the exact area under the precision envelope of the PR curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianMap, MapClass};
use crate::raster::{render_element, DensityMask, RasterGrid};
use crate::scene::{GroundTruthElement, Scene};
use crate::vector::{chamfer_distance, vectorize, Polyline, DEFAULT_CHAMFER_SAMPLES};

fn steps(start_pct: u32, n: u32) -> Vec<f64> {
    (0..n).map(|k| (start_pct + 5 * k) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IouThresholds {
    pub ped_crossing: Vec<f64>,
    pub divider: Vec<f64>,
    pub boundary: Vec<f64>,
}

impl Default for IouThresholds {
    fn default() -> Self {
        Self {
            ped_crossing: steps(50, 6),
            divider: steps(25, 6),
            boundary: steps(25, 6),
        }
    }
}

impl IouThresholds {
    pub fn for_class(&self, c: MapClass) -> &[f64] {
        match c {
            MapClass::PedCrossing => &self.ped_crossing,
            MapClass::Divider => &self.divider,
            MapClass::Boundary => &self.boundary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub chamfer_thresholds: Vec<f64>,
    pub iou_thresholds_by_class: IouThresholds,
    pub binarize_at: f64,
    pub chamfer_samples: usize,
    /// Cutoff used when rendering predictions for IoU; `f64::INFINITY`
    /// (JSON `null`) renders exactly.
    #[serde(with = "crate::fitting::cutoff_serde")]
    pub cutoff_sigmas: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            chamfer_thresholds: vec![0.5, 1.0, 1.5],
            iou_thresholds_by_class: IouThresholds::default(),
            binarize_at: 0.5,
            chamfer_samples: DEFAULT_CHAMFER_SAMPLES,
            cutoff_sigmas: crate::raster::DEFAULT_CUTOFF_SIGMAS,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let increasing = |t: &[f64]| !t.is_empty() && t.windows(2).all(|w| w[0] < w[1]);
        let iou = &self.iou_thresholds_by_class;
        if !increasing(&self.chamfer_thresholds)
            || !increasing(&iou.ped_crossing)
            || !increasing(&iou.divider)
            || !increasing(&iou.boundary)
        {
            return Err(Error::Config(
                "thresholds must be non-empty and strictly increasing".into(),
            ));
        }
        if !(self.binarize_at > 0.0 && self.binarize_at < 1.0) {
            return Err(Error::Config(format!(
                "binarize_at must lie in (0, 1), got {}",
                self.binarize_at
            )));
        }
        if self.chamfer_samples < 2 {
            return Err(Error::Config("chamfer_samples must be >= 2".into()));
        }
        if !(self.cutoff_sigmas > 0.0) {
            return Err(Error::Config(format!(
                "cutoff_sigmas must be positive or null, got {}",
                self.cutoff_sigmas
            )));
        }
        Ok(())
    }
}

/// A scored prediction in evaluation form.
#[derive(Clone, Debug)]
pub struct Detection {
    pub scene: usize,
    pub class: MapClass,
    pub score: f64,
    pub polyline: Polyline,
    /// Binary mask.
    pub mask: DensityMask,
}

/// Detections from a predicted map: vectorized centers and the rendered
/// mask binarized at `cfg.binarize_at`.
pub fn detections_from_map(
    map: &GaussianMap,
    scene: usize,
    grid: &RasterGrid,
    cfg: &EvalConfig,
) -> Result<Vec<Detection>> {
    map.elements
        .iter()
        .map(|e| {
            Ok(Detection {
                scene,
                class: e.class,
                score: e.confidence(),
                polyline: vectorize(e),
                mask: render_element(e, grid, cfg.cutoff_sigmas)?.binarize(cfg.binarize_at),
            })
        })
        .collect()
}

/// Ground truth re-expressed as unit-confidence detections.
pub fn detections_from_scene(scene: &Scene, index: usize) -> Vec<Detection> {
    scene
        .elements
        .iter()
        .map(|g| Detection {
            scene: index,
            class: g.class,
            score: 1.0,
            polyline: g.vertices.clone(),
            mask: g.mask.clone(),
        })
        .collect()
}

/// `|A and B| / |A or B|` on masks binarized at 0.5; empty union counts as 1.
pub fn hard_iou(a: &DensityMask, b: &DensityMask) -> Result<f64> {
    a.check_same_grid(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Area under the precision envelope for a ranked TP/FP sequence.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in tp_flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    /// Mean over thresholds.
    pub ap: f64,
    pub per_threshold: Vec<ThresholdAp>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Classes without ground truth are absent.
    pub per_class: BTreeMap<MapClass, ClassAp>,
    pub mean: Option<f64>,
}

impl ApReport {
    pub fn class(&self, c: MapClass) -> Option<f64> {
        self.per_class.get(&c).map(|a| a.ap)
    }
}

#[derive(Clone, Copy)]
enum Criterion {
    /// Smaller is better; TP iff `d < tau`.
    Distance,
    /// Larger is better; TP iff `s > tau`.
    Overlap,
}

fn evaluate<F>(
    dets: &[Detection],
    gts: &[Vec<GroundTruthElement>],
    thresholds: &dyn Fn(MapClass) -> Vec<f64>,
    criterion: Criterion,
    measure: F,
) -> Result<ApReport>
where
    F: Fn(&Detection, &GroundTruthElement) -> Result<f64>,
{
    let mut report = ApReport::default();
    for class in MapClass::ALL {
        let num_gt: usize = gts
            .iter()
            .map(|s| s.iter().filter(|g| g.class == class).count())
            .sum();
        if num_gt == 0 {
            continue;
        }
        let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));

        // (gt index within scene, measure) for each same-class candidate
        let candidates: Vec<Vec<(usize, f64)>> = ranked
            .iter()
            .map(|d| {
                let scene = gts.get(d.scene).ok_or_else(|| {
                    Error::Shape(format!("detection refers to missing scene {}", d.scene))
                })?;
                scene
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| g.class == class)
                    .map(|(j, g)| measure(d, g).map(|m| (j, m)))
                    .collect()
            })
            .collect::<Result<_>>()?;

        let taus = thresholds(class);
        let mut per_threshold = Vec::with_capacity(taus.len());
        for &tau in &taus {
            let mut used: Vec<Vec<bool>> = gts.iter().map(|s| vec![false; s.len()]).collect();
            let flags: Vec<bool> = ranked
                .iter()
                .zip(&candidates)
                .map(|(d, cands)| {
                    let best = cands
                        .iter()
                        .filter(|(j, _)| !used[d.scene][*j])
                        .min_by(|a, b| match criterion {
                            Criterion::Distance => a.1.total_cmp(&b.1),
                            Criterion::Overlap => b.1.total_cmp(&a.1),
                        });
                    match best {
                        Some(&(j, m)) => {
                            let hit = match criterion {
                                Criterion::Distance => m < tau,
                                Criterion::Overlap => m > tau,
                            };
                            if hit {
                                used[d.scene][j] = true;
                            }
                            hit
                        }
                        None => false,
                    }
                })
                .collect();
            per_threshold.push(ThresholdAp {
                threshold: tau,
                ap: average_precision(&flags, num_gt),
            });
        }
        let ap = per_threshold.iter().map(|p| p.ap).sum::<f64>() / per_threshold.len() as f64;
        report
            .per_class
            .insert(class, ClassAp { ap, per_threshold });
    }
    if !report.per_class.is_empty() {
        report.mean = Some(
            report.per_class.values().map(|c| c.ap).sum::<f64>() / report.per_class.len() as f64,
        );
    }
    Ok(report)
}

pub fn ap_chamfer(
    dets: &[Detection],
    gts: &[Vec<GroundTruthElement>],
    cfg: &EvalConfig,
) -> Result<ApReport> {
    cfg.validate()?;
    let taus = cfg.chamfer_thresholds.clone();
    evaluate(dets, gts, &|_| taus.clone(), Criterion::Distance, |d, g| {
        chamfer_distance(&d.polyline, &g.vertices, cfg.chamfer_samples)
    })
}

pub fn ap_raster(
    dets: &[Detection],
    gts: &[Vec<GroundTruthElement>],
    cfg: &EvalConfig,
) -> Result<ApReport> {
    cfg.validate()?;
    evaluate(
        dets,
        gts,
        &|c| cfg.iou_thresholds_by_class.for_class(c).to_vec(),
        Criterion::Overlap,
        |d, g| hard_iou(&d.mask, &g.mask),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap_chamfer: ApReport,
    pub ap_raster: ApReport,
}

/// Both APs for detections against per-scene ground truth.
pub fn evaluate_detections(
    dets: &[Detection],
    gts: &[Vec<GroundTruthElement>],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        ap_chamfer: ap_chamfer(dets, gts, cfg)?,
        ap_raster: ap_raster(dets, gts, cfg)?,
    })
}

/// Both APs for one predicted map per scene.
pub fn evaluate_maps(
    preds: &[GaussianMap],
    scenes: &[Scene],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if preds.len() != scenes.len() {
        return Err(Error::Shape(format!(
            "{} predicted maps for {} scenes",
            preds.len(),
            scenes.len()
        )));
    }
    let mut dets = Vec::new();
    for (i, (m, s)) in preds.iter().zip(scenes).enumerate() {
        dets.extend(detections_from_map(m, i, &s.grid, cfg)?);
    }
    let gts: Vec<Vec<GroundTruthElement>> = scenes.iter().map(|s| s.elements.clone()).collect();
    evaluate_detections(&dets, &gts, cfg)
}
