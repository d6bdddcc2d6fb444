//! Direct optimization of Gaussian parameters against ground truth.
//!
//! Adam runs on `(mu, log sigma, theta)` of every Gaussian. The matching is
//! refreshed every `rematch_every` iterations and frozen in between; after
//! each step sigma is floored and theta wrapped into `[-pi/2, pi/2)`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{
    canonical_angle, Gaussian2D, GaussianMap, MapElement, Point, DEFAULT_GAUSSIANS_PER_ELEMENT,
};
use crate::losses::{InstanceLoss, LossWeights};
use crate::matching::{map_loss_with_match, match_map, MatchResult};
use crate::metrics::{evaluate_maps, hard_iou, EvalConfig};
use crate::raster::{render_element, RasterGrid, DEFAULT_CUTOFF_SIGMAS};
use crate::scene::{GroundTruthElement, Scene};
use crate::vector::{chamfer_distance, vectorize};

/// Initial `(sigma_x, sigma_y)`, along and across the local tangent.
pub const INIT_SIGMA: [f64; 2] = [0.5, 0.15];

/// Window of the loss moving average used for convergence detection.
pub const EMA_WINDOW: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub mu: f64,
    pub log_sigma: f64,
    pub theta: f64,
    /// Rates follow a cosine from their initial values down to this
    /// fraction of them at the last iteration; 1 keeps them constant.
    pub final_fraction: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mu: 0.05,
            log_sigma: 0.02,
            theta: 0.02,
            final_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub sigma_floor: f64,
    pub rematch_every: usize,
    pub seed: u64,
    /// Gaussians per element.
    pub n_gaussians: usize,
    /// Std-dev (m) of the isotropic noise added to initial centers.
    pub init_noise: f64,
    /// `f64::INFINITY` (JSON `null`) renders exactly.
    #[serde(with = "cutoff_serde")]
    pub cutoff_sigmas: f64,
    /// Relative EMA change below which the run counts as converged.
    pub convergence_tol: f64,
    /// Loss weights live next to the fit settings in run configs.
    #[serde(skip)]
    pub weights: LossWeights,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rates: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            sigma_floor: 0.05,
            rematch_every: 50,
            seed: 0,
            n_gaussians: DEFAULT_GAUSSIANS_PER_ELEMENT,
            init_noise: 0.5,
            cutoff_sigmas: DEFAULT_CUTOFF_SIGMAS,
            convergence_tol: 1e-4,
            weights: LossWeights::default(),
        }
    }
}

pub(crate) mod cutoff_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.learning_rates;
        if !(lr.mu > 0.0 && lr.log_sigma > 0.0 && lr.theta > 0.0)
            || !(lr.final_fraction > 0.0 && lr.final_fraction <= 1.0)
        {
            return Err(Error::Config(format!(
                "learning rates must be positive: {lr:?}"
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.rematch_every == 0 || self.n_gaussians < 2 {
            return Err(Error::Config(
                "eps must be positive, rematch_every >= 1, n_gaussians >= 2".into(),
            ));
        }
        if !(self.init_noise >= 0.0)
            || !(self.cutoff_sigmas > 0.0)
            || !(self.convergence_tol >= 0.0)
        {
            return Err(Error::Config(
                "init_noise and convergence_tol must be non-negative, cutoff_sigmas positive"
                    .into(),
            ));
        }
        self.weights.validate()
    }
}

/// Loss components at one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub total: f64,
    pub cls: f64,
    pub vector: f64,
    pub raster: f64,
}

impl From<InstanceLoss> for LossPoint {
    fn from(l: InstanceLoss) -> Self {
        Self {
            total: l.total,
            cls: l.cls,
            vector: l.vector,
            raster: l.raster,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementMetrics {
    pub gt: usize,
    pub class: crate::gaussian::MapClass,
    /// Index of the matched prediction; `None` when unmatched.
    pub pred: Option<usize>,
    pub chamfer: Option<f64>,
    pub hard_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub loss: LossPoint,
    /// Mean over matched ground-truth elements.
    pub chamfer: Option<f64>,
    pub hard_iou: Option<f64>,
    pub per_element: Vec<ElementMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    /// Loss before each step, one entry per iteration.
    pub trajectory: Vec<LossPoint>,
    pub initial: LossPoint,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
    /// First iteration at which the moving average of the total loss
    /// changed by less than `convergence_tol` relative.
    pub converged_at: Option<usize>,
    /// Seconds; not serialized so reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Exponential moving average with span [`EMA_WINDOW`].
pub fn loss_ema(values: &[f64]) -> Vec<f64> {
    let a = 2.0 / (EMA_WINDOW as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = match values.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in values {
        acc = a * v + (1.0 - a) * acc;
        out.push(acc);
    }
    out
}

fn tangent_angle(points: &[Point], i: usize, closed: bool) -> f64 {
    let n = points.len();
    let (a, b) = if closed {
        (points[(i + n - 1) % n], points[(i + 1) % n])
    } else {
        (points[i.saturating_sub(1)], points[(i + 1).min(n - 1)])
    };
    canonical_angle((b[1] - a[1]).atan2(b[0] - a[0]))
}

/// One element per ground-truth element, centers at the resampled points
/// plus isotropic noise, oriented along the local tangent.
pub fn init_elements(
    gt: &[GroundTruthElement],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianMap> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "noise_sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let elements = gt
        .iter()
        .map(|g| {
            let pts = &g.resampled.points;
            let gaussians = (0..pts.len())
                .map(|i| {
                    let theta = tangent_angle(pts, i, g.closed());
                    let mu = [pts[i][0] + noise.sample(rng), pts[i][1] + noise.sample(rng)];
                    Gaussian2D::new(mu, INIT_SIGMA, theta)
                })
                .collect::<Result<_>>()?;
            Ok(MapElement::new(g.class, gaussians))
        })
        .collect::<Result<_>>()?;
    Ok(GaussianMap::new(elements))
}

/// Adam over flattened `[mu_x, mu_y, log sigma_x, log sigma_y, theta]`
/// parameter blocks.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: [f64; 5],
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<[f64; 5]>,
    v: Vec<[f64; 5]>,
}

impl Adam {
    pub fn new(cfg: &FitConfig, blocks: usize) -> Self {
        let lr = &cfg.learning_rates;
        Self {
            lr: [lr.mu, lr.mu, lr.log_sigma, lr.log_sigma, lr.theta],
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: vec![[0.0; 5]; blocks],
            v: vec![[0.0; 5]; blocks],
        }
    }

    pub fn step(&mut self, params: &mut [[f64; 5]], grads: &[[f64; 5]]) {
        self.step_scaled(params, grads, 1.0);
    }

    /// Step with every learning rate multiplied by `scale`.
    pub fn step_scaled(&mut self, params: &mut [[f64; 5]], grads: &[[f64; 5]], scale: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for k in 0..5 {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= scale * self.lr[k] * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn to_params(map: &GaussianMap) -> Vec<[f64; 5]> {
    map.elements
        .iter()
        .flat_map(|e| &e.gaussians)
        .map(|g| [g.mu_x, g.mu_y, g.sigma_x.ln(), g.sigma_y.ln(), g.theta])
        .collect()
}

/// Cosine factor from 1 at the first iteration to `final_fraction` at the
/// last.
pub fn lr_scale(cfg: &FitConfig, iteration: usize) -> f64 {
    let f = cfg.learning_rates.final_fraction;
    if f == 1.0 || cfg.iterations < 2 {
        return 1.0;
    }
    let t = iteration as f64 / (cfg.iterations - 1) as f64;
    f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Writes `params` back into `map`, flooring sigma and wrapping theta; the
/// projected values are written back into `params` too.
fn apply_params(map: &mut GaussianMap, params: &mut [[f64; 5]], floor: f64) {
    let gaussians = map.elements.iter_mut().flat_map(|e| e.gaussians.iter_mut());
    for (g, p) in gaussians.zip(params.iter_mut()) {
        let sx = p[2].exp().max(floor);
        let sy = p[3].exp().max(floor);
        let theta = canonical_angle(p[4]);
        *g = Gaussian2D {
            mu_x: p[0],
            mu_y: p[1],
            sigma_x: sx,
            sigma_y: sy,
            theta,
        };
        p[2] = sx.ln();
        p[3] = sy.ln();
        p[4] = theta;
    }
}

fn check_finite(iteration: usize, loss: f64, grads: &[Vec<[f64; 5]>]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged {
            iteration,
            reason: format!("loss is {loss}"),
        });
    }
    if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            iteration,
            reason: "non-finite gradient".into(),
        });
    }
    Ok(())
}

/// Per-ground-truth Chamfer distance and hard IoU of `map` under a fresh
/// matching.
pub fn final_metrics(
    map: &GaussianMap,
    gt: &[GroundTruthElement],
    grid: &RasterGrid,
    cfg: &FitConfig,
) -> Result<FinalMetrics> {
    let matching = match_map(map, gt, grid, cfg.cutoff_sigmas)?;
    let (loss, _) = map_loss_with_match(
        map,
        gt,
        &matching,
        grid,
        &cfg.weights,
        cfg.cutoff_sigmas,
        false,
    )?;
    let eval = EvalConfig::default();
    let mut per_element: Vec<ElementMetrics> = gt
        .iter()
        .enumerate()
        .map(|(j, g)| ElementMetrics {
            gt: j,
            class: g.class,
            pred: None,
            chamfer: None,
            hard_iou: None,
        })
        .collect();
    for (i, slot) in matching.assignment.iter().enumerate() {
        let Some(j) = *slot else { continue };
        let e = &map.elements[i];
        let mask = render_element(e, grid, cfg.cutoff_sigmas)?.binarize(eval.binarize_at);
        let row = &mut per_element[j];
        row.pred = Some(i);
        row.chamfer = Some(chamfer_distance(
            &vectorize(e),
            &gt[j].vertices,
            eval.chamfer_samples,
        )?);
        row.hard_iou = Some(hard_iou(&mask, &gt[j].mask)?);
    }
    let mean = |f: fn(&ElementMetrics) -> Option<f64>| {
        let v: Vec<f64> = per_element.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(FinalMetrics {
        loss: loss.components.into(),
        chamfer: mean(|r| r.chamfer),
        hard_iou: mean(|r| r.hard_iou),
        per_element,
    })
}

/// Optimizes `map0` against `gt`. Every prediction must have as many
/// Gaussians as each ground truth has resampled points.
pub fn fit(
    map0: &GaussianMap,
    gt: &[GroundTruthElement],
    grid: &RasterGrid,
    cfg: &FitConfig,
) -> Result<(GaussianMap, FitReport)> {
    fit_observed(map0, gt, grid, cfg, |_, _, _| {})
}

/// [`fit`] calling `observe(iteration, map, loss)` after every step with
/// the updated map and the loss measured before the step.
pub fn fit_observed<F>(
    map0: &GaussianMap,
    gt: &[GroundTruthElement],
    grid: &RasterGrid,
    cfg: &FitConfig,
    mut observe: F,
) -> Result<(GaussianMap, FitReport)>
where
    F: FnMut(usize, &GaussianMap, &LossPoint),
{
    cfg.validate()?;
    let start = Instant::now();
    let mut map = map0.clone();
    for e in &map.elements {
        for g in &e.gaussians {
            g.validate()?;
        }
    }
    let mut params = to_params(&map);
    apply_params(&mut map, &mut params, cfg.sigma_floor);
    let mut adam = Adam::new(cfg, params.len());
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    let mut matching: Option<MatchResult> = None;

    for it in 0..cfg.iterations {
        if it % cfg.rematch_every == 0 || matching.is_none() {
            matching = Some(match_map(&map, gt, grid, cfg.cutoff_sigmas)?);
        }
        let m = matching.as_ref().expect("matching computed above");
        let (loss, grads) =
            map_loss_with_match(&map, gt, m, grid, &cfg.weights, cfg.cutoff_sigmas, true)?;
        check_finite(it, loss.total, &grads)?;
        trajectory.push(LossPoint::from(loss.components));

        // chain rule into log sigma
        let flat: Vec<[f64; 5]> = map
            .elements
            .iter()
            .zip(&grads)
            .flat_map(|(e, g)| e.gaussians.iter().zip(g))
            .map(|(gauss, d)| [d[0], d[1], d[2] * gauss.sigma_x, d[3] * gauss.sigma_y, d[4]])
            .collect();
        adam.step_scaled(&mut params, &flat, lr_scale(cfg, it));
        if params.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                reason: "non-finite parameter after step".into(),
            });
        }
        apply_params(&mut map, &mut params, cfg.sigma_floor);
        observe(it, &map, &trajectory[it]);
    }

    let final_metrics = final_metrics(&map, gt, grid, cfg)?;
    let initial = match trajectory.first() {
        Some(p) => *p,
        None => final_metrics.loss,
    };
    let totals: Vec<f64> = trajectory.iter().map(|p| p.total).collect();
    let ema = loss_ema(&totals);
    let converged_at = (1..ema.len()).find(|&i| {
        i >= EMA_WINDOW && (ema[i - 1] - ema[i]).abs() <= cfg.convergence_tol * ema[i - 1].abs()
    });
    let report = FitReport {
        iterations: trajectory.len(),
        trajectory,
        initial,
        final_metrics,
        converged_at,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((map, report))
}

/// Per-scene random stream: the config seed selects the generator, the
/// scene seed the stream.
pub fn scene_rng(cfg: &FitConfig, scene: &Scene) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(scene.seed);
    rng
}

/// Resamples ground truth to `cfg.n_gaussians`, initializes from it and
/// fits. Returns the fitted map, the report and the resampled scene.
pub fn fit_scene(scene: &Scene, cfg: &FitConfig) -> Result<(GaussianMap, FitReport, Scene)> {
    cfg.validate()?;
    let scene = scene.with_points(cfg.n_gaussians)?;
    let mut rng = scene_rng(cfg, &scene);
    let map0 = init_elements(&scene.elements, cfg.init_noise, &mut rng)?;
    let (map, report) = fit(&map0, &scene.elements, &scene.grid, cfg)?;
    Ok((map, report, scene))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaR,
    NGaussians,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaR => "lambda_r",
            SweepParam::NGaussians => "n_gaussians",
        }
    }

    /// Copy of `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &FitConfig, value: f64) -> Result<FitConfig> {
        let mut out = cfg.clone();
        match self {
            SweepParam::LambdaR => out.weights.lambda_r = value,
            SweepParam::NGaussians => {
                if value.fract() != 0.0 || value < 2.0 {
                    return Err(Error::Config(format!(
                        "n_gaussians must be an integer >= 2, got {value}"
                    )));
                }
                out.n_gaussians = value as usize;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_r" => Ok(SweepParam::LambdaR),
            "n_gaussians" => Ok(SweepParam::NGaussians),
            _ => Err(Error::Config(format!(
                "unknown sweep parameter '{s}' (expected lambda_r or n_gaussians)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub ap_chamfer: Option<f64>,
    pub ap_raster: Option<f64>,
    pub mean_chamfer: Option<f64>,
    pub mean_hard_iou: Option<f64>,
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = v.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Fits every scene once per value and evaluates the fitted maps.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    scenes: &[Scene],
    cfg: &FitConfig,
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    eval.validate()?;
    values
        .iter()
        .map(|&value| {
            let run = param.apply(cfg, value)?;
            let fitted: Vec<(GaussianMap, FitReport, Scene)> = scenes
                .par_iter()
                .map(|s| fit_scene(s, &run))
                .collect::<Result<_>>()?;
            let maps: Vec<GaussianMap> = fitted.iter().map(|f| f.0.clone()).collect();
            let gts: Vec<Scene> = fitted.iter().map(|f| f.2.clone()).collect();
            let metrics = evaluate_maps(&maps, &gts, eval)?;
            let per_element = || fitted.iter().flat_map(|f| &f.1.final_metrics.per_element);
            Ok(SweepRow {
                value,
                ap_chamfer: metrics.ap_chamfer.mean,
                ap_raster: metrics.ap_raster.mean,
                mean_chamfer: mean_of(per_element().map(|r| r.chamfer)),
                mean_hard_iou: mean_of(per_element().map(|r| r.hard_iou)),
            })
        })
        .collect()
}
