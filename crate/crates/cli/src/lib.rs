//! Subcommands of the `gsmap` binary.
//!
//! Exit codes: 0 success, 2 I/O or malformed input, 3 configuration,
//! 4 numerical divergence.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use gsmap_core::fitting::{fit_scene, sweep, FitConfig, FitReport, SweepParam, SweepRow};
use gsmap_core::io::{
    encode_pgm, map_from_json, map_to_json, scene_from_json, scene_to_json, vectors_to_geojson,
};
use gsmap_core::metrics::{detections_from_map, detections_from_scene, evaluate_detections};
use gsmap_core::{
    generate_scene, render_element, Error, EvalConfig, GaussianMap, LossWeights, MetricsReport,
    Scene, SceneSpec,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const EXIT_IO: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    /// Maps a library error to its exit code, prefixed with `context`.
    pub fn from_core(context: &str, e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::Format(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: format!("{context}: {e}"),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub type CliResult<T> = Result<T, Failure>;

/// Everything a run can be configured with. Every section and field is
/// optional and defaults to the library default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub fit: FitConfig,
    pub weights: LossWeights,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Failure::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns defaults when absent.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_json(&read_text(p)?),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let ctx = |what: &'static str| move |e| Failure::from_core(what, e);
        self.scene.validate().map_err(ctx("config.scene"))?;
        self.fit_config().validate().map_err(ctx("config.fit"))?;
        self.eval.validate().map_err(ctx("config.eval"))?;
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            weights: self.weights,
            ..self.fit.clone()
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn load_scene(path: &Path) -> CliResult<Scene> {
    scene_from_json(&read_text(path)?)
        .map_err(|e| Failure::from_core(&path.display().to_string(), e))
}

/// Writes `scene_KKKK.json` plus one mask per element for `count` scenes
/// seeded `seed, seed + 1, ...`. Returns the written paths.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, count: usize) -> CliResult<Vec<PathBuf>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    ensure_dir(out)?;
    let scenes: Vec<Scene> = (0..count)
        .into_par_iter()
        .map(|k| {
            let spec = SceneSpec {
                seed: cfg.scene.seed.wrapping_add(k as u64),
                ..cfg.scene.clone()
            };
            generate_scene(&spec).map_err(|e| Failure::from_core(&format!("scene {k}"), e))
        })
        .collect::<CliResult<_>>()?;
    let mut written = Vec::new();
    for (k, scene) in scenes.iter().enumerate() {
        let path = out.join(format!("scene_{k:04}.json"));
        write_file(&path, scene_to_json(scene))?;
        written.push(path);
        for (j, e) in scene.elements.iter().enumerate() {
            let path = out.join(format!("scene_{k:04}_element_{j:02}.pgm"));
            write_file(&path, encode_pgm(&e.mask))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Loss trajectory as CSV, one row per iteration.
pub fn trajectory_csv(report: &FitReport) -> String {
    let mut csv = String::from("iteration,total,cls,vector,raster\n");
    for (i, p) in report.trajectory.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            p.total, p.cls, p.vector, p.raster
        ));
    }
    csv
}

/// Fits one scene and writes `fitted_map.json`, `report.json`,
/// `trajectory.csv`, `element_NN.pgm` and `vectors.json` into `out`.
pub fn cmd_fit(cfg: &RunConfig, scene_path: &Path, out: &Path) -> CliResult<FitReport> {
    let scene = load_scene(scene_path)?;
    let fit_cfg = cfg.fit_config();
    let (map, report, scene) =
        fit_scene(&scene, &fit_cfg).map_err(|e| Failure::from_core("fit", e))?;
    ensure_dir(out)?;
    write_file(&out.join("fitted_map.json"), map_to_json(&map))?;
    write_file(&out.join("report.json"), to_json(&report))?;
    write_file(&out.join("trajectory.csv"), trajectory_csv(&report))?;
    write_file(&out.join("vectors.json"), vectors_to_geojson(&map))?;
    for (i, e) in map.elements.iter().enumerate() {
        let mask = render_element(e, &scene.grid, fit_cfg.cutoff_sigmas)
            .map_err(|e| Failure::from_core("render", e))?;
        write_file(&out.join(format!("element_{i:02}.pgm")), encode_pgm(&mask))?;
    }
    Ok(report)
}

/// A prediction source: a fitted map, or a scene used as its own
/// prediction.
enum Prediction {
    Map(GaussianMap),
    Scene(Scene),
}

fn load_prediction(path: &Path) -> CliResult<Prediction> {
    let text = read_text(path)?;
    if let Ok(scene) = scene_from_json(&text) {
        return Ok(Prediction::Scene(scene));
    }
    map_from_json(&text)
        .map(Prediction::Map)
        .map_err(|e| Failure::from_core(&path.display().to_string(), e))
}

/// A file itself; a fit output directory's `fitted_map.json`; or the JSON
/// files of a directory in name order, where sub-directories holding a
/// `fitted_map.json` contribute that file.
fn expand(path: &Path) -> CliResult<Vec<PathBuf>> {
    if !path.is_dir() {
        if !path.exists() {
            return Err(Failure::io(format!(
                "{}: no such file or directory",
                path.display()
            )));
        }
        return Ok(vec![path.to_path_buf()]);
    }
    let fitted = path.join("fitted_map.json");
    if fitted.is_file() {
        return Ok(vec![fitted]);
    }
    let entries =
        fs::read_dir(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry
            .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?
            .path();
        if p.is_dir() {
            let inner = p.join("fitted_map.json");
            if inner.is_file() {
                out.push(inner);
            }
        } else if p.extension().is_some_and(|x| x == "json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig, pred: &Path, gt: &Path) -> CliResult<MetricsReport> {
    let pred_files = expand(pred)?;
    let gt_files = expand(gt)?;
    if pred_files.len() != gt_files.len() {
        return Err(Failure::config(format!(
            "{} prediction files for {} ground-truth scenes",
            pred_files.len(),
            gt_files.len()
        )));
    }
    let scenes: Vec<Scene> = gt_files
        .iter()
        .map(|p| load_scene(p))
        .collect::<CliResult<_>>()?;
    let mut dets = Vec::new();
    for (i, (p, scene)) in pred_files.iter().zip(&scenes).enumerate() {
        match load_prediction(p)? {
            Prediction::Scene(s) => dets.extend(detections_from_scene(&s, i)),
            Prediction::Map(m) => dets.extend(
                detections_from_map(&m, i, &scene.grid, &cfg.eval)
                    .map_err(|e| Failure::from_core(&p.display().to_string(), e))?,
            ),
        }
    }
    let gts: Vec<_> = scenes.into_iter().map(|s| s.elements).collect();
    evaluate_detections(&dets, &gts, &cfg.eval).map_err(|e| Failure::from_core("eval", e))
}

pub fn parse_values(csv: &str) -> CliResult<Vec<f64>> {
    csv.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Failure::config(format!("bad sweep value {v:?}")))
        })
        .collect()
}

/// Runs the sweep over every scene JSON in `scenes_dir` and writes
/// `sweep_<param>.csv` and `sweep_<param>.json` into `out`.
pub fn cmd_sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
    scenes_dir: &Path,
    out: &Path,
) -> CliResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Failure::config("no sweep values given"));
    }
    let scenes: Vec<Scene> = expand(scenes_dir)?
        .iter()
        .map(|p| load_scene(p))
        .collect::<CliResult<_>>()?;
    if scenes.is_empty() {
        return Err(Failure::io(format!(
            "{}: no scene files",
            scenes_dir.display()
        )));
    }
    let rows = sweep(param, values, &scenes, &cfg.fit_config(), &cfg.eval)
        .map_err(|e| Failure::from_core("sweep", e))?;
    ensure_dir(out)?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut csv = format!(
        "{},ap_chamfer,ap_raster,mean_chamfer,mean_hard_iou\n",
        param.name()
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value,
            fmt(r.ap_chamfer),
            fmt(r.ap_raster),
            fmt(r.mean_chamfer),
            fmt(r.mean_hard_iou)
        ));
    }
    write_file(&out.join(format!("sweep_{}.csv", param.name())), csv)?;
    write_file(
        &out.join(format!("sweep_{}.json", param.name())),
        to_json(&rows),
    )?;
    Ok(rows)
}

/// Sizes the global worker pool from `GSMAP_THREADS` (unset or 0: one
/// worker per core).
pub fn init_threads() -> CliResult<()> {
    let n = match std::env::var("GSMAP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Failure::config(format!("GSMAP_THREADS must be a count, got {v:?}")))?,
        Err(_) => 0,
    };
    if n > 0 {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn metrics_json(report: &MetricsReport) -> String {
    to_json(report)
}
