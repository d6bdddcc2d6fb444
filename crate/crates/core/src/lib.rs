//! Gaussian-sequence HD map representation.
//!
//! Each map element is an ordered sequence of anisotropic 2D Gaussians. The
//! same primitives render to a differentiable BEV occupancy mask and read out
//! directly as polyline or polygon vertices, so vector and raster objectives
//! train a single set of parameters.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fitting;
pub mod gaussian;
pub mod io;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod raster;
pub mod scene;
pub mod vector;

pub use error::{Error, Result};
pub use fitting::{
    fit, fit_scene, init_elements, sweep, FitConfig, FitReport, SweepParam, SweepRow,
};
pub use gaussian::{canonical_angle, Gaussian2D, GaussianMap, MapClass, MapElement, Point};
pub use losses::{instance_loss, InstanceLoss, LossWeights};
pub use matching::{hungarian_assign, map_loss, match_map, MapLoss, MatchResult};
pub use metrics::{ap_chamfer, ap_raster, EvalConfig, MetricsReport};
pub use raster::{render_element, render_map, render_oracle, DensityMask, RasterGrid};
pub use scene::{generate_scene, GroundTruthElement, Scene, SceneSpec};
pub use vector::{chamfer_distance, resample_uniform, vectorize, PointOrdering, Polyline};
