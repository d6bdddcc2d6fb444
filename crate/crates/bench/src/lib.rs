//! Deterministic inputs for the benchmarks.

use gsmap_core::fitting::FitConfig;
use gsmap_core::gaussian::{Gaussian2D, GaussianMap, MapClass, MapElement};
use gsmap_core::raster::RasterGrid;
use gsmap_core::scene::{generate_scene, Scene, SceneSpec};

/// `count` elements of `n` Gaussians, each a gently bent 8 m stroke, laid
/// out on a 10-column lattice across the grid.
pub fn lattice_map(grid: &RasterGrid, count: usize, n: usize) -> GaussianMap {
    let rows = count.div_ceil(10);
    let (dx, dy) = (
        (grid.x_max - grid.x_min) / 10.0,
        (grid.y_max - grid.y_min) / rows as f64,
    );
    let elements = (0..count)
        .map(|k| {
            let (cx, cy) = (
                grid.x_min + dx * (k % 10) as f64 + dx / 2.0,
                grid.y_min + dy * (k / 10) as f64 + dy / 2.0,
            );
            let class = MapClass::ALL[k % 3];
            let gaussians = (0..n)
                .map(|i| {
                    let t = i as f64 / (n - 1).max(1) as f64 - 0.5;
                    let mu = [cx + 0.9 * dx * t, cy + 0.2 * dy * (3.0 * t).sin()];
                    Gaussian2D::new(mu, [0.6, 0.25], 0.3 * (3.0 * t).cos()).unwrap()
                })
                .collect();
            MapElement::new(class, gaussians)
        })
        .collect();
    GaussianMap::new(elements)
}

/// The first scene of the standard suite.
pub fn standard_scene() -> Scene {
    generate_scene(&SceneSpec::standard_suite()[0]).unwrap()
}

pub fn short_fit(iterations: usize) -> FitConfig {
    FitConfig {
        iterations,
        ..Default::default()
    }
}
