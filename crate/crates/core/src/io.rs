//! On-disk formats: map and scene JSON, binary PGM masks and GeoJSON
//! vector exports.
//!
//! Functions here work on strings and byte buffers; callers own the files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianMap, MapClass, Point, NUM_CLASSES};
use crate::raster::{DensityMask, RasterGrid};
use crate::scene::{GroundTruthElement, Scene};
use crate::vector::{vectorize, Polyline};

fn format_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn map_to_json(map: &GaussianMap) -> String {
    to_pretty(map)
}

/// Parses and validates a map; element topology must match its class.
pub fn map_from_json(text: &str) -> Result<GaussianMap> {
    let map: GaussianMap = serde_json::from_str(text).map_err(format_err)?;
    for (i, e) in map.elements.iter().enumerate() {
        if e.closed != e.class.is_closed() {
            return Err(Error::Format(format!(
                "element {i}: {} must have closed = {}",
                e.class,
                e.class.is_closed()
            )));
        }
        if e.gaussians.len() < 2 {
            return Err(Error::Format(format!(
                "element {i} has fewer than 2 gaussians"
            )));
        }
        e.validate(e.gaussians.len())
            .map_err(|err| Error::Format(format!("element {i}: {err}")))?;
    }
    Ok(map)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneElementFile {
    class: MapClass,
    closed: bool,
    half_width: f64,
    vertices: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    seed: u64,
    grid: RasterGrid,
    supersample: usize,
    points_per_element: usize,
    elements: Vec<SceneElementFile>,
}

/// Scene geometry only; masks and resampled points are derived on load.
pub fn scene_to_json(scene: &Scene) -> String {
    let points_per_element = scene
        .elements
        .first()
        .map_or(crate::gaussian::DEFAULT_GAUSSIANS_PER_ELEMENT, |e| {
            e.resampled.len()
        });
    to_pretty(&SceneFile {
        seed: scene.seed,
        grid: scene.grid,
        supersample: scene.supersample,
        points_per_element,
        elements: scene
            .elements
            .iter()
            .map(|e| SceneElementFile {
                class: e.class,
                closed: e.closed(),
                half_width: e.half_width,
                vertices: e.vertices.points.clone(),
            })
            .collect(),
    })
}

pub fn scene_from_json(text: &str) -> Result<Scene> {
    let f: SceneFile = serde_json::from_str(text).map_err(format_err)?;
    f.grid.validate()?;
    let elements = f
        .elements
        .into_iter()
        .map(|e| {
            GroundTruthElement::new(
                e.class,
                Polyline::new(e.vertices, e.closed)?,
                &f.grid,
                e.half_width,
                f.supersample,
                f.points_per_element,
            )
        })
        .collect::<Result<_>>()?;
    Ok(Scene {
        seed: f.seed,
        grid: f.grid,
        supersample: f.supersample,
        elements,
    })
}

/// Binary PGM (P5, maxval 255), first row at `y_min`.
pub fn encode_pgm(mask: &DensityMask) -> Vec<u8> {
    let g = &mask.grid;
    let mut out = format!("P5\n{} {}\n255\n", g.width_px, g.height_px).into_bytes();
    out.extend(mask.to_u8());
    out
}

/// Width, height and raw 8-bit samples of a P5 image with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .unwrap_or("")
                .to_string(),
        );
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!(
            "expected P5 magic, got {:?}",
            fields[0]
        )));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    if data.len() != w * h {
        return Err(Error::Format(format!(
            "expected {} samples, found {}",
            w * h,
            data.len()
        )));
    }
    Ok((w, h, data.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Geometry {
    LineString {
        coordinates: Vec<Point>,
    },
    /// Rings repeat their first vertex at the end.
    Polygon {
        coordinates: Vec<Vec<Point>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureProperties {
    pub class: MapClass,
    pub index: usize,
    pub score: [f64; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "Feature")]
pub struct Feature {
    pub geometry: Geometry,
    pub properties: FeatureProperties,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "FeatureCollection")]
pub struct FeatureCollection {
    pub features: Vec<Feature>,
}

/// GeoJSON export of the vectorized map: open elements as LineStrings,
/// closed ones as Polygons.
pub fn vectors_to_geojson(map: &GaussianMap) -> String {
    let features = map
        .elements
        .iter()
        .enumerate()
        .map(|(index, e)| {
            let poly = vectorize(e);
            let geometry = if poly.closed {
                let mut ring = poly.points;
                ring.push(ring[0]);
                Geometry::Polygon {
                    coordinates: vec![ring],
                }
            } else {
                Geometry::LineString {
                    coordinates: poly.points,
                }
            };
            Feature {
                geometry,
                properties: FeatureProperties {
                    class: e.class,
                    index,
                    score: e.score,
                },
            }
        })
        .collect();
    to_pretty(&FeatureCollection { features })
}

/// Class and polyline per feature, in file order.
pub fn vectors_from_geojson(text: &str) -> Result<Vec<(MapClass, Polyline)>> {
    let fc: FeatureCollection = serde_json::from_str(text).map_err(format_err)?;
    fc.features
        .into_iter()
        .map(|f| {
            let poly = match f.geometry {
                Geometry::LineString { coordinates } => Polyline::new(coordinates, false)?,
                Geometry::Polygon { mut coordinates } => {
                    if coordinates.len() != 1 {
                        return Err(Error::Format("polygons must have exactly one ring".into()));
                    }
                    let mut ring = coordinates.remove(0);
                    if ring.len() < 2 || ring.first() != ring.last() {
                        return Err(Error::Format("polygon ring is not closed".into()));
                    }
                    ring.pop();
                    Polyline::new(ring, true)?
                }
            };
            Ok((f.properties.class, poly))
        })
        .collect()
}
