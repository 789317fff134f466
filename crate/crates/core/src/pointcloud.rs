//! Scan loading and point-level preprocessing.
//!
//! Scans arrive either as raw binary files of packed little-endian float32
//! `(x, y, z, intensity)` records with no header, or as `.lpci` tensors of
//! shape N×4. Intensities are clamped to [0, 1] on ingest; records with a
//! non-finite coordinate are dropped so downstream geometry can assume
//! finite points.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::kdtree::KdTree;
use crate::tensorfile::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance in [0, 1].
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point { x, y, z, intensity }
    }

    /// Radial distance from the sensor origin.
    pub fn depth(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// A scan, possibly empty (an all-empty range image back-projects to an
/// empty cloud). Operations that need points report `EmptyInput`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }
}

/// Mean distance to the k nearest neighbors, per point.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub k: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    /// Neighbor count for the density estimate.
    pub k: usize,
    /// Window radius per point: radius_scale · density.
    pub radius_scale: f64,
    /// Gaussian width per point: sigma_scale · density.
    pub sigma_scale: f64,
    /// Whether the point itself contributes to its own window.
    pub include_center: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { k: 10, radius_scale: 3.0, sigma_scale: 1.0, include_center: true }
    }
}

const RECORD_BYTES: usize = 16;

/// Parse packed float32 `(x, y, z, intensity)` records.
pub fn from_raw_bytes(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.is_empty() {
        return Err(Error::Format("empty scan".into()));
    }
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "scan length {} is not a multiple of the {RECORD_BYTES}-byte record",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap()) as f64;
        let (x, y, z, intensity) = (f(0), f(1), f(2), f(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            continue;
        }
        let intensity = if intensity.is_finite() { intensity.clamp(0.0, 1.0) } else { 0.0 };
        points.push(Point { x, y, z, intensity });
    }
    if points.is_empty() {
        return Err(Error::Format("scan has no finite points".into()));
    }
    Ok(PointCloud { points })
}

pub fn to_raw_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in cloud.iter() {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn cloud_to_tensor(cloud: &PointCloud) -> Tensor {
    let mut data = Vec::with_capacity(cloud.len() * 4);
    for p in cloud.iter() {
        data.extend_from_slice(&[p.x as f32, p.y as f32, p.z as f32, p.intensity as f32]);
    }
    Tensor::new(vec![cloud.len(), 4], data)
        .expect("N x 4 layout")
        .with_attr("kind", Value::from("pointcloud"))
}

pub fn cloud_from_tensor(t: &Tensor) -> Result<PointCloud> {
    if t.shape.len() != 2 || t.shape[1] != 4 {
        return Err(Error::Shape(format!("expected an N x 4 tensor, got {:?}", t.shape)));
    }
    let mut points = Vec::with_capacity(t.shape[0]);
    for rec in t.data.chunks_exact(4) {
        let (x, y, z, intensity) = (rec[0] as f64, rec[1] as f64, rec[2] as f64, rec[3] as f64);
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            continue;
        }
        let intensity = if intensity.is_finite() { intensity.clamp(0.0, 1.0) } else { 0.0 };
        points.push(Point { x, y, z, intensity });
    }
    Ok(PointCloud { points })
}

/// Load a scan, dispatching on the file extension: `.bin` for packed raw
/// records, `.lpci` for an N×4 tensor.
pub fn load_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            from_raw_bytes(&bytes)
        }
        Some("lpci") => {
            let cloud = cloud_from_tensor(&Tensor::read(path)?)?;
            if cloud.is_empty() {
                return Err(Error::Format("scan has no finite points".into()));
            }
            Ok(cloud)
        }
        other => Err(Error::Format(format!("unsupported scan extension {other:?}"))),
    }
}

pub fn save_scan_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_raw_bytes(cloud)).map_err(|e| Error::io(path, e))
}

/// Per-point mean distance to the k nearest other points, via an exact
/// kd-tree. Needs strictly more than k points.
pub fn knn_density(cloud: &PointCloud, k: usize) -> Result<DensityEstimate> {
    if k == 0 {
        return Err(Error::Param("k must be >= 1".into()));
    }
    if cloud.len() <= k {
        return Err(Error::InsufficientPoints { have: cloud.len(), need: k });
    }
    let tree = KdTree::build(cloud.iter().map(Point::coords).collect());
    let values: Vec<f64> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let hits = tree.knn(cloud.points[i].coords(), k, Some(i));
            hits.iter().map(|(d, _)| d).sum::<f64>() / hits.len() as f64
        })
        .collect();
    Ok(DensityEstimate { k, values })
}

/// Gaussian smoothing of radial depth. Each point's window radius and
/// Gaussian width scale with its local density; weights fall off with the
/// full 3-d distance but only the depth is averaged, so every point keeps
/// its viewing direction. Points with a degenerate window (zero depth,
/// zero density, or nothing in range) pass through unchanged.
pub fn smooth_depths(
    cloud: &PointCloud,
    density: &DensityEstimate,
    cfg: &SmoothingConfig,
) -> Result<PointCloud> {
    if density.values.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "density has {} values for {} points",
            density.values.len(),
            cloud.len()
        )));
    }
    if !(cfg.radius_scale > 0.0) || !(cfg.sigma_scale > 0.0) {
        return Err(Error::Param("smoothing scales must be positive".into()));
    }
    let coords: Vec<[f64; 3]> = cloud.iter().map(Point::coords).collect();
    let depths: Vec<f64> = cloud.iter().map(Point::depth).collect();
    let tree = KdTree::build(coords.clone());

    let points: Vec<Point> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let p = cloud.points[i];
            let radius = cfg.radius_scale * density.values[i];
            let sigma = cfg.sigma_scale * density.values[i];
            if depths[i] == 0.0 || !(radius > 0.0) || !(sigma > 0.0) {
                return p;
            }
            let mut wsum = 0.0;
            let mut dsum = 0.0;
            for q in tree.within(coords[i], radius) {
                if q == i && !cfg.include_center {
                    continue;
                }
                let d2 = {
                    let dx = coords[i][0] - coords[q][0];
                    let dy = coords[i][1] - coords[q][1];
                    let dz = coords[i][2] - coords[q][2];
                    dx * dx + dy * dy + dz * dz
                };
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                wsum += w;
                dsum += w * depths[q];
            }
            if wsum == 0.0 {
                return p;
            }
            let scale = (dsum / wsum) / depths[i];
            Point { x: p.x * scale, y: p.y * scale, z: p.z * scale, intensity: p.intensity }
        })
        .collect();
    Ok(PointCloud { points })
}
