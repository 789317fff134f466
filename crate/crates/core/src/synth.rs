//! Procedural range scenes for demos and self-contained training runs:
//! a flat ground plane under the sensor plus a handful of axis-aligned
//! boxes, ray-cast through each pixel-center direction of the angular grid.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::projection::{ImageKind, ProjectionMeta, RangeImage};
use crate::Result;

/// Axis-aligned box, world coordinates, sensor at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Nearest positive ray parameter for origin + t·dir against the box, by
/// the slab method. Returns None on a miss.
fn ray_box(dir: [f64; 3], b: &Box3) -> Option<f64> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for axis in 0..3 {
        let d = dir[axis];
        if d.abs() < 1e-12 {
            // parallel ray misses unless the origin sits inside the slab
            if 0.0 < b.min[axis] || 0.0 > b.max[axis] {
                return None;
            }
            continue;
        }
        let t1 = b.min[axis] / d;
        let t2 = b.max[axis] / d;
        t_enter = t_enter.max(t1.min(t2));
        t_exit = t_exit.min(t1.max(t2));
    }
    if t_exit < t_enter || t_exit <= 0.0 {
        return None;
    }
    Some(if t_enter > 0.0 { t_enter } else { t_exit })
}

/// Ray-cast the scene onto the angular grid. Each pixel fires one ray
/// through its center; the nearest hit within d_max writes d/d_max, and
/// rays that escape (sky, or ground beyond range) leave the no-return zero.
/// The ground is the plane z = −sensor_height.
pub fn render_scene(
    meta: &ProjectionMeta,
    boxes: &[Box3],
    sensor_height: f64,
) -> Result<RangeImage> {
    meta.validate()?;
    let (h, w) = (meta.height, meta.width);
    let span = meta.theta_max - meta.theta_min;
    let mut data = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        let theta = meta.theta_min + (r as f64 + 0.5) / h as f64 * span;
        let (st, ct) = (theta.sin(), theta.cos());
        for c in 0..w {
            let phi = -std::f64::consts::PI + (c as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
            let dir = [st * phi.cos(), st * phi.sin(), ct];
            let mut best = f64::INFINITY;
            if dir[2] < 0.0 {
                best = -sensor_height / dir[2];
            }
            for b in boxes {
                if let Some(t) = ray_box(dir, b) {
                    best = best.min(t);
                }
            }
            if best <= meta.d_max {
                data[[r, c]] = (best / meta.d_max) as f32;
            }
        }
    }
    RangeImage::new(data, ImageKind::Equirect, *meta)
}

/// Random scene drawn from the seed: the sensor rides 1.5–2.5 m above the
/// ground (so the ground band shifts continuously from scene to scene) with
/// 2–6 boxes resting on the plane, placed 4–28 m out, footprints 0.8–4 m,
/// heights 0.5–3.5 m. Same seed, same image.
pub fn toy_range_image(meta: &ProjectionMeta, seed: u64) -> Result<RangeImage> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sensor_height: f64 = rng.random_range(1.5..2.5);
    let n = rng.random_range(2..=6);
    let boxes: Vec<Box3> = (0..n)
        .map(|_| {
            let radius: f64 = rng.random_range(4.0..28.0);
            let bearing: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (cx, cy) = (radius * bearing.cos(), radius * bearing.sin());
            let half_x: f64 = rng.random_range(0.4..2.0);
            let half_y: f64 = rng.random_range(0.4..2.0);
            let height: f64 = rng.random_range(0.5..3.5);
            Box3 {
                min: [cx - half_x, cy - half_y, -sensor_height],
                max: [cx + half_x, cy + half_y, -sensor_height + height],
            }
        })
        .collect();
    render_scene(meta, &boxes, sensor_height)
}
