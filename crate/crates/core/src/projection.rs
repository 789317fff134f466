//! Spherical range-view and bird's-eye-view rasterization.
//!
//! The range view maps each point to (inclination from +z, azimuth, radial
//! distance), bins the angles onto an H×W grid, and stores distance
//! normalized by `d_max`. Zero is reserved for "no return": a real return
//! always has d > 0, so the sentinel never collides with data. The BEV view
//! drops points straight down onto a square footprint and keeps the
//! strongest reflectance per cell.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::pointcloud::{Point, PointCloud};
use crate::tensorfile::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    /// Inclination from the +z axis, in [0, π].
    pub theta: f64,
    /// Azimuth in (−π, π].
    pub phi: f64,
    /// Radial distance, > 0.
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Equirect,
    Bev,
}

impl ImageKind {
    pub fn name(self) -> &'static str {
        match self {
            ImageKind::Equirect => "equirect",
            ImageKind::Bev => "bev",
        }
    }
}

impl fmt::Display for ImageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImageKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equirect" => Ok(ImageKind::Equirect),
            "bev" => Ok(ImageKind::Bev),
            other => Err(Error::KindMismatch { expected: "equirect or bev", got: other.into() }),
        }
    }
}

/// Everything needed to interpret a projected image, serialized alongside
/// the pixels so an image file is self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionMeta {
    /// Normalization constant: range-view pixel value = d / d_max.
    pub d_max: f64,
    /// Vertical field of view, inclination from +z.
    pub theta_min: f64,
    pub theta_max: f64,
    /// Half-width of the square BEV footprint, meters.
    pub bev_extent: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for ProjectionMeta {
    fn default() -> Self {
        ProjectionMeta::equirect_default()
    }
}

impl ProjectionMeta {
    /// 64×1024 grid spanning a typical 64-beam sensor: 2° above the horizon
    /// to 24.8° below it, ranges up to 80 m.
    pub fn equirect_default() -> Self {
        ProjectionMeta {
            d_max: 80.0,
            theta_min: PI / 2.0 - 2.0_f64.to_radians(),
            theta_max: PI / 2.0 + 24.8_f64.to_radians(),
            bev_extent: 120.0,
            height: 64,
            width: 1024,
        }
    }

    /// 1024×1024 footprint covering ±120 m around the sensor.
    pub fn bev_default() -> Self {
        ProjectionMeta { height: 1024, width: 1024, ..ProjectionMeta::equirect_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(Error::Param(format!("d_max must be positive, got {}", self.d_max)));
        }
        if !(self.theta_min < self.theta_max)
            || !self.theta_min.is_finite()
            || !self.theta_max.is_finite()
        {
            return Err(Error::Param(format!(
                "need theta_min < theta_max, got [{}, {}]",
                self.theta_min, self.theta_max
            )));
        }
        if !(self.bev_extent > 0.0 && self.bev_extent.is_finite()) {
            return Err(Error::Param(format!(
                "bev_extent must be positive, got {}",
                self.bev_extent
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Param("image resolution must be nonzero".into()));
        }
        Ok(())
    }
}

/// An H×W float grid plus the metadata to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub data: Array2<f32>,
    pub kind: ImageKind,
    pub meta: ProjectionMeta,
}

impl RangeImage {
    pub fn new(data: Array2<f32>, kind: ImageKind, meta: ProjectionMeta) -> Result<Self> {
        meta.validate()?;
        if data.dim() != (meta.height, meta.width) {
            return Err(Error::Shape(format!(
                "image is {:?} but meta says {}x{}",
                data.dim(),
                meta.height,
                meta.width
            )));
        }
        Ok(RangeImage { data, kind, meta })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().copied().collect();
        Tensor::new(vec![self.meta.height, self.meta.width], data)
            .expect("image shape matches meta by construction")
            .with_attr("kind", Value::from(self.kind.name()))
            .with_attr("meta", json!(self.meta))
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape.len() != 2 {
            return Err(Error::Shape(format!("expected an H x W tensor, got {:?}", t.shape)));
        }
        let kind: ImageKind = t.str_attr("kind")?.parse()?;
        let meta_value = t
            .attr("meta")
            .ok_or_else(|| Error::Format("image tensor is missing the meta attribute".into()))?;
        let meta: ProjectionMeta = serde_json::from_value(meta_value.clone())
            .map_err(|e| Error::Format(format!("bad image meta: {e}")))?;
        if (meta.height, meta.width) != (t.shape[0], t.shape[1]) {
            return Err(Error::Shape(format!(
                "tensor is {:?} but meta says {}x{}",
                t.shape, meta.height, meta.width
            )));
        }
        for &v in &t.data {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
            }
        }
        let data = Array2::from_shape_vec((meta.height, meta.width), t.data.clone())
            .expect("length checked by tensor reader");
        RangeImage::new(data, kind, meta)
    }
}

pub fn cartesian_to_spherical(p: &Point) -> Result<SphericalCoord> {
    let d = p.depth();
    if d == 0.0 {
        return Err(Error::DegeneratePoint);
    }
    // z/d can land just outside [-1,1] from rounding
    let theta = (p.z / d).clamp(-1.0, 1.0).acos();
    let mut phi = p.y.atan2(p.x);
    if phi == -PI {
        phi = PI;
    }
    Ok(SphericalCoord { theta, phi, d })
}

/// Inverse of `cartesian_to_spherical`. Reflectance is not part of the
/// coordinate pair, so the result carries unit intensity.
pub fn spherical_to_cartesian(s: &SphericalCoord) -> Result<Point> {
    if !(s.d > 0.0) {
        return Err(Error::DegeneratePoint);
    }
    let (st, ct) = (s.theta.sin(), s.theta.cos());
    let (sp, cp) = (s.phi.sin(), s.phi.cos());
    Ok(Point::new(s.d * st * cp, s.d * st * sp, s.d * ct, 1.0))
}

/// Rasterize ranges onto the angular grid. Each point bins to
/// row = ⌊(θ−θ_min)/(θ_max−θ_min)·H⌋, col = ⌊(φ+π)/2π·W⌋ (clamped);
/// the nearest return wins a collision and its value is d/d_max, clamped
/// to 1 beyond d_max. Points at the sensor origin have no direction and
/// are skipped.
pub fn project_equirect(cloud: &PointCloud, meta: &ProjectionMeta) -> Result<RangeImage> {
    meta.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cannot project an empty cloud"));
    }
    let (h, w) = (meta.height, meta.width);
    let span = meta.theta_max - meta.theta_min;
    let mut data = Array2::<f32>::zeros((h, w));
    for p in cloud.iter() {
        let Ok(s) = cartesian_to_spherical(p) else { continue };
        let row = (((s.theta - meta.theta_min) / span * h as f64).floor() as isize)
            .clamp(0, h as isize - 1) as usize;
        let col = ((((s.phi + PI) / TAU) * w as f64).floor() as isize).clamp(0, w as isize - 1)
            as usize;
        let value = (s.d / meta.d_max).min(1.0) as f32;
        let px = &mut data[[row, col]];
        if *px == 0.0 || value < *px {
            *px = value;
        }
    }
    Ok(RangeImage { data, kind: ImageKind::Equirect, meta: *meta })
}

/// Invert the range view: every nonzero pixel becomes one point on its
/// pixel-center ray at distance value·d_max. Pixel centers halve the worst
/// angular quantization error.
pub fn backproject_equirect(img: &RangeImage) -> Result<PointCloud> {
    if img.kind != ImageKind::Equirect {
        return Err(Error::KindMismatch { expected: "equirect", got: img.kind.name().into() });
    }
    let meta = &img.meta;
    let (h, w) = img.data.dim();
    let span = meta.theta_max - meta.theta_min;
    let mut points = Vec::new();
    for ((r, c), &v) in img.data.indexed_iter() {
        if v == 0.0 {
            continue;
        }
        let s = SphericalCoord {
            theta: meta.theta_min + (r as f64 + 0.5) / h as f64 * span,
            phi: -PI + (c as f64 + 0.5) / w as f64 * TAU,
            d: v as f64 * meta.d_max,
        };
        points.push(spherical_to_cartesian(&s)?);
    }
    Ok(PointCloud::new(points))
}

/// Top-down orthographic rasterization: row = ⌊(x+E)/2E·H⌋,
/// col = ⌊(y+E)/2E·W⌋ for points strictly inside the ±E footprint; the
/// strongest reflectance wins a cell. Out-of-footprint points are dropped.
pub fn project_bev(cloud: &PointCloud, meta: &ProjectionMeta) -> Result<RangeImage> {
    meta.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cannot project an empty cloud"));
    }
    let (h, w) = (meta.height, meta.width);
    let e = meta.bev_extent;
    let mut data = Array2::<f32>::zeros((h, w));
    for p in cloud.iter() {
        if !(p.x.abs() < e && p.y.abs() < e) {
            continue;
        }
        let row = (((p.x + e) / (2.0 * e) * h as f64).floor() as usize).min(h - 1);
        let col = (((p.y + e) / (2.0 * e) * w as f64).floor() as usize).min(w - 1);
        // reflectance contract is [0,1]; the clamp defends hand-built clouds
        let value = p.intensity.clamp(0.0, 1.0) as f32;
        let px = &mut data[[row, col]];
        if value > *px {
            *px = value;
        }
    }
    Ok(RangeImage { data, kind: ImageKind::Bev, meta: *meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn narrow_meta() -> ProjectionMeta {
        ProjectionMeta {
            theta_min: PI / 2.0 - 0.1,
            theta_max: PI / 2.0 + 0.1,
            ..ProjectionMeta::equirect_default()
        }
    }

    #[test]
    fn spherical_of_axis_points() {
        let s = cartesian_to_spherical(&Point::new(0.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!((s.theta, s.phi, s.d), (0.0, 0.0, 1.0));
        let s = cartesian_to_spherical(&Point::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!((s.theta, s.phi, s.d), (PI / 2.0, 0.0, 1.0));
    }

    #[test]
    fn spherical_of_diagonal_point() {
        let s = cartesian_to_spherical(&Point::new(1.0, 1.0, 1.0, 0.0)).unwrap();
        // cos(theta) must equal z/d = 1/sqrt(3); phi is the exact atan2(1,1)
        assert_relative_eq!(s.theta.cos(), 1.0 / 3.0_f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(s.theta, 0.955317, max_relative = 1e-6);
        assert_eq!(s.phi, PI / 4.0);
        assert_relative_eq!(s.d, 1.732051, max_relative = 1e-6);
    }

    #[test]
    fn cartesian_of_poles_and_axes() {
        let p = spherical_to_cartesian(&SphericalCoord { theta: 0.0, phi: 2.3, d: 2.0 }).unwrap();
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-15);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-15);
        assert_eq!(p.z, 2.0);
        let p = spherical_to_cartesian(&SphericalCoord { theta: PI / 2.0, phi: PI / 2.0, d: 1.0 })
            .unwrap();
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-15);
        assert_relative_eq!(p.y, 1.0, epsilon = 1e-15);
        assert_relative_eq!(p.z, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            cartesian_to_spherical(&Point::new(0.0, 0.0, 0.0, 0.5)),
            Err(Error::DegeneratePoint)
        ));
        assert!(matches!(
            spherical_to_cartesian(&SphericalCoord { theta: 1.0, phi: 0.0, d: 0.0 }),
            Err(Error::DegeneratePoint)
        ));
        assert!(matches!(
            spherical_to_cartesian(&SphericalCoord { theta: 1.0, phi: 0.0, d: -2.0 }),
            Err(Error::DegeneratePoint)
        ));
    }

    #[test]
    fn diagonal_round_trip() {
        let p0 = Point::new(1.0, 1.0, 1.0, 1.0);
        let p1 = spherical_to_cartesian(&cartesian_to_spherical(&p0).unwrap()).unwrap();
        assert_relative_eq!(p0.x, p1.x, max_relative = 1e-9);
        assert_relative_eq!(p0.y, p1.y, max_relative = 1e-9);
        assert_relative_eq!(p0.z, p1.z, max_relative = 1e-9);
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            x in -1e4f64..1e4,
            y in -1e4f64..1e4,
            z in -1e4f64..1e4,
        ) {
            let p0 = Point::new(x, y, z, 0.0);
            prop_assume!(p0.depth() > 1e-3);
            let p1 = spherical_to_cartesian(&cartesian_to_spherical(&p0).unwrap()).unwrap();
            let err = ((p0.x - p1.x).powi(2) + (p0.y - p1.y).powi(2) + (p0.z - p1.z).powi(2))
                .sqrt() / p0.depth();
            prop_assert!(err < 1e-9);
        }
    }

    #[test]
    fn single_point_on_x_axis_hits_image_center() {
        let meta = narrow_meta();
        let cloud = PointCloud::new(vec![Point::new(40.0, 0.0, 0.0, 0.9)]);
        let img = project_equirect(&cloud, &meta).unwrap();
        let nonzero: Vec<_> = img.data.indexed_iter().filter(|(_, &v)| v != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        let ((r, c), &v) = nonzero[0];
        assert_eq!((r, c), (meta.height / 2, meta.width / 2));
        assert_eq!(v, 0.5);
    }

    #[test]
    fn nearest_return_wins_collisions() {
        let meta = narrow_meta();
        let cloud = PointCloud::new(vec![
            Point::new(20.0, 0.0, 0.0, 0.0),
            Point::new(10.0, 0.0, 0.0, 0.0),
        ]);
        let img = project_equirect(&cloud, &meta).unwrap();
        assert_eq!(img.data[[meta.height / 2, meta.width / 2]], 10.0 / 80.0);
    }

    #[test]
    fn far_returns_clamp_to_one() {
        let meta = narrow_meta();
        let cloud = PointCloud::new(vec![Point::new(500.0, 0.0, 0.0, 0.0)]);
        let img = project_equirect(&cloud, &meta).unwrap();
        assert_eq!(img.data[[meta.height / 2, meta.width / 2]], 1.0);
    }

    #[test]
    fn empty_cloud_cannot_project() {
        let cloud = PointCloud::default();
        assert!(matches!(
            project_equirect(&cloud, &ProjectionMeta::equirect_default()),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            project_bev(&cloud, &ProjectionMeta::bev_default()),
            Err(Error::EmptyInput(_))
        ));
    }

    fn fov_cloud(seed: u64, n: usize, meta: &ProjectionMeta) -> PointCloud {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                let s = SphericalCoord {
                    theta: rng.random_range(meta.theta_min + 1e-6..meta.theta_max - 1e-6),
                    phi: rng.random_range(-PI + 1e-6..PI),
                    d: rng.random_range(1.0..meta.d_max),
                };
                spherical_to_cartesian(&s).unwrap()
            })
            .collect();
        PointCloud::new(points)
    }

    #[test]
    fn projection_ignores_point_order() {
        let meta = ProjectionMeta::equirect_default();
        let cloud = fov_cloud(3, 400, &meta);
        let mut shuffled = cloud.points.clone();
        shuffled.reverse();
        shuffled.rotate_left(137);
        let a = project_equirect(&cloud, &meta).unwrap();
        let b = project_equirect(&PointCloud::new(shuffled), &meta).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn backprojection_inverts_within_quantization() {
        let meta = ProjectionMeta::equirect_default();
        let cloud = fov_cloud(7, 500, &meta);
        let img = project_equirect(&cloud, &meta).unwrap();
        let recon = backproject_equirect(&img).unwrap();
        let nonzero = img.data.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(recon.len(), nonzero);

        let dtheta = (meta.theta_max - meta.theta_min) / meta.height as f64;
        let dphi = TAU / meta.width as f64;
        let dd = meta.d_max / 65536.0;
        let sources: Vec<SphericalCoord> =
            cloud.iter().map(|p| cartesian_to_spherical(p).unwrap()).collect();
        for p in recon.iter() {
            let s = cartesian_to_spherical(p).unwrap();
            let matched = sources.iter().any(|src| {
                (src.theta - s.theta).abs() <= dtheta
                    && (src.phi - s.phi).abs() <= dphi
                    && (src.d - s.d).abs() <= dd
            });
            assert!(matched, "no source point near ({}, {}, {})", s.theta, s.phi, s.d);
        }
    }

    #[test]
    fn backprojection_trivia() {
        let meta = narrow_meta();
        let img =
            RangeImage::new(Array2::zeros((meta.height, meta.width)), ImageKind::Equirect, meta)
                .unwrap();
        assert!(backproject_equirect(&img).unwrap().is_empty());

        let mut data = Array2::zeros((meta.height, meta.width));
        data[[0, 0]] = 1.0f32;
        let img = RangeImage::new(data, ImageKind::Equirect, meta).unwrap();
        let cloud = backproject_equirect(&img).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_relative_eq!(cloud.points[0].depth(), meta.d_max, max_relative = 1e-12);
    }

    #[test]
    fn backprojection_rejects_bev_images() {
        let meta = ProjectionMeta { height: 8, width: 8, ..ProjectionMeta::bev_default() };
        let img = RangeImage::new(Array2::zeros((8, 8)), ImageKind::Bev, meta).unwrap();
        assert!(matches!(
            backproject_equirect(&img),
            Err(Error::KindMismatch { expected: "equirect", .. })
        ));
    }

    #[test]
    fn bev_bins_origin_to_center_and_takes_max() {
        let meta = ProjectionMeta::bev_default();
        let cloud = PointCloud::new(vec![
            Point::new(0.0, 0.0, -1.5, 0.3),
            Point::new(0.0, 0.0, 2.0, 0.7),
        ]);
        let img = project_bev(&cloud, &meta).unwrap();
        let nonzero: Vec<_> = img.data.indexed_iter().filter(|(_, &v)| v != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        let ((r, c), &v) = nonzero[0];
        assert_eq!((r, c), (meta.height / 2, meta.width / 2));
        assert_eq!(v, 0.7);
    }

    #[test]
    fn bev_drops_boundary_and_outside_points() {
        let meta = ProjectionMeta::bev_default();
        let e = meta.bev_extent;
        let cloud = PointCloud::new(vec![
            Point::new(e, 0.0, 0.0, 0.9),
            Point::new(0.0, -e, 0.0, 0.9),
            Point::new(e + 50.0, 0.0, 0.0, 0.9),
        ]);
        let img = project_bev(&cloud, &meta).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_tensor_round_trip() {
        let meta = ProjectionMeta::equirect_default();
        let img = project_equirect(&fov_cloud(5, 100, &meta), &meta).unwrap();
        let back = RangeImage::from_tensor(&img.to_tensor()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn image_tensor_rejects_bad_metadata() {
        let meta = ProjectionMeta { height: 4, width: 4, ..ProjectionMeta::equirect_default() };
        let img = RangeImage::new(Array2::zeros((4, 4)), ImageKind::Equirect, meta).unwrap();
        let mut t = img.to_tensor();
        t.attrs.remove("kind");
        assert!(RangeImage::from_tensor(&t).is_err());

        let mut t = img.to_tensor();
        t.data[3] = 1.5;
        assert!(matches!(RangeImage::from_tensor(&t), Err(Error::Format(_))));

        let t = img.to_tensor().with_attr("kind", Value::from("voxel"));
        assert!(matches!(RangeImage::from_tensor(&t), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn meta_validation_catches_bad_fields() {
        let mut m = ProjectionMeta::equirect_default();
        m.d_max = 0.0;
        assert!(m.validate().is_err());
        let mut m = ProjectionMeta::equirect_default();
        m.theta_max = m.theta_min;
        assert!(m.validate().is_err());
        let mut m = ProjectionMeta::bev_default();
        m.bev_extent = -1.0;
        assert!(m.validate().is_err());
    }
}
