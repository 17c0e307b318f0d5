//! Virtual depth camera: z-buffered rendering of a dense surface sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::shapes::{sample_surface_raw, ShapeSpec};
use crate::error::{Error, Result};
use crate::geometry::{
    backproject_metric, farthest_point_sample, CameraIntrinsics, DepthMap, LabelImage, Point3, PointCloud,
    RigidTransform,
};

/// Points closer than this to the camera plane are ignored.
pub const NEAR_PLANE: f64 = 0.05;
/// Surfaces seen at a steeper angle than this (cosine between normal and
/// viewing ray) return no depth, like a real sensor at grazing incidence.
pub const GRAZING_COS: f64 = 0.3;
/// Tangent-plane depths farther than this many pixel footprints from the
/// winning sample fall back to the sample's own depth.
const MAX_PLANE_SHIFT_PX: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation of additive depth noise, meters.
    pub depth_sigma: f64,
    /// Outlier pixels as a fraction of the object's valid pixels.
    pub outlier_fraction: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            depth_sigma: 0.002,
            outlier_fraction: 0.02,
        }
    }
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec {
        depth_sigma: 0.0,
        outlier_fraction: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_sigma >= 0.0 && self.depth_sigma.is_finite()) || !(0.0..=1.0).contains(&self.outlier_fraction)
        {
            return Err(Error::InvalidArgument(format!(
                "noise needs depth_sigma >= 0 and outlier_fraction in [0, 1], got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Pinhole camera with a sensor size and a pose (camera frame → world).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub pose: RigidTransform,
}

impl Camera {
    /// 60° horizontal field of view at the origin, depth unit 0.1 mm.
    pub fn with_resolution(width: usize, height: usize) -> Self {
        Camera {
            intrinsics: CameraIntrinsics::from_fov(width, height, 60.0, 1e-4),
            width,
            height,
            pose: RigidTransform::identity(),
        }
    }

    /// Object frame → camera frame.
    pub fn object_to_camera(&self, spec: &ShapeSpec) -> RigidTransform {
        self.pose.inverse().compose(&spec.pose)
    }
}

/// Depth in meters (0 = no return) and a per-pixel object label.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    pub depth: DepthMap,
    pub labels: LabelImage,
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dense_count(spec: &ShapeSpec, camera: &Camera, distance: f64) -> usize {
    let r = spec.geometry.bounding_radius();
    let px = camera.intrinsics.fx.max(camera.intrinsics.fy) * r / distance;
    // about 16 samples per covered pixel over the whole surface
    ((64.0 * std::f64::consts::PI * px * px) as usize).clamp(4096, 2_000_000)
}

/// Renders one object into a depth map.
///
/// A dense area-uniform sample is moved into the camera frame and
/// back-facing samples are dropped (two-sided parts face whichever side the
/// camera sees). Every pixel keeps the nearest sample that lands in it; its
/// depth is where the ray through the pixel center meets that sample's
/// tangent plane, which is exact for planar surfaces. Gaussian depth noise
/// is then added and `outlier_fraction` of the pixel count is replaced by
/// clutter drawn uniformly in the object's image box and depth range.
pub fn render_depth(spec: &ShapeSpec, camera: &Camera, noise: &NoiseSpec, label: u16, seed: u64) -> Result<Rendering> {
    noise.validate()?;
    camera.intrinsics.validate()?;
    let to_cam = camera.object_to_camera(spec);
    let center = to_cam.apply([0.0; 3]);
    if center[2] + spec.geometry.bounding_radius() <= NEAR_PLANE {
        return Err(Error::InvalidArgument(format!(
            "object {} lies behind the camera",
            spec.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = dense_count(spec, camera, center[2].max(NEAR_PLANE));
    let samples = sample_surface_raw(&spec.geometry, count, rng.random())?;

    let (w, h) = (camera.width, camera.height);
    let intr = &camera.intrinsics;
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut winner: Vec<Option<(Point3, [f64; 3])>> = vec![None; w * h];
    for s in &samples {
        let p = to_cam.apply(s.point);
        if p[2] <= NEAR_PLANE {
            continue;
        }
        let mut n = to_cam.rotate(s.normal);
        let toward_camera = [-p[0], -p[1], -p[2]];
        let mut facing = dot(&n, &toward_camera);
        if facing < 0.0 && s.two_sided {
            n = [-n[0], -n[1], -n[2]];
            facing = -facing;
        }
        let dist = dot(&p, &p).sqrt();
        if facing < GRAZING_COS * dist {
            continue;
        }
        let (u, v) = intr.project(&p);
        let (ui, vi) = (u.round(), v.round());
        if ui < 0.0 || vi < 0.0 || ui >= w as f64 || vi >= h as f64 {
            continue;
        }
        let idx = vi as usize * w + ui as usize;
        if p[2] < zbuf[idx] {
            zbuf[idx] = p[2];
            winner[idx] = Some((p, n));
        }
    }

    let mut depth = DepthMap::zeros(w, h);
    let mut labels = LabelImage::zeros(w, h);
    let normal_noise = (noise.depth_sigma > 0.0).then(|| Normal::new(0.0, noise.depth_sigma).expect("validated"));
    let mut valid = 0usize;
    let (mut u_lo, mut u_hi, mut v_lo, mut v_hi) = (w, 0, h, 0);
    let (mut z_lo, mut z_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in 0..h {
        for u in 0..w {
            let Some((p, n)) = winner[v * w + u] else { continue };
            let ray = [(u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0];
            let denom = dot(&n, &ray);
            let mut z = if denom.abs() > 1e-12 { dot(&n, &p) / denom } else { p[2] };
            let footprint = p[2] / intr.fx.min(intr.fy);
            let q = [ray[0] * z, ray[1] * z, z];
            let shift = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt();
            if !(z > NEAR_PLANE) || shift > MAX_PLANE_SHIFT_PX * footprint {
                z = p[2];
            }
            if let Some(dist) = &normal_noise {
                z += dist.sample(&mut rng);
            }
            depth.set(u, v, z.max(NEAR_PLANE));
            labels.set(u, v, label);
            valid += 1;
            (u_lo, u_hi, v_lo, v_hi) = (u_lo.min(u), u_hi.max(u), v_lo.min(v), v_hi.max(v));
            (z_lo, z_hi) = (z_lo.min(z), z_hi.max(z));
        }
    }
    if valid == 0 {
        return Err(Error::EmptyCloud("render: object not visible"));
    }
    let outliers = (noise.outlier_fraction * valid as f64).round() as usize;
    let margin = 0.05;
    for _ in 0..outliers {
        let u = rng.random_range(u_lo..=u_hi);
        let v = rng.random_range(v_lo..=v_hi);
        let z = rng.random_range((z_lo - margin).max(NEAR_PLANE)..=z_hi + margin);
        depth.set(u, v, z);
        labels.set(u, v, label);
    }
    Ok(Rendering { depth, labels })
}

/// Renders, back-projects the object's pixels and unifies the result to
/// `n` points (farthest point sampling, or cyclic replication when fewer
/// pixels are visible). The cloud is in the camera frame.
pub fn render_partial(
    spec: &ShapeSpec,
    camera: &Camera,
    noise: &NoiseSpec,
    n: usize,
    seed: u64,
) -> Result<PointCloud> {
    let r = render_depth(spec, camera, noise, 1, seed)?;
    let raw = backproject_metric(&r.depth, &r.labels, &camera.intrinsics)?;
    farthest_point_sample(&raw, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::shapes::{ShapeFamily, ShapeGeometry};

    fn at(z: f64, rot: RigidTransform) -> RigidTransform {
        rot.with_translation([0.01, -0.02, z])
    }

    #[test]
    fn sphere_far_side_is_hidden() {
        let spec = ShapeSpec::reference(ShapeFamily::Sphere, at(0.5, RigidTransform::identity()));
        let camera = Camera::with_resolution(160, 120);
        let r = render_depth(&spec, &camera, &NoiseSpec::NONE, 1, 3).unwrap();
        let cloud = backproject_metric(&r.depth, &r.labels, &camera.intrinsics).unwrap();
        assert!(cloud.len() > 100);
        let c = [0.01, -0.02, 0.5];
        // independent visibility oracle: the outward normal at every
        // returned point must face the camera at the origin
        for p in cloud.points() {
            let normal = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let view = [-p[0], -p[1], -p[2]];
            assert!(dot(&normal, &view) > 0.0, "{p:?}");
        }
    }

    #[test]
    fn planar_face_is_reproduced_exactly() {
        let spec = ShapeSpec::new(
            "slab",
            ShapeGeometry::Box {
                half_extents: [0.08, 0.06, 0.01],
            },
            at(0.6, RigidTransform::identity()),
        )
        .unwrap();
        let camera = Camera::with_resolution(160, 120);
        let r = render_depth(&spec, &camera, &NoiseSpec::NONE, 1, 4).unwrap();
        let cloud = backproject_metric(&r.depth, &r.labels, &camera.intrinsics).unwrap();
        assert!(cloud.len() > 200);
        for p in cloud.points() {
            assert!((p[2] - 0.59).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn tilted_plane_stays_planar() {
        let rot = RigidTransform::from_axis_angle([1.0, 1.0, 0.0], 0.5);
        let spec = ShapeSpec::new(
            "slab",
            ShapeGeometry::Box {
                half_extents: [0.08, 0.06, 0.001],
            },
            at(0.6, rot.clone()),
        )
        .unwrap();
        let camera = Camera::with_resolution(160, 120);
        let r = render_depth(&spec, &camera, &NoiseSpec::NONE, 1, 4).unwrap();
        let cloud = backproject_metric(&r.depth, &r.labels, &camera.intrinsics).unwrap();
        let to_obj = spec.pose.inverse();
        let h = [0.08, 0.06, 0.001];
        for p in cloud.points() {
            let q = to_obj.apply(*p);
            assert!((0..3).any(|k| (q[k].abs() - h[k]).abs() < 1e-9), "{q:?}");
        }
    }

    #[test]
    fn partial_has_exact_count_and_is_reproducible() {
        let spec = ShapeSpec::reference(ShapeFamily::Mug, at(0.6, RigidTransform::from_axis_angle([0.0, 1.0, 0.0], 1.0)));
        let camera = Camera::with_resolution(160, 120);
        let a = render_partial(&spec, &camera, &NoiseSpec::default(), 256, 9).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a, render_partial(&spec, &camera, &NoiseSpec::default(), 256, 9).unwrap());
    }

    #[test]
    fn behind_camera_is_an_error() {
        let spec = ShapeSpec::reference(ShapeFamily::Box, at(-0.5, RigidTransform::identity()));
        let camera = Camera::with_resolution(160, 120);
        assert!(render_partial(&spec, &camera, &NoiseSpec::NONE, 64, 1).is_err());
    }
}
