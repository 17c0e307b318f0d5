use serde::{Deserialize, Serialize};

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

/// Pinhole intrinsics; `depth_scale` converts raw depth units to meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, depth_scale: f64) -> Result<Self> {
        let intr = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            depth_scale,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "depth_scale must be positive, got {}",
                self.depth_scale
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidArgument("principal point must be finite".into()));
        }
        Ok(())
    }

    /// Symmetric intrinsics for a `width×height` sensor with the given
    /// horizontal field of view.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64, depth_scale: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            depth_scale,
        }
    }

    /// Camera-frame point on the ray through pixel `(u, v)` at depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Point3 {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }

    /// Continuous pixel coordinates of a camera-frame point with `z > 0`.
    pub fn project(&self, p: &Point3) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }
}

/// Raw 16-bit depth image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

/// 16-bit label image; 0 is background, other values identify objects.
pub type LabelImage = DepthImage;

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(DepthImage {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> u16 {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: u16) {
        self.data[v * self.width + u] = value;
    }

    /// Binary mask (1/0) of the pixels carrying `label`.
    pub fn mask_of(&self, label: u16) -> LabelImage {
        DepthImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&l| u16::from(l == label)).collect(),
        }
    }

    /// Distinct nonzero labels in ascending order.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.data.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

/// Depth in meters per pixel; 0 marks "no return".
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub meters: Vec<f64>,
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            meters: vec![0.0; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.meters[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, z: f64) {
        self.meters[v * self.width + u] = z;
    }

    /// Rounds to raw sensor units; depths beyond the 16-bit range saturate.
    pub fn quantize(&self, depth_scale: f64) -> DepthImage {
        DepthImage {
            width: self.width,
            height: self.height,
            data: self
                .meters
                .iter()
                .map(|&z| (z / depth_scale).round().clamp(0.0, u16::MAX as f64) as u16)
                .collect(),
        }
    }
}

impl DepthImage {
    pub fn to_metric(&self, depth_scale: f64) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            meters: self.data.iter().map(|&d| d as f64 * depth_scale).collect(),
        }
    }
}

/// Back-projects every masked pixel with positive depth through the pinhole
/// model: `x = (u−cx)·z/fx`, `y = (v−cy)·z/fy`, `z = d·depth_scale`.
///
/// Pixels are visited row by row; the result is in the camera frame.
pub fn backproject(
    depth: &DepthImage,
    mask: &LabelImage,
    intr: &CameraIntrinsics,
) -> Result<PointCloud> {
    intr.validate()?;
    backproject_metric(&depth.to_metric(intr.depth_scale), mask, intr)
}

/// [`backproject`] for depths already in meters.
pub fn backproject_metric(
    depth: &DepthMap,
    mask: &LabelImage,
    intr: &CameraIntrinsics,
) -> Result<PointCloud> {
    if depth.width != mask.width || depth.height != mask.height {
        return Err(Error::Shape {
            op: "backproject",
            lhs: vec![depth.height, depth.width],
            rhs: vec![mask.height, mask.width],
        });
    }
    intr.validate()?;
    if mask.data.iter().all(|&m| m == 0) {
        return Err(Error::EmptyCloud("backproject: mask selects no pixels"));
    }
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = depth.get(u, v);
            if z <= 0.0 || mask.get(u, v) == 0 {
                continue;
            }
            points.push(intr.unproject(u as f64, v as f64, z));
        }
    }
    PointCloud::camera(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 2.0, 1.0, 0.001).unwrap();
        let mut depth = DepthImage::zeros(4, 3);
        depth.set(2, 1, 1500);
        let mask = DepthImage::new(4, 3, vec![1; 12]).unwrap();
        let cloud = backproject(&depth, &mask, &intr).unwrap();
        assert_eq!(cloud.points(), &[[0.0, 0.0, 1.5]]);
    }

    #[test]
    fn pinhole_formula_example() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 1.0).unwrap();
        let mut depth = DepthImage::zeros(64, 2);
        depth.set(50, 0, 2);
        let mut mask = DepthImage::zeros(64, 2);
        mask.set(50, 0, 1);
        let cloud = backproject(&depth, &mask, &intr).unwrap();
        assert_eq!(cloud.points(), &[[1.0, 0.0, 2.0]]);
    }

    #[test]
    fn zero_depth_pixels_are_skipped() {
        let intr = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0, 1.0).unwrap();
        let depth = DepthImage::new(3, 2, vec![0, 4, 5, 0, 7, 9]).unwrap();
        let mask = DepthImage::new(3, 2, vec![1, 1, 0, 1, 1, 1]).unwrap();
        assert_eq!(backproject(&depth, &mask, &intr).unwrap().len(), 3);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let intr = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0, 1.0).unwrap();
        let depth = DepthImage::new(2, 1, vec![3, 4]).unwrap();
        let mask = DepthImage::zeros(2, 1);
        assert!(matches!(
            backproject(&depth, &mask, &intr),
            Err(Error::EmptyCloud(_))
        ));
    }

    #[test]
    fn tilted_plane_is_reproduced() {
        // plane n·p = c with n = (0.2, -0.1, 1), c = 0.8, rendered analytically per pixel ray
        let intr = CameraIntrinsics::from_fov(32, 24, 60.0, 1e-4);
        let n = [0.2, -0.1, 1.0];
        let c = 0.8;
        let mut depth = DepthMap::zeros(32, 24);
        for v in 0..24 {
            for u in 0..32 {
                let ray = intr.unproject(u as f64, v as f64, 1.0);
                let t = c / (n[0] * ray[0] + n[1] * ray[1] + n[2] * ray[2]);
                depth.set(u, v, t);
            }
        }
        let mask = DepthImage::new(32, 24, vec![1; 32 * 24]).unwrap();
        let cloud = backproject_metric(&depth, &mask, &intr).unwrap();
        assert_eq!(cloud.len(), 32 * 24);
        for p in cloud.points() {
            let r = n[0] * p[0] + n[1] * p[1] + n[2] * p[2] - c;
            assert!(r.abs() < 1e-9, "residual {r}");
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0.0).is_err());
    }
}
