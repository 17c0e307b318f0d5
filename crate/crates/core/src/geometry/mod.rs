//! Point-cloud primitives used to build completion datasets.
//!
//! Clouds are plain ordered lists of `[x, y, z]` triples tagged with the
//! coordinate frame they live in. Everything here is a pure function of its
//! inputs.

mod camera;
pub mod io;
pub mod spatial;
mod transform;

pub use camera::{backproject, backproject_metric, CameraIntrinsics, DepthImage, DepthMap, LabelImage};
pub use transform::RigidTransform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use spatial::UniformGrid;

pub type Point3 = [f64; 3];

/// Neighbor searches switch from all-pairs to a grid index at this size.
pub const BRUTE_FORCE_LIMIT: usize = 2000;
pub const DEFAULT_OUTLIER_RADIUS: f64 = 0.02;
pub const DEFAULT_OUTLIER_MIN_NEIGHBORS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    /// Sensor coordinates in meters.
    Camera,
    /// Object-centric coordinates; ground-truth and decoded clouds in this
    /// frame are normalized into `[-1, 1]³`.
    Canonical,
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Frame::Camera => "camera",
            Frame::Canonical => "canonical",
        })
    }
}

impl std::str::FromStr for Frame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "camera" => Ok(Frame::Camera),
            "canonical" => Ok(Frame::Canonical),
            other => Err(Error::InvalidArgument(format!("unknown frame `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    frame: Frame,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Point3>, frame: Frame) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(PointCloud { points, frame })
    }

    pub fn camera(points: Vec<Point3>) -> Result<Self> {
        Self::new(points, Frame::Camera)
    }

    pub fn canonical(points: Vec<Point3>) -> Result<Self> {
        Self::new(points, Frame::Canonical)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        Some([c[0] / n, c[1] / n, c[2] / n])
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(mut lo, mut hi), p| {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
            (lo, hi)
        }))
    }

    /// True when every coordinate lies in `[-1, 1]`.
    pub fn in_unit_box(&self) -> bool {
        self.points.iter().flatten().all(|c| (-1.0..=1.0).contains(c))
    }

    /// Row-major `n×3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(data: &[f64], frame: Frame) -> Result<Self> {
        if data.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat coordinate buffer of length {} is not a multiple of 3",
                data.len()
            )));
        }
        Self::new(
            data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            frame,
        )
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            frame: self.frame,
        }
    }

    pub fn map(&self, f: impl Fn(Point3) -> Point3) -> Result<PointCloud> {
        PointCloud::new(self.points.iter().map(|&p| f(p)).collect(), self.frame)
    }
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

/// Greedy farthest-point ordering of `k` indices starting at index 0.
///
/// Each step picks the point with the largest distance to the already
/// selected set; ties go to the lowest index.
pub fn farthest_point_indices(points: &[Point3], k: usize) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = 0;
    selected.push(current);
    min_d2[current] = f64::NEG_INFINITY;
    while selected.len() < k {
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if min_d2[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(p, &anchor);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
        min_d2[current] = f64::NEG_INFINITY;
        selected.push(current);
    }
    selected
}

/// Farthest point sampling to exactly `k` points.
///
/// When `k` exceeds the cloud size, all points are kept in selection order
/// and the remainder is filled by replicating points cyclically from
/// index 0.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("farthest_point_sample"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("farthest_point_sample: k must be ≥ 1".into()));
    }
    let n = cloud.len();
    let mut indices = farthest_point_indices(&cloud.points, k);
    if k > n {
        indices.extend((0..k - n).map(|i| i % n));
    }
    Ok(cloud.select(&indices))
}

/// Counts, for every point, the other points within `radius` (inclusive).
pub fn neighbor_counts(points: &[Point3], radius: f64) -> Vec<usize> {
    if points.len() < BRUTE_FORCE_LIMIT {
        neighbor_counts_brute(points, radius)
    } else {
        neighbor_counts_grid(points, radius)
    }
}

pub fn neighbor_counts_brute(points: &[Point3], radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    let mut counts = vec![0; points.len()];
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if dist2(&points[i], &points[j]) <= r2 {
                counts[i] += 1;
                counts[j] += 1;
            }
        }
    }
    counts
}

pub fn neighbor_counts_grid(points: &[Point3], radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    // the padded cell keeps every in-radius pair within adjacent cells despite
    // rounding in the cell-index division
    let grid = UniformGrid::new(points, radius * (1.0 + 1e-9));
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut count = 0;
            grid.for_each_candidate(p, |j| {
                if j != i && dist2(p, &points[j]) <= r2 {
                    count += 1;
                }
            });
            count
        })
        .collect()
}

/// Keeps the points that have at least `min_neighbors` other points within
/// `radius`, preserving order.
pub fn radius_outlier_removal(
    cloud: &PointCloud,
    radius: f64,
    min_neighbors: usize,
) -> Result<PointCloud> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "outlier radius must be positive, got {radius}"
        )));
    }
    if min_neighbors == 0 {
        return Ok(cloud.clone());
    }
    let counts = neighbor_counts(&cloud.points, radius);
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| counts[i] >= min_neighbors)
        .collect();
    Ok(cloud.select(&keep))
}

/// Rigidly translates `cloud` so that its centroid coincides with the
/// centroid of `reference`.
pub fn center_to(cloud: &PointCloud, reference: &PointCloud) -> Result<PointCloud> {
    let from = cloud.centroid().ok_or(Error::EmptyCloud("center_to: cloud"))?;
    let to = reference
        .centroid()
        .ok_or(Error::EmptyCloud("center_to: reference"))?;
    let shift = [to[0] - from[0], to[1] - from[1], to[2] - from[2]];
    cloud.map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
}

/// Isotropic scale and translation mapping a bounding box into `[-1, 1]³`.
///
/// Forward: `q = (p − offset) · scale`; inverse: `p = q / scale + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitBoxTransform {
    pub scale: f64,
    pub offset: Point3,
}

impl UnitBoxTransform {
    pub fn apply(&self, p: Point3) -> Point3 {
        [
            (p[0] - self.offset[0]) * self.scale,
            (p[1] - self.offset[1]) * self.scale,
            (p[2] - self.offset[2]) * self.scale,
        ]
    }

    pub fn invert(&self, q: Point3) -> Point3 {
        [
            q[0] / self.scale + self.offset[0],
            q[1] / self.scale + self.offset[1],
            q[2] / self.scale + self.offset[2],
        ]
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> Result<PointCloud> {
        cloud.map(|p| self.apply(p))
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> Result<PointCloud> {
        cloud.map(|q| self.invert(q))
    }
}

/// Centers the bounding box at the origin and scales isotropically so the
/// largest half-extent becomes 1. Degenerate clouds (zero extent) are only
/// translated.
pub fn normalize_unit_box(cloud: &PointCloud) -> Result<(PointCloud, UnitBoxTransform)> {
    let (lo, hi) = cloud
        .bounds()
        .ok_or(Error::EmptyCloud("normalize_unit_box"))?;
    let offset = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let half = (0..3)
        .map(|k| 0.5 * (hi[k] - lo[k]))
        .fold(0.0f64, f64::max);
    let scale = if half > 0.0 { 1.0 / half } else { 1.0 };
    let transform = UnitBoxTransform { scale, offset };
    let mut out = transform.apply_cloud(cloud)?;
    // rounding can push the extreme coordinates a hair past ±1
    for p in &mut out.points {
        for c in p.iter_mut() {
            *c = c.clamp(-1.0, 1.0);
        }
    }
    Ok((out, transform))
}
