//! Builds pairs from depth and label image sequences.
//!
//! For every retained frame and every known object visible in its label
//! image: back-project the masked depth pixels, drop radius outliers, unify
//! to `n` points, scale with the object model's unit-box transform and move
//! onto the centroid of the model's normalized sample.

use std::fs;
use std::path::{Path, PathBuf};

use super::pairs::{PairMeta, PairSample, PoseTag};
use super::render::NoiseSpec;
use crate::error::{Error, Result};
use crate::geometry::io::{read_intrinsics, read_pgm};
use crate::geometry::{
    backproject, center_to, farthest_point_sample, normalize_unit_box, radius_outlier_removal, Frame, PointCloud,
    DEFAULT_OUTLIER_MIN_NEIGHBORS, DEFAULT_OUTLIER_RADIUS,
};

/// A known object: its label value in the label images and a surface
/// sample of its model in the object frame (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    pub label: u16,
    pub name: String,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestedPair {
    pub pair: PairSample,
    /// The unified camera-frame observation before scaling and centering.
    pub observed: PointCloud,
    pub frame: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestOutput {
    pub pairs: Vec<IngestedPair>,
    /// Indices of frames that were read.
    pub retained_frames: Vec<usize>,
    /// Object masks that produced no usable points.
    pub skipped_empty: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestSettings {
    pub stride: usize,
    pub points: usize,
    pub outlier_radius: f64,
    pub outlier_min_neighbors: usize,
}

impl IngestSettings {
    pub fn new(stride: usize, points: usize) -> Self {
        IngestSettings {
            stride,
            points,
            outlier_radius: DEFAULT_OUTLIER_RADIUS,
            outlier_min_neighbors: DEFAULT_OUTLIER_MIN_NEIGHBORS,
        }
    }
}

/// `.pgm` files of a directory in name order.
fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads aligned depth/label frames (same file names in both directories)
/// and keeps every `stride`-th frame, starting with the first.
pub fn ingest(
    depth_dir: &Path,
    label_dir: &Path,
    intrinsics_path: &Path,
    models: &[ObjectModel],
    settings: &IngestSettings,
) -> Result<IngestOutput> {
    if settings.stride == 0 || settings.points == 0 {
        return Err(Error::InvalidArgument("stride and points must be positive".into()));
    }
    let intr = read_intrinsics(intrinsics_path)?;
    let references = models
        .iter()
        .map(|m| {
            let sample = farthest_point_sample(&m.cloud, settings.points)?;
            normalize_unit_box(&sample)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = IngestOutput::default();
    for (frame, depth_path) in list_frames(depth_dir)?.into_iter().enumerate() {
        if frame % settings.stride != 0 {
            continue;
        }
        let name = depth_path.file_name().expect("listed files have names");
        let depth = read_pgm(&depth_path)?;
        let labels = read_pgm(&label_dir.join(name))?;
        out.retained_frames.push(frame);
        let present = labels.labels();
        for (model, (complete, unit)) in models.iter().zip(&references) {
            if !present.contains(&model.label) {
                continue;
            }
            let mask = labels.mask_of(model.label);
            let raw = match backproject(&depth, &mask, &intr) {
                Ok(c) => c,
                Err(Error::EmptyCloud(_)) => {
                    out.skipped_empty += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let kept = radius_outlier_removal(&raw, settings.outlier_radius, settings.outlier_min_neighbors)?;
            if kept.is_empty() {
                out.skipped_empty += 1;
                continue;
            }
            let observed = farthest_point_sample(&kept, settings.points)?;
            let scaled = observed.map(|p| [p[0] * unit.scale, p[1] * unit.scale, p[2] * unit.scale])?;
            let partial = center_to(&scaled, complete)?.with_frame(Frame::Canonical);
            out.pairs.push(IngestedPair {
                pair: PairSample {
                    partial,
                    complete: complete.clone(),
                    pose_tag: PoseTag::Canonical,
                    object_name: model.name.clone(),
                    index: frame,
                    meta: PairMeta {
                        shape: None,
                        camera: None,
                        noise: NoiseSpec::NONE,
                        seed: 0,
                        source: Some(name.to_string_lossy().into_owned()),
                    },
                },
                observed,
                frame,
            });
        }
    }
    if out.skipped_empty > 0 {
        log::warn!("ingest: skipped {} empty object masks", out.skipped_empty);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::render::{render_depth, Camera};
    use crate::datagen::shapes::{sample_surface, ShapeFamily, ShapeSpec};
    use crate::geometry::io::{write_intrinsics, write_pgm16};
    use crate::geometry::{backproject_metric, RigidTransform};

    fn write_frames(dir: &Path, frames: usize) -> (PathBuf, PathBuf, PathBuf, Vec<ObjectModel>) {
        let camera = Camera::with_resolution(80, 60);
        let spec = ShapeSpec::reference(
            ShapeFamily::Box,
            RigidTransform::from_axis_angle([1.0, 0.5, 0.0], 0.6).with_translation([0.0, 0.0, 0.6]),
        );
        let depth_dir = dir.join("depth");
        let label_dir = dir.join("label");
        fs::create_dir_all(&depth_dir).unwrap();
        fs::create_dir_all(&label_dir).unwrap();
        for f in 0..frames {
            let r = render_depth(&spec, &camera, &NoiseSpec::NONE, 3, f as u64).unwrap();
            let name = format!("{f:06}.pgm");
            write_pgm16(&depth_dir.join(&name), &r.depth.quantize(camera.intrinsics.depth_scale)).unwrap();
            write_pgm16(&label_dir.join(&name), &r.labels).unwrap();
        }
        let intr = dir.join("intrinsics.txt");
        write_intrinsics(&intr, &camera.intrinsics).unwrap();
        let models = vec![ObjectModel {
            label: 3,
            name: "box".into(),
            cloud: sample_surface(&spec.geometry, 512, 1).unwrap(),
        }];
        (depth_dir, label_dir, intr, models)
    }

    #[test]
    fn stride_keeps_every_fifth_frame() {
        let dir = tempfile::tempdir().unwrap();
        let (d, l, i, models) = write_frames(dir.path(), 10);
        let out = ingest(&d, &l, &i, &models, &IngestSettings::new(5, 32)).unwrap();
        assert_eq!(out.retained_frames, vec![0, 5]);
        assert_eq!(out.pairs.len(), 2);
        for p in &out.pairs {
            p.pair.validate(32).unwrap();
        }
    }

    #[test]
    fn missing_intrinsics_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let (d, l, _, models) = write_frames(dir.path(), 1);
        let missing = dir.path().join("nope.txt");
        let err = ingest(&d, &l, &missing, &models, &IngestSettings::new(1, 32)).unwrap_err();
        assert!(err.to_string().contains("nope.txt"), "{err}");
    }

    #[test]
    fn quantized_round_trip_matches_memory() {
        let camera = Camera::with_resolution(80, 60);
        let spec = ShapeSpec::reference(
            ShapeFamily::Box,
            RigidTransform::from_axis_angle([1.0, 0.5, 0.0], 0.6).with_translation([0.0, 0.0, 0.6]),
        );
        let dir = tempfile::tempdir().unwrap();
        let (d, l, i, models) = write_frames(dir.path(), 1);
        let out = ingest(&d, &l, &i, &models, &IngestSettings::new(1, 64)).unwrap();
        let r = render_depth(&spec, &camera, &NoiseSpec::NONE, 3, 0).unwrap();
        let memory = backproject_metric(&r.depth, &r.labels, &camera.intrinsics).unwrap();
        let observed = &out.pairs[0].observed;
        assert_eq!(observed.len(), 64);
        // quantization to 0.1 mm moves a point by well under 0.1 mm
        for (_, d2) in crate::metrics::nearest_sq_brute(observed.points(), memory.points()) {
            assert!(d2.sqrt() < 1e-4, "{}", d2.sqrt());
        }
    }
}
