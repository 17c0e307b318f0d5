//! Dataset directory layout:
//!
//! ```text
//! <root>/dataset.meta                      points, pair count
//! <root>/manifest.txt                      "<split> <object> <index>" per pair
//! <root>/pairs/<object>/<index>.partial.xyz
//! <root>/pairs/<object>/<index>.complete.xyz
//! <root>/pairs/<object>/<index>.meta       key = value provenance
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pairs::{is_validation, PairMeta, PairSample, PoseTag};
use super::render::{Camera, NoiseSpec};
use super::shapes::{ShapeFamily, ShapeGeometry, ShapeSpec};
use crate::error::{Error, Result};
use crate::geometry::io::{read_key_values, read_xyz, write_key_values, write_xyz};
use crate::geometry::{CameraIntrinsics, Frame, RigidTransform};

pub const MANIFEST: &str = "manifest.txt";
pub const DATASET_META: &str = "dataset.meta";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn of(object_name: &str, index: usize) -> Split {
        if is_validation(object_name, index) {
            Split::Val
        } else {
            Split::Train
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Pairs loaded from a dataset directory, grouped by split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: usize,
    pub train: Vec<PairSample>,
    pub val: Vec<PairSample>,
}

impl Dataset {
    /// Splits pairs by the name/index hash.
    pub fn from_pairs(points: usize, pairs: Vec<PairSample>) -> Self {
        let (val, train) = pairs
            .into_iter()
            .partition(|p| Split::of(&p.object_name, p.index) == Split::Val);
        Dataset { points, train, val }
    }

    pub fn split(&self, split: Split) -> &[PairSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

fn pair_stem(root: &Path, object: &str, index: usize) -> PathBuf {
    root.join("pairs").join(object).join(format!("{index:05}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn check_object_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::InvalidArgument(format!(
            "object name {name:?} must be non-empty ASCII letters, digits, '_' or '-'"
        )));
    }
    Ok(())
}

/// Writes every pair plus the manifest; pairs are written in
/// (object, index) order so the directory is byte-reproducible.
pub fn write_dataset(root: &Path, points: usize, pairs: &[PairSample]) -> Result<()> {
    let mut ordered: Vec<&PairSample> = pairs.iter().collect();
    ordered.sort_by(|a, b| (&a.object_name, a.index).cmp(&(&b.object_name, b.index)));
    let mut manifest = String::from("# split object index\n");
    for pair in ordered {
        check_object_name(&pair.object_name)?;
        pair.validate(points)?;
        let stem = pair_stem(root, &pair.object_name, pair.index);
        let dir = stem.parent().expect("stem has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_xyz(&with_suffix(&stem, ".partial.xyz"), &pair.partial)?;
        write_xyz(&with_suffix(&stem, ".complete.xyz"), &pair.complete)?;
        write_key_values(&with_suffix(&stem, ".meta"), meta_entries(pair))?;
        manifest.push_str(&format!(
            "{} {} {}\n",
            Split::of(&pair.object_name, pair.index).as_str(),
            pair.object_name,
            pair.index
        ));
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    write_key_values(
        &root.join(DATASET_META),
        [("points", points.to_string()), ("pairs", pairs.len().to_string())],
    )
}

fn meta_entries(pair: &PairSample) -> Vec<(&'static str, String)> {
    let m = &pair.meta;
    let mut e = vec![
        ("object", pair.object_name.clone()),
        ("index", pair.index.to_string()),
        ("pose_tag", pair.pose_tag.to_string()),
        ("seed", m.seed.to_string()),
        ("depth_sigma", m.noise.depth_sigma.to_string()),
        ("outlier_fraction", m.noise.outlier_fraction.to_string()),
    ];
    if let Some(source) = &m.source {
        e.push(("source", source.clone()));
    }
    if let Some(shape) = &m.shape {
        e.push(("family", shape.geometry.family().to_string()));
        e.push(("shape_name", shape.name.clone()));
        e.push(("sizes", join(&shape.geometry.sizes())));
        e.push(("object_pose", join(&shape.pose.to_row_major())));
    }
    if let Some(cam) = &m.camera {
        let i = &cam.intrinsics;
        e.push(("camera_pose", join(&cam.pose.to_row_major())));
        e.push(("intrinsics", join(&[i.fx, i.fy, i.cx, i.cy, i.depth_scale])));
        e.push(("image_size", format!("{} {}", cam.width, cam.height)));
    }
    e
}

fn parse_floats<const N: usize>(path: &Path, key: &str, raw: &str) -> Result<[f64; N]> {
    let values: Vec<f64> = raw
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("`{key}` is not a list of numbers")))?;
    values
        .try_into()
        .map_err(|_| Error::format(path, format!("`{key}` needs {N} numbers")))
}

fn read_meta(path: &Path) -> Result<(String, usize, PoseTag, PairMeta)> {
    let kv = read_key_values(path)?;
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::format(path, format!("missing key `{key}`")))
    };
    let num = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(path, format!("bad number for `{key}`")))
    };
    let object = get("object")?.clone();
    let index = get("index")?
        .parse()
        .map_err(|_| Error::format(path, "bad `index`"))?;
    let pose_tag: PoseTag = get("pose_tag")?.parse().map_err(|e: Error| Error::format(path, e.to_string()))?;
    let seed = get("seed")?.parse().map_err(|_| Error::format(path, "bad `seed`"))?;
    let noise = NoiseSpec {
        depth_sigma: num("depth_sigma")?,
        outlier_fraction: num("outlier_fraction")?,
    };
    let shape = match kv.get("family") {
        None => None,
        Some(family) => {
            let family: ShapeFamily = family.parse().map_err(|e: Error| Error::format(path, e.to_string()))?;
            let sizes: Vec<f64> = get("sizes")?
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, "bad `sizes`"))?;
            let geometry =
                ShapeGeometry::from_sizes(family, &sizes).map_err(|e| Error::format(path, e.to_string()))?;
            let pose = RigidTransform::from_row_major(&parse_floats::<12>(path, "object_pose", get("object_pose")?)?);
            Some(ShapeSpec {
                name: get("shape_name")?.clone(),
                geometry,
                pose,
            })
        }
    };
    let camera = match kv.get("camera_pose") {
        None => None,
        Some(raw) => {
            let pose = RigidTransform::from_row_major(&parse_floats::<12>(path, "camera_pose", raw)?);
            let [fx, fy, cx, cy, depth_scale] = parse_floats::<5>(path, "intrinsics", get("intrinsics")?)?;
            let [w, h] = parse_floats::<2>(path, "image_size", get("image_size")?)?;
            Some(Camera {
                intrinsics: CameraIntrinsics::new(fx, fy, cx, cy, depth_scale)
                    .map_err(|e| Error::format(path, e.to_string()))?,
                width: w as usize,
                height: h as usize,
                pose,
            })
        }
    };
    let meta = PairMeta {
        shape,
        camera,
        noise,
        seed,
        source: kv.get("source").cloned(),
    };
    Ok((object, index, pose_tag, meta))
}

/// Reads one pair by object name and index.
pub fn read_pair(root: &Path, object: &str, index: usize) -> Result<PairSample> {
    let stem = pair_stem(root, object, index);
    let meta_path = with_suffix(&stem, ".meta");
    let (object_name, meta_index, pose_tag, meta) = read_meta(&meta_path)?;
    if object_name != object || meta_index != index {
        return Err(Error::format(
            &meta_path,
            format!("metadata names {object_name}#{meta_index}, expected {object}#{index}"),
        ));
    }
    let (partial_frame, complete_frame) = match pose_tag {
        PoseTag::Canonical => (Frame::Canonical, Frame::Canonical),
        PoseTag::Arbitrary => (Frame::Camera, Frame::Camera),
    };
    Ok(PairSample {
        partial: read_xyz(&with_suffix(&stem, ".partial.xyz"), partial_frame)?,
        complete: read_xyz(&with_suffix(&stem, ".complete.xyz"), complete_frame)?,
        pose_tag,
        object_name,
        index,
        meta,
    })
}

/// Manifest entries `(split, object, index)` in file order.
pub fn read_manifest(root: &Path) -> Result<Vec<(Split, String, usize)>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.clone(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [split, object, index] = fields[..] else {
            return Err(parse_err(format!("expected `split object index`, got `{line}`")));
        };
        let split = match split {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(parse_err(format!("unknown split `{other}`"))),
        };
        let index = index
            .parse()
            .map_err(|_| parse_err(format!("bad index `{index}`")))?;
        out.push((split, object.to_string(), index));
    }
    Ok(out)
}

fn read_points(root: &Path) -> Result<usize> {
    let path = root.join(DATASET_META);
    let kv = read_key_values(&path)?;
    kv.get("points")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(&path, "missing or bad `points`"))
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let points = read_points(root)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (split, object, index) in read_manifest(root)? {
        let pair = read_pair(root, &object, index)?;
        match split {
            Split::Train => train.push(pair),
            Split::Val => val.push(pair),
        }
    }
    Ok(Dataset { points, train, val })
}

/// Result of checking a dataset directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub pairs: usize,
    pub per_split: BTreeMap<&'static str, usize>,
    pub problems: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Loads every manifest entry and checks pair invariants and split
/// assignment. Structural failures (unreadable manifest or metadata) are
/// errors; invariant violations are collected as problems.
pub fn validate_dataset(root: &Path) -> Result<ValidationReport> {
    let points = read_points(root)?;
    let mut report = ValidationReport::default();
    for (split, object, index) in read_manifest(root)? {
        report.pairs += 1;
        *report.per_split.entry(split.as_str()).or_default() += 1;
        if Split::of(&object, index) != split {
            report
                .problems
                .push(format!("{object}#{index}: listed as {} but hashes to the other split", split.as_str()));
        }
        match read_pair(root, &object, index) {
            Ok(pair) => {
                if let Err(e) = pair.validate(points) {
                    report.problems.push(e.to_string());
                }
            }
            Err(e) => report.problems.push(e.to_string()),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::pairs::{synthesize, SynthSpec};

    #[test]
    fn write_read_validate_round_trip() {
        let mut spec = SynthSpec::toy(3);
        spec.poses_per_family = 3;
        spec.points = 32;
        spec.families = vec![ShapeFamily::Box, ShapeFamily::Mug];
        let pairs = synthesize(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 32, &pairs).unwrap();
        let report = validate_dataset(dir.path()).unwrap();
        assert!(report.is_ok(), "{:?}", report.problems);
        assert_eq!(report.pairs, 6);
        let ds = read_dataset(dir.path()).unwrap();
        let mut loaded: Vec<PairSample> = ds.train.iter().chain(&ds.val).cloned().collect();
        loaded.sort_by(|a, b| (&a.object_name, a.index).cmp(&(&b.object_name, b.index)));
        let mut expected = pairs.clone();
        expected.sort_by(|a, b| (&a.object_name, a.index).cmp(&(&b.object_name, b.index)));
        assert_eq!(loaded, expected);
    }

    #[test]
    fn validator_reports_broken_pairs() {
        let mut spec = SynthSpec::toy(4);
        spec.poses_per_family = 1;
        spec.points = 16;
        spec.families = vec![ShapeFamily::Sphere];
        let pairs = synthesize(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 16, &pairs).unwrap();
        let complete = dir.path().join("pairs/sphere/00000.complete.xyz");
        fs::write(&complete, "0 0 0\n").unwrap();
        let report = validate_dataset(dir.path()).unwrap();
        assert_eq!(report.problems.len(), 1, "{:?}", report.problems);
    }
}
