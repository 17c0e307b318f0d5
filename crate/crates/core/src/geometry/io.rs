//! On-disk formats: ASCII XYZ and binary little-endian PLY clouds, 16-bit
//! PGM images, and `key = value` text files (intrinsics, metadata).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{CameraIntrinsics, DepthImage, Frame, Point3, PointCloud};
use crate::error::{Error, Result};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One `x y z` triple per line. `f64` values are written in shortest
/// round-trip form, so reading back is exact.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in cloud.points() {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    write_all(path, out.as_bytes())
}

/// Reads an XYZ file. Blank lines and `#` comments are skipped; columns
/// beyond the third are ignored.
pub fn read_xyz(path: &Path, frame: Frame) -> Result<PointCloud> {
    let text = read_text(path)?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut p = [0.0; 3];
        let mut fields = line.split_whitespace();
        for c in &mut p {
            let field = fields.next().ok_or_else(|| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                message: "expected three coordinates".into(),
            })?;
            *c = field.parse().map_err(|e| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                message: format!("bad coordinate `{field}`: {e}"),
            })?;
        }
        points.push(p);
    }
    PointCloud::new(points, frame).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes the per-point surface ids of a decoded cloud, one per line.
pub fn write_surface_ids(path: &Path, ids: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(ids.len() * 4);
    for id in ids {
        out.push_str(&format!("{id}\n"));
    }
    write_all(path, out.as_bytes())
}

/// Vertex-only binary little-endian PLY with `double` coordinates.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(header.as_bytes())?;
    for p in cloud.points() {
        for c in p {
            write(&c.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => PlyScalar::I8,
            "uchar" | "uint8" => PlyScalar::U8,
            "short" | "int16" => PlyScalar::I16,
            "ushort" | "uint16" => PlyScalar::U16,
            "int" | "int32" => PlyScalar::I32,
            "uint" | "uint32" => PlyScalar::U32,
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::I32 | PlyScalar::U32 | PlyScalar::F32 => 4,
            PlyScalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            PlyScalar::I8 => b[0] as i8 as f64,
            PlyScalar::U8 => b[0] as f64,
            PlyScalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyScalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyScalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyScalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyScalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyScalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

/// Reads a binary little-endian PLY whose only element is `vertex` with
/// scalar `x`, `y`, `z` properties (other scalar properties are skipped).
pub fn read_ply(path: &Path, frame: Frame) -> Result<PointCloud> {
    let bytes = read_bytes(path)?;
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let body = &bytes[end + marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format(path, "not a PLY file"));
    }
    let mut count = None;
    let mut props: Vec<(String, PlyScalar)> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => {
                return Err(Error::format(path, format!("unsupported PLY format `{other}`")))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::format(path, "bad vertex count"))?,
                );
            }
            ["element", other, ..] => {
                return Err(Error::format(path, format!("unsupported element `{other}`")))
            }
            ["property", "list", ..] => {
                return Err(Error::format(path, "list properties are not supported"))
            }
            ["property", ty, name] => {
                let ty = PlyScalar::parse(ty)
                    .ok_or_else(|| Error::format(path, format!("unknown property type `{ty}`")))?;
                props.push((name.to_string(), ty));
            }
            [] => {}
            _ => return Err(Error::format(path, format!("unexpected header line `{line}`"))),
        }
    }
    let count = count.ok_or_else(|| Error::format(path, "no vertex element"))?;
    let offset_of = |axis: &str| -> Result<(usize, PlyScalar)> {
        let mut off = 0;
        for (name, ty) in &props {
            if name == axis {
                return Ok((off, *ty));
            }
            off += ty.size();
        }
        Err(Error::format(path, format!("missing `{axis}` property")))
    };
    let axes = [offset_of("x")?, offset_of("y")?, offset_of("z")?];
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    if body.len() < count * stride {
        return Err(Error::format(path, "truncated vertex data"));
    }
    let points: Vec<Point3> = body
        .chunks_exact(stride)
        .take(count)
        .map(|rec| axes.map(|(off, ty)| ty.read(&rec[off..])))
        .collect();
    PointCloud::new(points, frame).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a cloud by extension: `.ply` is binary PLY, anything else XYZ.
pub fn read_cloud(path: &Path, frame: Frame) -> Result<PointCloud> {
    if has_extension(path, "ply") {
        read_ply(path, frame)
    } else {
        read_xyz(path, frame)
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    if has_extension(path, "ply") {
        write_ply(path, cloud)
    } else {
        write_xyz(path, cloud)
    }
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Binary (P5) PGM with maxval 65535; samples are big-endian per the format.
pub fn write_pgm16(path: &Path, image: &DepthImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", image.width, image.height).into_bytes();
    out.reserve(image.data.len() * 2);
    for v in &image.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    write_all(path, &out)
}

/// Reads a binary PGM; 8-bit files (maxval < 256) are widened.
pub fn read_pgm(path: &Path) -> Result<DepthImage> {
    let bytes = read_bytes(path)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::format(path, "not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::format(path, format!("bad PGM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::format(path, "truncated PGM raster"))?;
    let data = if wide {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    DepthImage::new(width, height, data)
}

/// Parses `key = value` lines (also accepts `key: value` and `key value`).
/// Blank lines and `#` comments are skipped; duplicate keys are rejected.
pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_text(path)?;
    parse_key_values(&text).map_err(|(line, message)| Error::Parse {
        path: path.into(),
        line,
        message,
    })
}

pub fn parse_key_values(text: &str) -> std::result::Result<BTreeMap<String, String>, (usize, String)> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .or_else(|| line.split_once(char::is_whitespace))
            .ok_or_else(|| (i + 1, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err((i + 1, format!("duplicate key `{key}`")));
        }
    }
    Ok(map)
}

pub fn write_key_values<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, String)>,
) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    write_all(path, out.as_bytes())
}

const INTRINSIC_KEYS: [&str; 5] = ["fx", "fy", "cx", "cy", "depth_scale"];

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let map = read_key_values(path)?;
    if let Some(unknown) = map.keys().find(|k| !INTRINSIC_KEYS.contains(&k.as_str())) {
        return Err(Error::format(path, format!("unknown intrinsics key `{unknown}`")));
    }
    let get = |key: &str| -> Result<f64> {
        let raw = map
            .get(key)
            .ok_or_else(|| Error::format(path, format!("missing intrinsics key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::format(path, format!("bad value for `{key}`: `{raw}`")))
    };
    let intr = CameraIntrinsics {
        fx: get("fx")?,
        fy: get("fy")?,
        cx: get("cx")?,
        cy: get("cy")?,
        depth_scale: get("depth_scale")?,
    };
    intr.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(intr)
}

pub fn write_intrinsics(path: &Path, intr: &CameraIntrinsics) -> Result<()> {
    write_key_values(
        path,
        [
            ("fx", intr.fx.to_string()),
            ("fy", intr.fy.to_string()),
            ("cx", intr.cx.to_string()),
            ("cy", intr.cy.to_string()),
            ("depth_scale", intr.depth_scale.to_string()),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn clouds_round_trip_exactly(points in prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 1..50)) {
            let dir = tempfile::tempdir().unwrap();
            let cloud = PointCloud::camera(points).unwrap();
            for name in ["c.xyz", "c.ply"] {
                let path = dir.path().join(name);
                write_cloud(&path, &cloud).unwrap();
                prop_assert_eq!(&read_cloud(&path, Frame::Camera).unwrap(), &cloud);
            }
        }

        #[test]
        fn pgm_round_trips(w in 1usize..20, h in 1usize..20, seed in any::<u16>()) {
            let dir = tempfile::tempdir().unwrap();
            let data = (0..w * h).map(|i| (i as u16).wrapping_mul(257).wrapping_add(seed)).collect();
            let img = DepthImage::new(w, h, data).unwrap();
            let path = dir.path().join("d.pgm");
            write_pgm16(&path, &img).unwrap();
            prop_assert_eq!(read_pgm(&path).unwrap(), img);
        }
    }

    #[test]
    fn ply_with_float_and_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty float y\nproperty uchar red\nproperty float z\nend_header\n".to_vec();
        for (x, y, r, z) in [(1.0f32, 2.0f32, 7u8, 3.0f32), (-1.0, 0.5, 9, 0.25)] {
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.extend_from_slice(&y.to_le_bytes());
            bytes.push(r);
            bytes.extend_from_slice(&z.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let cloud = read_ply(&path, Frame::Camera).unwrap();
        assert_eq!(cloud.points(), &[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]]);
    }

    #[test]
    fn intrinsics_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intr.txt");
        let intr = CameraIntrinsics::new(525.0, 524.5, 319.5, 239.5, 0.0001).unwrap();
        write_intrinsics(&path, &intr).unwrap();
        assert_eq!(read_intrinsics(&path).unwrap(), intr);

        fs::write(&path, "fx = 1\nfy = 1\ncx = 0\ncy = 0\n").unwrap();
        let msg = read_intrinsics(&path).unwrap_err().to_string();
        assert!(msg.contains("depth_scale"), "{msg}");

        let missing = dir.path().join("nope.txt");
        let msg = read_intrinsics(&missing).unwrap_err().to_string();
        assert!(msg.contains("nope.txt"), "{msg}");
    }

    #[test]
    fn xyz_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        fs::write(&path, "0 0 0\n1 2\n").unwrap();
        match read_xyz(&path, Frame::Camera) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
