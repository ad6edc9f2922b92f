//! 3D scalar volumes and the `.mvol.json` + `.raw` file pair.
//!
//! The header is a small JSON document:
//!
//! ```json
//! {"dtype":"f32le","shape":[64,128,128],"spacing_mm":[2.0,1.0,1.0],"kind":"hu","order":"zyx-row-major"}
//! ```
//!
//! The sibling raw file (`name.mvol.json` → `name.raw`) holds exactly
//! `depth * height * width` little-endian IEEE-754 `f32` values, `x` fastest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const HEADER_SUFFIX: &str = ".mvol.json";
const DTYPE: &str = "f32le";
const ORDER: &str = "zyx-row-major";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    /// Raw Hounsfield units.
    Hu,
    /// Intensities in `[0, 1]`.
    Normalized,
    /// Binary `{0, 1}`.
    Mask,
}

impl VolumeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VolumeKind::Hu => "hu",
            VolumeKind::Normalized => "normalized",
            VolumeKind::Mask => "mask",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "hu" => Some(VolumeKind::Hu),
            "normalized" => Some(VolumeKind::Normalized),
            "mask" => Some(VolumeKind::Mask),
            _ => None,
        }
    }
}

/// A `[depth, height, width]` grid of `f32` values, indexed `[z, y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing_mm: Option<[f64; 3]>,
    kind: VolumeKind,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        spacing_mm: Option<[f64; 3]>,
        kind: VolumeKind,
        data: Vec<f32>,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid!("volume shape {shape:?} has a zero extent"));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(invalid!(
                "volume shape {shape:?} needs {n} voxels, got {}",
                data.len()
            ));
        }
        if let Some(s) = spacing_mm {
            if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(invalid!("spacing {s:?} must be positive and finite"));
            }
        }
        check_values(kind, &data)?;
        Ok(Self {
            shape,
            spacing_mm,
            kind,
            data,
        })
    }

    pub fn filled(shape: [usize; 3], spacing_mm: Option<[f64; 3]>, kind: VolumeKind, value: f32) -> Result<Self> {
        Self::new(shape, spacing_mm, kind, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> Option<[f64; 3]> {
        self.spacing_mm
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn is_cubic(&self) -> bool {
        self.shape[0] == self.shape[1] && self.shape[1] == self.shape[2]
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

fn check_values(kind: VolumeKind, data: &[f32]) -> Result<()> {
    let bad = match kind {
        VolumeKind::Hu => data.iter().position(|v| v.is_infinite()),
        VolumeKind::Normalized => data.iter().position(|v| !(0.0..=1.0).contains(v)),
        VolumeKind::Mask => data.iter().position(|&v| v != 0.0 && v != 1.0),
    };
    match bad {
        Some(i) => Err(invalid!(
            "voxel {i} holds {} which is not valid for kind `{}`",
            data[i],
            kind.as_str()
        )),
        None => Ok(()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: [usize; 3],
    spacing_mm: Option<[f64; 3]>,
    kind: String,
    order: String,
}

/// Raw blob path paired with a header path.
pub fn raw_path(header_path: &Path) -> PathBuf {
    let name = header_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    match name.strip_suffix(HEADER_SUFFIX) {
        Some(stem) => header_path.with_file_name(format!("{stem}.raw")),
        None => header_path.with_extension("raw"),
    }
}

pub fn read_volume(header_path: impl AsRef<Path>) -> Result<Volume> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| Error::format(header_path, format!("bad header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(Error::format(header_path, format!("unsupported dtype `{}`", header.dtype)));
    }
    if header.order != ORDER {
        return Err(Error::format(header_path, format!("unsupported order `{}`", header.order)));
    }
    let kind = VolumeKind::parse(&header.kind)
        .ok_or_else(|| Error::format(header_path, format!("unknown kind `{}`", header.kind)))?;

    let raw = raw_path(header_path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let voxels: usize = header.shape.iter().product();
    if bytes.len() != voxels * 4 {
        return Err(Error::format(
            &raw,
            format!(
                "shape {:?} needs {} bytes, file has {}",
                header.shape,
                voxels * 4,
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if kind != VolumeKind::Hu {
        if let Some(i) = data.iter().position(|v| v.is_nan()) {
            return Err(Error::format(&raw, format!("NaN at voxel {i} in a `{}` volume", kind.as_str())));
        }
    }
    Volume::new(header.shape, header.spacing_mm, kind, data)
        .map_err(|e| Error::format(header_path, e.to_string()))
}

pub fn write_volume(v: &Volume, header_path: impl AsRef<Path>) -> Result<()> {
    let header_path = header_path.as_ref();
    if let Some(dir) = header_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let header = Header {
        dtype: DTYPE.into(),
        shape: v.shape,
        spacing_mm: v.spacing_mm,
        kind: v.kind.as_str().into(),
        order: ORDER.into(),
    };
    let text = serde_json::to_string(&header).expect("header serializes");
    fs::write(header_path, text + "\n").map_err(|e| Error::io(header_path, e))?;
    let bytes: Vec<u8> = v.data.iter().flat_map(|f| f.to_le_bytes()).collect();
    let raw = raw_path(header_path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

/// Writes each axial slice as an 8-bit binary PGM (`P5`), mapping `[0, 1]` to `[0, 255]`.
pub fn write_pgm_slices(v: &Volume, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [d, h, w] = v.shape;
    (0..d)
        .map(|z| {
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            let slice = &v.data[z * h * w..(z + 1) * h * w];
            bytes.extend(slice.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
            let path = dir.join(format!("{prefix}_z{z:03}.pgm"));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_kind_rejects_fractional_values() {
        assert!(Volume::new([1, 1, 2], None, VolumeKind::Mask, vec![0.0, 0.5]).is_err());
        assert!(Volume::new([1, 1, 2], None, VolumeKind::Mask, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn normalized_kind_rejects_out_of_range() {
        assert!(Volume::new([1, 1, 1], None, VolumeKind::Normalized, vec![1.5]).is_err());
        assert!(Volume::new([1, 1, 1], None, VolumeKind::Normalized, vec![f32::NAN]).is_err());
    }

    #[test]
    fn raw_path_pairs_with_header() {
        assert_eq!(raw_path(Path::new("a/ct.mvol.json")), Path::new("a/ct.raw"));
        assert_eq!(raw_path(Path::new("a/ct.json")), Path::new("a/ct.raw"));
    }
}
