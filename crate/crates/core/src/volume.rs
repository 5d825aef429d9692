//! Volumes, lung masks and per-scan global labels.
//!
//! On disk a volume is a small JSON header next to a raw little-endian
//! payload stored x-fastest:
//!
//! ```json
//! { "dims": [96, 96, 96], "spacing_mm": [0.7, 0.7, 0.7], "dtype": "i16", "data_file": "volume.raw" }
//! ```
//!
//! Masks use the same header with `dtype` `"u8"`. Labels are a CSV with the
//! exact header `scan_id,cle,ple,pse,ne`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a label's four components.
pub const LABEL_SUM_TOL: f64 = 1e-6;

/// Scalar grid in Hounsfield units with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config(
                "spacing_mm",
                format!("all components must be positive, got {spacing_mm:?}"),
            ));
        }
        let n = voxel_count(dims);
        if data.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "volume dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, [x, y, z])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }
}

/// Binary lung mask (1 = lung).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        let n = voxel_count(dims);
        if data.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "mask dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { dims, data })
    }

    /// Mask with every voxel set to lung.
    pub fn full(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, vec![1; voxel_count(dims)])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_lung(&self, index: usize) -> bool {
        self.data[index] == 1
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, [x, y, z])
    }

    pub fn lung_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Fails unless `vol` has the same grid.
    pub fn check_pairing(&self, vol: &Volume) -> Result<()> {
        if self.dims != vol.dims() {
            return Err(Error::DimensionMismatch(format!(
                "volume dims {:?} vs mask dims {:?}",
                vol.dims(),
                self.dims
            )));
        }
        Ok(())
    }
}

/// One of the four tissue classes, in the global column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueClass {
    Cle,
    Ple,
    Pse,
    Ne,
}

impl TissueClass {
    pub const ALL: [TissueClass; 4] = [Self::Cle, Self::Ple, Self::Pse, Self::Ne];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cle => "CLE",
            Self::Ple => "PLE",
            Self::Pse => "PSE",
            Self::Ne => "NE",
        }
    }

    pub fn is_emphysema(self) -> bool {
        self != Self::Ne
    }
}

/// Extents of (CLE, PLE, PSE, NE) for one scan; a point on the 4-simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalLabel {
    pub cle: f64,
    pub ple: f64,
    pub pse: f64,
    pub ne: f64,
}

impl GlobalLabel {
    pub fn new(cle: f64, ple: f64, pse: f64, ne: f64) -> Result<Self> {
        Self::from_array([cle, ple, pse, ne])
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::validated(v, "<unnamed>")
    }

    fn validated(v: [f64; 4], scan_id: &str) -> Result<Self> {
        let reject = |reason: String| Error::InvalidLabel {
            scan_id: scan_id.to_string(),
            reason,
        };
        for (c, &x) in TissueClass::ALL.iter().zip(&v) {
            if !x.is_finite() || !(0.0..=1.0).contains(&x) {
                return Err(reject(format!("{} = {x} outside [0, 1]", c.name())));
            }
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > LABEL_SUM_TOL {
            return Err(reject(format!("components sum to {sum}")));
        }
        Ok(Self {
            cle: v[0],
            ple: v[1],
            pse: v[2],
            ne: v[3],
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cle, self.ple, self.pse, self.ne]
    }

    pub fn get(&self, class: TissueClass) -> f64 {
        self.as_array()[class.index()]
    }

    /// Total emphysema extent (everything but NE).
    pub fn emphysema_extent(&self) -> f64 {
        self.cle + self.ple + self.pse
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    I16,
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::I16 => 2,
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// JSON sidecar describing a raw payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<[f64; 3]>,
    pub dtype: String,
    pub data_file: String,
}

impl VolumeHeader {
    fn parsed_dtype(&self) -> Result<Dtype> {
        match self.dtype.as_str() {
            "i16" => Ok(Dtype::I16),
            "f32" => Ok(Dtype::F32),
            "u8" => Ok(Dtype::U8),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

fn dtype_name(d: Dtype) -> &'static str {
    match d {
        Dtype::I16 => "i16",
        Dtype::F32 => "f32",
        Dtype::U8 => "u8",
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::config(
            "dims",
            format!("all dimensions must be positive, got {dims:?}"),
        ));
    }
    Ok(())
}

#[inline]
pub(crate) fn voxel_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub(crate) fn linear_index(dims: [usize; 3], p: [usize; 3]) -> usize {
    p[0] + dims[0] * (p[1] + dims[1] * p[2])
}

#[inline]
pub(crate) fn coords(dims: [usize; 3], index: usize) -> [usize; 3] {
    let x = index % dims[0];
    let rest = index / dims[0];
    [x, rest % dims[1], rest / dims[1]]
}

fn read_header(header_path: &Path) -> Result<(VolumeHeader, Vec<u8>, PathBuf)> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::json(header_path, e))?;
    check_dims(header.dims)?;
    let dtype = header.parsed_dtype()?;
    let data_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.data_file);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = (voxel_count(header.dims) * dtype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: data_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok((header, bytes, data_path))
}

/// Reads a volume header and its payload. `i16` samples widen losslessly.
pub fn read_volume(header_path: impl AsRef<Path>) -> Result<Volume> {
    let header_path = header_path.as_ref();
    let (header, bytes, _) = read_header(header_path)?;
    let spacing = header.spacing_mm.ok_or_else(|| {
        Error::config(
            "spacing_mm",
            format!("missing from {}", header_path.display()),
        )
    })?;
    let data = match header.parsed_dtype()? {
        Dtype::I16 => bytes
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        Dtype::U8 => bytes.iter().map(|&b| f64::from(b)).collect(),
    };
    Volume::new(header.dims, spacing, data)
}

/// Writes `vol` as `<header_path>` plus a `.raw` payload beside it.
///
/// `i16` rounds to the nearest integer and saturates at the type bounds;
/// `f32` narrows.
pub fn write_volume(header_path: impl AsRef<Path>, vol: &Volume, dtype: Dtype) -> Result<()> {
    let bytes: Vec<u8> = match dtype {
        Dtype::I16 => vol
            .data()
            .iter()
            .flat_map(|&v| (v.round().clamp(-32768.0, 32767.0) as i16).to_le_bytes())
            .collect(),
        Dtype::F32 => vol
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect(),
        Dtype::U8 => return Err(Error::UnsupportedDtype("u8 volume".into())),
    };
    write_payload(
        header_path.as_ref(),
        vol.dims(),
        Some(vol.spacing_mm()),
        dtype,
        &bytes,
    )
}

pub fn read_mask(header_path: impl AsRef<Path>) -> Result<Mask> {
    let header_path = header_path.as_ref();
    let (header, bytes, _) = read_header(header_path)?;
    if header.parsed_dtype()? != Dtype::U8 {
        return Err(Error::UnsupportedDtype(format!(
            "{} (masks must be u8)",
            header.dtype
        )));
    }
    Mask::new(header.dims, bytes)
}

pub fn write_mask(header_path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    write_payload(header_path.as_ref(), mask.dims(), None, Dtype::U8, mask.data())
}

/// Writes an arbitrary u8 map (e.g. generator ids) with a mask-style header.
pub fn write_u8_map(header_path: impl AsRef<Path>, dims: [usize; 3], data: &[u8]) -> Result<()> {
    if data.len() != voxel_count(dims) {
        return Err(Error::DimensionMismatch(format!(
            "map dims {dims:?} need {} values, got {}",
            voxel_count(dims),
            data.len()
        )));
    }
    write_payload(header_path.as_ref(), dims, None, Dtype::U8, data)
}

pub fn read_u8_map(header_path: impl AsRef<Path>) -> Result<([usize; 3], Vec<u8>)> {
    let (header, bytes, _) = read_header(header_path.as_ref())?;
    Ok((header.dims, bytes))
}

fn write_payload(
    header_path: &Path,
    dims: [usize; 3],
    spacing_mm: Option<[f64; 3]>,
    dtype: Dtype,
    bytes: &[u8],
) -> Result<()> {
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad header path {}", header_path.display())))?;
    let data_file = format!("{stem}.raw");
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let data_path = dir.join(&data_file);
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    let header = VolumeHeader {
        dims,
        spacing_mm,
        dtype: dtype_name(dtype).to_string(),
        data_file,
    };
    let mut text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(header_path, e))?;
    text.push('\n');
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))
}

/// One scan of a dataset; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub scan_id: String,
    pub volume: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_map: Option<String>,
}

/// Dataset listing: scans plus the labels CSV. Unknown fields are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scans: Vec<ScanEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub const LABEL_HEADER: [&str; 5] = ["scan_id", "cle", "ple", "pse", "ne"];

/// Parses a labels CSV. Rows off the simplex are rejected.
pub fn read_labels(csv_path: impl AsRef<Path>) -> Result<Vec<(String, GlobalLabel)>> {
    let path = csv_path.as_ref();
    let csv_err = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != LABEL_HEADER {
        return Err(csv_err(format!(
            "expected header {}, got {}",
            LABEL_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        if record.len() != 5 {
            return Err(csv_err(format!("row {} has {} fields", line + 2, record.len())));
        }
        let scan_id = record[0].to_string();
        let mut v = [0.0; 4];
        for (slot, field) in v.iter_mut().zip(record.iter().skip(1)) {
            *slot = field.parse().map_err(|_| {
                csv_err(format!("row {}: `{field}` is not a number", line + 2))
            })?;
        }
        let label = GlobalLabel::validated(v, &scan_id)?;
        out.push((scan_id, label));
    }
    Ok(out)
}

pub fn write_labels(csv_path: impl AsRef<Path>, rows: &[(String, GlobalLabel)]) -> Result<()> {
    let path = csv_path.as_ref();
    let mut buf = Vec::new();
    writeln!(buf, "{}", LABEL_HEADER.join(",")).expect("write to Vec");
    for (id, l) in rows {
        writeln!(buf, "{id},{},{},{},{}", l.cle, l.ple, l.pse, l.ne).expect("write to Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
