//! ROI texture descriptors. All three kinds produce 40 non-negative bins
//! summing to one.

mod dog;
mod lbp;
mod texton;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{IntensityMap, RoiPatch};

pub use dog::{
    calibrate_dog2, dog2_feature, dog_responses, gaussian_kernel, smooth, soft_histogram,
    Dog2Calibration, BASE_SIGMA, DOG_BINS, DOG_OCTAVES,
};
pub use lbp::{code_of_pattern, lbp2_feature, lbp_code, lbp_pattern, INTENSITY_BINS, LBP_CODES};
pub use texton::{
    patch_count, patch_len, sample_patch_pool, texton_counts, texton_feature,
    train_texton_codebook, train_texton_codebook_flat, TextonCodebook, PATCH_EDGE, TEXTON_COUNT,
};

pub const FEATURE_LEN: usize = 40;

/// Cap on the codebook training pool.
pub const DEFAULT_CODEBOOK_POOL: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Texton,
    Dog2,
    Lbp2,
}

impl FeatureKind {
    /// Texton and LBP2 work on linearly mapped intensities, DOG2 on the sigmoid.
    pub fn default_map(self) -> IntensityMap {
        match self {
            FeatureKind::Texton | FeatureKind::Lbp2 => IntensityMap::Linear,
            FeatureKind::Dog2 => IntensityMap::sigmoid(),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Texton => "texton",
            FeatureKind::Dog2 => "dog2",
            FeatureKind::Lbp2 => "lbp2",
        })
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "texton" => Ok(FeatureKind::Texton),
            "dog2" => Ok(FeatureKind::Dog2),
            "lbp2" => Ok(FeatureKind::Lbp2),
            other => Err(Error::config(
                "feature",
                format!("unknown kind `{other}` (texton, dog2, lbp2)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFeature {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

impl RoiFeature {
    pub fn new(kind: FeatureKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_LEN {
            return Err(Error::DimensionMismatch(format!(
                "feature has {} entries, expected {FEATURE_LEN}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid("feature entries must be finite and >= 0".into()));
        }
        Ok(Self { kind, values })
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Everything needed to turn a raw ROI into a feature at test time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub kind: FeatureKind,
    pub intensity_map: IntensityMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook: Option<TextonCodebook>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dog2_calibration: Option<Dog2Calibration>,
}

impl FeatureModel {
    /// Fits the data-dependent parts (texton codebook, DoG ranges) on
    /// training ROIs only.
    pub fn fit(
        kind: FeatureKind,
        intensity_map: IntensityMap,
        training_rois: &[&RoiPatch],
        codebook_pool: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut model = FeatureModel {
            kind,
            intensity_map,
            codebook: None,
            dog2_calibration: None,
        };
        match kind {
            FeatureKind::Texton => {
                let (pool, len) = sample_patch_pool(
                    training_rois,
                    codebook_pool,
                    crate::seed::derive(seed, "codebook-pool", 0),
                )?;
                model.codebook = Some(train_texton_codebook_flat(
                    &pool,
                    len,
                    crate::seed::derive(seed, "codebook-kmeans", 0),
                )?);
            }
            FeatureKind::Dog2 => {
                model.dog2_calibration = Some(calibrate_dog2(training_rois)?);
            }
            FeatureKind::Lbp2 => {}
        }
        Ok(model)
    }

    pub fn extract(&self, roi: &RoiPatch) -> Result<RoiFeature> {
        match self.kind {
            FeatureKind::Texton => {
                let cb = self.codebook.as_ref().ok_or_else(|| {
                    Error::Invalid("texton model has no codebook".into())
                })?;
                texton_feature(roi, cb)
            }
            FeatureKind::Dog2 => {
                let cal = self.dog2_calibration.as_ref().ok_or_else(|| {
                    Error::Invalid("dog2 model has no calibrated ranges".into())
                })?;
                dog2_feature(roi, cal)
            }
            FeatureKind::Lbp2 => lbp2_feature(roi),
        }
    }

    pub fn extract_all(&self, rois: &[&RoiPatch]) -> Result<Vec<RoiFeature>> {
        rois.par_iter().map(|r| self.extract(r)).collect()
    }
}

/// One row of a persisted feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub scan_id: String,
    pub roi_index: usize,
    pub feature: RoiFeature,
}

/// CSV with columns `scan_id,roi_index,f0..f39`.
pub fn write_feature_csv(path: impl AsRef<Path>, rows: &[FeatureRow]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write!(buf, "scan_id,roi_index").expect("write to Vec");
    for i in 0..FEATURE_LEN {
        write!(buf, ",f{i}").expect("write to Vec");
    }
    writeln!(buf).expect("write to Vec");
    for r in rows {
        write!(buf, "{},{}", r.scan_id, r.roi_index).expect("write to Vec");
        for v in &r.feature.values {
            write!(buf, ",{v}").expect("write to Vec");
        }
        writeln!(buf).expect("write to Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_csv(path: impl AsRef<Path>, kind: FeatureKind) -> Result<Vec<FeatureRow>> {
    let path = path.as_ref();
    let err = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != FEATURE_LEN + 2 {
            return Err(err(format!("row {} has {} fields", line + 2, rec.len())));
        }
        let roi_index = rec[1]
            .parse()
            .map_err(|_| err(format!("row {}: bad roi_index", line + 2)))?;
        let values = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(format!("row {}: {e}", line + 2)))?;
        rows.push(FeatureRow {
            scan_id: rec[0].to_string(),
            roi_index,
            feature: RoiFeature::new(kind, values)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureMatrixHeader {
    rows: usize,
    cols: usize,
    dtype: String,
    kind: FeatureKind,
    data_file: String,
    row_ids: Vec<(String, usize)>,
}

/// Raw little-endian f64 matrix with a JSON sidecar at `header_path`.
pub fn write_feature_raw(header_path: impl AsRef<Path>, rows: &[FeatureRow]) -> Result<()> {
    let header_path = header_path.as_ref();
    let kind = rows.first().map_or(FeatureKind::Texton, |r| r.feature.kind);
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad header path {}", header_path.display())))?;
    let data_file = format!("{stem}.f64");
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes: Vec<u8> = rows
        .iter()
        .flat_map(|r| r.feature.values.iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    let data_path = dir.join(&data_file);
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    let header = FeatureMatrixHeader {
        rows: rows.len(),
        cols: FEATURE_LEN,
        dtype: "f64".into(),
        kind,
        data_file,
        row_ids: rows.iter().map(|r| (r.scan_id.clone(), r.roi_index)).collect(),
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(header_path, e))?;
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))
}

pub fn read_feature_raw(header_path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: FeatureMatrixHeader =
        serde_json::from_str(&text).map_err(|e| Error::json(header_path, e))?;
    if header.dtype != "f64" {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    let data_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.data_file);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = (header.rows * header.cols * 8) as u64;
    if bytes.len() as u64 != expected || header.row_ids.len() != header.rows {
        return Err(Error::SizeMismatch {
            path: data_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    header
        .row_ids
        .into_iter()
        .zip(values.chunks_exact(header.cols))
        .map(|((scan_id, roi_index), v)| {
            Ok(FeatureRow {
                scan_id,
                roi_index,
                feature: RoiFeature::new(header.kind, v.to_vec())?,
            })
        })
        .collect()
}
