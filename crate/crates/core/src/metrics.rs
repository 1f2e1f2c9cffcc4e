//! Evaluation metrics: RMSE against annotated normals, the Chamfer Normal
//! Distance against nearest-clean-twin normals, and sign agreement.
//!
//! Angles accumulate in radians and are reported in degrees. Unoriented mode
//! clamps per-point angles to [0, 90] degrees, oriented mode to [0, 180].

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, SpatialIndex};
use crate::orient::OrientedNormalField;

/// Map from noisy point index to its nearest clean point index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correspondence {
    pub clean_index: Vec<usize>,
}

/// Exact nearest clean point per noisy point; ties broken by lowest index.
pub fn nearest_clean(noisy: &PointCloud, clean: &PointCloud) -> Result<Correspondence> {
    if clean.is_empty() {
        return Err(Error::EmptyInput("clean cloud is empty"));
    }
    let index = SpatialIndex::build(&clean.points)?;
    let clean_index = noisy
        .points
        .iter()
        .map(|p| Ok(index.knn(p, 1)?[0].0))
        .collect::<Result<Vec<usize>>>()?;
    Ok(Correspondence { clean_index })
}

fn checked_unit(pred: &Vector3<f64>, i: usize) -> Result<Vector3<f64>> {
    let norm = pred.norm();
    if (norm - 1.0).abs() <= 1e-3 {
        Ok(pred / norm)
    } else {
        Err(Error::NonFinite(format!(
            "prediction {} is not unit length (|n| = {})",
            i, norm
        )))
    }
}

fn angle_rad(cos: f64, oriented: bool) -> f64 {
    let c = if oriented { cos } else { cos.abs() };
    c.clamp(-1.0, 1.0).acos()
}

fn rms_degrees(angles: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for a in angles {
        sum += a * a;
        n += 1;
    }
    (sum / n as f64).sqrt().to_degrees()
}

/// Per-point CND angles in degrees (the `.err` export payload).
pub fn cnd_angles(
    pred: &[Vector3<f64>],
    noisy: &PointCloud,
    clean: &PointCloud,
    oriented: bool,
) -> Result<Vec<f64>> {
    if pred.len() != noisy.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs noisy cloud".into(),
            left: pred.len(),
            right: noisy.len(),
        });
    }
    let gt = clean.gt_normals.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("clean cloud '{}' has no normals", clean.name))
    })?;
    let corr = nearest_clean(noisy, clean)?;
    pred.iter()
        .enumerate()
        .map(|(i, p)| {
            let p = checked_unit(p, i)?;
            let cos = gt[corr.clean_index[i]].dot(&p);
            Ok(angle_rad(cos, oriented).to_degrees())
        })
        .collect()
}

/// Chamfer Normal Distance in degrees: RMS angle between each prediction and
/// the ground-truth normal of the noisy point's nearest clean twin.
pub fn cnd(
    pred: &[Vector3<f64>],
    noisy: &PointCloud,
    clean: &PointCloud,
    oriented: bool,
) -> Result<f64> {
    let angles = cnd_angles(pred, noisy, clean, oriented)?;
    Ok(rms_degrees(angles.iter().map(|d| d.to_radians())))
}

/// RMSE in degrees against the annotated (possibly stale) normals of the
/// evaluated cloud itself.
pub fn rmse(pred: &[Vector3<f64>], gt_normals: &[Vector3<f64>], oriented: bool) -> Result<f64> {
    if pred.len() != gt_normals.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs ground-truth normals".into(),
            left: pred.len(),
            right: gt_normals.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("rmse over empty prediction set"));
    }
    let angles: Vec<f64> = pred
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let p = checked_unit(p, i)?;
            Ok(angle_rad(gt_normals[i].dot(&p), oriented))
        })
        .collect::<Result<_>>()?;
    Ok(rms_degrees(angles.into_iter()))
}

/// Fraction of predictions whose dot product with the clean twin's normal is
/// positive.
pub fn sign_agreement(
    field: &OrientedNormalField,
    clean: &PointCloud,
    corr: &Correspondence,
) -> Result<f64> {
    let gt = clean.gt_normals.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("clean cloud '{}' has no normals", clean.name))
    })?;
    if field.normals.len() != corr.clean_index.len() {
        return Err(Error::LengthMismatch {
            what: "field vs correspondence".into(),
            left: field.normals.len(),
            right: corr.clean_index.len(),
        });
    }
    let agree = field
        .normals
        .iter()
        .zip(&corr.clean_index)
        .filter(|(n, &ci)| n.dot(&gt[ci]) > 0.0)
        .count();
    Ok(agree as f64 / field.normals.len() as f64)
}

/// One evaluated category.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CategoryRecord {
    pub category: String,
    pub rmse_deg: f64,
    pub cnd_deg: f64,
    pub oriented_rmse_deg: f64,
    pub oriented_cnd_deg: f64,
    pub sign_agreement_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    /// Empty when not requested, for byte-reproducible reports.
    pub timestamp: String,
    pub categories: Vec<CategoryRecord>,
    pub average: CategoryRecord,
}

impl EvalReport {
    pub fn from_categories(
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        timestamp: impl Into<String>,
        categories: Vec<CategoryRecord>,
    ) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::EmptyInput("report with no categories"));
        }
        let n = categories.len() as f64;
        let mut avg = CategoryRecord {
            category: "average".into(),
            rmse_deg: 0.0,
            cnd_deg: 0.0,
            oriented_rmse_deg: 0.0,
            oriented_cnd_deg: 0.0,
            sign_agreement_ratio: 0.0,
        };
        for c in &categories {
            avg.rmse_deg += c.rmse_deg / n;
            avg.cnd_deg += c.cnd_deg / n;
            avg.oriented_rmse_deg += c.oriented_rmse_deg / n;
            avg.oriented_cnd_deg += c.oriented_cnd_deg / n;
            avg.sign_agreement_ratio += c.sign_agreement_ratio / n;
        }
        Ok(Self {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            timestamp: timestamp.into(),
            categories,
            average: avg,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("report serialization: {}", e)))
    }

    /// Aligned-column plain-text table: one row per category plus the average.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "model: {}  dataset: {}\n",
            self.model_id, self.dataset_id
        ));
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>12} {:>12} {:>8}\n",
            "category", "RMSE", "CND", "o-RMSE", "o-CND", "sign"
        ));
        for c in self.categories.iter().chain(std::iter::once(&self.average)) {
            out.push_str(&format!(
                "{:<12} {:>10.2} {:>10.2} {:>12.2} {:>12.2} {:>8.3}\n",
                c.category,
                c.rmse_deg,
                c.cnd_deg,
                c.oriented_rmse_deg,
                c.oriented_cnd_deg,
                c.sign_agreement_ratio
            ));
        }
        out
    }
}
