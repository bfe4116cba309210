//! Evaluation measures: PCK, PCP, bounded average error, canonical 3D RMSE
//! with recall curves, azimuth recall and nearest-neighbour retrieval.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix3xX};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Keypoints2D};
use crate::error::{Error, Result};
use crate::skeleton::{diagonal_length, Shape3D, SkeletonSpec, StructParams};

/// Default bound for [`average_error`], in heatmap grid cells.
pub const AE_BOUND: f64 = 5.0;
/// A keypoint counts for PCP within this multiple of its tolerance.
pub const PCP_FACTOR: f64 = 1.5;
/// Default azimuth recall thresholds in degrees.
pub const AZIMUTH_DELTAS: [f64; 5] = [5.0, 10.0, 15.0, 22.5, 30.0];
/// Within this many radians of a right angle the pitch is treated as gimbal locked.
pub const GIMBAL_TOL: f64 = 1e-6;

/// Canonical RMSE thresholds `0.01, 0.02, ..., 0.20`.
pub fn rmse_thresholds() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 100.0).collect()
}

/// Thresholds with a value per threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub label: String,
}

impl CurveSeries {
    pub fn new(thresholds: Vec<f64>, values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if thresholds.len() != values.len() {
            return Err(Error::Metric("curve needs one value per threshold".into()));
        }
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Metric("curve thresholds must be strictly ascending".into()));
        }
        Ok(Self {
            thresholds,
            values,
            label: label.into(),
        })
    }

    /// `threshold,value,label` rows, without header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            let _ = writeln!(out, "{t},{v},{}", self.label);
        }
        out
    }
}

/// Serializes curves with a `threshold,value,label` header.
pub fn curves_to_csv(curves: &[CurveSeries]) -> String {
    let mut out = String::from("threshold,value,label\n");
    for c in curves {
        out.push_str(&c.csv_rows());
    }
    out
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() || thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Metric("thresholds must be non-empty and strictly ascending".into()));
    }
    Ok(())
}

fn check_pairs(pred: &[Keypoints2D], gt: &[Keypoints2D]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} ground-truth instances",
            pred.len(),
            gt.len()
        )));
    }
    if pred.iter().zip(gt).any(|(p, g)| p.n_keypoints() != g.n_keypoints()) {
        return Err(Error::Metric("prediction and ground truth differ in keypoint count".into()));
    }
    Ok(())
}

fn distances<'a>(pred: &'a [Keypoints2D], gt: &'a [Keypoints2D]) -> impl Iterator<Item = (usize, f64)> + 'a {
    pred.iter().zip(gt).enumerate().flat_map(|(inst, (p, g))| {
        (0..p.n_keypoints()).map(move |i| (inst, (p.coords.column(i) - g.coords.column(i)).norm()))
    })
}

/// Diagonal of the 2D bounding box, the per-instance PCK normalizer.
pub fn bbox_diagonal_2d(x: &Keypoints2D) -> f64 {
    let c = &x.coords;
    let span = |r: usize| {
        let row = c.row(r);
        row.max() - row.min()
    };
    span(0).hypot(span(1))
}

/// Fraction of keypoints with `distance <= r * normalizer`, for each `r`.
pub fn pck_curve(
    pred: &[Keypoints2D],
    gt: &[Keypoints2D],
    normalizers: &[f64],
    thresholds: &[f64],
) -> Result<CurveSeries> {
    check_pairs(pred, gt)?;
    check_thresholds(thresholds)?;
    if normalizers.len() != gt.len() || normalizers.iter().any(|n| !(*n > 0.0)) {
        return Err(Error::Metric("one positive normalizer per instance is required".into()));
    }
    let d: Vec<(usize, f64)> = distances(pred, gt).collect();
    if d.is_empty() {
        return Err(Error::Metric("no keypoints to evaluate".into()));
    }
    let values = thresholds
        .iter()
        .map(|r| d.iter().filter(|(inst, dist)| *dist <= r * normalizers[*inst]).count() as f64 / d.len() as f64)
        .collect();
    CurveSeries::new(thresholds.to_vec(), values, "pck")
}

/// Fraction of keypoints within `1.5 * tau` of ground truth; `tau` is per keypoint.
pub fn pcp(pred: &[Keypoints2D], gt: &[Keypoints2D], tau: &[f64]) -> Result<f64> {
    check_pairs(pred, gt)?;
    if tau.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Metric("PCP tolerances must be positive".into()));
    }
    if gt.iter().any(|g| g.n_keypoints() != tau.len()) {
        return Err(Error::Metric("one tolerance per keypoint is required".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (i, t) in tau.iter().enumerate() {
            total += 1;
            if (p.coords.column(i) - g.coords.column(i)).norm() <= PCP_FACTOR * t {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Metric("no keypoints to evaluate".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Mean of `min(distance, bound)` over all keypoints. Coordinates should be
/// in grid cells for the default bound to be meaningful.
pub fn average_error(pred: &[Keypoints2D], gt: &[Keypoints2D], bound: f64) -> Result<f64> {
    check_pairs(pred, gt)?;
    if !(bound > 0.0) {
        return Err(Error::Metric("error bound must be positive".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (_, d) in distances(pred, gt) {
        sum += d.min(bound);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("no keypoints to evaluate".into()));
    }
    Ok(sum / n as f64)
}

/// Centroid at the origin, bounding-box diagonal 1.
pub fn canonicalize(shape: &Shape3D) -> Result<Matrix3xX<f64>> {
    let diag = diagonal_length(shape);
    if !(diag > 1e-12) || !diag.is_finite() {
        return Err(Error::Metric("cannot canonicalize a degenerate shape".into()));
    }
    let mean = shape.coords.column_mean();
    let mut c = shape.coords.clone();
    for mut col in c.column_iter_mut() {
        col -= mean;
        col /= diag;
    }
    Ok(c)
}

/// RMSE over the `3N` coordinates of the two canonicalized composed shapes.
pub fn rmse_structure(pred: &StructParams, gt: &StructParams, spec: &SkeletonSpec) -> Result<f64> {
    let a = canonicalize(&spec.compose_shape(pred)?)?;
    let b = canonicalize(&spec.compose_shape(gt)?)?;
    Ok(((a - b).norm_squared() / (3 * spec.n_keypoints()) as f64).sqrt())
}

/// Fraction of values `<=` each threshold.
pub fn recall_curve(values: &[f64], thresholds: &[f64], label: impl Into<String>) -> Result<CurveSeries> {
    if values.is_empty() {
        return Err(Error::Metric("recall needs at least one value".into()));
    }
    check_thresholds(thresholds)?;
    let recall = thresholds
        .iter()
        .map(|t| values.iter().filter(|v| **v <= *t).count() as f64 / values.len() as f64)
        .collect();
    CurveSeries::new(thresholds.to_vec(), recall, label)
}

/// Recall of canonical RMSE values over a threshold grid.
pub fn rmse_recall_curve(rmse: &[f64], thresholds: &[f64]) -> Result<CurveSeries> {
    recall_curve(rmse, thresholds, "rmse_recall")
}

/// Mean of a curve's values over its threshold grid.
pub fn average_recall(curve: &CurveSeries) -> f64 {
    curve.values.iter().sum::<f64>() / curve.values.len() as f64
}

/// Azimuth of a rotation in degrees, in `[0, 360)`, with a gimbal flag.
///
/// `R` is decomposed as `Rz(roll) Rx(pitch) Ry(yaw)` and the azimuth is the
/// yaw about the object's up axis. At gimbal lock roll is set to zero and the
/// combined angle is reported as yaw.
pub fn azimuth(r: &Matrix3<f64>) -> (f64, bool) {
    let sp = r[(2, 1)].clamp(-1.0, 1.0);
    let pitch = sp.asin();
    let gimbal = (std::f64::consts::FRAC_PI_2 - pitch.abs()).abs() < GIMBAL_TOL;
    let yaw = if gimbal {
        if sp > 0.0 {
            r[(1, 0)].atan2(r[(0, 0)])
        } else {
            (-r[(1, 0)]).atan2(r[(0, 0)])
        }
    } else {
        (-r[(2, 0)]).atan2(r[(2, 2)])
    };
    (yaw.to_degrees().rem_euclid(360.0), gimbal)
}

/// Circular difference of two angles in degrees, in `[0, 180]`.
pub fn circular_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Azimuth error between two poses in degrees.
pub fn azimuth_error(pred: &CameraPose, gt: &CameraPose) -> f64 {
    circular_difference(azimuth(&pred.rotation()).0, azimuth(&gt.rotation()).0)
}

/// Fraction of azimuth errors `<= delta`.
pub fn azimuth_recall(errors: &[f64], delta: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Metric("recall needs at least one value".into()));
    }
    Ok(errors.iter().filter(|e| **e <= delta).count() as f64 / errors.len() as f64)
}

/// Retrieval distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    /// Euclidean distance between structural weights.
    ByStructure,
    /// Geodesic angle between camera rotations.
    ByViewpoint,
}

/// Rotation angle of `a^T b` in radians.
///
/// Uses `atan2(|sin|, cos)` from the skew and trace parts, which stays
/// accurate near zero where `acos` of the trace loses half the digits.
pub fn geodesic_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    let cos = (m.trace() - 1.0) / 2.0;
    let sin = 0.5
        * ((m[(2, 1)] - m[(1, 2)]).powi(2) + (m[(0, 2)] - m[(2, 0)]).powi(2) + (m[(1, 0)] - m[(0, 1)]).powi(2)).sqrt();
    sin.atan2(cos)
}

/// The `k` nearest database entries as `(index, distance)`, closest first;
/// ties go to the lower index.
pub fn retrieve_nearest(
    query: (&StructParams, &CameraPose),
    database: &[(StructParams, CameraPose)],
    mode: RetrievalMode,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if database.is_empty() {
        return Err(Error::Metric("retrieval database is empty".into()));
    }
    if k == 0 {
        return Err(Error::Metric("k must be at least 1".into()));
    }
    let qr = query.1.rotation();
    let mut scored: Vec<(usize, f64)> = database
        .iter()
        .enumerate()
        .map(|(i, (p, pose))| {
            let d = match mode {
                RetrievalMode::ByStructure => {
                    if p.len() != query.0.len() {
                        return Err(Error::Metric("structure vectors differ in length".into()));
                    }
                    p.alpha.iter().zip(&query.0.alpha).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                }
                RetrievalMode::ByViewpoint => geodesic_distance(&qr, &pose.rotation()),
            };
            Ok((i, d))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}
