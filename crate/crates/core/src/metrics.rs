//! ADD / ADD-S pose errors and the threshold-accuracy area under the curve.

use nalgebra::Vector3;

use crate::error::{PoseError, Result};
use crate::geometry::Pose;

/// Default upper threshold for [`auc_threshold`], in meters.
pub const DEFAULT_MAX_THRESHOLD: f64 = 0.1;

/// Nonempty model point set with its diameter (largest pairwise distance).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoints {
    points: Vec<Vector3<f64>>,
    diameter: f64,
}

impl ModelPoints {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(PoseError::Validation("model has no points".into()));
        }
        if points.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(PoseError::Validation("model has a non-finite point".into()));
        }
        let mut diameter = 0.0f64;
        for (i, p) in points.iter().enumerate() {
            for q in &points[i + 1..] {
                diameter = diameter.max((p - q).norm());
            }
        }
        if diameter <= 0.0 {
            return Err(PoseError::Validation("model diameter is zero".into()));
        }
        Ok(Self { points, diameter })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }
}

/// Mean distance between corresponding model points under the two poses.
pub fn add(est: &Pose, gt: &Pose, m: &ModelPoints) -> f64 {
    let (re, rg) = (est.rotation_matrix(), gt.rotation_matrix());
    let dt = est.translation - gt.translation;
    running_mean(m.points().iter().map(|p| (re.apply(p) - rg.apply(p) + dt).norm()))
}

/// Mean distance from each estimated point to the closest ground-truth point.
pub fn add_s(est: &Pose, gt: &Pose, m: &ModelPoints) -> f64 {
    let (re, rg) = (est.rotation_matrix(), gt.rotation_matrix());
    let dt = est.translation - gt.translation;
    // same per-pair expression as `add`, so the q = p candidate matches it bitwise
    let rotated_gt: Vec<Vector3<f64>> = m.points().iter().map(|q| rg.apply(q)).collect();
    running_mean(m.points().iter().map(|p| {
        let e = re.apply(p);
        rotated_gt
            .iter()
            .map(|g| (e - g + dt).norm())
            .fold(f64::INFINITY, f64::min)
    }))
}

/// Incremental mean; a constant sequence yields that constant exactly.
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (i, v) in values.enumerate() {
        mean += (v - mean) / (i + 1) as f64;
    }
    mean
}

fn check_errors(errors: &[f64], max_threshold: f64) -> Result<()> {
    if !(max_threshold > 0.0 && max_threshold.is_finite()) {
        return Err(PoseError::Validation(format!(
            "max threshold must be positive (got {max_threshold})"
        )));
    }
    if errors.is_empty() {
        return Err(PoseError::Validation("no errors to integrate".into()));
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(PoseError::Validation("errors must be non-negative".into()));
    }
    Ok(())
}

/// Area under the accuracy-vs-threshold curve on `[0, max_threshold]`,
/// divided by `max_threshold`.
///
/// The accuracy curve is a step function rising by `1/n` at each sorted
/// error, so the area is summed exactly segment by segment.
pub fn auc_threshold(errors: &[f64], max_threshold: f64) -> Result<f64> {
    check_errors(errors, max_threshold)?;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut area = 0.0;
    for (i, &e) in sorted.iter().enumerate() {
        if e >= max_threshold {
            break;
        }
        let next = sorted.get(i + 1).map_or(max_threshold, |&x| x.min(max_threshold));
        area += (i + 1) as f64 / n * (next - e);
    }
    Ok((area / max_threshold).clamp(0.0, 1.0))
}

/// Fraction of errors strictly below `threshold`.
pub fn accuracy_at(errors: &[f64], threshold: f64) -> Result<f64> {
    check_errors(errors, threshold)?;
    Ok(errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64)
}
