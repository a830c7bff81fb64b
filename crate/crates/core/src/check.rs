//! Self-verification suites: brute-force, finite-difference and
//! construction-anchor oracles run against the production code paths.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::attention::{attention_map, nonlocal_bruteforce, nonlocal_forward, nonlocal_grad_check, FeatureMap, NonLocalParams};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, Pose, Rect2D};
use crate::loss::{coord_loss_grad_check, coord_residuals, LossMode};
use crate::roi::{build_virtual_camera, infinite_homography};
use crate::synth::{cube_corners, SplitMix64};

pub const ATTENTION_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const HOMOGRAPHY_TOL: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-5;
/// Coordinate-loss instances with a residual this close to the smooth-L1
/// kink are resampled.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Attention,
    Gradients,
    Homography,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attention" => Ok(Suite::Attention),
            "gradients" => Ok(Suite::Gradients),
            "homography" => Ok(Suite::Homography),
            "all" => Ok(Suite::All),
            other => Err(format!(
                "unknown suite '{other}' (expected attention, gradients, homography or all)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }

    /// Exact-equality check: passes only when `max_error == 0`.
    fn exact(name: &str, max_error: f64) -> Self {
        Self {
            passed: max_error == 0.0,
            ..Self::new(name, max_error, 0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Seeds per feature-map shape.
    pub attention_seeds: usize,
    /// Random instances per gradient check.
    pub gradient_instances: usize,
    pub homography_rois: usize,
    /// Added to every observed error; exercises the failure path.
    pub injected_fault: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            attention_seeds: 10,
            gradient_instances: 100,
            homography_rois: 1000,
            injected_fault: 0.0,
        }
    }
}

pub const SHAPE_CHANNELS: [usize; 4] = [1, 2, 4, 8];
pub const SHAPE_SPATIAL: [usize; 4] = [1, 2, 3, 5];

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn run(suite: Suite, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Attention | Suite::All) {
        out.extend(attention_checks(opts)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.extend(gradient_checks(opts)?);
    }
    if matches!(suite, Suite::Homography | Suite::All) {
        out.extend(homography_checks(opts)?);
    }
    Ok(out)
}

pub fn attention_checks(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let fault = opts.injected_fault;
    let mut rng = SplitMix64::new(opts.seed);
    let mut equivalence = 0.0f64;
    let mut uniform = 0.0f64;
    let mut uniform_out = 0.0f64;
    let mut residual = 0.0f64;
    for &c in &SHAPE_CHANNELS {
        for &h in &SHAPE_SPATIAL {
            for &w in &SHAPE_SPATIAL {
                for _ in 0..opts.attention_seeds {
                    let x = FeatureMap::random(c, h, w, &mut rng);
                    let mut p = NonLocalParams::random(c, 0.5, &mut rng);
                    let fast = nonlocal_forward(&x, &p)?;
                    let slow = nonlocal_bruteforce(&x, &p)?;
                    equivalence = equivalence.max(max_abs_diff(fast.data(), slow.data()));

                    // constant logits: every weight is exactly 1/N and
                    // z = W_z mean_j(g_j) + x at every position
                    p.w_theta.fill(0.0);
                    p.w_phi.fill(0.0);
                    let n = x.positions() as f64;
                    let a = attention_map(&x, &p)?;
                    uniform = uniform.max(a.iter().map(|v| (v - 1.0 / n).abs()).fold(0.0, f64::max));
                    let z = nonlocal_forward(&x, &p)?;
                    let xm = x.to_matrix();
                    let mean_g = (&p.w_g * &xm).column_mean();
                    let expect = &p.w_z * mean_g;
                    for i in 0..x.positions() {
                        for ch in 0..c {
                            let got = z.at(ch, i) - x.at(ch, i);
                            uniform_out = uniform_out.max((got - expect[ch]).abs());
                        }
                    }

                    p.w_z.fill(0.0);
                    let z = nonlocal_forward(&x, &p)?;
                    residual = residual.max(max_abs_diff(z.data(), x.data()));
                }
            }
        }
    }
    Ok(vec![
        CheckResult::new("attention.bruteforce_equivalence", equivalence + fault, ATTENTION_TOL),
        CheckResult::exact("attention.uniform_attention", uniform + fault),
        CheckResult::new("attention.uniform_output", uniform_out + fault, ATTENTION_TOL),
        CheckResult::exact("attention.residual_identity", residual + fault),
    ])
}

/// Draws a `(pred, label)` pair whose residuals avoid the smooth-L1 kink.
fn loss_instance(
    rng: &mut SplitMix64,
    pts: &[Vector3<f64>],
    mode: LossMode,
    k: &CameraIntrinsics,
) -> Result<(Pose, Pose)> {
    loop {
        let label = Pose::new(rng.uniform_rotation(), Vector3::new(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(2.0, 4.0)));
        let pred = Pose::new(
            rng.uniform_rotation(),
            label.translation + rng.unit_vector() * rng.uniform(0.0, 0.5),
        );
        let res = coord_residuals(&pred, &label, pts, mode, Some(k))?;
        if res.iter().all(|e| (e.abs() - 1.0).abs() > KINK_MARGIN) {
            return Ok((pred, label));
        }
    }
}

pub fn gradient_checks(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let fault = opts.injected_fault;
    let mut rng = SplitMix64::new(opts.seed ^ 0x5EED_0002);
    let mut nonlocal = 0.0f64;
    for i in 0..opts.gradient_instances {
        let c = SHAPE_CHANNELS[i % SHAPE_CHANNELS.len()];
        let x = FeatureMap::random(c, 1 + i % 3, 1 + (i / 3) % 3, &mut rng);
        let p = NonLocalParams::random(c, 0.5, &mut rng);
        nonlocal = nonlocal.max(nonlocal_grad_check(&x, &p, FD_STEP)?);
    }

    // the model is large enough that both kernel branches are exercised
    let pts = cube_corners(1.5);
    let k_roi = CameraIntrinsics::new(4.0, 4.0, 0.5, 0.5)?;
    let mut per_mode = Vec::new();
    for mode in [LossMode::Coords3d, LossMode::Coords2d] {
        let mut worst = 0.0f64;
        for _ in 0..opts.gradient_instances {
            let (pred, label) = loss_instance(&mut rng, &pts, mode, &k_roi)?;
            worst = worst.max(coord_loss_grad_check(&pred, &label, &pts, mode, Some(&k_roi), 1e-6)?);
        }
        per_mode.push(worst);
    }
    Ok(vec![
        CheckResult::new("gradients.nonlocal", nonlocal + fault, GRADIENT_TOL),
        CheckResult::new("gradients.coord_loss_coords3d", per_mode[0] + fault, GRADIENT_TOL),
        CheckResult::new("gradients.coord_loss_coords2d", per_mode[1] + fault, GRADIENT_TOL),
    ])
}

pub fn homography_checks(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let fault = opts.injected_fault;
    let k = CameraIntrinsics::new(572.4, 573.6, 325.3, 242.0)?;
    let mut rng = SplitMix64::new(opts.seed ^ 0x5EED_0003);
    let mut anchor = 0.0f64;
    for _ in 0..opts.homography_rois {
        let roi = Rect2D::new(
            rng.uniform(0.0, 620.0),
            rng.uniform(0.0, 460.0),
            rng.uniform(4.0, 320.0),
            rng.uniform(4.0, 240.0),
        )?;
        let cam = build_virtual_camera(&k, &roi)?;
        let h = infinite_homography(&cam, &k);
        let c = h * roi.center().push(1.0);
        anchor = anchor.max((c.xy() / c.z - Vector2::new(0.5, 0.5)).amax());
    }

    let mut identity = 0.0f64;
    for (w, hgt) in [(10.0, 10.0), (64.0, 32.0), (200.0, 150.0)] {
        let roi = Rect2D::new(k.px - 0.5 * w, k.py - 0.5 * hgt, w, hgt)?;
        let cam = build_virtual_camera(&k, &roi)?;
        identity = identity.max((cam.r_roi.matrix() - Matrix3::identity()).amax());
    }
    Ok(vec![
        CheckResult::new("homography.center_anchor", anchor + fault, HOMOGRAPHY_TOL),
        CheckResult::exact("homography.centered_identity", identity + fault),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CheckOptions {
        CheckOptions {
            attention_seeds: 1,
            gradient_instances: 8,
            homography_rois: 50,
            ..Default::default()
        }
    }

    #[test]
    fn suites_pass() {
        let results = run(Suite::All, &small()).unwrap();
        assert_eq!(results.len(), 9);
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn injected_fault_fails_every_check() {
        let opts = CheckOptions { injected_fault: 1.0, ..small() };
        for r in run(Suite::All, &opts).unwrap() {
            assert!(!r.passed, "{}", r.name);
        }
    }

    #[test]
    fn suite_names() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("bogus".parse::<Suite>().is_err());
        assert_eq!(run(Suite::Homography, &small()).unwrap().len(), 2);
    }
}
