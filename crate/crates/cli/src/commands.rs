use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use nalgebra::Vector3;
use serde::Serialize;
use serde_json::json;

use roipose_core::check::{self, CheckOptions, Suite};
use roipose_core::loss::{refine_pose, LossMode, RefineConfig};
use roipose_core::metrics::{accuracy_at, add, add_s, auc_threshold};
use roipose_core::roi::{identity_area, normalize_bbox, normalize_pose, recover_bbox, recover_pose};
use roipose_core::synth::{sample_scene, SplitMix64, SynthConfig};
use roipose_core::{CameraIntrinsics, Pose, Quaternion, VirtualRoICamera};

use crate::files::{
    fmt_real, read_json, rect_from, resolve_model, write_json, InstanceJson, ModelJson,
    PoseFile, PoseJson, RunManifest, SceneFile,
};

/// Final ADD below this fraction of the model diameter counts as converged.
pub const CONVERGENCE_FRACTION: f64 = 1e-3;

pub struct SynthArgs {
    pub seed: u64,
    pub count: usize,
    pub model: String,
    pub jitter: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub camera: [f64; 4],
    pub image: [f64; 2],
    pub out: PathBuf,
}

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let model = resolve_model(&a.model)?;
    let [fx, fy, px, py] = a.camera;
    let cfg = SynthConfig {
        seed: a.seed,
        count: a.count,
        depth_min: a.depth_min,
        depth_max: a.depth_max,
        jitter: a.jitter,
        camera: CameraIntrinsics::new(fx, fy, px, py)?,
        image_width: a.image[0],
        image_height: a.image[1],
    };
    let scene = sample_scene(&cfg, &model)?;
    let file = SceneFile {
        seed: a.seed,
        camera: cfg.camera.into(),
        image: a.image,
        model: ModelJson::from_model(&model),
        instances: scene.iter().map(InstanceJson::from).collect(),
    };
    write_json(&a.out, &file)?;
    println!("wrote {} instances of '{}' to {}", scene.len(), model.id, a.out.display());

    let mut m = RunManifest::new(
        "synth",
        json!({
            "seed": a.seed, "count": a.count, "model": a.model, "jitter": a.jitter,
            "depth_min": a.depth_min, "depth_max": a.depth_max,
            "camera": file.camera, "image": a.image,
        }),
        Some(a.seed),
    );
    m.outputs.push(a.out.clone());
    m.finish(start.elapsed())
}

/// Relative component error with an absolute floor of 1.
fn component_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn max_component_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| component_error(*x, *y)).fold(0.0, f64::max)
}

#[derive(Serialize)]
struct RoundtripRow {
    id: usize,
    max_error: f64,
    rotation_error: f64,
    translation_error: f64,
    bbox_error: f64,
}

pub fn roundtrip(scene_path: &Path, tol: f64, out: Option<&PathBuf>) -> anyhow::Result<bool> {
    let start = Instant::now();
    let scene: SceneFile = read_json(scene_path)?;
    let k = scene.camera.intrinsics()?;
    let model = scene.model.to_model()?;
    let m_i = identity_area(&k, &model.bbox_corners)?;

    let mut rows = Vec::with_capacity(scene.instances.len());
    for inst in &scene.instances {
        let ctx = || format!("instance {}", inst.id);
        let pose = inst.pose.pose().with_context(ctx)?;
        let roi = rect_from(&inst.roi).with_context(ctx)?;
        let amodal = rect_from(&inst.amodal).with_context(ctx)?;
        let cam = VirtualRoICamera::new(&k, &roi).with_context(ctx)?;
        let np = normalize_pose(&pose, &cam, m_i).with_context(ctx)?;
        let back = recover_pose(&np, &cam, m_i).with_context(ctx)?;
        let nb = normalize_bbox(&amodal, &roi).with_context(ctx)?;
        let bb = recover_bbox(&nb, &roi).with_context(ctx)?;

        let rotation_error = max_component_error(&back.rotation.to_array(), &pose.rotation.to_array());
        let translation_error = max_component_error(back.translation.as_slice(), pose.translation.as_slice());
        let bbox_error = max_component_error(&[bb.x, bb.y, bb.w, bb.h], &inst.amodal);
        rows.push(RoundtripRow {
            id: inst.id,
            max_error: rotation_error.max(translation_error).max(bbox_error),
            rotation_error,
            translation_error,
            bbox_error,
        });
    }
    rows.sort_by_key(|r| r.id);
    let worst = rows.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let failed: Vec<usize> = rows.iter().filter(|r| !(r.max_error < tol)).map(|r| r.id).collect();
    let passed = failed.is_empty();
    println!(
        "roundtrip: {} instances, max error {}, tolerance {} -> {}",
        rows.len(),
        fmt_real(worst),
        fmt_real(tol),
        if passed { "PASS" } else { "FAIL" }
    );
    if !passed {
        println!("instances at or above tolerance: {failed:?}");
    }

    if let Some(out) = out {
        write_json(out, &json!({ "tol": tol, "max_error": worst, "passed": passed, "instances": rows }))?;
        let mut m = RunManifest::new("roundtrip", json!({ "tol": tol }), Some(scene.seed));
        m.inputs.push(scene_path.to_path_buf());
        m.outputs.push(out.clone());
        m.finish(start.elapsed())?;
    }
    Ok(passed)
}

pub struct RefineArgs {
    pub scene: PathBuf,
    pub rot_deg: f64,
    pub depth_pct: f64,
    pub mode: LossMode,
    pub iters: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct RefineRow {
    id: usize,
    pose: PoseJson,
    init: PoseJson,
    loss: f64,
    iterations: usize,
    stop_reason: &'static str,
    add: f64,
    converged: bool,
    loss_trace: Vec<f64>,
}

/// Rotates `label` by `rot_deg` about a random axis and scales its
/// translation along the viewing ray by `1 +/- depth_pct / 100`.
pub fn perturb(label: &Pose, rot_deg: f64, depth_pct: f64, rng: &mut SplitMix64) -> anyhow::Result<Pose> {
    let axis = rng.unit_vector();
    let sign = if rng.uniform01() < 0.5 { -1.0 } else { 1.0 };
    let rotation = if rot_deg == 0.0 {
        label.rotation
    } else {
        Quaternion::from_axis_angle(&axis, rot_deg.to_radians())? * label.rotation
    };
    let translation = if depth_pct == 0.0 {
        label.translation
    } else {
        label.translation * (1.0 + sign * depth_pct / 100.0)
    };
    Ok(Pose::new(rotation, translation))
}

pub fn refine(a: &RefineArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    if !(a.rot_deg.is_finite() && (0.0..100.0).contains(&a.depth_pct)) {
        bail!("--rot-deg must be finite and --depth-pct must lie in [0, 100)");
    }
    let scene: SceneFile = read_json(&a.scene)?;
    let k = scene.camera.intrinsics()?;
    let model = scene.model.to_model()?;
    let pts: Vec<Vector3<f64>> = model.points.points().to_vec();
    let cfg = RefineConfig { max_iters: a.iters, mode: a.mode, ..Default::default() };
    let target = CONVERGENCE_FRACTION * model.diameter();

    let mut rng = SplitMix64::new(a.seed);
    let mut rows = Vec::with_capacity(scene.instances.len());
    for inst in &scene.instances {
        let ctx = || format!("instance {}", inst.id);
        let label = inst.pose.pose().with_context(ctx)?;
        let init = perturb(&label, a.rot_deg, a.depth_pct, &mut rng)?;
        let (report, pose) = match a.mode {
            LossMode::Coords3d => {
                let r = refine_pose(&init, &label, &pts, &cfg, None).with_context(ctx)?;
                let p = r.pose;
                (r, p)
            }
            LossMode::Coords2d => {
                // normalized RoI units through the virtual camera
                let cam = VirtualRoICamera::new(&k, &rect_from(&inst.roi)?).with_context(ctx)?;
                let r = refine_pose(&cam.to_roi_frame(&init), &cam.to_roi_frame(&label), &pts, &cfg, Some(&cam.k_roi))
                    .with_context(ctx)?;
                let p = cam.from_roi_frame(&r.pose);
                (r, p)
            }
        };
        let err = add(&pose, &label, &model.points);
        rows.push(RefineRow {
            id: inst.id,
            pose: PoseJson::from(&pose),
            init: PoseJson::from(&init),
            loss: report.loss,
            iterations: report.iterations,
            stop_reason: report.stop_reason.name(),
            add: err,
            converged: err < target,
            loss_trace: report.loss_trace,
        });
    }
    rows.sort_by_key(|r| r.id);
    let converged = rows.iter().filter(|r| r.converged).count();
    let rate = if rows.is_empty() { 0.0 } else { converged as f64 / rows.len() as f64 };
    let max_iterations = rows.iter().map(|r| r.iterations).max().unwrap_or(0);
    println!(
        "refine ({}): {converged}/{} converged (ADD < {} m), rate {rate:.4}, max iterations {max_iterations}",
        a.mode.name(),
        rows.len(),
        fmt_real(target),
    );

    let config = json!({
        "rot_deg": a.rot_deg, "depth_pct": a.depth_pct, "mode": a.mode.name(),
        "iters": a.iters, "seed": a.seed,
    });
    write_json(
        &a.out,
        &json!({
            "config": config,
            "model": ModelJson::from_model(&model),
            "converged": converged,
            "count": rows.len(),
            "convergence_rate": rate,
            "instances": rows,
        }),
    )?;
    let mut m = RunManifest::new("refine", config, Some(a.seed));
    m.inputs.push(a.scene.clone());
    m.outputs.push(a.out.clone());
    m.finish(start.elapsed())
}

pub struct EvalArgs {
    pub est: PathBuf,
    pub gt: PathBuf,
    pub model: Option<String>,
    pub max_threshold: f64,
    pub out: PathBuf,
}

fn pose_map(file: &PoseFile, path: &Path) -> anyhow::Result<BTreeMap<usize, Pose>> {
    let mut map = BTreeMap::new();
    for e in &file.instances {
        let pose = e.pose.pose().with_context(|| format!("{}: instance {}", path.display(), e.id))?;
        if map.insert(e.id, pose).is_some() {
            bail!("{}: duplicate instance id {}", path.display(), e.id);
        }
    }
    Ok(map)
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let est_file: PoseFile = read_json(&a.est)?;
    let gt_file: PoseFile = read_json(&a.gt)?;
    let model = match (&a.model, &gt_file.model) {
        (Some(name), _) => resolve_model(name)?,
        (None, Some(m)) => m.to_model()?,
        (None, None) => bail!("--model is required when the ground-truth file carries no model"),
    };
    let est = pose_map(&est_file, &a.est)?;
    let gt = pose_map(&gt_file, &a.gt)?;

    let missing_est: Vec<usize> = gt.keys().filter(|id| !est.contains_key(id)).copied().collect();
    let missing_gt: Vec<usize> = est.keys().filter(|id| !gt.contains_key(id)).copied().collect();
    if !missing_est.is_empty() || !missing_gt.is_empty() {
        bail!("instance ids do not match: missing in estimates {missing_est:?}, missing in ground truth {missing_gt:?}");
    }
    if gt.is_empty() {
        bail!("no instances to evaluate");
    }

    let mut wtr = csv::Writer::from_path(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    wtr.write_record(["instance_id", "add", "add_s"])?;
    let (mut adds, mut adds_s) = (Vec::new(), Vec::new());
    for (id, g) in &gt {
        let e = &est[id];
        let (d, ds) = (add(e, g, &model.points), add_s(e, g, &model.points));
        wtr.write_record([id.to_string(), fmt_real(d), fmt_real(ds)])?;
        adds.push(d);
        adds_s.push(ds);
    }
    let n = adds.len() as f64;
    let summary = [
        ("auc", auc_threshold(&adds, a.max_threshold)?, auc_threshold(&adds_s, a.max_threshold)?),
        ("mean", adds.iter().sum::<f64>() / n, adds_s.iter().sum::<f64>() / n),
        ("acc", accuracy_at(&adds, a.max_threshold)?, accuracy_at(&adds_s, a.max_threshold)?),
    ];
    for (name, x, y) in summary {
        wtr.write_record([name.to_string(), fmt_real(x), fmt_real(y)])?;
    }
    wtr.flush()?;
    println!(
        "eval: {} instances, auc_add {:.4}, auc_add_s {:.4}, mean_add {} (max threshold {})",
        adds.len(),
        summary[0].1,
        summary[0].2,
        fmt_real(summary[1].1),
        fmt_real(a.max_threshold),
    );

    let mut m = RunManifest::new(
        "eval",
        json!({ "model": model.id, "max_threshold": a.max_threshold }),
        None,
    );
    m.inputs.extend([a.est.clone(), a.gt.clone()]);
    m.outputs.push(a.out.clone());
    m.finish(start.elapsed())
}

pub fn check(suite: Suite, seed: u64, injected_fault: f64, out: Option<&PathBuf>) -> anyhow::Result<bool> {
    let start = Instant::now();
    let opts = CheckOptions { seed, injected_fault, ..Default::default() };
    let results = check::run(suite, &opts)?;
    for r in &results {
        println!(
            "{:<36} max error {:<24} tol {:<24} {}",
            r.name,
            fmt_real(r.max_error),
            fmt_real(r.tolerance),
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        eprintln!("check failed: {} (observed {})", r.name, fmt_real(r.max_error));
    }
    if let Some(out) = out {
        let rows: Vec<_> = results
            .iter()
            .map(|r| json!({ "name": r.name, "max_error": r.max_error, "tolerance": r.tolerance, "passed": r.passed }))
            .collect();
        write_json(out, &json!({ "seed": seed, "checks": rows }))?;
        let mut m = RunManifest::new("check", json!({ "seed": seed, "suite": format!("{suite:?}").to_lowercase() }), Some(seed));
        m.outputs.push(out.clone());
        m.finish(start.elapsed())?;
    }
    Ok(failed.is_empty())
}
